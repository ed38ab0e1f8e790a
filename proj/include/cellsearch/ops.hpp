#pragma once

#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "cellsearch/autodiff.hpp"

// Differentiable operators. Every function records one node on the tape of
// its first argument and returns the handle to it.
namespace cellsearch::ops {

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  int groups = 1;
  /// Zero padding per side; nullopt means "same": floor(dilation*(k-1)/2).
  std::optional<int> padding;
};

/// Output extent of a strided, dilated window sweep.
std::int64_t conv_output_size(std::int64_t in, int kernel, int stride, int dilation, int padding);
int same_padding(int kernel, int dilation);

/// input (N, C, H, W), kernel (C_out, C/groups, kh, kw), bias (C_out).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::type_identity_t<std::optional<Var<T>>>& bias,
              const Conv2dOptions& opt = {});

/// Same-padded pooling. Max backward routes to the first maximal element in
/// row-major order; average excludes padded cells from the divisor.
template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride);
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int kernel, int stride);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over (N, H, W). In training mode uses batch
/// statistics and updates the running estimates; in eval mode uses them.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const std::type_identity_t<std::optional<Var<T>>>& gamma,
                  const std::type_identity_t<std::optional<Var<T>>>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> add_n(std::span<const Var<T>> xs);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
/// sum_k coeffs[k] * xs[k]; coeffs is rank-1 with xs.size() entries.
template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> xs, const Var<T>& coeffs);

/// x (N, F), weight (O, F), bias (O) -> (N, O).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// (N, C, H, W) -> (N, C).
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs);
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count);

template <typename T>
Var<T> softmax(const Var<T>& x, int axis = -1);
/// Row `r` of a rank-2 tensor as a rank-1 tensor.
template <typename T>
Var<T> select_row(const Var<T>& x, std::int64_t r);
/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);
template <typename T>
Var<T> sum(const Var<T>& x);

}  // namespace cellsearch::ops
