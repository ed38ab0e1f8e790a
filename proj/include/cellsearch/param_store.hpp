#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cellsearch/tensor.hpp"

namespace cellsearch {

/// A trainable tensor and its accumulated gradient.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward pass touches it

  void zero_grad() { grad = Tensor<T>(value.shape()); }
  bool has_grad() const { return !grad.empty(); }
};

enum class Mode { train, eval };

/// Named parameters (the network weights) plus non-trainable buffers such as
/// normalization running statistics. Iteration is lexicographic by name.
/// Entries never move once inserted, so modules may hold references to them.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> init);
  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init);

  Parameter<T>& param(const std::string& name);
  const Parameter<T>& param(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Parameter<T>>& params() { return params_; }
  const std::map<std::string, Parameter<T>>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

  /// Number of trainable scalars.
  std::int64_t count() const;
  void zero_grad();

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  bool training() const { return mode_ == Mode::train; }

 private:
  std::map<std::string, Parameter<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
  Mode mode_ = Mode::train;
};

}  // namespace cellsearch
