#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "cellsearch/genotype.hpp"
#include "cellsearch/search_space.hpp"

namespace cellsearch {

/// Stacking plan shared by the search supernet and the final network.
struct NetworkConfig {
  int num_cells = 6;
  int init_channels = 16;
  int num_classes = 21;
  std::vector<int> reduce_positions;  // empty: floor(N/3) and floor(2N/3)
  int input_size = 32;
  OperatorMask operator_mask = OperatorMask::all();

  std::array<int, 2> resolved_reduce_positions() const;
  bool is_reduce(int cell) const;
  /// Throws ArgumentError naming the offending field.
  void validate() const;
};

/// Aligns the two cell inputs to `channels` channels at the resolution of
/// `prev`. 1x1 conv + norm when the channel count changes; prev_prev also
/// gets stride 2 when the preceding cell was a reduce cell.
template <typename T>
class InputAdapter {
 public:
  InputAdapter(BuildContext<T>& ctx, const std::string& name, std::int64_t prev_prev_channels,
               std::int64_t prev_channels, std::int64_t channels, bool prev_was_reduce);
  std::pair<Var<T>, Var<T>> forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev,
                                    bool training) const;

 private:
  struct Projection {
    Parameter<T>* weight = nullptr;
    std::optional<BatchNorm<T>> norm;
    int stride = 1;
  };
  static std::optional<Projection> make(BuildContext<T>& ctx, const std::string& name, std::int64_t c_in,
                                        std::int64_t c_out, int stride);
  static Var<T> apply(Tape<T>& tape, const std::optional<Projection>& p, const Var<T>& x, bool training);

  std::optional<Projection> prev_prev_;
  std::optional<Projection> prev_;
};

/// Discrete cell: each node adds its two chosen branches.
template <typename T>
class FixedCell {
 public:
  FixedCell(BuildContext<T>& ctx, const std::string& name, CellKind kind, const CellSpec& spec,
            std::int64_t channels);
  Var<T> forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev, bool training) const;

 private:
  CellKind kind_;
  CellSpec spec_;
  std::vector<std::unique_ptr<Operation<T>>> ops_;  // node-major, two per node
};

/// Stem, stacked cells and classifier head. Relaxed networks take
/// architecture coefficients at forward time; fixed networks are built from
/// a Genotype.
template <typename T>
class Network {
 public:
  static Network relaxed(const NetworkConfig& config, std::uint64_t seed);
  static Network fixed(const NetworkConfig& config, const Genotype& genotype, std::uint64_t seed);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// Logits (batch, num_classes). `alphas` is required for relaxed networks
  /// and must be null for fixed ones.
  Var<T> forward(Tape<T>& tape, const Tensor<T>& images, AlphaParams<T>* alphas = nullptr) const;
  /// Feature map right before global pooling.
  Var<T> features(Tape<T>& tape, const Tensor<T>& images, AlphaParams<T>* alphas = nullptr) const;

  // Pieces of forward(), exposed for composition checks.
  Var<T> stem(Tape<T>& tape, const Var<T>& images) const;
  std::pair<Var<T>, Var<T>> adapt(int cell, Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev) const;
  Var<T> cell(int cell, Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev,
              const std::array<std::optional<Var<T>>, 2>& weights) const;
  Var<T> head(Tape<T>& tape, const Var<T>& features) const;
  /// Softmaxed (normal, reduce) coefficient matrices on `tape`.
  std::array<std::optional<Var<T>>, 2> coefficient_weights(Tape<T>& tape, AlphaParams<T>* alphas) const;

  bool is_relaxed() const { return !genotype_.has_value(); }
  const std::optional<Genotype>& genotype() const { return genotype_; }
  const NetworkConfig& config() const { return config_; }
  std::int64_t cell_channels(int cell) const { return cell_channels_[static_cast<std::size_t>(cell)]; }

  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }
  std::int64_t count_parameters() const { return store_->count(); }
  void set_mode(Mode m) { store_->set_mode(m); }

 private:
  Network(const NetworkConfig& config, std::optional<Genotype> genotype, std::uint64_t seed);

  NetworkConfig config_;
  std::optional<Genotype> genotype_;
  std::unique_ptr<ParamStore<T>> store_;
  Parameter<T>* stem_conv1_ = nullptr;
  Parameter<T>* stem_conv2_ = nullptr;
  std::unique_ptr<BatchNorm<T>> stem_bn1_;
  std::unique_ptr<BatchNorm<T>> stem_bn2_;
  std::vector<InputAdapter<T>> adapters_;
  std::vector<std::variant<RelaxedCell<T>, FixedCell<T>>> cells_;
  std::vector<std::int64_t> cell_channels_;
  Parameter<T>* head_weight_ = nullptr;
  Parameter<T>* head_bias_ = nullptr;
};

/// Parameter and buffer archive. Layout:
///   "cellsearch-ckpt v1\n"
///   "entries <count>\n"
///   per entry: "<param|buffer> <name> <rank> <d0> ... <dk>\n" followed by
///   numel little-endian IEEE-754 binary32 values.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store);
/// Every entry of `store` must be present with the same shape.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store);

}  // namespace cellsearch
