#pragma once

#include <array>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cellsearch/autodiff.hpp"
#include "cellsearch/ops.hpp"

namespace cellsearch {

/// Candidate operators, in canonical order. The order is part of the file
/// formats and of every tie-break rule; do not reorder.
enum class OperatorKind : int {
  sep_conv_3 = 0,
  sep_conv_5 = 1,
  atrous_conv_3 = 2,
  atrous_conv_5 = 3,
  avg_pool_3 = 4,
  max_pool_3 = 5,
  skip = 6,
};

inline constexpr int kNumOperators = 7;
inline constexpr int kNumNodes = 4;
inline constexpr int kNumEdges = 14;  // 2 + 3 + 4 + 5 incoming edges

inline constexpr std::array<OperatorKind, kNumOperators> kAllOperators = {
    OperatorKind::sep_conv_3, OperatorKind::sep_conv_5, OperatorKind::atrous_conv_3, OperatorKind::atrous_conv_5,
    OperatorKind::avg_pool_3, OperatorKind::max_pool_3, OperatorKind::skip};

std::string_view operator_name(OperatorKind kind);
/// Inverse of operator_name; nullopt for unknown names.
std::optional<OperatorKind> parse_operator(std::string_view name);
bool is_conv(OperatorKind kind);
bool is_atrous(OperatorKind kind);
int kernel_size(OperatorKind kind);

/// Ordered subset of the operator set used to restrict the search.
class OperatorMask {
 public:
  /// Operators must be distinct; they are stored in canonical order.
  explicit OperatorMask(std::vector<OperatorKind> ops);
  static OperatorMask all();

  std::size_t size() const { return ops_.size(); }
  const std::vector<OperatorKind>& ops() const { return ops_; }
  OperatorKind at(std::size_t i) const { return ops_[i]; }
  bool contains(OperatorKind kind) const;
  std::optional<std::size_t> index_of(OperatorKind kind) const;
  std::vector<std::string> names() const;

  friend bool operator==(const OperatorMask&, const OperatorMask&) = default;

 private:
  std::vector<OperatorKind> ops_;
};

/// Both atrous kinds removed (five operators).
OperatorMask atrous_free_mask();

enum class CellKind { normal, reduce };
std::string_view cell_kind_name(CellKind kind);

/// Incoming edge of node `node` from `source`. Sources 0 and 1 are the cell
/// inputs (previous and previous-previous cell outputs); source 2+k is node k.
struct EdgeId {
  CellKind kind = CellKind::normal;
  int node = 0;
  int source = 0;

  int index() const { return edge_index(node, source); }
  static int edge_index(int node, int source);
  static EdgeId from_index(CellKind kind, int index);
  friend bool operator==(const EdgeId&, const EdgeId&) = default;
};

/// Softmax of one coefficient row, max-subtracted. Throws ArgumentError for
/// non-finite input.
std::vector<double> softmax_coefficients(std::span<const double> row);

/// Plain architecture coefficients: one (14 x mask.size()) matrix per cell kind.
struct Alphas {
  Tensor<double> normal;
  Tensor<double> reduce;
  OperatorMask mask = OperatorMask::all();
  std::uint64_t seed = 0;

  const Tensor<double>& of(CellKind kind) const { return kind == CellKind::normal ? normal : reduce; }
  Tensor<double>& of(CellKind kind) { return kind == CellKind::normal ? normal : reduce; }
  /// Throws ArgumentError when shapes disagree with the mask or entries are non-finite.
  void validate() const;
  friend bool operator==(const Alphas&, const Alphas&) = default;
};

/// Differentiable architecture coefficients, shared by all cells of a kind.
template <typename T>
class AlphaParams {
 public:
  AlphaParams(OperatorMask mask, std::uint64_t seed, double init_std = 1e-3);
  explicit AlphaParams(const Alphas& values);

  const OperatorMask& mask() const { return mask_; }
  std::uint64_t seed() const { return seed_; }
  Parameter<T>& of(CellKind kind) { return kind == CellKind::normal ? normal_ : reduce_; }
  const Parameter<T>& of(CellKind kind) const { return kind == CellKind::normal ? normal_ : reduce_; }
  void zero_grad();

  Alphas snapshot() const;
  void load(const Alphas& values);

 private:
  OperatorMask mask_;
  std::uint64_t seed_ = 0;
  Parameter<T> normal_;
  Parameter<T> reduce_;
};

/// Shared state used while constructing modules.
template <typename T>
struct BuildContext {
  ParamStore<T>& store;
  std::mt19937_64& rng;
  bool affine = true;  // learnable scale/shift in normalization layers
};

/// He-normal initialized kernel registered under `name`.
template <typename T>
Parameter<T>& make_conv_weight(BuildContext<T>& ctx, const std::string& name, std::int64_t c_out,
                               std::int64_t c_in_per_group, std::int64_t k);

template <typename T>
class BatchNorm {
 public:
  BatchNorm(BuildContext<T>& ctx, const std::string& name, std::int64_t channels);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) const;

 private:
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
  Tensor<T>* running_mean_ = nullptr;
  Tensor<T>* running_var_ = nullptr;
};

/// One candidate operator instance with its own parameters.
template <typename T>
class Operation {
 public:
  virtual ~Operation() = default;
  virtual Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) const = 0;
};

/// relu -> (separable | atrous) conv -> batch_norm, plus the input when the
/// stride is 1 and channel counts match.
template <typename T>
class ConvTriplet final : public Operation<T> {
 public:
  ConvTriplet(BuildContext<T>& ctx, const std::string& name, OperatorKind kind, std::int64_t c_in,
              std::int64_t c_out, int stride);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) const override;
  bool residual() const { return stride_ == 1 && c_in_ == c_out_; }

 private:
  OperatorKind kind_;
  std::int64_t c_in_, c_out_;
  int stride_;
  Parameter<T>* depthwise_ = nullptr;  // separable only
  Parameter<T>* pointwise_ = nullptr;  // separable only
  Parameter<T>* dilated_ = nullptr;    // atrous only
  BatchNorm<T> norm_;
};

template <typename T>
class Pool final : public Operation<T> {
 public:
  Pool(bool max, int stride) : max_(max), stride_(stride) {}
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) const override;

 private:
  bool max_;
  int stride_;
};

template <typename T>
class Identity final : public Operation<T> {
 public:
  Var<T> forward(Tape<T>&, const Var<T>& x, bool) const override { return x; }
};

/// Resolution-halving skip: stride-2 1x1 conv followed by batch_norm.
template <typename T>
class StridedSkip final : public Operation<T> {
 public:
  StridedSkip(BuildContext<T>& ctx, const std::string& name, std::int64_t c_in, std::int64_t c_out);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, bool training) const override;

 private:
  Parameter<T>* weight_;
  BatchNorm<T> norm_;
};

/// Instantiate `kind` mapping `channels` to `channels` at `stride`.
template <typename T>
std::unique_ptr<Operation<T>> make_operation(BuildContext<T>& ctx, const std::string& name, OperatorKind kind,
                                             std::int64_t channels, int stride);

/// All candidate operators of one edge; output is the coefficient-weighted sum.
template <typename T>
class MixedEdge {
 public:
  MixedEdge(BuildContext<T>& ctx, const std::string& name, EdgeId id, const OperatorMask& mask,
            std::int64_t channels, int stride);

  /// `coeffs` is a rank-1 node with mask.size() entries (already softmaxed).
  Var<T> forward(Tape<T>& tape, const Var<T>& x, const Var<T>& coeffs, bool training) const;

  const EdgeId& id() const { return id_; }
  int stride() const { return stride_; }
  std::size_t num_candidates() const { return ops_.size(); }
  const Operation<T>& candidate(std::size_t i) const { return *ops_[i]; }

 private:
  EdgeId id_;
  int stride_;
  std::vector<std::unique_ptr<Operation<T>>> ops_;
};

/// Stride of an edge: 2 only on reduce-cell edges leaving a cell input.
int edge_stride(CellKind kind, int source);

/// Continuous relaxation of a cell: every node sums mixed edges from all of
/// its admissible sources; the output concatenates the four nodes.
template <typename T>
class RelaxedCell {
 public:
  RelaxedCell(BuildContext<T>& ctx, const std::string& name, CellKind kind, const OperatorMask& mask,
              std::int64_t channels);

  /// `weights` is the (14, mask.size()) softmaxed coefficient matrix.
  Var<T> forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev, const Var<T>& weights,
                 bool training) const;

  CellKind kind() const { return kind_; }
  std::int64_t channels() const { return channels_; }
  const MixedEdge<T>& edge(int index) const { return edges_[static_cast<std::size_t>(index)]; }

 private:
  CellKind kind_;
  std::int64_t channels_;
  std::vector<MixedEdge<T>> edges_;
};

}  // namespace cellsearch
