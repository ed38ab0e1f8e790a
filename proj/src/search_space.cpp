#include "cellsearch/search_space.hpp"

#include <algorithm>
#include <cmath>

#include "cellsearch/error.hpp"

namespace cellsearch {

namespace {

constexpr std::array<std::string_view, kNumOperators> kOperatorNames = {
    "sep_conv_3x3", "sep_conv_5x5", "atr_conv_3x3", "atr_conv_5x5", "avg_pool_3x3", "max_pool_3x3", "skip"};

constexpr std::array<int, kNumNodes> kEdgeOffsets = {0, 2, 5, 9};

std::string pad2(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

}  // namespace

std::string_view operator_name(OperatorKind kind) { return kOperatorNames[static_cast<std::size_t>(kind)]; }

std::optional<OperatorKind> parse_operator(std::string_view name) {
  for (std::size_t i = 0; i < kOperatorNames.size(); ++i)
    if (kOperatorNames[i] == name) return static_cast<OperatorKind>(i);
  return std::nullopt;
}

bool is_conv(OperatorKind kind) {
  return kind == OperatorKind::sep_conv_3 || kind == OperatorKind::sep_conv_5 || is_atrous(kind);
}

bool is_atrous(OperatorKind kind) {
  return kind == OperatorKind::atrous_conv_3 || kind == OperatorKind::atrous_conv_5;
}

int kernel_size(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::sep_conv_5:
    case OperatorKind::atrous_conv_5:
      return 5;
    case OperatorKind::skip:
      return 1;
    default:
      return 3;
  }
}

OperatorMask::OperatorMask(std::vector<OperatorKind> ops) : ops_(std::move(ops)) {
  std::sort(ops_.begin(), ops_.end());
  if (ops_.empty()) throw ArgumentError("operator mask must not be empty");
  if (std::adjacent_find(ops_.begin(), ops_.end()) != ops_.end())
    throw ArgumentError("operator mask contains duplicate operators");
}

OperatorMask OperatorMask::all() { return OperatorMask({kAllOperators.begin(), kAllOperators.end()}); }

bool OperatorMask::contains(OperatorKind kind) const { return index_of(kind).has_value(); }

std::optional<std::size_t> OperatorMask::index_of(OperatorKind kind) const {
  auto it = std::find(ops_.begin(), ops_.end(), kind);
  if (it == ops_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ops_.begin());
}

std::vector<std::string> OperatorMask::names() const {
  std::vector<std::string> out;
  for (auto k : ops_) out.emplace_back(operator_name(k));
  return out;
}

OperatorMask atrous_free_mask() {
  std::vector<OperatorKind> ops;
  for (auto k : kAllOperators)
    if (!is_atrous(k)) ops.push_back(k);
  return OperatorMask(std::move(ops));
}

std::string_view cell_kind_name(CellKind kind) { return kind == CellKind::normal ? "normal" : "reduce"; }

int EdgeId::edge_index(int node, int source) {
  if (node < 0 || node >= kNumNodes || source < 0 || source >= node + 2)
    throw ArgumentError("no edge from source " + std::to_string(source) + " to node " + std::to_string(node));
  return kEdgeOffsets[static_cast<std::size_t>(node)] + source;
}

EdgeId EdgeId::from_index(CellKind kind, int index) {
  if (index < 0 || index >= kNumEdges) throw ArgumentError("edge index out of range: " + std::to_string(index));
  int node = kNumNodes - 1;
  while (kEdgeOffsets[static_cast<std::size_t>(node)] > index) --node;
  return EdgeId{kind, node, index - kEdgeOffsets[static_cast<std::size_t>(node)]};
}

std::vector<double> softmax_coefficients(std::span<const double> row) {
  if (row.empty()) throw ArgumentError("softmax_coefficients: empty row");
  for (double v : row)
    if (!std::isfinite(v)) throw ArgumentError("softmax_coefficients: non-finite coefficient");
  const double mx = *std::max_element(row.begin(), row.end());
  std::vector<double> out(row.size());
  double total = 0;
  for (std::size_t i = 0; i < row.size(); ++i) total += out[i] = std::exp(row[i] - mx);
  for (double& v : out) v /= total;
  return out;
}

void Alphas::validate() const {
  const Shape expected{kNumEdges, static_cast<std::int64_t>(mask.size())};
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    const Tensor<double>& m = of(kind);
    if (m.shape() != expected)
      throw ArgumentError(std::string(cell_kind_name(kind)) + " alphas have shape " + m.shape().str() + ", expected " +
                          expected.str());
    if (!m.all_finite()) throw ArgumentError(std::string(cell_kind_name(kind)) + " alphas contain non-finite entries");
  }
}

template <typename T>
AlphaParams<T>::AlphaParams(OperatorMask mask, std::uint64_t seed, double init_std)
    : mask_(std::move(mask)), seed_(seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, init_std);
  const Shape shape{kNumEdges, static_cast<std::int64_t>(mask_.size())};
  for (Parameter<T>* p : {&normal_, &reduce_}) {
    p->value = Tensor<T>(shape);
    for (T& v : p->value.data()) v = static_cast<T>(dist(rng));
  }
}

template <typename T>
AlphaParams<T>::AlphaParams(const Alphas& values) : mask_(values.mask), seed_(values.seed) {
  load(values);
}

template <typename T>
void AlphaParams<T>::zero_grad() {
  normal_.zero_grad();
  reduce_.zero_grad();
}

template <typename T>
Alphas AlphaParams<T>::snapshot() const {
  Alphas a;
  a.normal = normal_.value.template cast<double>();
  a.reduce = reduce_.value.template cast<double>();
  a.mask = mask_;
  a.seed = seed_;
  return a;
}

template <typename T>
void AlphaParams<T>::load(const Alphas& values) {
  values.validate();
  if (!(values.mask == mask_)) throw ArgumentError("alphas mask does not match the search space");
  normal_.value = values.normal.template cast<T>();
  reduce_.value = values.reduce.template cast<T>();
  normal_.grad = Tensor<T>();
  reduce_.grad = Tensor<T>();
}

template <typename T>
Parameter<T>& make_conv_weight(BuildContext<T>& ctx, const std::string& name, std::int64_t c_out,
                               std::int64_t c_in_per_group, std::int64_t k) {
  Tensor<T> w(Shape{c_out, c_in_per_group, k, k});
  const double fan_in = static_cast<double>(c_in_per_group * k * k);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (T& v : w.data()) v = static_cast<T>(dist(ctx.rng));
  return ctx.store.add(name, std::move(w));
}

template <typename T>
BatchNorm<T>::BatchNorm(BuildContext<T>& ctx, const std::string& name, std::int64_t channels) {
  if (ctx.affine) {
    gamma_ = &ctx.store.add(name + ".gamma", Tensor<T>(Shape{channels}, T(1)));
    beta_ = &ctx.store.add(name + ".beta", Tensor<T>(Shape{channels}, T(0)));
  }
  running_mean_ = &ctx.store.add_buffer(name + ".running_mean", Tensor<T>(Shape{channels}, T(0)));
  running_var_ = &ctx.store.add_buffer(name + ".running_var", Tensor<T>(Shape{channels}, T(1)));
}

template <typename T>
Var<T> BatchNorm<T>::forward(Tape<T>& tape, const Var<T>& x, bool training) const {
  std::optional<Var<T>> gamma, beta;
  if (gamma_) gamma = tape.parameter(*gamma_);
  if (beta_) beta = tape.parameter(*beta_);
  ops::BatchNormOptions opt;
  opt.training = training;
  return ops::batch_norm(x, gamma, beta, *running_mean_, *running_var_, opt);
}

namespace {
OperatorKind require_conv(OperatorKind kind) {
  if (!is_conv(kind)) throw ArgumentError("conv triplet requires a convolution operator, got " + std::string(operator_name(kind)));
  return kind;
}
}  // namespace

template <typename T>
ConvTriplet<T>::ConvTriplet(BuildContext<T>& ctx, const std::string& name, OperatorKind kind, std::int64_t c_in,
                            std::int64_t c_out, int stride)
    : kind_(require_conv(kind)),
      c_in_(c_in),
      c_out_(c_out),
      stride_(stride),
      depthwise_(is_atrous(kind) ? nullptr : &make_conv_weight(ctx, name + ".dw", c_in, 1, kernel_size(kind))),
      pointwise_(is_atrous(kind) ? nullptr : &make_conv_weight(ctx, name + ".pw", c_out, c_in, 1)),
      dilated_(is_atrous(kind) ? &make_conv_weight(ctx, name + ".conv", c_out, c_in, kernel_size(kind)) : nullptr),
      norm_(ctx, name + ".bn", c_out) {}

template <typename T>
Var<T> ConvTriplet<T>::forward(Tape<T>& tape, const Var<T>& x, bool training) const {
  Var<T> h = ops::relu(x);
  if (dilated_) {
    ops::Conv2dOptions opt;
    opt.stride = stride_;
    opt.dilation = 2;
    h = ops::conv2d(h, tape.parameter(*dilated_), std::nullopt, opt);
  } else {
    ops::Conv2dOptions dw;
    dw.stride = stride_;
    dw.groups = static_cast<int>(c_in_);
    h = ops::conv2d(h, tape.parameter(*depthwise_), std::nullopt, dw);
    h = ops::conv2d(h, tape.parameter(*pointwise_), std::nullopt, {});
  }
  h = norm_.forward(tape, h, training);
  if (residual()) h = ops::add(h, x);
  return h;
}

template <typename T>
Var<T> Pool<T>::forward(Tape<T>&, const Var<T>& x, bool) const {
  return max_ ? ops::max_pool2d(x, 3, stride_) : ops::avg_pool2d(x, 3, stride_);
}

template <typename T>
StridedSkip<T>::StridedSkip(BuildContext<T>& ctx, const std::string& name, std::int64_t c_in, std::int64_t c_out)
    : weight_(&make_conv_weight(ctx, name + ".conv", c_out, c_in, 1)), norm_(ctx, name + ".bn", c_out) {}

template <typename T>
Var<T> StridedSkip<T>::forward(Tape<T>& tape, const Var<T>& x, bool training) const {
  ops::Conv2dOptions opt;
  opt.stride = 2;
  return norm_.forward(tape, ops::conv2d(x, tape.parameter(*weight_), std::nullopt, opt), training);
}

template <typename T>
std::unique_ptr<Operation<T>> make_operation(BuildContext<T>& ctx, const std::string& name, OperatorKind kind,
                                             std::int64_t channels, int stride) {
  if (stride != 1 && stride != 2) throw ArgumentError("operator stride must be 1 or 2");
  switch (kind) {
    case OperatorKind::sep_conv_3:
    case OperatorKind::sep_conv_5:
    case OperatorKind::atrous_conv_3:
    case OperatorKind::atrous_conv_5:
      return std::make_unique<ConvTriplet<T>>(ctx, name, kind, channels, channels, stride);
    case OperatorKind::avg_pool_3:
      return std::make_unique<Pool<T>>(false, stride);
    case OperatorKind::max_pool_3:
      return std::make_unique<Pool<T>>(true, stride);
    case OperatorKind::skip:
      if (stride == 1) return std::make_unique<Identity<T>>();
      return std::make_unique<StridedSkip<T>>(ctx, name, channels, channels);
  }
  throw InternalError("unhandled operator kind");
}

int edge_stride(CellKind kind, int source) { return kind == CellKind::reduce && source < 2 ? 2 : 1; }

template <typename T>
MixedEdge<T>::MixedEdge(BuildContext<T>& ctx, const std::string& name, EdgeId id, const OperatorMask& mask,
                        std::int64_t channels, int stride)
    : id_(id), stride_(stride) {
  for (OperatorKind kind : mask.ops())
    ops_.push_back(make_operation(ctx, name + "." + std::string(operator_name(kind)), kind, channels, stride));

  Tape<T> probe;
  Var<T> x = probe.constant(Tensor<T>(Shape{1, channels, 8, 8}));
  std::optional<Shape> shape;
  for (const auto& op : ops_) {
    const Shape s = op->forward(probe, x, false).shape();
    if (shape && s != *shape) throw InternalError("candidate operators on " + name + " disagree on output shape");
    shape = s;
  }
}

template <typename T>
Var<T> MixedEdge<T>::forward(Tape<T>& tape, const Var<T>& x, const Var<T>& coeffs, bool training) const {
  std::vector<Var<T>> outs;
  outs.reserve(ops_.size());
  for (const auto& op : ops_) outs.push_back(op->forward(tape, x, training));
  return ops::weighted_sum<T>(outs, coeffs);
}

template <typename T>
RelaxedCell<T>::RelaxedCell(BuildContext<T>& ctx, const std::string& name, CellKind kind, const OperatorMask& mask,
                            std::int64_t channels)
    : kind_(kind), channels_(channels) {
  edges_.reserve(kNumEdges);
  for (int e = 0; e < kNumEdges; ++e) {
    const EdgeId id = EdgeId::from_index(kind, e);
    edges_.emplace_back(ctx, name + ".edge" + pad2(e), id, mask, channels, edge_stride(kind, id.source));
  }
}

template <typename T>
Var<T> RelaxedCell<T>::forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev, const Var<T>& weights,
                               bool training) const {
  if (prev.shape() != prev_prev.shape())
    throw ShapeError("cell inputs disagree: " + prev.shape().str() + " vs " + prev_prev.shape().str());
  if (prev.shape()[1] != channels_)
    throw ShapeError("cell expects " + std::to_string(channels_) + " input channels, got " + prev.shape().str());
  std::vector<Var<T>> states{prev, prev_prev};
  for (int node = 0; node < kNumNodes; ++node) {
    std::vector<Var<T>> terms;
    for (int src = 0; src < node + 2; ++src) {
      const int e = EdgeId::edge_index(node, src);
      Var<T> coeffs = ops::select_row(weights, e);
      terms.push_back(edges_[static_cast<std::size_t>(e)].forward(tape, states[static_cast<std::size_t>(src)], coeffs, training));
    }
    states.push_back(ops::add_n<T>(terms));
  }
  return ops::concat_channels<T>(std::span<const Var<T>>(states).subspan(2));
}

#define CELLSEARCH_INSTANTIATE_SEARCH_SPACE(T)                                                                 \
  template class AlphaParams<T>;                                                                               \
  template Parameter<T>& make_conv_weight(BuildContext<T>&, const std::string&, std::int64_t, std::int64_t,    \
                                          std::int64_t);                                                       \
  template class BatchNorm<T>;                                                                                 \
  template class ConvTriplet<T>;                                                                               \
  template class Pool<T>;                                                                                      \
  template class StridedSkip<T>;                                                                               \
  template std::unique_ptr<Operation<T>> make_operation(BuildContext<T>&, const std::string&, OperatorKind,    \
                                                        std::int64_t, int);                                    \
  template class MixedEdge<T>;                                                                                 \
  template class RelaxedCell<T>;

CELLSEARCH_INSTANTIATE_SEARCH_SPACE(float)
CELLSEARCH_INSTANTIATE_SEARCH_SPACE(double)

}  // namespace cellsearch
