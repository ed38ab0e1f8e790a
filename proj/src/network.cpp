#include "cellsearch/network.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cellsearch/error.hpp"

namespace cellsearch {

std::array<int, 2> NetworkConfig::resolved_reduce_positions() const {
  if (reduce_positions.empty()) return {num_cells / 3, 2 * num_cells / 3};
  if (reduce_positions.size() != 2) throw ArgumentError("network.reduce_positions must list exactly two cells");
  return {std::min(reduce_positions[0], reduce_positions[1]), std::max(reduce_positions[0], reduce_positions[1])};
}

bool NetworkConfig::is_reduce(int cell) const {
  const auto pos = resolved_reduce_positions();
  return cell == pos[0] || cell == pos[1];
}

void NetworkConfig::validate() const {
  if (num_cells < 3) throw ArgumentError("network.num_cells must be >= 3, got " + std::to_string(num_cells));
  if (init_channels < 1) throw ArgumentError("network.init_channels must be >= 1");
  if (num_classes < 2) throw ArgumentError("network.num_classes must be >= 2");
  if (input_size < 8 || input_size % 8 != 0)
    throw ArgumentError("network.input_size must be a positive multiple of 8, got " + std::to_string(input_size));
  const auto pos = resolved_reduce_positions();
  if (pos[0] == pos[1]) throw ArgumentError("network.reduce_positions must be distinct");
  for (int p : pos)
    if (p < 0 || p >= num_cells)
      throw ArgumentError("network.reduce_positions entry " + std::to_string(p) + " outside [0, " +
                          std::to_string(num_cells) + ")");
}

template <typename T>
std::optional<typename InputAdapter<T>::Projection> InputAdapter<T>::make(BuildContext<T>& ctx,
                                                                          const std::string& name,
                                                                          std::int64_t c_in, std::int64_t c_out,
                                                                          int stride) {
  if (c_in == c_out && stride == 1) return std::nullopt;
  Projection p;
  p.weight = &make_conv_weight(ctx, name + ".conv", c_out, c_in, 1);
  p.norm.emplace(ctx, name + ".bn", c_out);
  p.stride = stride;
  return p;
}

template <typename T>
InputAdapter<T>::InputAdapter(BuildContext<T>& ctx, const std::string& name, std::int64_t prev_prev_channels,
                              std::int64_t prev_channels, std::int64_t channels, bool prev_was_reduce)
    : prev_prev_(make(ctx, name + ".pre0", prev_prev_channels, channels, prev_was_reduce ? 2 : 1)),
      prev_(make(ctx, name + ".pre1", prev_channels, channels, 1)) {}

template <typename T>
Var<T> InputAdapter<T>::apply(Tape<T>& tape, const std::optional<Projection>& p, const Var<T>& x, bool training) {
  if (!p) return x;
  ops::Conv2dOptions opt;
  opt.stride = p->stride;
  return p->norm->forward(tape, ops::conv2d(x, tape.parameter(*p->weight), std::nullopt, opt), training);
}

template <typename T>
std::pair<Var<T>, Var<T>> InputAdapter<T>::forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev,
                                                   bool training) const {
  return {apply(tape, prev_prev_, prev_prev, training), apply(tape, prev_, prev, training)};
}

template <typename T>
FixedCell<T>::FixedCell(BuildContext<T>& ctx, const std::string& name, CellKind kind, const CellSpec& spec,
                        std::int64_t channels)
    : kind_(kind), spec_(spec) {
  for (int node = 0; node < kNumNodes; ++node) {
    for (std::size_t b = 0; b < 2; ++b) {
      const Branch& br = spec[static_cast<std::size_t>(node)][b];
      const auto op = parse_operator(br.op);
      if (!op) throw ArgumentError("unknown operator '" + br.op + "'");
      const std::string opname = name + ".node" + std::to_string(node) + ".b" + std::to_string(b) + "." + br.op;
      ops_.push_back(make_operation(ctx, opname, *op, channels, edge_stride(kind, br.source)));
    }
  }
}

template <typename T>
Var<T> FixedCell<T>::forward(Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev, bool training) const {
  if (prev.shape() != prev_prev.shape())
    throw ShapeError("cell inputs disagree: " + prev.shape().str() + " vs " + prev_prev.shape().str());
  std::vector<Var<T>> states{prev, prev_prev};
  for (int node = 0; node < kNumNodes; ++node) {
    const auto& branches = spec_[static_cast<std::size_t>(node)];
    const Var<T> a = ops_[static_cast<std::size_t>(2 * node)]->forward(
        tape, states[static_cast<std::size_t>(branches[0].source)], training);
    const Var<T> b = ops_[static_cast<std::size_t>(2 * node + 1)]->forward(
        tape, states[static_cast<std::size_t>(branches[1].source)], training);
    states.push_back(ops::add(a, b));
  }
  return ops::concat_channels<T>(std::span<const Var<T>>(states).subspan(2));
}

template <typename T>
Network<T> Network<T>::relaxed(const NetworkConfig& config, std::uint64_t seed) {
  return Network(config, std::nullopt, seed);
}

template <typename T>
Network<T> Network<T>::fixed(const NetworkConfig& config, const Genotype& genotype, std::uint64_t seed) {
  require_valid(genotype);
  return Network(config, genotype, seed);
}

namespace {
std::string cell_name(int i) { return std::string("cell") + (i < 10 ? "0" : "") + std::to_string(i); }
}  // namespace

template <typename T>
Network<T>::Network(const NetworkConfig& config, std::optional<Genotype> genotype, std::uint64_t seed)
    : config_(config), genotype_(std::move(genotype)), store_(std::make_unique<ParamStore<T>>()) {
  config_.validate();
  std::mt19937_64 rng(seed);
  BuildContext<T> stem_ctx{*store_, rng, true};
  const std::int64_t stem_channels = 3 * static_cast<std::int64_t>(config_.init_channels);
  stem_conv1_ = &make_conv_weight(stem_ctx, "stem.conv1", stem_channels, 3, 3);
  stem_bn1_ = std::make_unique<BatchNorm<T>>(stem_ctx, "stem.bn1", stem_channels);
  stem_conv2_ = &make_conv_weight(stem_ctx, "stem.conv2", stem_channels, stem_channels, 3);
  stem_bn2_ = std::make_unique<BatchNorm<T>>(stem_ctx, "stem.bn2", stem_channels);

  BuildContext<T> cell_ctx{*store_, rng, !is_relaxed()};
  std::int64_t c_prev_prev = stem_channels;
  std::int64_t c_prev = stem_channels;
  std::int64_t c = config_.init_channels;
  bool prev_reduce = false;
  for (int i = 0; i < config_.num_cells; ++i) {
    const bool reduce = config_.is_reduce(i);
    if (reduce) c *= 2;
    const CellKind kind = reduce ? CellKind::reduce : CellKind::normal;
    const std::string name = cell_name(i);
    adapters_.emplace_back(cell_ctx, name + ".adapt", c_prev_prev, c_prev, c, prev_reduce);
    if (is_relaxed())
      cells_.emplace_back(std::in_place_type<RelaxedCell<T>>, cell_ctx, name, kind, config_.operator_mask, c);
    else
      cells_.emplace_back(std::in_place_type<FixedCell<T>>, cell_ctx, name, kind, genotype_->of(kind), c);
    cell_channels_.push_back(c);
    c_prev_prev = c_prev;
    c_prev = kNumNodes * c;
    prev_reduce = reduce;
  }

  Tensor<T> w(Shape{config_.num_classes, c_prev});
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_prev));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : w.data()) v = static_cast<T>(dist(rng));
  Tensor<T> b(Shape{config_.num_classes});
  for (T& v : b.data()) v = static_cast<T>(dist(rng));
  head_weight_ = &store_->add("head.weight", std::move(w));
  head_bias_ = &store_->add("head.bias", std::move(b));
}

template <typename T>
Var<T> Network<T>::stem(Tape<T>& tape, const Var<T>& images) const {
  const bool training = store_->training();
  ops::Conv2dOptions s2;
  s2.stride = 2;
  Var<T> h = ops::conv2d(images, tape.parameter(*stem_conv1_), std::nullopt, s2);
  h = stem_bn1_->forward(tape, h, training);
  h = ops::conv2d(h, tape.parameter(*stem_conv2_), std::nullopt, {});
  return stem_bn2_->forward(tape, h, training);
}

template <typename T>
std::pair<Var<T>, Var<T>> Network<T>::adapt(int cell, Tape<T>& tape, const Var<T>& prev_prev,
                                            const Var<T>& prev) const {
  return adapters_.at(static_cast<std::size_t>(cell)).forward(tape, prev_prev, prev, store_->training());
}

template <typename T>
Var<T> Network<T>::cell(int cell, Tape<T>& tape, const Var<T>& prev_prev, const Var<T>& prev,
                        const std::array<std::optional<Var<T>>, 2>& weights) const {
  const bool training = store_->training();
  const auto& c = cells_.at(static_cast<std::size_t>(cell));
  if (const auto* relaxed = std::get_if<RelaxedCell<T>>(&c)) {
    const auto& w = weights[relaxed->kind() == CellKind::normal ? 0 : 1];
    if (!w) throw ArgumentError("relaxed cell requires architecture coefficients");
    return relaxed->forward(tape, prev_prev, prev, *w, training);
  }
  return std::get<FixedCell<T>>(c).forward(tape, prev_prev, prev, training);
}

template <typename T>
Var<T> Network<T>::head(Tape<T>& tape, const Var<T>& features) const {
  return ops::linear(ops::global_avg_pool(features), tape.parameter(*head_weight_), tape.parameter(*head_bias_));
}

template <typename T>
std::array<std::optional<Var<T>>, 2> Network<T>::coefficient_weights(Tape<T>& tape, AlphaParams<T>* alphas) const {
  if (!is_relaxed()) {
    if (alphas) throw ArgumentError("fixed network does not take architecture coefficients");
    return {};
  }
  if (!alphas) throw ArgumentError("relaxed network requires architecture coefficients");
  if (!(alphas->mask() == config_.operator_mask))
    throw ArgumentError("architecture coefficients were built for a different operator mask");
  return {ops::softmax(tape.parameter(alphas->of(CellKind::normal)), 1),
          ops::softmax(tape.parameter(alphas->of(CellKind::reduce)), 1)};
}

template <typename T>
Var<T> Network<T>::features(Tape<T>& tape, const Tensor<T>& images, AlphaParams<T>* alphas) const {
  const Shape& s = images.shape();
  if (s.rank() != 4 || s[1] != 3 || s[2] != config_.input_size || s[3] != config_.input_size)
    throw ArgumentError("network expects images of shape (N,3," + std::to_string(config_.input_size) + "," +
                        std::to_string(config_.input_size) + "), got " + s.str());
  const auto weights = coefficient_weights(tape, alphas);
  Var<T> s1 = stem(tape, tape.constant(images));
  Var<T> s0 = s1;
  for (int i = 0; i < config_.num_cells; ++i) {
    auto [pp, p] = adapt(i, tape, s0, s1);
    Var<T> out = cell(i, tape, pp, p, weights);
    s0 = s1;
    s1 = out;
  }
  return s1;
}

template <typename T>
Var<T> Network<T>::forward(Tape<T>& tape, const Tensor<T>& images, AlphaParams<T>* alphas) const {
  return head(tape, features(tape, images, alphas));
}

namespace {

constexpr const char* kCheckpointMagic = "cellsearch-ckpt v1";

void write_f32_le(std::ostream& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  out.write(bytes, 4);
}

float read_f32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                             (std::uint32_t(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

template <typename T>
void write_entry(std::ostream& out, const char* kind, const std::string& name, const Tensor<T>& t) {
  out << kind << ' ' << name << ' ' << t.rank();
  for (auto d : t.shape().dims()) out << ' ' << d;
  out << '\n';
  for (T v : t.data()) write_f32_le(out, static_cast<float>(v));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out << kCheckpointMagic << '\n';
    out << "entries " << store.params().size() + store.buffers().size() << '\n';
    for (const auto& [name, p] : store.params()) write_entry(out, "param", name, p.value);
    for (const auto& [name, b] : store.buffers()) write_entry(out, "buffer", name, b);
    if (!out) throw DataError("write failed for checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::string where = "checkpoint " + path.string() + ": ";
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw ParseError(where + "missing 'cellsearch-ckpt v1' header");
  if (!std::getline(in, line)) throw ParseError(where + "missing entry count");
  std::size_t count = 0;
  {
    std::istringstream hs(line);
    std::string tag;
    if (!(hs >> tag >> count) || tag != "entries") throw ParseError(where + "malformed entry count line");
  }
  std::size_t seen_params = 0, seen_buffers = 0;
  for (std::size_t e = 0; e < count; ++e) {
    if (!std::getline(in, line)) throw ParseError(where + "truncated after " + std::to_string(e) + " entries");
    std::istringstream hs(line);
    std::string kind, name;
    std::size_t rank = 0;
    if (!(hs >> kind >> name >> rank)) throw ParseError(where + "malformed entry header '" + line + "'");
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims)
      if (!(hs >> d)) throw ParseError(where + "malformed shape for " + name);
    const Shape shape(dims);
    Tensor<T>* target = nullptr;
    if (kind == "param") {
      auto it = store.params().find(name);
      if (it == store.params().end()) throw ArgumentError(where + "parameter '" + name + "' does not exist in this network");
      target = &it->second.value;
      ++seen_params;
    } else if (kind == "buffer") {
      auto it = store.buffers().find(name);
      if (it == store.buffers().end()) throw ArgumentError(where + "buffer '" + name + "' does not exist in this network");
      target = &it->second;
      ++seen_buffers;
    } else {
      throw ParseError(where + "unknown entry kind '" + kind + "'");
    }
    if (target->shape() != shape)
      throw ArgumentError(where + "shape mismatch for '" + name + "': checkpoint " + shape.str() + ", network " +
                          target->shape().str());
    for (T& v : target->data()) v = static_cast<T>(read_f32_le(in));
    if (!in) throw ParseError(where + "truncated data for " + name);
  }
  if (seen_params != store.params().size() || seen_buffers != store.buffers().size())
    throw ArgumentError(where + "checkpoint does not cover every parameter of this network");
}

#define CELLSEARCH_INSTANTIATE_NETWORK(T)                                            \
  template class InputAdapter<T>;                                                    \
  template class FixedCell<T>;                                                       \
  template class Network<T>;                                                         \
  template void save_checkpoint(const std::filesystem::path&, const ParamStore<T>&); \
  template void load_checkpoint(const std::filesystem::path&, ParamStore<T>&);

CELLSEARCH_INSTANTIATE_NETWORK(float)
CELLSEARCH_INSTANTIATE_NETWORK(double)

}  // namespace cellsearch
