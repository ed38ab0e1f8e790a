#include <gtest/gtest.h>

#include <fstream>

#include "cellsearch/error.hpp"
#include "cellsearch/network.hpp"
#include "support.hpp"

using namespace cellsearch;
using namespace testing_support;

namespace {

NetworkConfig tiny(int cells = 3, int channels = 2, int classes = 3, int size = 8) {
  NetworkConfig c;
  c.num_cells = cells;
  c.init_channels = channels;
  c.num_classes = classes;
  c.input_size = size;
  return c;
}

Tensor<double> images(std::int64_t n, std::int64_t s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor(Shape{n, 3, s, s}, rng);
}

std::int64_t count_prefix(const ParamStore<double>& store, const std::string& prefix, const std::string& skip) {
  std::int64_t n = 0;
  for (const auto& [name, p] : store.params())
    if (name.rfind(prefix, 0) == 0 && name.find(skip) == std::string::npos) n += p.value.numel();
  return n;
}

}  // namespace

TEST(NetworkConfig, DefaultReducePositionsAreThirds) {
  NetworkConfig c;
  c.num_cells = 6;
  EXPECT_EQ(c.resolved_reduce_positions(), (std::array<int, 2>{2, 4}));
  c.num_cells = 10;
  EXPECT_EQ(c.resolved_reduce_positions(), (std::array<int, 2>{3, 6}));
}

TEST(NetworkConfig, BoundsAreEnforced) {
  auto c = tiny();
  c.reduce_positions = {1, 2};
  EXPECT_NO_THROW(c.validate());
  c.reduce_positions = {1, 3};
  EXPECT_THROW(c.validate(), ArgumentError);
  c.reduce_positions = {1, 1};
  EXPECT_THROW(c.validate(), ArgumentError);
  EXPECT_THROW(tiny(2).validate(), ArgumentError);
  EXPECT_THROW(tiny(3, 2, 3, 20).validate(), ArgumentError);
}

TEST(Network, FeatureMapIsOneEighthOfInput) {
  struct Case { int cells; std::vector<int> reduce; int size; };
  for (const auto& c : {Case{6, {}, 32}, Case{3, {1, 2}, 16}, Case{4, {0, 3}, 16}, Case{7, {}, 8}}) {
    auto cfg = tiny(c.cells, 2, 3, c.size);
    cfg.reduce_positions = c.reduce;
    auto net = Network<double>::relaxed(cfg, 1);
    AlphaParams<double> a(cfg.operator_mask, 1);
    Tape<double> tape;
    const auto f = net.features(tape, images(1, c.size, 2), &a);
    EXPECT_EQ(f.shape()[2], c.size / 8);
    EXPECT_EQ(f.shape()[3], c.size / 8);
    EXPECT_EQ(f.shape()[1], 4 * net.cell_channels(c.cells - 1));
  }
}

TEST(Network, ChannelsDoubleAtReduceCells) {
  auto cfg = tiny(6, 4);
  auto net = Network<double>::fixed(cfg, Genotype::uniform(OperatorKind::skip), 1);
  const std::vector<std::int64_t> expect{4, 4, 8, 8, 16, 16};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(net.cell_channels(i), expect[static_cast<std::size_t>(i)]);
}

TEST(Network, LogitShapeAndModeContracts) {
  auto cfg = tiny(3, 2, 4);
  auto relaxed = Network<double>::relaxed(cfg, 3);
  auto fixed = Network<double>::fixed(cfg, Genotype::uniform(OperatorKind::sep_conv_3), 3);
  AlphaParams<double> a(cfg.operator_mask, 3);
  Tape<double> tape;
  EXPECT_EQ(relaxed.forward(tape, images(2, 8, 1), &a).shape(), (Shape{2, 4}));
  EXPECT_EQ(fixed.forward(tape, images(2, 8, 1)).shape(), (Shape{2, 4}));
  EXPECT_THROW(relaxed.forward(tape, images(2, 8, 1)), ArgumentError);
  EXPECT_THROW(fixed.forward(tape, images(2, 8, 1), &a), ArgumentError);
  EXPECT_THROW(fixed.forward(tape, images(2, 16, 1)), ArgumentError);
  AlphaParams<double> masked(atrous_free_mask(), 3);
  EXPECT_THROW(relaxed.forward(tape, images(2, 8, 1), &masked), ArgumentError);
}

TEST(Network, EvalForwardIsPureAndRowWise) {
  auto cfg = tiny(3, 2, 4);
  auto net = Network<double>::relaxed(cfg, 4);
  AlphaParams<double> a(cfg.operator_mask, 4);
  net.set_mode(Mode::eval);
  auto x = images(3, 8, 5);
  for (std::int64_t i = 0; i < 3 * 8 * 8; ++i) x[static_cast<std::size_t>(3 * 64 + i)] = x[static_cast<std::size_t>(i)];
  Tape<double> t1, t2;
  const auto y1 = net.forward(t1, x, &a).value();
  const auto y2 = net.forward(t2, x, &a).value();
  EXPECT_EQ(y1, y2);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(y1[static_cast<std::size_t>(k)], y1[static_cast<std::size_t>(4 + k)]);
}

TEST(Network, ForwardEqualsUnrolledComposition) {
  auto cfg = tiny(3, 2, 3);
  auto net = Network<double>::relaxed(cfg, 5);
  AlphaParams<double> a(cfg.operator_mask, 5);
  net.set_mode(Mode::eval);
  const auto x = images(2, 8, 6);
  Tape<double> t1;
  const auto expected = net.forward(t1, x, &a).value();

  Tape<double> t2;
  const auto w = net.coefficient_weights(t2, &a);
  Var<double> s1 = net.stem(t2, t2.constant(x));
  Var<double> s0 = s1;
  for (int i = 0; i < 3; ++i) {
    auto [pp, p] = net.adapt(i, t2, s0, s1);
    auto out = net.cell(i, t2, pp, p, w);
    s0 = s1;
    s1 = out;
  }
  EXPECT_EQ(net.head(t2, s1).value(), expected);
}

TEST(RelaxedCell, ForwardEqualsNodeSumsOfEdges) {
  ParamStore<double> store;
  std::mt19937_64 rng(7);
  BuildContext<double> ctx{store, rng, false};
  RelaxedCell<double> cell(ctx, "cell", CellKind::reduce, OperatorMask::all(), 2);
  Tape<double> tape;
  auto pp = tape.constant(random_tensor(Shape{2, 2, 4, 4}, rng));
  auto p = tape.constant(random_tensor(Shape{2, 2, 4, 4}, rng));
  auto weights = ops::softmax(tape.constant(random_tensor(Shape{14, 7}, rng)), 1);
  const auto out = cell.forward(tape, pp, p, weights, false);
  std::vector<Var<double>> states{p, pp};
  for (int node = 0; node < kNumNodes; ++node) {
    std::vector<Var<double>> parts;
    for (int src = 0; src < node + 2; ++src) {
      const int e = EdgeId::edge_index(node, src);
      parts.push_back(cell.edge(e).forward(tape, states[static_cast<std::size_t>(src)], ops::select_row(weights, e), false));
    }
    states.push_back(ops::add_n<double>(parts));
  }
  const auto manual = ops::concat_channels<double>(std::span<const Var<double>>(states).subspan(2));
  EXPECT_EQ(manual.value(), out.value());
}

TEST(InputAdapter, AlignsShapesAfterReduceCell) {
  ParamStore<double> store;
  std::mt19937_64 rng(8);
  BuildContext<double> ctx{store, rng, true};
  InputAdapter<double> adapter(ctx, "a", 8, 16, 8, true);
  Tape<double> tape;
  auto [pp, p] = adapter.forward(tape, tape.constant(Tensor<double>(Shape{2, 8, 8, 8}, 1.0)),
                                 tape.constant(Tensor<double>(Shape{2, 16, 4, 4}, 1.0)), true);
  EXPECT_EQ(pp.shape(), (Shape{2, 8, 4, 4}));
  EXPECT_EQ(p.shape(), (Shape{2, 8, 4, 4}));
}

TEST(Network, HeadParameterCountIsClosedForm) {
  auto cfg = tiny(3, 2, 5);
  auto net = Network<double>::relaxed(cfg, 1);
  const std::int64_t c_final = 4 * net.cell_channels(2);
  EXPECT_EQ(count_prefix(net.params(), "head.", "#"), c_final * 5 + 5);
}

TEST(Network, SkipAndPoolGenotypeHasNoCellParametersBesideAdapters) {
  Genotype g = Genotype::uniform(OperatorKind::skip);
  for (auto& node : g.reduce)
    for (auto& br : node) br.op = "max_pool_3x3";
  auto net = Network<double>::fixed(tiny(6, 4), g, 1);
  std::int64_t adapters = 0;
  for (int i = 0; i < 6; ++i) {
    const std::string prefix = std::string("cell0") + std::to_string(i) + ".";
    EXPECT_EQ(count_prefix(net.params(), prefix, ".adapt"), 0) << prefix;
    adapters += count_prefix(net.params(), prefix + "adapt", "#");
  }
  EXPECT_GT(adapters, 0);
}

TEST(Network, FixedCountsFewerParametersThanRelaxed) {
  auto cfg = tiny(4, 4, 4, 16);
  const auto relaxed = Network<double>::relaxed(cfg, 1).count_parameters();
  for (auto op : kAllOperators) {
    const auto a = Network<double>::fixed(cfg, Genotype::uniform(op), 1).count_parameters();
    const auto b = Network<double>::fixed(cfg, Genotype::uniform(op), 2).count_parameters();
    EXPECT_EQ(a, b);
    EXPECT_LT(a, relaxed) << operator_name(op);
  }
}

TEST(Network, SameSeedGivesIdenticalWeights) {
  auto a = Network<double>::relaxed(tiny(), 9);
  auto b = Network<double>::relaxed(tiny(), 9);
  auto c = Network<double>::relaxed(tiny(), 10);
  bool all_equal = true, any_diff = false;
  for (const auto& [name, p] : a.params().params()) {
    all_equal = all_equal && p.value == b.params().param(name).value;
    any_diff = any_diff || !(p.value == c.params().param(name).value);
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff);
}

TEST(Network, ArchitectureGradientIsNonzero) {
  auto cfg = tiny(3, 2, 3);
  auto net = Network<double>::relaxed(cfg, 11);
  AlphaParams<double> a(cfg.operator_mask, 11);
  Tape<double> tape;
  const std::vector<int> labels{0, 1, 2, 0};
  tape.backward(ops::cross_entropy(net.forward(tape, images(4, 8, 12), &a), std::span<const int>(labels)));
  double max_abs = 0;
  for (auto kind : {CellKind::normal, CellKind::reduce})
    for (double g : a.of(kind).grad.data()) max_abs = std::max(max_abs, std::abs(g));
  EXPECT_GT(max_abs, 0.0);
}

TEST(Checkpoint, RoundTripRestoresParametersAndBuffers) {
  const auto dir = scratch_dir("ckpt");
  auto cfg = tiny(3, 2, 3);
  auto a = Network<float>::fixed(cfg, Genotype::uniform(OperatorKind::sep_conv_3), 1);
  {
    Tape<float> tape;
    a.forward(tape, images(2, 8, 3).cast<float>());
  }
  save_checkpoint(dir / "m.ckpt", a.params());
  auto b = Network<float>::fixed(cfg, Genotype::uniform(OperatorKind::sep_conv_3), 2);
  load_checkpoint(dir / "m.ckpt", b.params());
  for (const auto& [name, p] : a.params().params()) EXPECT_EQ(p.value, b.params().param(name).value) << name;
  for (const auto& [name, t] : a.params().buffers()) EXPECT_EQ(t, b.params().buffers().at(name)) << name;

  std::ifstream in(dir / "m.ckpt", std::ios::binary);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "cellsearch-ckpt v1");
}

TEST(Checkpoint, MismatchesAreDescriptive) {
  const auto dir = scratch_dir("ckpt_bad");
  auto a = Network<float>::fixed(tiny(3, 2, 3), Genotype::uniform(OperatorKind::skip), 1);
  save_checkpoint(dir / "m.ckpt", a.params());
  auto wider = Network<float>::fixed(tiny(3, 4, 3), Genotype::uniform(OperatorKind::skip), 1);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", wider.params()), ArgumentError);
  auto other = Network<float>::fixed(tiny(3, 2, 3), Genotype::uniform(OperatorKind::sep_conv_3), 1);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", other.params()), ArgumentError);

  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", size - 6);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", a.params()), ParseError);
}

TEST(Network, FullLossGradientMatchesFiniteDifferences) {
  auto cfg = tiny(3, 2, 3, 16);
  auto net = Network<double>::relaxed(cfg, 13);
  AlphaParams<double> a(cfg.operator_mask, 13, 0.5);
  const auto x = images(2, 16, 14);
  const std::vector<int> labels{1, 2};
  auto loss = [&](Tape<double>& tape) {
    return ops::cross_entropy(net.forward(tape, x, &a), std::span<const int>(labels));
  };
  const auto weights = check_param_gradients(net.params(), loss, 1e-6, 400, 15);
  EXPECT_LT(weights.rel_error, 1e-3);

  std::vector<Tensor<double>> inputs{a.of(CellKind::normal).value, a.of(CellKind::reduce).value};
  ScalarFn f = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    std::array<std::optional<Var<double>>, 2> w{ops::softmax(v[0], 1), ops::softmax(v[1], 1)};
    Var<double> s1 = net.stem(tape, tape.constant(x));
    Var<double> s0 = s1;
    for (int i = 0; i < 3; ++i) {
      auto [pp, p] = net.adapt(i, tape, s0, s1);
      auto out = net.cell(i, tape, pp, p, w);
      s0 = s1;
      s1 = out;
    }
    return ops::cross_entropy(net.head(tape, s1), std::span<const int>(labels));
  };
  EXPECT_LT(check_gradients(f, inputs).rel_error, 1e-3);
}
