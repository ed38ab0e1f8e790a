#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cellsearch/error.hpp"
#include "cellsearch/search_space.hpp"
#include "support.hpp"

using namespace cellsearch;
using namespace testing_support;

namespace {

struct Built {
  ParamStore<double> store;
  std::mt19937_64 rng{11};
  BuildContext<double> ctx{store, rng, true};
};

}  // namespace

TEST(Operators, NamesRoundTripInCanonicalOrder) {
  const std::vector<std::string> expected{"sep_conv_3x3", "sep_conv_5x5", "atr_conv_3x3", "atr_conv_5x5",
                                          "avg_pool_3x3", "max_pool_3x3", "skip"};
  for (int i = 0; i < kNumOperators; ++i) {
    const auto kind = kAllOperators[static_cast<std::size_t>(i)];
    EXPECT_EQ(operator_name(kind), expected[static_cast<std::size_t>(i)]);
    EXPECT_EQ(parse_operator(expected[static_cast<std::size_t>(i)]), kind);
  }
  EXPECT_FALSE(parse_operator("none").has_value());
}

TEST(Operators, MaskKeepsCanonicalOrderAndRejectsDuplicates) {
  OperatorMask m({OperatorKind::skip, OperatorKind::sep_conv_3});
  EXPECT_EQ(m.at(0), OperatorKind::sep_conv_3);
  EXPECT_EQ(m.index_of(OperatorKind::skip), 1u);
  EXPECT_THROW(OperatorMask({OperatorKind::skip, OperatorKind::skip}), ArgumentError);
  EXPECT_THROW(OperatorMask({}), ArgumentError);
}

TEST(Operators, AtrousFreeMaskHasFiveOperators) {
  const auto m = atrous_free_mask();
  EXPECT_EQ(m.size(), 5u);
  for (auto k : m.ops()) EXPECT_FALSE(is_atrous(k));
}

TEST(Edges, FourteenEdgesIndexedNodeMajor) {
  int expected = 0;
  for (int node = 0; node < kNumNodes; ++node)
    for (int source = 0; source < node + 2; ++source) {
      EXPECT_EQ(EdgeId::edge_index(node, source), expected);
      const auto id = EdgeId::from_index(CellKind::reduce, expected);
      EXPECT_EQ(id.node, node);
      EXPECT_EQ(id.source, source);
      ++expected;
    }
  EXPECT_EQ(expected, kNumEdges);
  EXPECT_THROW(EdgeId::edge_index(0, 2), ArgumentError);
}

TEST(Edges, ReduceStrideOnlyOnCellInputs) {
  EXPECT_EQ(edge_stride(CellKind::reduce, 0), 2);
  EXPECT_EQ(edge_stride(CellKind::reduce, 1), 2);
  EXPECT_EQ(edge_stride(CellKind::reduce, 2), 1);
  EXPECT_EQ(edge_stride(CellKind::normal, 0), 1);
}

TEST(Softmax, RowSumsToOneUnderFiveOperatorMask) {
  const std::vector<double> row{0.3, -1.0, 2.0, 0.0, 0.5};
  const auto c = softmax_coefficients(row);
  EXPECT_NEAR(std::accumulate(c.begin(), c.end(), 0.0), 1.0, 1e-15);
  EXPECT_EQ(c.size(), 5u);
}

TEST(Softmax, LargeInputsStayFiniteAndNanIsRejected) {
  const std::vector<double> big{1000.0, 999.0};
  const auto c = softmax_coefficients(big);
  EXPECT_NEAR(c[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  const std::vector<double> bad{1.0, std::nan("")};
  EXPECT_THROW(softmax_coefficients(bad), ArgumentError);
}

TEST(Operations, OutputShapesForBothStrides) {
  Built b;
  for (auto kind : kAllOperators) {
    for (int stride : {1, 2}) {
      auto op = make_operation(b.ctx, std::string(operator_name(kind)) + std::to_string(stride), kind, 4, stride);
      Tape<double> tape;
      auto y = op->forward(tape, tape.constant(Tensor<double>(Shape{2, 4, 8, 8}, 0.5)), true);
      EXPECT_EQ(y.shape(), (Shape{2, 4, 8 / stride, 8 / stride})) << operator_name(kind) << " stride " << stride;
    }
  }
}

TEST(Operations, InputGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (auto kind : kAllOperators) {
    for (int stride : {1, 2}) {
      Built b;
      auto op = make_operation(b.ctx, "op", kind, 3, stride);
      const auto w = random_tensor(Shape{2, 3, 6 / stride, 6 / stride}, rng);
      ScalarFn f = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
        return dot_with(op->forward(tape, v[0], true), w);
      };
      const auto res = check_gradients(f, {random_tensor(Shape{2, 3, 6, 6}, rng)});
      EXPECT_LT(res.rel_error, 1e-4) << operator_name(kind) << " stride " << stride;
    }
  }
}

TEST(Operations, TripletParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (auto kind : {OperatorKind::sep_conv_3, OperatorKind::atrous_conv_5}) {
    Built b;
    auto op = make_operation(b.ctx, "triplet", kind, 3, 1);
    const auto x = random_tensor(Shape{2, 3, 5, 5}, rng);
    const auto w = random_tensor(Shape{2, 3, 5, 5}, rng);
    const auto res = check_param_gradients(
        b.store, [&](Tape<double>& tape) { return dot_with(op->forward(tape, tape.constant(x), true), w); });
    EXPECT_LT(res.rel_error, 1e-4) << operator_name(kind);
    EXPECT_GT(res.max_abs_grad, 0.0);
  }
}

TEST(Operations, TripletIsResidualOnlyAtStrideOne) {
  Built b;
  ConvTriplet<double> same(b.ctx, "a", OperatorKind::sep_conv_3, 4, 4, 1);
  ConvTriplet<double> down(b.ctx, "b", OperatorKind::sep_conv_3, 4, 4, 2);
  EXPECT_TRUE(same.residual());
  EXPECT_FALSE(down.residual());
  EXPECT_THROW(ConvTriplet<double>(b.ctx, "c", OperatorKind::skip, 4, 4, 1), ArgumentError);
}

TEST(Operations, ParameterCountsFollowClosedForm) {
  const std::int64_t c = 16;
  for (auto kind : kAllOperators) {
    Built b;
    BuildContext<double> relaxed{b.store, b.rng, false};
    make_operation(relaxed, "op", kind, c, 1);
    const int k = kernel_size(kind);
    std::int64_t expected = 0;
    if (kind == OperatorKind::sep_conv_3 || kind == OperatorKind::sep_conv_5) expected = c * k * k + c * c;
    if (kind == OperatorKind::atrous_conv_3 || kind == OperatorKind::atrous_conv_5) expected = c * c * k * k;
    EXPECT_EQ(b.store.count(), expected) << operator_name(kind);
  }
  Built b;
  make_operation(b.ctx, "sep", OperatorKind::sep_conv_3, c, 1);
  EXPECT_EQ(b.store.count(), 400 + 2 * c);
}

TEST(MixedEdge, GradientsWithRespectToInputAndCoefficients) {
  std::mt19937_64 rng(14);
  for (int stride : {1, 2}) {
    Built b;
    MixedEdge<double> edge(b.ctx, "edge", {CellKind::reduce, 0, 0}, OperatorMask::all(), 2, stride);
    const auto w = random_tensor(Shape{2, 2, 6 / stride, 6 / stride}, rng);
    ScalarFn f = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
      return dot_with(edge.forward(tape, v[0], ops::softmax(v[1]), true), w);
    };
    const auto res = check_gradients(f, {random_tensor(Shape{2, 2, 6, 6}, rng), random_tensor(Shape{7}, rng)});
    EXPECT_LT(res.rel_error, 1e-4) << "stride " << stride;
  }
}

TEST(RelaxedCell, OutputConcatenatesFourNodes) {
  for (auto kind : {CellKind::normal, CellKind::reduce}) {
    Built b;
    RelaxedCell<double> cell(b.ctx, "cell", kind, atrous_free_mask(), 3);
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>(Shape{2, 3, 8, 8}, 0.1));
    auto weights = ops::softmax(tape.constant(Tensor<double>(Shape{14, 5})), 1);
    const std::int64_t s = kind == CellKind::reduce ? 4 : 8;
    EXPECT_EQ(cell.forward(tape, x, x, weights, true).shape(), (Shape{2, 12, s, s}));
  }
}

TEST(RelaxedCell, RejectsMisshapenWeights) {
  Built b;
  RelaxedCell<double> cell(b.ctx, "cell", CellKind::normal, OperatorMask::all(), 2);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{1, 2, 4, 4}));
  EXPECT_THROW(cell.forward(tape, x, x, tape.constant(Tensor<double>(Shape{14, 5})), true), ShapeError);
}

TEST(Alphas, InitIsSmallSeededAndSnapshotsRoundTrip) {
  AlphaParams<double> a(OperatorMask::all(), 42);
  AlphaParams<double> again(OperatorMask::all(), 42);
  EXPECT_EQ(a.snapshot(), again.snapshot());
  double max_abs = 0;
  for (double v : a.of(CellKind::normal).value.data()) max_abs = std::max(max_abs, std::abs(v));
  EXPECT_GT(max_abs, 0.0);
  EXPECT_LT(max_abs, 1e-2);
  EXPECT_EQ(a.of(CellKind::reduce).value.shape(), (Shape{14, 7}));
  AlphaParams<float> f(a.snapshot());
  EXPECT_EQ(f.mask(), a.mask());
}
