#include <gtest/gtest.h>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/graphviz.hpp>
#include <random>
#include <regex>

#include "cellsearch/error.hpp"
#include "cellsearch/genotype.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cellsearch;

namespace {

Alphas random_alphas(std::mt19937_64& rng, const OperatorMask& mask = OperatorMask::all(), bool discrete = false) {
  Alphas a;
  a.mask = mask;
  a.seed = rng();
  const std::int64_t n = static_cast<std::int64_t>(mask.size());
  a.normal = Tensor<double>(Shape{14, n});
  a.reduce = Tensor<double>(Shape{14, n});
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> d(-1, 1);
  for (auto* t : {&a.normal, &a.reduce})
    for (double& v : t->data()) v = discrete ? d(rng) : g(rng);
  return a;
}

Genotype random_genotype(std::mt19937_64& rng) {
  Genotype g;
  std::uniform_int_distribution<int> op(0, kNumOperators - 1);
  for (CellKind kind : {CellKind::normal, CellKind::reduce})
    for (int node = 0; node < kNumNodes; ++node) {
      std::uniform_int_distribution<int> src(0, node + 1);
      const int a = src(rng);
      int b = src(rng);
      while (b == a) b = src(rng);
      auto& spec = g.of(kind)[static_cast<std::size_t>(node)];
      spec[0] = {a, std::string(operator_name(kAllOperators[static_cast<std::size_t>(op(rng))]))};
      spec[1] = {b, std::string(operator_name(kAllOperators[static_cast<std::size_t>(op(rng))]))};
    }
  return g;
}

int count(const std::string& text, const std::string& pattern) {
  const std::regex re(pattern);
  return static_cast<int>(std::distance(std::sregex_iterator(text.begin(), text.end(), re), std::sregex_iterator()));
}

struct DotVertex {
  std::string name, label, shape;
};
struct DotEdge {
  std::string label;
};
using DotGraph = boost::adjacency_list<boost::vecS, boost::vecS, boost::directedS, DotVertex, DotEdge>;

DotGraph parse_dot(const std::string& text) {
  DotGraph g;
  boost::dynamic_properties dp(boost::ignore_other_properties);
  dp.property("node_id", boost::get(&DotVertex::name, g));
  dp.property("label", boost::get(&DotVertex::label, g));
  dp.property("shape", boost::get(&DotVertex::shape, g));
  dp.property("label", boost::get(&DotEdge::label, g));
  if (!boost::read_graphviz(text, g, dp, "node_id")) throw std::runtime_error("graphviz parse failed");
  return g;
}

}  // namespace

namespace cellsearch {
void PrintTo(const Branch& b, std::ostream* os) { *os << "(" << b.source << ", " << b.op << ")"; }
}  // namespace cellsearch

TEST(Derive, UniformAlphasPickLowestIndices) {
  Alphas a;
  a.normal = Tensor<double>(Shape{14, 7}, 0.25);
  a.reduce = Tensor<double>(Shape{14, 7}, -3.0);
  const Genotype g = derive(a);
  for (CellKind kind : {CellKind::normal, CellKind::reduce})
    for (const auto& node : g.of(kind)) {
      EXPECT_EQ(node[0], (Branch{0, "sep_conv_3x3"}));
      EXPECT_EQ(node[1], (Branch{1, "sep_conv_3x3"}));
    }
}

TEST(Derive, DominantEntriesGiveHandTable) {
  // One dominant entry per edge: operator (edge % 7), strength rising with the source index.
  Alphas a;
  a.normal = Tensor<double>(Shape{14, 7});
  a.reduce = Tensor<double>(Shape{14, 7});
  for (int e = 0; e < 14; ++e) {
    const auto id = EdgeId::from_index(CellKind::normal, e);
    a.normal[static_cast<std::size_t>(e * 7 + e % 7)] = 1.0 + id.source;
    a.reduce[static_cast<std::size_t>(e * 7 + (6 - e % 7))] = 5.0 - id.source;
  }
  const Genotype g = derive(a);
  // normal: the two highest sources win; reduce: sources 0 and 1 always win.
  const std::vector<std::array<Branch, 2>> normal{{{{0, "sep_conv_3x3"}, {1, "sep_conv_5x5"}}},
                                                   {{{1, "atr_conv_5x5"}, {2, "avg_pool_3x3"}}},
                                                   {{{2, "sep_conv_3x3"}, {3, "sep_conv_5x5"}}},
                                                   {{{3, "max_pool_3x3"}, {4, "skip"}}}};
  const std::vector<std::array<Branch, 2>> reduce{{{{0, "skip"}, {1, "max_pool_3x3"}}},
                                                   {{{0, "avg_pool_3x3"}, {1, "atr_conv_5x5"}}},
                                                   {{{0, "sep_conv_5x5"}, {1, "sep_conv_3x3"}}},
                                                   {{{0, "avg_pool_3x3"}, {1, "atr_conv_5x5"}}}};
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_EQ(g.normal[n], normal[n]) << "normal node " << n;
    EXPECT_EQ(g.reduce[n], reduce[n]) << "reduce node " << n;
  }
}

TEST(Derive, InvariantUnderPerRowShift) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Alphas a = random_alphas(rng);
    Alphas shifted = a;
    std::uniform_real_distribution<double> c(-50, 50);
    for (auto* t : {&shifted.normal, &shifted.reduce})
      for (int e = 0; e < 14; ++e) {
        const double k = c(rng);
        for (int o = 0; o < 7; ++o) (*t)[static_cast<std::size_t>(e * 7 + o)] += k;
      }
    EXPECT_EQ(derive(a).normal, derive(shifted).normal);
  }
}

TEST(Derive, AgreesWithBruteForceOracle) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    const Alphas a = random_alphas(rng, OperatorMask::all(), trial % 3 == 0);
    const Genotype g = derive(a);
    EXPECT_EQ(g, oracles::derive_brute_force(a)) << "trial " << trial;
    EXPECT_TRUE(validate(g).empty());
  }
}

TEST(Derive, AtrousFreeMaskNeverEmitsAtrous) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const Genotype g = derive(random_alphas(rng, atrous_free_mask(), trial % 2 == 0));
    EXPECT_EQ(serialize(g).find("atr_"), std::string::npos);
  }
}

TEST(Genotype, RoundTripAllSkip) {
  const Genotype g = Genotype::uniform(OperatorKind::skip);
  EXPECT_EQ(parse_genotype(serialize(g)), g);
}

TEST(Genotype, SerializedLayoutIsFixed) {
  const std::string text = serialize(Genotype::uniform(OperatorKind::skip));
  EXPECT_EQ(text.substr(0, 27), "{\n  \"format_version\": 1,\n  ");
  EXPECT_NE(text.find("    [[0, \"skip\"], [1, \"skip\"]],\n"), std::string::npos);

  EXPECT_EQ(text.back(), '\n');
  EXPECT_NE(text.find("\"concat\": [2, 3, 4, 5]\n}\n"), std::string::npos);
}

TEST(Genotype, RandomGenotypesRoundTripByteStable) {
  std::mt19937_64 rng(24);
  for (int i = 0; i < 1000; ++i) {
    const Genotype g = random_genotype(rng);
    ASSERT_TRUE(validate(g).empty());
    const std::string text = serialize(g);
    const Genotype back = parse_genotype(text);
    EXPECT_EQ(back, g);
    EXPECT_EQ(serialize(back), text);
  }
}

TEST(Genotype, ValidationNamesTheProblem) {
  Genotype g = Genotype::uniform(OperatorKind::skip);
  g.normal[0][1].source = 2;
  auto errors = validate(g);
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_NE(errors[0].find("source must precede node"), std::string::npos);

  g = Genotype::uniform(OperatorKind::skip);
  g.reduce[2][1].source = 0;
  errors = validate(g);
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_NE(errors[0].find("distinct"), std::string::npos);

  g = Genotype::uniform(OperatorKind::skip);
  g.normal[3][0].op = "none";
  errors = validate(g);
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_NE(errors[0].find("unknown operator"), std::string::npos);
  EXPECT_THROW(require_valid(g), ArgumentError);
}

TEST(Genotype, MalformedTextGivesContext) {
  const std::string good = serialize(Genotype::uniform(OperatorKind::skip));
  try {
    parse_genotype(std::regex_replace(good, std::regex("\\[0, \"skip\"\\]"), "[0]", std::regex_constants::format_first_only));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("normal"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_genotype("{"), ParseError);
  EXPECT_THROW(parse_genotype(std::regex_replace(good, std::regex("\"concat\""), "\"extra\": 1, \"concat\"")), ParseError);
}

TEST(Genotype, FileRoundTrip) {
  const auto dir = testing_support::scratch_dir("genotype");
  std::mt19937_64 rng(25);
  const Genotype g = random_genotype(rng);
  save_genotype(dir / "g.genotype.json", g);
  EXPECT_EQ(load_genotype(dir / "g.genotype.json"), g);
}

TEST(AlphasFile, RoundTripAndValidation) {
  const auto dir = testing_support::scratch_dir("alphas");
  std::mt19937_64 rng(26);
  const Alphas a = random_alphas(rng, atrous_free_mask());
  save_alphas(dir / "a.alphas.json", a);
  EXPECT_EQ(load_alphas(dir / "a.alphas.json"), a);

  Alphas bad = a;
  bad.normal = Tensor<double>(Shape{14, 7});
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = a;
  bad.reduce[3] = std::nan("");
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(Dot, AllSkipHasEightSkipEdgesAndFourSumsPerCell) {
  const Genotype g = Genotype::uniform(OperatorKind::skip);
  for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
    const std::string text = export_dot(g, kind);
    EXPECT_EQ(count(text, "label=\"skip\""), 8);
    EXPECT_EQ(count(text, "label=\"sum_\\d\""), 4);
  }
  EXPECT_EQ(export_dot(g), export_dot(g, CellKind::normal) + export_dot(g, CellKind::reduce));
}

TEST(Dot, ParsesWithBoostGraphviz) {
  std::mt19937_64 rng(27);
  for (int i = 0; i < 20; ++i) {
    const Genotype g = random_genotype(rng);
    for (CellKind kind : {CellKind::normal, CellKind::reduce}) {
      const DotGraph graph = parse_dot(export_dot(g, kind));
      EXPECT_EQ(boost::num_vertices(graph), 7u);
      EXPECT_EQ(boost::num_edges(graph), 12u);
      std::multiset<std::string> labels, expected;
      for (auto [it, end] = boost::edges(graph); it != end; ++it)
        if (!graph[*it].label.empty()) labels.insert(graph[*it].label);
      for (const auto& node : g.of(kind))
        for (const auto& br : node) expected.insert(br.op);
      EXPECT_EQ(labels, expected);
    }
  }
}

TEST(Ablation, ReplaceAtrous) {
  const Genotype plain = Genotype::uniform(OperatorKind::max_pool_3);
  EXPECT_EQ(ablate_replace_atrous(plain), plain);
  EXPECT_EQ(ablate_replace_atrous(Genotype::uniform(OperatorKind::atrous_conv_3)),
            Genotype::uniform(OperatorKind::sep_conv_3));

  std::mt19937_64 rng(28);
  for (int i = 0; i < 100; ++i) {
    const Genotype g = random_genotype(rng);
    const Genotype r = ablate_replace_atrous(g);
    for (CellKind kind : {CellKind::normal, CellKind::reduce})
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t b = 0; b < 2; ++b) {
          const Branch& before = g.of(kind)[n][b];
          const Branch& after = r.of(kind)[n][b];
          EXPECT_EQ(after.source, before.source);
          const std::string expect = before.op == "atr_conv_3x3"   ? "sep_conv_3x3"
                                     : before.op == "atr_conv_5x5" ? "sep_conv_5x5"
                                                                   : before.op;
          EXPECT_EQ(after.op, expect);
        }
  }
}
