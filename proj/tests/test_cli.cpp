#include <gtest/gtest.h>
#include <sys/wait.h>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/graphviz.hpp>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cellsearch/genotype.hpp"
#include "cellsearch/io.hpp"
#include "cellsearch/metrics.hpp"
#include "support.hpp"

using namespace cellsearch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
  int status;
  std::string output;
};

Invocation cli(const std::string& args) {
  static int counter = 0;
  const fs::path log = fs::temp_directory_path() / ("cellsearch_cli_" + std::to_string(::getpid()) + "_" +
                                                    std::to_string(counter++) + ".log");
  const std::string cmd = std::string(CELLSEARCH_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  Invocation r{WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, read_text_file(log)};
  fs::remove(log);
  return r;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

// A configuration small enough for a few seconds per command.
fs::path tiny_config(const fs::path& dir, int classes = 2, int per_class = 16, int train_epochs = 1) {
  json j = {
      {"num_runs", 1},
      {"dataset", {{"num_classes", classes}, {"per_class", per_class}, {"seed", 1}}},
      {"network", {{"num_cells", 3}, {"init_channels", 4}}},
      {"search", {{"epochs", 2}, {"batch_size", 16}, {"image_size", 8}}},
      {"train", {{"epochs", train_epochs}, {"batch_size", 16}, {"image_size", 8}}},
  };
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

}  // namespace

TEST(Cli, ConfigPrintsDefaults) {
  const Invocation r = cli("config");
  ASSERT_EQ(r.status, 0) << r.output;
  const json j = json::parse(r.output);
  EXPECT_EQ(j["search"]["lr0"], 0.025);
  EXPECT_EQ(j["search"]["momentum"], 0.9);
  EXPECT_EQ(j["search"]["weight_decay"], 3e-4);
  EXPECT_EQ(j["search"]["epochs"], 50);
  EXPECT_EQ(j["search"]["schedule"], "cosine");
  EXPECT_EQ(j["arch"]["lr"], 3e-4);
  EXPECT_EQ(j["arch"]["weight_decay"], 1e-3);
  EXPECT_EQ(j["arch"]["beta1"], 0.5);
  EXPECT_EQ(j["arch"]["beta2"], 0.999);
  EXPECT_EQ(j["train"]["lr0"], 0.1);
  EXPECT_EQ(j["train"]["decay"], 0.97);
  EXPECT_EQ(j["train"]["schedule"], "exponential");
  EXPECT_EQ(j["train"]["epochs"], 150);
  EXPECT_EQ(j["train"]["ratio"], 0.8);
  EXPECT_EQ(j["num_runs"], 3);
  EXPECT_EQ(json::parse(slurp(fs::path(CELLSEARCH_SOURCE_DIR) / "configs" / "default.json")), j);
}

TEST(Cli, OverridesAndUnknownKeys) {
  const Invocation r = cli("config --set search.epochs=7 --seed 9");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(json::parse(r.output)["search"]["epochs"], 7);
  EXPECT_EQ(json::parse(r.output)["seed"], 9);
  const Invocation bad = cli("config --set search.bogus=1");
  EXPECT_EQ(bad.status, 1);
  EXPECT_NE(bad.output.find("error: "), std::string::npos);
  EXPECT_NE(bad.output.find("bogus"), std::string::npos);
}

TEST(Cli, ErrorsExitNonZeroWithPrefix) {
  const fs::path dir = testing_support::scratch_dir("cli_errors");
  std::ofstream(dir / "broken.genotype.json") << "{\"normal\": 3}";
  const Invocation r = cli("export-dot " + q(dir / "broken.genotype.json") + " -o " + q(dir / "x.dot"));
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;
  EXPECT_FALSE(fs::exists(dir / "x.dot"));
  EXPECT_EQ(cli("frobnicate").status, 2);
  EXPECT_EQ(cli("search --precision f16").status, 2);
}

TEST(Cli, SearchWritesArtifactsAndIsReproducible) {
  const fs::path dir = testing_support::scratch_dir("cli_search");
  const fs::path cfg = tiny_config(dir);
  const std::string cfg_before = slurp(cfg);
  for (const char* sub : {"a", "b"}) {
    const Invocation r = cli("search -q --config " + q(cfg) + " --out-dir " + q(dir / sub));
    ASSERT_EQ(r.status, 0) << r.output;
  }
  for (const char* f : {"best.alphas.json", "best.genotype.json", "curves.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  EXPECT_EQ(parse_curves_csv(slurp(dir / "a" / "curves.csv")).size(), 2u);
  EXPECT_NO_THROW(parse_alphas(slurp(dir / "a" / "best.alphas.json")));
  EXPECT_EQ(slurp(dir / "a" / "best.genotype.json"), slurp(dir / "b" / "best.genotype.json"));
  EXPECT_EQ(slurp(cfg), cfg_before);

  const json m = read_json(dir / "a" / "manifest.json");
  EXPECT_EQ(m["command"], "search");
  EXPECT_EQ(m["operator_mask"].size(), 7u);
  for (const auto& f : m["files"]) EXPECT_EQ(f["sha256"], sha256_file(dir / "a" / f["path"].get<std::string>()));

  // Deriving the saved coefficients reproduces the saved genotype byte for byte.
  const Invocation d = cli("derive " + q(dir / "a" / "best.alphas.json") + " -o " + q(dir / "derived.genotype.json"));
  ASSERT_EQ(d.status, 0) << d.output;
  EXPECT_EQ(slurp(dir / "derived.genotype.json"), slurp(dir / "a" / "best.genotype.json"));
}

TEST(Cli, ExcludeAtrousSearchHasNoAtrousOperators) {
  const fs::path dir = testing_support::scratch_dir("cli_exclude");
  const Invocation r = cli("search -q --exclude-atrous --config " + q(tiny_config(dir)) + " --out-dir " + q(dir / "out"));
  ASSERT_EQ(r.status, 0) << r.output;
  const Genotype g = load_genotype(dir / "out" / "best.genotype.json");
  for (const auto* cell : {&g.normal, &g.reduce})
    for (const auto& node : *cell)
      for (const auto& b : node) EXPECT_FALSE(is_atrous(*parse_operator(b.op)));
  EXPECT_EQ(read_json(dir / "out" / "manifest.json")["operator_mask"].size(), 5u);
}

TEST(Cli, DeriveUniformPicksLowestIndicesDeterministically) {
  const fs::path dir = testing_support::scratch_dir("cli_derive");
  Alphas a;
  a.normal = Tensor<double>(Shape{14, 7});
  a.reduce = Tensor<double>(Shape{14, 7});
  std::ofstream(dir / "uniform.alphas.json") << serialize(a);
  for (const char* out : {"g1.genotype.json", "g2.genotype.json"})
    ASSERT_EQ(cli("derive " + q(dir / "uniform.alphas.json") + " -o " + q(dir / out)).status, 0);
  EXPECT_EQ(slurp(dir / "g1.genotype.json"), slurp(dir / "g2.genotype.json"));
  const Genotype g = load_genotype(dir / "g1.genotype.json");
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(g.normal[k][0], (Branch{0, "sep_conv_3x3"}));
    EXPECT_EQ(g.normal[k][1], (Branch{1, "sep_conv_3x3"}));
  }
}

TEST(Cli, ExportDotParses) {
  const fs::path dir = testing_support::scratch_dir("cli_dot");
  save_genotype(dir / "g.genotype.json", Genotype::uniform(OperatorKind::atrous_conv_3));
  const Invocation r = cli("export-dot " + q(dir / "g.genotype.json") + " -o " + q(dir / "g.dot"));
  ASSERT_EQ(r.status, 0) << r.output;
  const std::string text = slurp(dir / "g.dot");
  std::size_t graphs = 0;
  for (std::size_t pos = text.find("digraph"); pos != std::string::npos; pos = text.find("digraph", pos + 1)) {
    std::size_t end = text.find("\n}", pos);
    ASSERT_NE(end, std::string::npos);
    boost::adjacency_list<boost::vecS, boost::vecS, boost::directedS, boost::property<boost::vertex_name_t, std::string>>
        graph;
    boost::dynamic_properties dp(boost::ignore_other_properties);
    dp.property("node_id", get(boost::vertex_name, graph));
    std::istringstream in(text.substr(pos, end + 2 - pos));
    EXPECT_TRUE(boost::read_graphviz(in, graph, dp));
    EXPECT_EQ(boost::num_edges(graph), 12u);
    ++graphs;
  }
  EXPECT_EQ(graphs, 2u);
}

TEST(Cli, UntrainedEvalIsNearChance) {
  const fs::path dir = testing_support::scratch_dir("cli_eval");
  const fs::path cfg = tiny_config(dir, 4, 32, 0);
  save_genotype(dir / "g.genotype.json", Genotype::uniform(OperatorKind::sep_conv_3));
  const std::string geno_before = slurp(dir / "g.genotype.json");
  Invocation r = cli("train -q --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") + " --out-dir " +
              q(dir / "train"));
  ASSERT_EQ(r.status, 0) << r.output;
  r = cli("eval -q --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") + " --checkpoint " +
          q(dir / "train" / "run_00" / "model.ckpt") + " --split all --out-dir " + q(dir / "eval"));
  ASSERT_EQ(r.status, 0) << r.output;
  const ConfusionMatrix cm = read_cm_csv(dir / "eval" / "cm.csv");
  EXPECT_EQ(cm.total(), 128);
  EXPECT_NEAR(overall_accuracy(cm), 0.25, 0.15);
  const json rep = read_json(dir / "eval" / "oa_report.json");
  EXPECT_EQ(rep["metric"], "overall_accuracy");
  EXPECT_DOUBLE_EQ(rep["mean"].get<double>(), overall_accuracy(cm));
  EXPECT_EQ(slurp(dir / "g.genotype.json"), geno_before);
}

TEST(Cli, MultiRunReportMatchesSummaryAndEval) {
  const fs::path dir = testing_support::scratch_dir("cli_runs");
  const fs::path cfg = tiny_config(dir, 2, 16, 2);
  save_genotype(dir / "g.genotype.json", Genotype::uniform(OperatorKind::max_pool_3));
  Invocation r = cli("train -q --num-runs 3 --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") +
              " --out-dir " + q(dir / "train"));
  ASSERT_EQ(r.status, 0) << r.output;
  const json rep = read_json(dir / "train" / "oa_report.json");
  ASSERT_EQ(rep["runs"].size(), 3u);
  EXPECT_EQ(rep["num_runs"], 3);
  std::vector<double> oas;
  std::string ckpts;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string run = rep["runs"][i]["source"];
    oas.push_back(rep["runs"][i]["oa"]);
    EXPECT_DOUBLE_EQ(oas.back(), overall_accuracy(read_cm_csv(dir / "train" / run / "cm.csv")));
    ckpts += " --checkpoint " + q(dir / "train" / run / "model.ckpt");
  }
  const RunSummary s = summarize(oas);
  EXPECT_DOUBLE_EQ(rep["mean"].get<double>(), s.mean);
  EXPECT_DOUBLE_EQ(rep["std"].get<double>(), s.stddev);

  r = cli("eval -q --num-runs 3 --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") + ckpts +
          " --split test --out-dir " + q(dir / "eval"));
  ASSERT_EQ(r.status, 0) << r.output;
  const json ev = read_json(dir / "eval" / "oa_report.json");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(ev["runs"][i]["oa"].get<double>(), oas[i]);
  EXPECT_TRUE(fs::exists(dir / "eval" / "cm_02.csv"));
}

TEST(Cli, AblateReplaceOnAtrousFreeGenotypeEqualsTrain) {
  const fs::path dir = testing_support::scratch_dir("cli_ablate");
  const fs::path cfg = tiny_config(dir);
  save_genotype(dir / "g.genotype.json", Genotype::uniform(OperatorKind::sep_conv_5));
  ASSERT_EQ(cli("train -q --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") + " --out-dir " +
                q(dir / "plain")).status,
            0);
  const Invocation r = cli("ablate replace -q --config " + q(cfg) + " --genotype " + q(dir / "g.genotype.json") +
                    " --out-dir " + q(dir / "abl"));
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(slurp(dir / "abl" / "ablated.genotype.json"), slurp(dir / "g.genotype.json"));
  EXPECT_EQ(slurp(dir / "abl" / "train" / "run_00" / "model.ckpt"), slurp(dir / "plain" / "run_00" / "model.ckpt"));
  EXPECT_EQ(read_json(dir / "abl" / "train" / "oa_report.json")["mean"],
            read_json(dir / "plain" / "oa_report.json")["mean"]);
  EXPECT_EQ(read_json(dir / "abl" / "manifest.json")["mode"], "replace");
  EXPECT_EQ(cli("ablate replace -q --config " + q(cfg) + " --out-dir " + q(dir / "x")).status, 1);
}

TEST(Cli, AblateExcludeRecordsFiveOperatorMask) {
  const fs::path dir = testing_support::scratch_dir("cli_ablate_exclude");
  const Invocation r = cli("ablate exclude -q --config " + q(tiny_config(dir)) + " --out-dir " + q(dir / "abl"));
  ASSERT_EQ(r.status, 0) << r.output;
  const json m = read_json(dir / "abl" / "manifest.json");
  EXPECT_EQ(m["mode"], "exclude");
  EXPECT_EQ(m["operator_mask"],
            json({"sep_conv_3x3", "sep_conv_5x5", "avg_pool_3x3", "max_pool_3x3", "skip"}));
  EXPECT_TRUE(fs::exists(dir / "abl" / "search" / "best.genotype.json"));
  EXPECT_TRUE(fs::exists(dir / "abl" / "train" / "oa_report.json"));
}
