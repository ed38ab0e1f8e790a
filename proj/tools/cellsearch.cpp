// cellsearch: architecture search, training and evaluation driver.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cellsearch/commands.hpp"

namespace fs = std::filesystem;
using namespace cellsearch;

namespace {

struct Common {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> num_runs;
  std::optional<std::string> precision;
  bool exclude_atrous = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--set", c.sets, "Override one key, e.g. search.epochs=5")->allow_extra_args(false);
  cmd->add_option("--seed", c.seed, "Global seed");
  cmd->add_option("--out-dir", c.out_dir, "Output directory");
  cmd->add_option("--num-runs", c.num_runs, "Independent training runs");
  cmd->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_flag("--exclude-atrous", c.exclude_atrous, "Search without atrous convolutions");
  cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
}

RunConfig resolve(const Common& c) {
  std::vector<std::string> sets = c.sets;
  if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
  if (c.num_runs) sets.push_back("num_runs=" + std::to_string(*c.num_runs));
  if (c.precision) sets.push_back("precision=\"" + *c.precision + "\"");
  if (c.exclude_atrous) sets.push_back("search.exclude_atrous=true");
  RunConfig config = load_run_config(c.config ? std::optional<fs::path>(*c.config) : std::nullopt, sets);
  if (c.out_dir) config.out_dir = *c.out_dir;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable cell search for scene classification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  std::string alphas_path, genotype_path, output, split_name = "test", mode_name;
  std::vector<std::string> checkpoints;

  auto* search = app.add_subcommand("search", "Bi-level search; writes best alphas, genotype, curves and manifest");
  add_common(search, common);

  auto* derive = app.add_subcommand("derive", "Discretize an alphas file into a genotype");
  derive->add_option("alphas", alphas_path, "*.alphas.json")->required()->check(CLI::ExistingFile);
  derive->add_option("-o,--output", output, "Output genotype file")->required();

  auto* train = app.add_subcommand("train", "Train a genotype from scratch and report overall accuracy");
  add_common(train, common);
  train->add_option("--genotype", genotype_path, "*.genotype.json")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints; writes confusion matrices and an OA report");
  add_common(eval, common);
  eval->add_option("--genotype", genotype_path, "*.genotype.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoints, "Checkpoint file (repeatable)")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split_name, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));

  auto* ablate = app.add_subcommand("ablate", "Atrous ablation: replace (needs --genotype) or exclude");
  add_common(ablate, common);
  ablate->add_option("mode", mode_name, "replace or exclude")->required()->check(CLI::IsMember({"replace", "exclude"}));
  ablate->add_option("--genotype", genotype_path, "*.genotype.json")->check(CLI::ExistingFile);

  auto* show = app.add_subcommand("config", "Print the resolved run configuration");
  add_common(show, common);

  auto* dot = app.add_subcommand("export-dot", "Render a genotype as DOT text");
  dot->add_option("genotype", genotype_path, "*.genotype.json")->required()->check(CLI::ExistingFile);
  dot->add_option("-o,--output", output, "Output .dot file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  std::ostream null_stream(nullptr);
  std::ostream& log = common.quiet ? null_stream : std::clog;
  try {
    if (search->parsed()) {
      const auto out = cmd_search(resolve(common), log);
      std::cout << out.genotype.string() << "\n";
    } else if (derive->parsed()) {
      cmd_derive(alphas_path, output);
    } else if (train->parsed()) {
      const auto out = cmd_train(resolve(common), load_genotype(genotype_path), log);
      std::cout << "overall accuracy " << out.report.summary.mean << " +- " << out.report.summary.stddev << " over "
                << out.report.summary.values.size() << " run(s)\n";
    } else if (eval->parsed()) {
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      const auto out = cmd_eval(resolve(common), load_genotype(genotype_path), paths, parse_eval_split(split_name), log);
      std::cout << "overall accuracy " << out.report.summary.mean << " +- " << out.report.summary.stddev << " over "
                << out.report.summary.values.size() << " checkpoint(s)\n";
    } else if (ablate->parsed()) {
      std::optional<Genotype> g;
      if (!genotype_path.empty()) g = load_genotype(genotype_path);
      const auto out = cmd_ablate(resolve(common), parse_ablation_mode(mode_name), g, log);
      std::cout << "overall accuracy " << out.train.report.summary.mean << " +- " << out.train.report.summary.stddev
                << "\n";
    } else if (show->parsed()) {
      std::cout << to_json(resolve(common));
    } else if (dot->parsed()) {
      cmd_export_dot(genotype_path, output);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}
