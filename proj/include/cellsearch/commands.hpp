#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cellsearch/genotype.hpp"
#include "cellsearch/metrics.hpp"
#include "cellsearch/run_config.hpp"

namespace cellsearch {

inline constexpr const char* kVersion = "0.1.0";

/// Builds the dataset named by `config` at `image_size` pixels.
Dataset load_dataset(const RunConfig& config, int image_size);

struct SearchOutputs {
  std::filesystem::path alphas;    // best.alphas.json
  std::filesystem::path genotype;  // best.genotype.json
  std::filesystem::path curves;    // curves.csv
  std::filesystem::path manifest;  // manifest.json
  Genotype best;
  std::vector<EpochRecord> records;
};

/// Search on the 50/50 split, derive from the best-validation coefficients.
SearchOutputs cmd_search(const RunConfig& config, std::ostream& log);

void cmd_derive(const std::filesystem::path& alphas, const std::filesystem::path& output);
void cmd_export_dot(const std::filesystem::path& genotype, const std::filesystem::path& output);

struct OaReport {
  std::vector<std::string> sources;  // run directory or checkpoint per entry
  RunSummary summary;
};
std::string serialize(const OaReport& report);
OaReport parse_oa_report(const std::string& text);

struct TrainOutputs {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::vector<EpochRecord>> records;  // per run
  OaReport report;
  std::filesystem::path manifest;
};

/// config.num_runs trainings of `genotype` from scratch, each evaluated on
/// the held-out part of the train.ratio split.
TrainOutputs cmd_train(const RunConfig& config, const Genotype& genotype, std::ostream& log);

enum class EvalSplit { train, test, all };
EvalSplit parse_eval_split(const std::string& name);

struct EvalOutputs {
  std::vector<ConfusionMatrix> matrices;
  OaReport report;
  std::filesystem::path manifest;
};

/// Evaluates checkpoints of `genotype` networks. Normalization statistics
/// come from norm_stats.json next to each checkpoint.
EvalOutputs cmd_eval(const RunConfig& config, const Genotype& genotype,
                     const std::vector<std::filesystem::path>& checkpoints, EvalSplit split, std::ostream& log);

enum class AblationMode { replace, exclude };
AblationMode parse_ablation_mode(const std::string& name);

struct AblateOutputs {
  Genotype genotype;  // the genotype that was trained
  std::optional<SearchOutputs> search;
  TrainOutputs train;
  std::filesystem::path manifest;
};

/// replace: swap atrous for separable convolutions in `genotype`, then
/// train. exclude: search without atrous operators, then train the result.
AblateOutputs cmd_ablate(const RunConfig& config, AblationMode mode, const std::optional<Genotype>& genotype,
                         std::ostream& log);

}  // namespace cellsearch
