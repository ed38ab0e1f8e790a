#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellsearch/optimizer.hpp"

namespace cellsearch {

struct DatasetSource {
  std::string kind = "synthetic";  // "synthetic" or "directory"
  std::string root;                // directory datasets only
  int num_classes = 4;             // synthetic only
  int per_class = 128;             // synthetic only
  std::uint64_t seed = 0;          // synthetic rendering seed
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  int num_runs = 3;
  std::string precision = "f32";
  DatasetSource dataset;

  int num_cells = 6;
  int init_channels = 16;
  std::vector<int> reduce_positions;

  WeightOptConfig search = WeightOptConfig::search_defaults();
  int search_image_size = 32;
  bool exclude_atrous = false;
  ArchOptConfig arch;

  WeightOptConfig train = WeightOptConfig::final_defaults();
  int train_image_size = 32;
  bool augment = true;
  double train_ratio = 0.8;

  /// Network plan for `num_classes` classes at `input_size` pixels.
  NetworkConfig network(int num_classes, int input_size) const;
  OperatorMask operator_mask() const;
  void validate() const;
};

/// The full configuration as JSON, every key present.
std::string to_json(const RunConfig& config);
RunConfig parse_run_config(const std::string& text);

/// Defaults, overlaid by the file at `path` (if any), then by each
/// "section.key=value" override. Unknown keys are rejected.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides = {});

}  // namespace cellsearch
