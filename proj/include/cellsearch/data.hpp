#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cellsearch/tensor.hpp"

namespace cellsearch {

// Images are (3, H, W) float tensors with values in [0, 1].
using Image = Tensor<float>;

struct DataItem {
  std::string source;  // file path, or "synthetic:<seed>:<class>:<index>"
  int label = 0;
  Image image;
};

struct Dataset {
  std::vector<std::string> class_names;
  int image_size = 0;
  std::vector<DataItem> items;

  std::size_t size() const { return items.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> class_counts() const;
  /// Throws DataError on out-of-range labels, duplicate class names or
  /// wrongly sized images.
  void validate() const;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// root/<class>/<file>.png; classes ranked lexicographically, items sorted
/// by path. Every image is resized to image_size x image_size.
Dataset load_image_dir(const std::filesystem::path& root, int image_size);

/// Procedural stand-in dataset. Class c draws pattern c of
/// kSyntheticPatterns with jittered placement and additive noise.
inline constexpr std::array<const char*, 8> kSyntheticPatterns = {
    "filled_square", "circle", "diagonal_stripes", "horizontal_stripes",
    "checkerboard",  "cross",  "ring",             "gradient"};
Dataset synthetic_shapes(int num_classes, int per_class, int size, std::uint64_t seed);

/// Half-pixel-centre bilinear resampling, edges clamped.
Image resize_bilinear(const Image& image, int height, int width);
Image hflip(const Image& image);
/// Flips with probability 0.5.
Image random_hflip(const Image& image, std::mt19937_64& rng);

struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};
NormStats compute_norm_stats(const Dataset& data);
Image normalize(const Image& image, const NormStats& stats);
std::string serialize(const NormStats& stats);
NormStats parse_norm_stats(const std::string& text);
void save_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats load_norm_stats(const std::filesystem::path& path);

enum class SplitKind { search_half, train_ratio };

struct SplitSpec {
  SplitKind kind = SplitKind::search_half;
  double ratio = 0.5;  // train_ratio only
  std::uint64_t seed = 0;
};

/// Stratified exact partition into (first, second). Per class, search_half
/// puts ceil(n/2) items in the first part and train_ratio floor(r*n).
std::pair<Dataset, Dataset> split(const Dataset& data, const SplitSpec& spec);

/// Keeps at most `per_class` items of every class, in dataset order.
Dataset take_per_class(const Dataset& data, int per_class);

template <typename T>
struct Batch {
  Tensor<T> images;  // (N, 3, S, S)
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the dataset
};

struct BatchOptions {
  int batch_size = 64;
  bool shuffle = true;
  std::uint64_t shuffle_seed = 0;
  int epoch = 0;
  bool augment = false;
  std::uint64_t augment_seed = 0;
  std::optional<NormStats> norm;
};

/// Batches of one pass over a dataset. The order depends only on
/// (shuffle_seed, epoch); the last partial batch is kept.
template <typename T>
class BatchStream {
 public:
  BatchStream(const Dataset& data, BatchOptions options);

  std::size_t num_batches() const;
  const std::vector<std::size_t>& order() const { return order_; }
  std::optional<Batch<T>> next();

 private:
  const Dataset* data_;
  BatchOptions options_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 augment_rng_;
};

}  // namespace cellsearch
