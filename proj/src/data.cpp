#include "cellsearch/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"
#include "json.hpp"

namespace cellsearch {

namespace fs = std::filesystem;

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& item : items) counts.at(static_cast<std::size_t>(item.label))++;
  return counts;
}

void Dataset::validate() const {
  std::set<std::string> names(class_names.begin(), class_names.end());
  if (names.size() != class_names.size()) throw DataError("dataset has duplicate class names");
  const Shape expected{3, image_size, image_size};
  for (const auto& item : items) {
    if (item.label < 0 || item.label >= num_classes())
      throw DataError(item.source + ": label " + std::to_string(item.label) + " outside [0, " +
                      std::to_string(num_classes()) + ")");
    if (item.image.shape() != expected)
      throw DataError(item.source + ": image shape " + item.image.shape().str() + ", expected " + expected.str());
  }
}

Image read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataError(path.string() + ": not a readable PNG (" + img.message + ")");
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError(path.string() + ": PNG decode failed (" + msg + ")");
  }
  const std::int64_t h = img.height, w = img.width;
  Image out(Shape{3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        out[static_cast<std::size_t>((c * h + y) * w + x)] =
            static_cast<float>(buf[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
  return out;
}

void write_png(const fs::path& path, const Image& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_png expects (3,H,W), got " + image.shape().str());
  const std::int64_t h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> buf(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image[static_cast<std::size_t>((c * h + y) * w + x)], 0.0f, 1.0f);
        buf[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError(path.string() + ": PNG write failed (" + img.message + ")");
}

Dataset load_image_dir(const fs::path& root, int image_size) {
  if (image_size < 1) throw ArgumentError("image_size must be >= 1");
  if (!fs::is_directory(root)) throw DataError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError(root.string() + ": no class subdirectories");

  Dataset data;
  data.image_size = image_size;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    data.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c]))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError(class_dirs[c].string() + ": class has no images");
    for (const auto& f : files) {
      Image img = read_png(f);
      if (img.dim(1) != image_size || img.dim(2) != image_size) img = resize_bilinear(img, image_size, image_size);
      data.items.push_back({f.string(), static_cast<int>(c), std::move(img)});
    }
  }
  return data;
}

namespace {

float render_pattern(int pattern, double x, double y, double cx, double cy, double r, double period, double phase,
                     double angle) {
  const double dx = x - cx, dy = y - cy;
  const double dist = std::hypot(dx, dy);
  auto band = [](double v, double p) { return std::fmod(std::fmod(v / p, 2.0) + 2.0, 2.0) < 1.0; };
  switch (pattern) {
    case 0: return std::abs(dx) <= r && std::abs(dy) <= r ? 1.0f : 0.0f;
    case 1: return dist <= r ? 1.0f : 0.0f;
    case 2: return band(x + y + phase, period) ? 1.0f : 0.0f;
    case 3: return band(y + phase, period) ? 1.0f : 0.0f;
    case 4: return band(x + phase, period) != band(y + phase, period) ? 1.0f : 0.0f;
    case 5: {
      const double arm = 0.3 * r;
      const bool inside = std::abs(dx) <= r && std::abs(dy) <= r;
      return inside && (std::abs(dx) <= arm || std::abs(dy) <= arm) ? 1.0f : 0.0f;
    }
    case 6: return dist <= r && dist >= 0.6 * r ? 1.0f : 0.0f;
    default: {
      const double t = (std::cos(angle) * dx + std::sin(angle) * dy) / (2.0 * r) + 0.5;
      return static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
  }
}

}  // namespace

Dataset synthetic_shapes(int num_classes, int per_class, int size, std::uint64_t seed) {
  if (num_classes < 1 || num_classes > static_cast<int>(kSyntheticPatterns.size()))
    throw ArgumentError("synthetic num_classes must be in [1, 8], got " + std::to_string(num_classes));
  if (per_class < 1) throw ArgumentError("synthetic per_class must be >= 1");
  if (size < 8) throw ArgumentError("synthetic size must be >= 8, got " + std::to_string(size));
  Dataset data;
  data.image_size = size;
  for (int c = 0; c < num_classes; ++c) data.class_names.emplace_back(kSyntheticPatterns[static_cast<std::size_t>(c)]);
  const double s = size;
  for (int c = 0; c < num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      const std::string tag = std::to_string(seed) + ":" + std::to_string(c) + ":" + std::to_string(i);
      std::mt19937_64 rng(derive_seed(seed, "synthetic:" + tag));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double r = s * (0.22 + 0.12 * u(rng));
      const double cx = s / 2 + (u(rng) - 0.5) * (s - 2 * r) * 0.8;
      const double cy = s / 2 + (u(rng) - 0.5) * (s - 2 * r) * 0.8;
      const double period = s * (0.12 + 0.08 * u(rng));
      const double phase = u(rng) * 2 * period;
      const double angle = u(rng) * 2 * std::numbers::pi;
      std::array<double, 3> fg{}, bg{};
      for (std::size_t k = 0; k < 3; ++k) {
        fg[k] = 0.65 + 0.3 * u(rng);
        bg[k] = 0.05 + 0.25 * u(rng);
      }
      std::normal_distribution<double> noise(0.0, 0.05);
      Image img(Shape{3, size, size});
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double m = render_pattern(c, x + 0.5, y + 0.5, cx, cy, r, period, phase, angle);
          for (std::size_t k = 0; k < 3; ++k) {
            const double v = bg[k] + (fg[k] - bg[k]) * m + noise(rng);
            img[(k * static_cast<std::size_t>(size) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(size) +
                static_cast<std::size_t>(x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      data.items.push_back({"synthetic:" + tag, c, std::move(img)});
    }
  }
  return data;
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (height < 1 || width < 1) throw ArgumentError("resize target must be >= 1");
  if (image.rank() != 3) throw ShapeError("resize_bilinear expects (C,H,W), got " + image.shape().str());
  const std::int64_t ch = image.dim(0), ih = image.dim(1), iw = image.dim(2);
  Image out(Shape{ch, height, width});
  auto coord = [](std::int64_t dst, std::int64_t in, std::int64_t outn) {
    const double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    const double clamped = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(clamped));
    const std::int64_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, clamped - static_cast<double>(lo)};
  };
  for (std::int64_t y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = coord(y, ih, height);
    for (std::int64_t x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = coord(x, iw, width);
      for (std::int64_t c = 0; c < ch; ++c) {
        auto px = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(image[static_cast<std::size_t>((c * ih + yy) * iw + xx)]);
        };
        const double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
        const double bot = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
        out[static_cast<std::size_t>((c * height + y) * width + x)] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

Image hflip(const Image& image) {
  if (image.rank() != 3) throw ShapeError("hflip expects (C,H,W), got " + image.shape().str());
  Image out(image.shape());
  const std::int64_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::int64_t c = 0; c < ch; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[static_cast<std::size_t>((c * h + y) * w + x)] = image[static_cast<std::size_t>((c * h + y) * w + (w - 1 - x))];
  return out;
}

Image random_hflip(const Image& image, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  return coin(rng) ? hflip(image) : image;
}

NormStats compute_norm_stats(const Dataset& data) {
  if (data.items.empty()) throw ArgumentError("cannot compute normalization statistics of an empty dataset");
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& item : data.items) {
    const std::int64_t plane = item.image.dim(1) * item.image.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = item.image[c * static_cast<std::size_t>(plane) + static_cast<std::size_t>(i)];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += static_cast<double>(plane);
  }
  NormStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - s.mean[c] * s.mean[c]);
    s.std[c] = std::max(std::sqrt(var), 1e-6);
  }
  return s;
}

Image normalize(const Image& image, const NormStats& stats) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("normalize expects (3,H,W), got " + image.shape().str());
  Image out(image.shape());
  const std::int64_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < plane; ++i) {
      const std::size_t k = c * static_cast<std::size_t>(plane) + static_cast<std::size_t>(i);
      out[k] = static_cast<float>((image[k] - stats.mean[c]) / stats.std[c]);
    }
  return out;
}

std::string serialize(const NormStats& stats) {
  nlohmann::ordered_json j;
  j["mean"] = stats.mean;
  j["std"] = stats.std;
  return j.dump(2) + "\n";
}

NormStats parse_norm_stats(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("normalization stats: ") + e.what());
  }
  NormStats s;
  for (const char* key : {"mean", "std"}) {
    if (!j.is_object() || !j.contains(key) || !j[key].is_array() || j[key].size() != 3)
      throw ParseError(std::string("normalization stats: '") + key + "' must be an array of 3 numbers");
    for (std::size_t c = 0; c < 3; ++c) {
      if (!j[key][c].is_number()) throw ParseError(std::string("normalization stats: '") + key + "' entries must be numbers");
      (std::string(key) == "mean" ? s.mean : s.std)[c] = j[key][c].get<double>();
    }
  }
  for (double v : s.std)
    if (!(v > 0)) throw ParseError("normalization stats: 'std' entries must be positive");
  return s;
}

void save_norm_stats(const fs::path& path, const NormStats& stats) { write_text_file_atomic(path, serialize(stats)); }

NormStats load_norm_stats(const fs::path& path) { return parse_norm_stats(read_text_file(path)); }

std::pair<Dataset, Dataset> split(const Dataset& data, const SplitSpec& spec) {
  if (spec.kind == SplitKind::train_ratio && !(spec.ratio > 0.0 && spec.ratio < 1.0))
    throw ArgumentError("split ratio must be in (0, 1), got " + std::to_string(spec.ratio));
  const int k = data.num_classes();
  std::vector<std::vector<std::size_t>> per_class(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < data.items.size(); ++i)
    per_class.at(static_cast<std::size_t>(data.items[i].label)).push_back(i);

  std::vector<char> in_first(data.items.size(), 0);
  for (int c = 0; c < k; ++c) {
    auto& idx = per_class[static_cast<std::size_t>(c)];
    const std::size_t n = idx.size();
    if (n < 2)
      throw DataError("class '" + data.class_names[static_cast<std::size_t>(c)] + "' has " + std::to_string(n) +
                      " item(s); splitting needs at least 2");
    std::size_t first = 0;
    if (spec.kind == SplitKind::search_half) {
      first = (n + 1) / 2;
    } else {
      first = static_cast<std::size_t>(std::floor(spec.ratio * static_cast<double>(n) + 1e-9));
      first = std::clamp<std::size_t>(first, 1, n - 1);
    }
    std::mt19937_64 rng(derive_seed(spec.seed, "split:" + std::to_string(c)));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < first; ++j) in_first[idx[j]] = 1;
  }

  Dataset a, b;
  a.class_names = b.class_names = data.class_names;
  a.image_size = b.image_size = data.image_size;
  for (std::size_t i = 0; i < data.items.size(); ++i) (in_first[i] ? a : b).items.push_back(data.items[i]);
  return {std::move(a), std::move(b)};
}

Dataset take_per_class(const Dataset& data, int per_class) {
  Dataset out;
  out.class_names = data.class_names;
  out.image_size = data.image_size;
  std::vector<int> taken(data.class_names.size(), 0);
  for (const auto& item : data.items)
    if (taken[static_cast<std::size_t>(item.label)]++ < per_class) out.items.push_back(item);
  return out;
}

template <typename T>
BatchStream<T>::BatchStream(const Dataset& data, BatchOptions options)
    : data_(&data),
      options_(std::move(options)),
      augment_rng_(derive_seed(options_.augment_seed, "augment:" + std::to_string(options_.epoch))) {
  if (options_.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  order_.resize(data.items.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (options_.shuffle) {
    std::mt19937_64 rng(derive_seed(options_.shuffle_seed, "epoch:" + std::to_string(options_.epoch)));
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

template <typename T>
std::size_t BatchStream<T>::num_batches() const {
  const auto b = static_cast<std::size_t>(options_.batch_size);
  return (order_.size() + b - 1) / b;
}

template <typename T>
std::optional<Batch<T>> BatchStream<T>::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(options_.batch_size));
  const std::int64_t n = static_cast<std::int64_t>(end - cursor_);
  const std::int64_t s = data_->image_size;
  Batch<T> batch;
  batch.images = Tensor<T>(Shape{n, 3, s, s});
  const auto per_image = static_cast<std::size_t>(3 * s * s);
  for (std::size_t j = cursor_; j < end; ++j) {
    const DataItem& item = data_->items[order_[j]];
    Image img = options_.augment ? random_hflip(item.image, augment_rng_) : item.image;
    if (options_.norm) img = normalize(img, *options_.norm);
    std::copy(img.data().begin(), img.data().end(), batch.images.data().begin() + static_cast<std::ptrdiff_t>((j - cursor_) * per_image));
    batch.labels.push_back(item.label);
    batch.indices.push_back(order_[j]);
  }
  cursor_ = end;
  return batch;
}

template class BatchStream<float>;
template class BatchStream<double>;

}  // namespace cellsearch
