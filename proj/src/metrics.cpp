#include "cellsearch/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"

namespace cellsearch {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : names_(std::move(class_names)), counts_(names_.size() * names_.size(), 0) {
  if (names_.empty()) throw ArgumentError("confusion matrix needs at least one class");
}

std::int64_t ConfusionMatrix::at(int truth, int predicted) const {
  const int k = num_classes();
  if (truth < 0 || truth >= k || predicted < 0 || predicted >= k)
    throw ArgumentError("confusion matrix index out of range");
  return counts_[static_cast<std::size_t>(truth * k + predicted)];
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int i = 0; i < num_classes(); ++i) t += at(i, i);
  return t;
}

void ConfusionMatrix::add(int truth, int predicted) {
  const int k = num_classes();
  if (truth < 0 || truth >= k) throw ArgumentError("true label " + std::to_string(truth) + " outside [0, " + std::to_string(k) + ")");
  if (predicted < 0 || predicted >= k)
    throw ArgumentError("predicted label " + std::to_string(predicted) + " outside [0, " + std::to_string(k) + ")");
  counts_[static_cast<std::size_t>(truth * k + predicted)]++;
}

void ConfusionMatrix::accumulate(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size())
    throw ArgumentError("label lists differ in length: " + std::to_string(truth.size()) + " vs " +
                        std::to_string(predicted.size()));
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.names_ != names_) throw ArgumentError("cannot merge confusion matrices over different classes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ArgumentError("overall accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

std::string to_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true";
  for (const auto& n : cm.class_names()) out << ',' << n;
  out << '\n';
  for (int t = 0; t < cm.num_classes(); ++t) {
    out << cm.class_names()[static_cast<std::size_t>(t)];
    for (int p = 0; p < cm.num_classes(); ++p) out << ',' << cm.at(t, p);
    out << '\n';
  }
  return out.str();
}

namespace {
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}
}  // namespace

ConfusionMatrix parse_cm_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("confusion matrix csv: empty input");
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "true") throw ParseError("confusion matrix csv line 1: expected 'true,<classes...>'");
  std::vector<std::string> names(header.begin() + 1, header.end());
  ConfusionMatrix cm(names);
  const int k = cm.num_classes();
  for (int t = 0; t < k; ++t) {
    if (!std::getline(in, line)) throw ParseError("confusion matrix csv: missing row for class '" + names[static_cast<std::size_t>(t)] + "'");
    const auto cells = split_csv_line(line);
    const std::string where = "confusion matrix csv line " + std::to_string(t + 2) + ": ";
    if (cells.size() != static_cast<std::size_t>(k) + 1) throw ParseError(where + "expected " + std::to_string(k + 1) + " fields");
    if (cells[0] != names[static_cast<std::size_t>(t)]) throw ParseError(where + "row label '" + cells[0] + "' out of order");
    for (int p = 0; p < k; ++p) {
      long long v = 0;
      std::size_t used = 0;
      try {
        v = std::stoll(cells[static_cast<std::size_t>(p) + 1], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[static_cast<std::size_t>(p) + 1].size() || v < 0)
        throw ParseError(where + "count '" + cells[static_cast<std::size_t>(p) + 1] + "' is not a non-negative integer");
      for (long long i = 0; i < v; ++i) cm.add(t, p);
    }
  }
  return cm;
}

void write_cm_csv(const ConfusionMatrix& cm, const std::filesystem::path& path) { write_text_file_atomic(path, to_csv(cm)); }

ConfusionMatrix read_cm_csv(const std::filesystem::path& path) { return parse_cm_csv(read_text_file(path)); }

RunSummary summarize(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("summarize needs at least one value");
  RunSummary s;
  s.values.assign(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

std::string curves_csv(std::span<const EpochRecord> records) {
  std::string out = std::string(kCurvesHeader) + "\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.epoch, r.train_loss, r.train_acc,
                  r.val_loss, r.val_acc, r.lr, r.seconds);
    out += buf;
  }
  return out;
}

void write_curves_csv(std::span<const EpochRecord> records, const std::filesystem::path& path) {
  write_text_file_atomic(path, curves_csv(records));
}

std::vector<EpochRecord> parse_curves_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCurvesHeader) throw ParseError("curves csv line 1: unexpected header");
  std::vector<EpochRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 7) throw ParseError("curves csv line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      out.push_back({std::stoi(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                     std::stod(cells[4]), std::stod(cells[5]), std::stod(cells[6])});
    } catch (const std::exception&) {
      throw ParseError("curves csv line " + std::to_string(lineno) + ": non-numeric field");
    }
  }
  return out;
}

}  // namespace cellsearch
