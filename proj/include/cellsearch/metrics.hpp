#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cellsearch {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::vector<std::string> class_names);

  int num_classes() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& class_names() const { return names_; }
  std::int64_t at(int truth, int predicted) const;
  std::int64_t total() const;
  std::int64_t trace() const;

  void add(int truth, int predicted);
  void accumulate(std::span<const int> truth, std::span<const int> predicted);
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<std::int64_t> counts_;
};

double overall_accuracy(const ConfusionMatrix& cm);

std::string to_csv(const ConfusionMatrix& cm);
ConfusionMatrix parse_cm_csv(const std::string& text);
void write_cm_csv(const ConfusionMatrix& cm, const std::filesystem::path& path);
ConfusionMatrix read_cm_csv(const std::filesystem::path& path);

struct RunSummary {
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1) deviation, 0 for a single run
};
RunSummary summarize(std::span<const double> values);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kCurvesHeader = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds";
std::string curves_csv(std::span<const EpochRecord> records);
void write_curves_csv(std::span<const EpochRecord> records, const std::filesystem::path& path);
std::vector<EpochRecord> parse_curves_csv(const std::string& text);

}  // namespace cellsearch
