#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cellsearch/data.hpp"
#include "cellsearch/metrics.hpp"
#include "cellsearch/network.hpp"

namespace cellsearch {

enum class Schedule { cosine, exponential, constant };
std::string schedule_name(Schedule s);
Schedule parse_schedule(const std::string& name);

struct WeightOptConfig {
  double lr0 = 0.025;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  int epochs = 50;
  Schedule schedule = Schedule::cosine;
  double decay = 0.97;  // exponential schedule factor per epoch
  int batch_size = 64;
  std::optional<double> grad_clip = 5.0;

  static WeightOptConfig search_defaults();
  static WeightOptConfig final_defaults();
  void validate() const;
  /// Learning rate used throughout epoch `epoch` (0-based).
  double lr(int epoch) const;
};

enum class ArchOptimizerKind { adam, sgd };
enum class ArchLoss { validation, training };

struct ArchOptConfig {
  double lr = 3e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  ArchOptimizerKind kind = ArchOptimizerKind::adam;
  ArchLoss loss = ArchLoss::validation;

  void validate() const;
};

template <typename T>
struct SgdState {
  std::map<std::string, Tensor<T>> velocity;
};

/// One momentum step on every parameter of `store` at lr(epoch). Missing
/// gradients count as zero. Throws NumericError on non-finite gradients.
template <typename T>
void sgd_step(ParamStore<T>& store, SgdState<T>& state, const WeightOptConfig& config, int epoch);

/// Global L2 norm of all gradients in `store`.
template <typename T>
double grad_norm(const ParamStore<T>& store);

template <typename T>
struct ArchState {
  std::array<Tensor<double>, 2> m;
  std::array<Tensor<double>, 2> v;
  std::int64_t step = 0;
};

/// Applies one update to `alphas` from the gradients already stored in it.
template <typename T>
void arch_update(AlphaParams<T>& alphas, ArchState<T>& state, const ArchOptConfig& config);

struct StepResult {
  double loss = 0.0;
  int correct = 0;
  int count = 0;
};

/// Gradient of the batch loss with respect to the architecture coefficients
/// at the current weights, then arch_update. Weight gradients are cleared.
template <typename T>
StepResult arch_step(Network<T>& net, AlphaParams<T>& alphas, ArchState<T>& state, const ArchOptConfig& config,
                     const Batch<T>& batch);

/// Forward, backward and sgd_step on one batch.
template <typename T>
StepResult weight_step(Network<T>& net, AlphaParams<T>* alphas, SgdState<T>& state, const WeightOptConfig& config,
                       int epoch, const Batch<T>& batch);

struct EvalResult {
  double loss = 0.0;
  ConfusionMatrix cm;
};

/// Eval-mode pass over `data`; restores the previous mode afterwards.
template <typename T>
EvalResult evaluate(Network<T>& net, AlphaParams<T>* alphas, const Dataset& data, const NormStats& norm,
                    int batch_size);

struct SearchConfig {
  NetworkConfig network;
  WeightOptConfig weights = WeightOptConfig::search_defaults();
  ArchOptConfig arch;
  std::uint64_t seed = 0;
  std::function<void(const EpochRecord&, const Alphas&)> on_epoch;
};

struct SearchResult {
  std::vector<Alphas> trajectory;  // coefficients after each epoch
  std::vector<EpochRecord> records;
  Alphas best;
  int best_epoch = 0;
};

/// Alternating search: per training batch one weight step, then one
/// architecture step on a batch of the other half.
template <typename T>
SearchResult search(const SearchConfig& config, const Dataset& train, const Dataset& val, const NormStats& norm);

struct TrainConfig {
  NetworkConfig network;
  WeightOptConfig weights = WeightOptConfig::final_defaults();
  bool augment = true;
  std::uint64_t seed = 0;
  /// Called after every epoch; returning false ends training early.
  std::function<bool(const EpochRecord&)> on_epoch;
};

template <typename T>
struct TrainResult {
  Network<T> net;
  std::vector<EpochRecord> records;
};

/// Trains the fixed network of `genotype` from scratch. `val` feeds the
/// per-epoch validation columns.
template <typename T>
TrainResult<T> train_fixed(const Genotype& genotype, const TrainConfig& config, const Dataset& train,
                           const Dataset& val, const NormStats& norm);

}  // namespace cellsearch
