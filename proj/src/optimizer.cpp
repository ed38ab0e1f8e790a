#include "cellsearch/optimizer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"
#include "cellsearch/ops.hpp"

namespace cellsearch {

std::string schedule_name(Schedule s) {
  switch (s) {
    case Schedule::cosine: return "cosine";
    case Schedule::exponential: return "exponential";
    case Schedule::constant: return "constant";
  }
  throw InternalError("unhandled schedule");
}

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "exponential") return Schedule::exponential;
  if (name == "constant") return Schedule::constant;
  throw ArgumentError("unknown schedule '" + name + "' (expected cosine, exponential or constant)");
}

WeightOptConfig WeightOptConfig::search_defaults() { return {}; }

WeightOptConfig WeightOptConfig::final_defaults() {
  WeightOptConfig c;
  c.lr0 = 0.1;
  c.epochs = 150;
  c.schedule = Schedule::exponential;
  c.grad_clip.reset();
  return c;
}

void WeightOptConfig::validate() const {
  if (!(lr0 > 0)) throw ArgumentError("lr0 must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ArgumentError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ArgumentError("weight_decay must be >= 0");
  if (epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(decay > 0 && decay <= 1)) throw ArgumentError("decay must be in (0, 1]");
  if (grad_clip && !(*grad_clip > 0)) throw ArgumentError("grad_clip must be > 0");
}

double WeightOptConfig::lr(int epoch) const {
  switch (schedule) {
    case Schedule::cosine:
      if (epochs <= 0) return lr0;
      return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(epochs)));
    case Schedule::exponential: return lr0 * std::pow(decay, epoch);
    case Schedule::constant: return lr0;
  }
  throw InternalError("unhandled schedule");
}

void ArchOptConfig::validate() const {
  if (!(lr >= 0)) throw ArgumentError("arch lr must be >= 0");
  if (!(weight_decay >= 0)) throw ArgumentError("arch weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ArgumentError("arch betas must be in [0, 1)");
  if (!(eps > 0)) throw ArgumentError("arch eps must be > 0");
}

template <typename T>
double grad_norm(const ParamStore<T>& store) {
  double sq = 0.0;
  for (const auto& [name, p] : store.params())
    for (T g : p.grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

template <typename T>
void sgd_step(ParamStore<T>& store, SgdState<T>& state, const WeightOptConfig& config, int epoch) {
  for (const auto& [name, p] : store.params())
    if (p.has_grad() && !p.grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + name + "'");
  double scale = 1.0;
  if (config.grad_clip) {
    const double norm = grad_norm(store);
    if (norm > *config.grad_clip) scale = *config.grad_clip / norm;
  }
  const double lr = config.lr(epoch);
  for (auto& [name, p] : store.params()) {
    auto [it, inserted] = state.velocity.try_emplace(name, p.value.shape());
    Tensor<T>& v = it->second;
    auto w = p.value.data();
    auto vel = v.data();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? static_cast<double>(p.grad[i]) * scale : 0.0;
      const double vi = config.momentum * static_cast<double>(vel[i]) + g + config.weight_decay * static_cast<double>(w[i]);
      vel[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * vi);
    }
  }
}

template <typename T>
void arch_update(AlphaParams<T>& alphas, ArchState<T>& state, const ArchOptConfig& config) {
  ++state.step;
  for (std::size_t k = 0; k < 2; ++k) {
    Parameter<T>& p = alphas.of(k == 0 ? CellKind::normal : CellKind::reduce);
    if (p.has_grad() && !p.grad.all_finite()) throw NumericError("non-finite gradient in architecture coefficients");
    if (state.m[k].shape() != p.value.shape()) {
      state.m[k] = Tensor<double>(p.value.shape());
      state.v[k] = Tensor<double>(p.value.shape());
    }
    auto a = p.value.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double g = p.has_grad() ? static_cast<double>(p.grad[i]) : 0.0;
      const double x = static_cast<double>(a[i]);
      double next = x;
      if (config.kind == ArchOptimizerKind::adam) {
        double& m = state.m[k][i];
        double& v = state.v[k][i];
        m = config.beta1 * m + (1 - config.beta1) * g;
        v = config.beta2 * v + (1 - config.beta2) * g * g;
        const double mhat = m / (1 - std::pow(config.beta1, static_cast<double>(state.step)));
        const double vhat = v / (1 - std::pow(config.beta2, static_cast<double>(state.step)));
        next = x - config.lr * (mhat / (std::sqrt(vhat) + config.eps) + config.weight_decay * x);
      } else {
        next = x - config.lr * (g + config.weight_decay * x);
      }
      a[i] = static_cast<T>(next);
    }
  }
}

namespace {

template <typename T>
int count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  int correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (logits[static_cast<std::size_t>(i * k + j)] > logits[static_cast<std::size_t>(i * k + best)]) best = j;
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

}  // namespace

template <typename T>
StepResult arch_step(Network<T>& net, AlphaParams<T>& alphas, ArchState<T>& state, const ArchOptConfig& config,
                     const Batch<T>& batch) {
  if (!net.is_relaxed()) throw ArgumentError("architecture step needs a relaxed network");
  alphas.zero_grad();
  Tape<T> tape;
  const Var<T> logits = net.forward(tape, batch.images, &alphas);
  const Var<T> loss = ops::cross_entropy(logits, std::span<const int>(batch.labels));
  tape.backward(loss);
  net.params().zero_grad();
  arch_update(alphas, state, config);
  return {static_cast<double>(loss.value()[0]), count_correct(logits.value(), batch.labels),
          static_cast<int>(batch.labels.size())};
}

template <typename T>
StepResult weight_step(Network<T>& net, AlphaParams<T>* alphas, SgdState<T>& state, const WeightOptConfig& config,
                       int epoch, const Batch<T>& batch) {
  net.params().zero_grad();
  Tape<T> tape;
  const Var<T> logits = net.forward(tape, batch.images, alphas);
  const Var<T> loss = ops::cross_entropy(logits, std::span<const int>(batch.labels));
  tape.backward(loss);
  sgd_step(net.params(), state, config, epoch);
  if (alphas) alphas->zero_grad();
  return {static_cast<double>(loss.value()[0]), count_correct(logits.value(), batch.labels),
          static_cast<int>(batch.labels.size())};
}

template <typename T>
EvalResult evaluate(Network<T>& net, AlphaParams<T>* alphas, const Dataset& data, const NormStats& norm,
                    int batch_size) {
  if (data.items.empty()) throw ArgumentError("cannot evaluate on an empty dataset");
  const Mode before = net.params().mode();
  net.set_mode(Mode::eval);
  EvalResult result{0.0, ConfusionMatrix(data.class_names)};
  BatchOptions opt;
  opt.batch_size = batch_size;
  opt.shuffle = false;
  opt.norm = norm;
  BatchStream<T> stream(data, opt);
  double loss_sum = 0.0;
  while (auto batch = stream.next()) {
    Tape<T> tape;
    const Var<T> logits = net.forward(tape, batch->images, alphas);
    const Var<T> loss = ops::cross_entropy(logits, std::span<const int>(batch->labels));
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(batch->labels.size());
    const Tensor<T>& out = logits.value();
    const std::int64_t k = out.dim(1);
    for (std::size_t i = 0; i < batch->labels.size(); ++i) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j)
        if (out[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] >
            out[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(best)])
          best = j;
      result.cm.add(batch->labels[i], static_cast<int>(best));
    }
  }
  result.loss = loss_sum / static_cast<double>(data.items.size());
  net.set_mode(before);
  return result;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Endless sequence of shuffled passes over one dataset.
template <typename T>
class CyclingBatches {
 public:
  CyclingBatches(const Dataset& data, int batch_size, std::uint64_t seed, const NormStats& norm)
      : data_(data), seed_(seed), norm_(norm), batch_size_(batch_size) {}

  Batch<T> next() {
    for (;;) {
      if (!stream_) {
        BatchOptions opt;
        opt.batch_size = batch_size_;
        opt.shuffle_seed = seed_;
        opt.epoch = cycle_++;
        opt.norm = norm_;
        stream_.emplace(data_, opt);
      }
      if (auto b = stream_->next()) return std::move(*b);
      stream_.reset();
    }
  }

 private:
  const Dataset& data_;
  std::uint64_t seed_;
  NormStats norm_;
  int batch_size_;
  int cycle_ = 0;
  std::optional<BatchStream<T>> stream_;
};

}  // namespace

template <typename T>
SearchResult search(const SearchConfig& config, const Dataset& train, const Dataset& val, const NormStats& norm) {
  if (train.items.empty() || val.items.empty()) throw ArgumentError("search needs non-empty training and validation halves");
  if (train.num_classes() != config.network.num_classes)
    throw ArgumentError("network.num_classes is " + std::to_string(config.network.num_classes) + " but the dataset has " +
                        std::to_string(train.num_classes()) + " classes");
  config.weights.validate();
  config.arch.validate();

  Network<T> net = Network<T>::relaxed(config.network, derive_seed(config.seed, "init"));
  AlphaParams<T> alphas(config.network.operator_mask, derive_seed(config.seed, "alpha"));
  SgdState<T> sgd;
  ArchState<T> arch;
  const bool arch_on_train = config.arch.loss == ArchLoss::training;
  CyclingBatches<T> arch_batches(arch_on_train ? train : val, config.weights.batch_size,
                                 derive_seed(config.seed, arch_on_train ? "shuffle:arch-train" : "shuffle:val"), norm);

  SearchResult result;
  double best_acc = -1.0;
  for (int epoch = 0; epoch < config.weights.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    net.set_mode(Mode::train);
    BatchOptions opt;
    opt.batch_size = config.weights.batch_size;
    opt.shuffle_seed = derive_seed(config.seed, "shuffle:train");
    opt.epoch = epoch;
    opt.norm = norm;
    BatchStream<T> stream(train, opt);
    double loss_sum = 0.0;
    int correct = 0, count = 0;
    while (auto batch = stream.next()) {
      const StepResult s = weight_step(net, &alphas, sgd, config.weights, epoch, *batch);
      loss_sum += s.loss * s.count;
      correct += s.correct;
      count += s.count;
      arch_step(net, alphas, arch, config.arch, arch_batches.next());
    }
    const EvalResult ev = evaluate(net, &alphas, val, norm, config.weights.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / count;
    rec.train_acc = static_cast<double>(correct) / count;
    rec.val_loss = ev.loss;
    rec.val_acc = overall_accuracy(ev.cm);
    rec.lr = config.weights.lr(epoch);
    rec.seconds = seconds_since(start);
    Alphas snap = alphas.snapshot();
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      result.best = snap;
      result.best_epoch = epoch;
    }
    result.records.push_back(rec);
    result.trajectory.push_back(snap);
    if (config.on_epoch) config.on_epoch(rec, snap);
  }
  if (result.records.empty()) result.best = alphas.snapshot();
  return result;
}

template <typename T>
TrainResult<T> train_fixed(const Genotype& genotype, const TrainConfig& config, const Dataset& train,
                           const Dataset& val, const NormStats& norm) {
  if (train.items.empty()) throw ArgumentError("training set is empty");
  if (train.num_classes() != config.network.num_classes)
    throw ArgumentError("network.num_classes is " + std::to_string(config.network.num_classes) + " but the dataset has " +
                        std::to_string(train.num_classes()) + " classes");
  config.weights.validate();
  TrainResult<T> result{Network<T>::fixed(config.network, genotype, derive_seed(config.seed, "init")), {}};
  Network<T>& net = result.net;
  SgdState<T> sgd;
  for (int epoch = 0; epoch < config.weights.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    net.set_mode(Mode::train);
    BatchOptions opt;
    opt.batch_size = config.weights.batch_size;
    opt.shuffle_seed = derive_seed(config.seed, "shuffle:train");
    opt.epoch = epoch;
    opt.augment = config.augment;
    opt.augment_seed = derive_seed(config.seed, "augment");
    opt.norm = norm;
    BatchStream<T> stream(train, opt);
    double loss_sum = 0.0;
    int correct = 0, count = 0;
    while (auto batch = stream.next()) {
      const StepResult s = weight_step(net, static_cast<AlphaParams<T>*>(nullptr), sgd, config.weights, epoch, *batch);
      loss_sum += s.loss * s.count;
      correct += s.correct;
      count += s.count;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / count;
    rec.train_acc = static_cast<double>(correct) / count;
    if (!val.items.empty()) {
      const EvalResult ev = evaluate(net, static_cast<AlphaParams<T>*>(nullptr), val, norm, config.weights.batch_size);
      rec.val_loss = ev.loss;
      rec.val_acc = overall_accuracy(ev.cm);
    }
    rec.lr = config.weights.lr(epoch);
    rec.seconds = seconds_since(start);
    result.records.push_back(rec);
    if (config.on_epoch && !config.on_epoch(rec)) break;
  }
  net.set_mode(Mode::eval);
  return result;
}

#define CELLSEARCH_INSTANTIATE_OPTIMIZER(T)                                                                  \
  template double grad_norm(const ParamStore<T>&);                                                           \
  template void sgd_step(ParamStore<T>&, SgdState<T>&, const WeightOptConfig&, int);                         \
  template void arch_update(AlphaParams<T>&, ArchState<T>&, const ArchOptConfig&);                           \
  template StepResult arch_step(Network<T>&, AlphaParams<T>&, ArchState<T>&, const ArchOptConfig&,           \
                                const Batch<T>&);                                                            \
  template StepResult weight_step(Network<T>&, AlphaParams<T>*, SgdState<T>&, const WeightOptConfig&, int, \
                                  const Batch<T>&);                                                          \
  template EvalResult evaluate(Network<T>&, AlphaParams<T>*, const Dataset&, const NormStats&, int);        \
  template SearchResult search<T>(const SearchConfig&, const Dataset&, const Dataset&, const NormStats&);    \
  template TrainResult<T> train_fixed(const Genotype&, const TrainConfig&, const Dataset&, const Dataset&,   \
                                      const NormStats&);

CELLSEARCH_INSTANTIATE_OPTIMIZER(float)
CELLSEARCH_INSTANTIATE_OPTIMIZER(double)

}  // namespace cellsearch
