#include "cellsearch/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"
#include "json.hpp"

namespace cellsearch {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string two_digits(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", i);
  return buf;
}

// Written once, atomically, after every artifact of a command exists.
class Manifest {
 public:
  Manifest(std::string command, const RunConfig& config)
      : command_(std::move(command)), config_(to_json(config)), started_(utc_now()),
        clock_(std::chrono::steady_clock::now()) {}

  void add(const fs::path& file, const std::string& stage) { files_.push_back({file, stage}); }
  void note(const std::string& key, ordered_json value) { extra_[key] = std::move(value); }

  fs::path write(const fs::path& dir) const {
    ordered_json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["config"] = ordered_json::parse(config_);
    j["seed"] = j["config"]["seed"];
    j["started"] = started_;
    j["finished"] = utc_now();
    j["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    ordered_json files = ordered_json::array();
    for (const auto& [path, stage] : files_)
      files.push_back({{"path", fs::relative(path, dir).generic_string()}, {"stage", stage}, {"sha256", sha256_file(path)}});
    j["files"] = files;
    const fs::path out = dir / "manifest.json";
    write_text_file_atomic(out, j.dump(2) + "\n");
    return out;
  }

 private:
  std::string command_;
  std::string config_;
  std::string started_;
  std::chrono::steady_clock::time_point clock_;
  ordered_json extra_ = ordered_json::object();
  std::vector<std::pair<fs::path, std::string>> files_;
};

ordered_json mask_json(const OperatorMask& mask) {
  ordered_json names = ordered_json::array();
  for (const auto& n : mask.names()) names.push_back(n);
  return names;
}

std::string epoch_line(const EpochRecord& r) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "epoch %3d  lr %.5f  train loss %.4f acc %.4f  val loss %.4f acc %.4f  (%.1fs)", r.epoch,
                r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds);
  return buf;
}

template <typename T>
SearchOutputs run_search(const RunConfig& config, std::ostream& log) {
  const fs::path dir = config.out_dir;
  fs::create_directories(dir / "alphas");
  Manifest manifest("search", config);
  const Dataset data = load_dataset(config, config.search_image_size);
  auto [train, val] = split(data, {SplitKind::search_half, 0.5, derive_seed(config.seed, "split")});
  const NormStats norm = compute_norm_stats(train);

  SearchConfig sc;
  sc.network = config.network(data.num_classes(), config.search_image_size);
  sc.weights = config.search;
  sc.arch = config.arch;
  sc.seed = config.seed;
  sc.on_epoch = [&](const EpochRecord& r, const Alphas& a) {
    log << "search " << epoch_line(r) << std::endl;
    const fs::path p = dir / "alphas" / ("epoch_" + two_digits(static_cast<std::size_t>(r.epoch)) + ".alphas.json");
    save_alphas(p, a);
    manifest.add(p, "search");
  };
  log << "search: " << train.size() << " training / " << val.size() << " validation images, "
      << sc.network.operator_mask.size() << " operators" << std::endl;
  SearchResult result = search<T>(sc, train, val, norm);

  SearchOutputs out;
  out.best = derive(result.best);
  out.records = result.records;
  out.alphas = dir / "best.alphas.json";
  out.genotype = dir / "best.genotype.json";
  out.curves = dir / "curves.csv";
  save_alphas(out.alphas, result.best);
  save_genotype(out.genotype, out.best);
  write_curves_csv(result.records, out.curves);
  const fs::path norm_path = dir / "norm_stats.json";
  save_norm_stats(norm_path, norm);
  manifest.add(out.alphas, "search");
  manifest.add(out.genotype, "derive");
  manifest.add(out.curves, "search");
  manifest.add(norm_path, "data");
  manifest.note("precision", config.precision);
  manifest.note("operator_mask", mask_json(sc.network.operator_mask));
  manifest.note("best_epoch", result.best_epoch);
  out.manifest = manifest.write(dir);
  return out;
}

template <typename T>
TrainOutputs run_train(const RunConfig& config, const Genotype& genotype, std::ostream& log) {
  require_valid(genotype);
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  Manifest manifest("train", config);
  const fs::path genotype_path = dir / "genotype.json";
  save_genotype(genotype_path, genotype);
  manifest.add(genotype_path, "input");

  const Dataset data = load_dataset(config, config.train_image_size);
  auto [train, test] = split(data, {SplitKind::train_ratio, config.train_ratio, derive_seed(config.seed, "split")});
  const NormStats norm = compute_norm_stats(train);

  TrainOutputs out;
  std::vector<double> oas;
  for (int r = 0; r < config.num_runs; ++r) {
    const fs::path run_dir = dir / ("run_" + two_digits(static_cast<std::size_t>(r)));
    TrainConfig tc;
    tc.network = config.network(data.num_classes(), config.train_image_size);
    tc.network.operator_mask = OperatorMask::all();
    tc.weights = config.train;
    tc.augment = config.augment;
    tc.seed = derive_seed(config.seed, "run:" + std::to_string(r));
    tc.on_epoch = [&](const EpochRecord& rec) {
      log << "train run " << r << " " << epoch_line(rec) << std::endl;
      return true;
    };
    TrainResult<T> result = train_fixed<T>(genotype, tc, train, test, norm);
    const EvalResult ev = evaluate<T>(result.net, nullptr, test, norm, config.train.batch_size);
    const double oa = overall_accuracy(ev.cm);
    log << "train run " << r << ": overall accuracy " << oa << " on " << test.size() << " held-out images" << std::endl;

    const fs::path ckpt = run_dir / "model.ckpt";
    save_checkpoint(ckpt, result.net.params());
    save_norm_stats(run_dir / "norm_stats.json", norm);
    write_curves_csv(result.records, run_dir / "curves.csv");
    write_cm_csv(ev.cm, run_dir / "cm.csv");
    for (const char* f : {"model.ckpt", "norm_stats.json", "curves.csv", "cm.csv"}) manifest.add(run_dir / f, "train");
    out.checkpoints.push_back(ckpt);
    out.records.push_back(std::move(result.records));
    out.report.sources.push_back(run_dir.filename().string());
    oas.push_back(oa);
  }
  out.report.summary = summarize(oas);
  const fs::path report = dir / "oa_report.json";
  write_text_file_atomic(report, serialize(out.report));
  manifest.add(report, "eval");
  manifest.note("precision", config.precision);
  manifest.note("parameters", Network<T>::fixed(config.network(data.num_classes(), config.train_image_size), genotype, 0)
                                  .count_parameters());
  out.manifest = manifest.write(dir);
  return out;
}

template <typename T>
EvalOutputs run_eval(const RunConfig& config, const Genotype& genotype, const std::vector<fs::path>& checkpoints,
                     EvalSplit which, std::ostream& log) {
  require_valid(genotype);
  if (checkpoints.empty()) throw ArgumentError("eval needs at least one --checkpoint");
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  Manifest manifest("eval", config);
  const Dataset data = load_dataset(config, config.train_image_size);
  auto [train, test] = split(data, {SplitKind::train_ratio, config.train_ratio, derive_seed(config.seed, "split")});
  const Dataset& subset = which == EvalSplit::train ? train : which == EvalSplit::test ? test : data;

  EvalOutputs out;
  std::vector<double> oas;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const fs::path& ckpt = checkpoints[i];
    NetworkConfig nc = config.network(data.num_classes(), config.train_image_size);
    nc.operator_mask = OperatorMask::all();
    Network<T> net = Network<T>::fixed(nc, genotype, 0);
    load_checkpoint(ckpt, net.params());
    const fs::path stats_path = ckpt.parent_path() / "norm_stats.json";
    if (!fs::exists(stats_path)) throw DataError(stats_path.string() + ": normalization statistics not found next to checkpoint");
    const NormStats norm = load_norm_stats(stats_path);
    const EvalResult ev = evaluate<T>(net, nullptr, subset, norm, config.train.batch_size);
    const double oa = overall_accuracy(ev.cm);
    log << "eval " << ckpt.string() << ": overall accuracy " << oa << " on " << subset.size() << " images" << std::endl;
    const fs::path cm_path = dir / (checkpoints.size() == 1 ? std::string("cm.csv") : "cm_" + two_digits(i) + ".csv");
    write_cm_csv(ev.cm, cm_path);
    manifest.add(cm_path, "eval");
    out.matrices.push_back(ev.cm);
    out.report.sources.push_back(ckpt.string());
    oas.push_back(oa);
  }
  out.report.summary = summarize(oas);
  const fs::path report = dir / "oa_report.json";
  write_text_file_atomic(report, serialize(out.report));
  manifest.add(report, "eval");
  manifest.note("precision", config.precision);
  out.manifest = manifest.write(dir);
  return out;
}

}  // namespace

Dataset load_dataset(const RunConfig& config, int image_size) {
  Dataset d = config.dataset.kind == "synthetic"
                  ? synthetic_shapes(config.dataset.num_classes, config.dataset.per_class, image_size, config.dataset.seed)
                  : load_image_dir(config.dataset.root, image_size);
  d.validate();
  return d;
}

SearchOutputs cmd_search(const RunConfig& config, std::ostream& log) {
  config.validate();
  return config.precision == "f64" ? run_search<double>(config, log) : run_search<float>(config, log);
}

void cmd_derive(const fs::path& alphas, const fs::path& output) { save_genotype(output, derive(load_alphas(alphas))); }

void cmd_export_dot(const fs::path& genotype, const fs::path& output) {
  write_text_file_atomic(output, export_dot(load_genotype(genotype)));
}

std::string serialize(const OaReport& report) {
  ordered_json j;
  j["metric"] = "overall_accuracy";
  ordered_json runs = ordered_json::array();
  for (std::size_t i = 0; i < report.summary.values.size(); ++i)
    runs.push_back({{"source", i < report.sources.size() ? report.sources[i] : ""}, {"oa", report.summary.values[i]}});
  j["runs"] = runs;
  j["num_runs"] = report.summary.values.size();
  j["mean"] = report.summary.mean;
  j["std"] = report.summary.stddev;
  return j.dump(2) + "\n";
}

OaReport parse_oa_report(const std::string& text) {
  OaReport r;
  try {
    const auto j = ordered_json::parse(text);
    std::vector<double> values;
    for (const auto& run : j.at("runs")) {
      r.sources.push_back(run.at("source").get<std::string>());
      values.push_back(run.at("oa").get<double>());
    }
    r.summary = summarize(values);
    r.summary.mean = j.at("mean").get<double>();
    r.summary.stddev = j.at("std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("oa report: ") + e.what());
  }
  return r;
}

TrainOutputs cmd_train(const RunConfig& config, const Genotype& genotype, std::ostream& log) {
  config.validate();
  return config.precision == "f64" ? run_train<double>(config, genotype, log) : run_train<float>(config, genotype, log);
}

EvalSplit parse_eval_split(const std::string& name) {
  if (name == "train") return EvalSplit::train;
  if (name == "test") return EvalSplit::test;
  if (name == "all") return EvalSplit::all;
  throw ArgumentError("unknown split '" + name + "' (expected train, test or all)");
}

EvalOutputs cmd_eval(const RunConfig& config, const Genotype& genotype, const std::vector<fs::path>& checkpoints,
                     EvalSplit split, std::ostream& log) {
  config.validate();
  return config.precision == "f64" ? run_eval<double>(config, genotype, checkpoints, split, log)
                                   : run_eval<float>(config, genotype, checkpoints, split, log);
}

AblationMode parse_ablation_mode(const std::string& name) {
  if (name == "replace") return AblationMode::replace;
  if (name == "exclude") return AblationMode::exclude;
  throw ArgumentError("unknown ablation mode '" + name + "' (expected replace or exclude)");
}

AblateOutputs cmd_ablate(const RunConfig& config, AblationMode mode, const std::optional<Genotype>& genotype,
                         std::ostream& log) {
  config.validate();
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  Manifest manifest("ablate", config);
  AblateOutputs out;
  if (mode == AblationMode::replace) {
    if (!genotype) throw ArgumentError("ablate replace needs --genotype");
    out.genotype = ablate_replace_atrous(*genotype);
    const fs::path p = dir / "ablated.genotype.json";
    save_genotype(p, out.genotype);
    manifest.add(p, "ablate");
    RunConfig tc = config;
    tc.out_dir = (dir / "train").string();
    out.train = cmd_train(tc, out.genotype, log);
    manifest.note("mode", "replace");
  } else {
    RunConfig sc = config;
    sc.exclude_atrous = true;
    sc.out_dir = (dir / "search").string();
    out.search = cmd_search(sc, log);
    out.genotype = out.search->best;
    RunConfig tc = config;
    tc.out_dir = (dir / "train").string();
    out.train = cmd_train(tc, out.genotype, log);
    manifest.note("mode", "exclude");
    manifest.note("operator_mask", mask_json(sc.operator_mask()));
    manifest.add(out.search->genotype, "search");
    manifest.add(out.search->manifest, "search");
  }
  manifest.add(dir / "train" / "oa_report.json", "train");
  manifest.add(out.train.manifest, "train");
  out.manifest = manifest.write(dir);
  return out;
}

}  // namespace cellsearch
