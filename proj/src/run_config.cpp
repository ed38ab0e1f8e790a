#include "cellsearch/run_config.hpp"

#include "cellsearch/error.hpp"
#include "cellsearch/io.hpp"
#include "json.hpp"

namespace cellsearch {

using nlohmann::ordered_json;

NetworkConfig RunConfig::network(int num_classes, int input_size) const {
  NetworkConfig n;
  n.num_cells = num_cells;
  n.init_channels = init_channels;
  n.num_classes = num_classes;
  n.reduce_positions = reduce_positions;
  n.input_size = input_size;
  n.operator_mask = operator_mask();
  return n;
}

OperatorMask RunConfig::operator_mask() const { return exclude_atrous ? atrous_free_mask() : OperatorMask::all(); }

void RunConfig::validate() const {
  if (num_runs < 1) throw ArgumentError("num_runs must be >= 1");
  if (precision != "f32" && precision != "f64") throw ArgumentError("precision must be f32 or f64, got '" + precision + "'");
  if (dataset.kind != "synthetic" && dataset.kind != "directory")
    throw ArgumentError("dataset.kind must be synthetic or directory, got '" + dataset.kind + "'");
  if (dataset.kind == "directory" && dataset.root.empty()) throw ArgumentError("dataset.root is required for directory datasets");
  if (!(train_ratio > 0 && train_ratio < 1)) throw ArgumentError("train.ratio must be in (0, 1)");
  search.validate();
  train.validate();
  arch.validate();
  network(2, search_image_size).validate();
  network(2, train_image_size).validate();
}

namespace {

ordered_json weights_json(const WeightOptConfig& w) {
  ordered_json j;
  j["lr0"] = w.lr0;
  j["momentum"] = w.momentum;
  j["weight_decay"] = w.weight_decay;
  j["epochs"] = w.epochs;
  j["batch_size"] = w.batch_size;
  j["schedule"] = schedule_name(w.schedule);
  j["decay"] = w.decay;
  j["grad_clip"] = w.grad_clip ? ordered_json(*w.grad_clip) : ordered_json(nullptr);
  return j;
}

ordered_json config_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["num_runs"] = c.num_runs;
  j["precision"] = c.precision;
  j["dataset"] = {{"kind", c.dataset.kind},
                  {"root", c.dataset.root},
                  {"num_classes", c.dataset.num_classes},
                  {"per_class", c.dataset.per_class},
                  {"seed", c.dataset.seed}};
  j["network"] = {{"num_cells", c.num_cells}, {"init_channels", c.init_channels}, {"reduce_positions", c.reduce_positions}};
  ordered_json s = weights_json(c.search);
  s["image_size"] = c.search_image_size;
  s["exclude_atrous"] = c.exclude_atrous;
  j["search"] = s;
  j["arch"] = {{"lr", c.arch.lr},
               {"weight_decay", c.arch.weight_decay},
               {"beta1", c.arch.beta1},
               {"beta2", c.arch.beta2},
               {"eps", c.arch.eps},
               {"optimizer", c.arch.kind == ArchOptimizerKind::adam ? "adam" : "sgd"},
               {"loss", c.arch.loss == ArchLoss::validation ? "validation" : "training"}};
  ordered_json t = weights_json(c.train);
  t["image_size"] = c.train_image_size;
  t["augment"] = c.augment;
  t["ratio"] = c.train_ratio;
  j["train"] = t;
  return j;
}

// Overlays `patch` onto `base`, refusing keys `base` does not have.
void overlay(ordered_json& base, const ordered_json& patch, const std::string& where) {
  if (!patch.is_object()) throw ParseError("config" + (where.empty() ? "" : " '" + where + "'") + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ParseError("config: unknown key '" + path + "'");
    if (base[key].is_object())
      overlay(base[key], value, path);
    else
      base[key] = value;
  }
}

template <typename V>
V get(const ordered_json& j, const std::string& section, const std::string& key) {
  const ordered_json& v = section.empty() ? j.at(key) : j.at(section).at(key);
  try {
    return v.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("config: '" + (section.empty() ? key : section + "." + key) + "' has the wrong type (" +
                     std::string(v.type_name()) + ")");
  }
}

WeightOptConfig weights_from(const ordered_json& j, const std::string& s) {
  WeightOptConfig w;
  w.lr0 = get<double>(j, s, "lr0");
  w.momentum = get<double>(j, s, "momentum");
  w.weight_decay = get<double>(j, s, "weight_decay");
  w.epochs = get<int>(j, s, "epochs");
  w.batch_size = get<int>(j, s, "batch_size");
  w.schedule = parse_schedule(get<std::string>(j, s, "schedule"));
  w.decay = get<double>(j, s, "decay");
  if (j.at(s).at("grad_clip").is_null())
    w.grad_clip.reset();
  else
    w.grad_clip = get<double>(j, s, "grad_clip");
  return w;
}

RunConfig from_json(const ordered_json& j) {
  RunConfig c;
  c.seed = get<std::uint64_t>(j, "", "seed");
  c.out_dir = get<std::string>(j, "", "out_dir");
  c.num_runs = get<int>(j, "", "num_runs");
  c.precision = get<std::string>(j, "", "precision");
  c.dataset.kind = get<std::string>(j, "dataset", "kind");
  c.dataset.root = get<std::string>(j, "dataset", "root");
  c.dataset.num_classes = get<int>(j, "dataset", "num_classes");
  c.dataset.per_class = get<int>(j, "dataset", "per_class");
  c.dataset.seed = get<std::uint64_t>(j, "dataset", "seed");
  c.num_cells = get<int>(j, "network", "num_cells");
  c.init_channels = get<int>(j, "network", "init_channels");
  c.reduce_positions = get<std::vector<int>>(j, "network", "reduce_positions");
  c.search = weights_from(j, "search");
  c.search_image_size = get<int>(j, "search", "image_size");
  c.exclude_atrous = get<bool>(j, "search", "exclude_atrous");
  c.arch.lr = get<double>(j, "arch", "lr");
  c.arch.weight_decay = get<double>(j, "arch", "weight_decay");
  c.arch.beta1 = get<double>(j, "arch", "beta1");
  c.arch.beta2 = get<double>(j, "arch", "beta2");
  c.arch.eps = get<double>(j, "arch", "eps");
  const auto opt = get<std::string>(j, "arch", "optimizer");
  if (opt != "adam" && opt != "sgd") throw ParseError("config: 'arch.optimizer' must be adam or sgd, got '" + opt + "'");
  c.arch.kind = opt == "adam" ? ArchOptimizerKind::adam : ArchOptimizerKind::sgd;
  const auto loss = get<std::string>(j, "arch", "loss");
  if (loss != "validation" && loss != "training")
    throw ParseError("config: 'arch.loss' must be validation or training, got '" + loss + "'");
  c.arch.loss = loss == "validation" ? ArchLoss::validation : ArchLoss::training;
  c.train = weights_from(j, "train");
  c.train_image_size = get<int>(j, "train", "image_size");
  c.augment = get<bool>(j, "train", "augment");
  c.train_ratio = get<double>(j, "train", "ratio");
  c.validate();
  return c;
}

ordered_json parse_json(const std::string& text, const std::string& what) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(what + ": " + e.what());
  }
}

}  // namespace

std::string to_json(const RunConfig& config) { return config_json(config).dump(2) + "\n"; }

RunConfig parse_run_config(const std::string& text) {
  ordered_json base = config_json(RunConfig{});
  overlay(base, parse_json(text, "config"), "");
  return from_json(base);
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  ordered_json base = config_json(RunConfig{});
  if (path) overlay(base, parse_json(read_text_file(*path), "config " + path->string()), "");
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos) throw ParseError("--set '" + o + "': expected key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    ordered_json value;
    try {
      value = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    ordered_json patch;
    if (dot != std::string::npos && dot < eq)
      patch[key.substr(0, dot)][key.substr(dot + 1)] = value;
    else
      patch[key] = value;
    overlay(base, patch, "");
  }
  return from_json(base);
}

}  // namespace cellsearch
