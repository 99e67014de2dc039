#include "rdetect/config.hpp"

#include <cstdio>
#include <set>

#include <json.hpp>

#include "rdetect/binary_io.hpp"

namespace rdetect {

namespace {

using nlohmann::json;

/// Reads fields of one JSON object and remembers which keys were used so
/// that leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  void get_optional(const char* key, std::optional<double>& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_null()) {
      out.reset();
      return;
    }
    if (!it->is_number()) throw ConfigError("config key '" + name_ + "." + key + "' must be a number or null");
    out = it->get<double>();
  }

  Section sub(const char* key) {
    used_.insert(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, name_.empty() ? key : name_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key()))
        throw ConfigError("unknown config key '" + (name_.empty() ? "" : name_ + ".") + it.key() + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

void classifier_fields(Section& s, nas::ClassifierTrainConfig& c) {
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("lr", c.lr);
  s.get("dropout", c.dropout);
  s.get("clip_norm", c.clip_norm);
}

json classifier_json(const nas::ClassifierTrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"dropout", c.dropout},
          {"clip_norm", c.clip_norm}};
}

void validate_classifier(const nas::ClassifierTrainConfig& c, const std::string& name) {
  if (c.epochs < 0) throw ConfigError(name + ".epochs must be non-negative");
  if (c.batch_size < 1) throw ConfigError(name + ".batch_size must be positive");
  if (!(c.lr > 0)) throw ConfigError(name + ".lr must be positive");
  if (c.dropout < 0 || c.dropout >= 1) throw ConfigError(name + ".dropout must lie in [0, 1)");
}

}  // namespace

void RunConfig::validate() const {
  const auto& g = generator;
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (g.slots < 1 || g.families < 1) throw ConfigError("generator.slots and generator.families must be positive");
  if (g.benign_count < 1 || g.ransomware_count < 1) throw ConfigError("generator counts must be positive");
  if (g.min_ticks > g.max_ticks) throw ConfigError("generator.min_ticks exceeds max_ticks");
  if (g.min_ticks < 2 * pipeline.encoder.window_width)
    throw ConfigError("generator.min_ticks must cover at least two windows");
  if (g.crypto_slots < 1 || g.crypto_slots > g.slots) throw ConfigError("generator.crypto_slots out of range");
  if (g.ramp_min_ticks < 1 || g.ramp_min_ticks > g.ramp_max_ticks) throw ConfigError("generator ramp range invalid");
  for (int f : g.family_subset)
    if (f < 0) throw ConfigError("generator.family_subset entries must be non-negative");
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (test_fold < 0 || test_fold >= folds) throw ConfigError("test_fold must lie in [0, folds)");
  if (robustness_trials < 1) throw ConfigError("robustness_trials must be positive");
  try {
    pipeline.encoder.validate();
    detector.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  if (pipeline.encoder.epochs < 1) throw ConfigError("encoder.epochs must be at least 1");
  if (detector.window_width != pipeline.encoder.window_width || detector.stride != pipeline.encoder.stride)
    throw ConfigError("detector windows must match encoder windows");
  if (pipeline.supernet.num_layers < 1 || pipeline.supernet.width < 1)
    throw ConfigError("supernet.layers and supernet.width must be positive");
  if (pipeline.supernet.candidates.size() < 2) throw ConfigError("supernet needs at least two candidates");
  if (pipeline.calibration_size < 1) throw ConfigError("supernet.calibration_size must be positive");
  if (pipeline.prefix_samples < 0) throw ConfigError("supernet.prefix_samples must be non-negative");
  validate_classifier(pipeline.search, "search");
  validate_classifier(pipeline.fine_tune, "fine_tune");
  validate_classifier(adaptivity.adapt.train, "adaptivity");
  if (adaptivity.adapt.replay_fraction < 0 || adaptivity.adapt.replay_fraction >= 1)
    throw ConfigError("adaptivity.replay_fraction must lie in [0, 1)");
  if (adaptivity.adapt_fraction <= 0 || adaptivity.adapt_fraction >= 1 || adaptivity.seen_test_fraction <= 0 ||
      adaptivity.seen_test_fraction >= 1)
    throw ConfigError("adaptivity fractions must lie in (0, 1)");
  if (workload.files < 0 || workload.min_bytes < 1 || workload.min_bytes > workload.max_bytes ||
      workload.encrypt_per_window < 1)
    throw ConfigError("workload sizes invalid");
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("threads", c.threads);
  root.get("folds", c.folds);
  root.get("test_fold", c.test_fold);
  root.get("robustness_trials", c.robustness_trials);

  auto g = root.sub("generator");
  auto& gc = c.generator;
  g.get("slots", gc.slots);
  g.get("benign_count", gc.benign_count);
  g.get("ransomware_count", gc.ransomware_count);
  g.get("families", gc.families);
  g.get("min_ticks", gc.min_ticks);
  g.get("max_ticks", gc.max_ticks);
  g.get("noise_std", gc.noise_std);
  g.get("crypto_slots", gc.crypto_slots);
  g.get("infect_shift", gc.infect_shift);
  g.get("infect_toggle", gc.infect_toggle);
  g.get("infect_volatility", gc.infect_volatility);
  g.get("ramp_min_ticks", gc.ramp_min_ticks);
  g.get("ramp_max_ticks", gc.ramp_max_ticks);
  g.get("ramp_floor", gc.ramp_floor);
  g.get("family_subset", gc.family_subset);
  g.finish();

  auto e = root.sub("encoder");
  auto& ec = c.pipeline.encoder;
  e.get("epochs", ec.epochs);
  e.get("batch_size", ec.batch_size);
  e.get("batches_per_epoch", ec.batches_per_epoch);
  e.get("hidden_dim", ec.hidden_dim);
  e.get("layers", ec.layers);
  e.get("window_width", ec.window_width);
  e.get("stride", ec.stride);
  e.get("modified_positive_probability", ec.modified_positive_probability);
  e.get("clip_norm", ec.clip_norm);
  e.get("lr", ec.adam.lr);
  e.get("beta1", ec.adam.beta1);
  e.get("beta2", ec.adam.beta2);
  e.get("eps", ec.adam.eps);
  e.get("lambda_pair", ec.weights.lambda_pair);
  e.get("lambda_cluster", ec.weights.lambda_cluster);
  e.get("lambda_latency", ec.weights.lambda_latency);
  e.get("margin", ec.weights.margin);
  e.get_optional("delta", ec.weights.delta);
  e.get("delta_scale", ec.weights.delta_scale);
  e.get("tau", ec.weights.tau);
  e.get("gamma", ec.weights.gamma);
  e.finish();
  c.detector.window_width = ec.window_width;
  c.detector.stride = ec.stride;

  auto s = root.sub("supernet");
  s.get("layers", c.pipeline.supernet.num_layers);
  s.get("width", c.pipeline.supernet.width);
  s.get("calibration_size", c.pipeline.calibration_size);
  s.get("prefix_samples", c.pipeline.prefix_samples);
  std::vector<std::string> kinds;
  s.get("candidates", kinds);
  if (!kinds.empty()) {
    c.pipeline.supernet.candidates.clear();
    try {
      for (const auto& k : kinds) c.pipeline.supernet.candidates.push_back(nas::op_kind_from_string(k));
    } catch (const InvalidArgument& ex) {
      throw ConfigError(std::string("supernet.candidates: ") + ex.what());
    }
  }
  s.finish();

  auto se = root.sub("search");
  classifier_fields(se, c.pipeline.search);
  se.finish();
  auto ft = root.sub("fine_tune");
  classifier_fields(ft, c.pipeline.fine_tune);
  ft.finish();

  auto d = root.sub("detector");
  d.get("threshold", c.detector.threshold);
  d.get("confirm_windows", c.detector.confirm_windows);
  d.finish();

  auto w = root.sub("workload");
  w.get("files", c.workload.files);
  w.get("min_bytes", c.workload.min_bytes);
  w.get("max_bytes", c.workload.max_bytes);
  w.get("encrypt_per_window", c.workload.encrypt_per_window);
  w.get("benign_write_rate", c.workload.benign_write_rate);
  w.finish();

  auto a = root.sub("adaptivity");
  a.get("seen_families", c.adaptivity.seen_families);
  a.get("adapt_fraction", c.adaptivity.adapt_fraction);
  a.get("seen_test_fraction", c.adaptivity.seen_test_fraction);
  a.get("replay_fraction", c.adaptivity.adapt.replay_fraction);
  classifier_fields(a, c.adaptivity.adapt.train);
  a.finish();

  root.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const ParseError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text);
}

std::string config_to_json(const RunConfig& c) {
  const auto& g = c.generator;
  const auto& ec = c.pipeline.encoder;
  std::vector<std::string> kinds;
  for (auto k : c.pipeline.supernet.candidates) kinds.emplace_back(nas::to_string(k));
  json a = classifier_json(c.adaptivity.adapt.train);
  a["seen_families"] = c.adaptivity.seen_families;
  a["adapt_fraction"] = c.adaptivity.adapt_fraction;
  a["seen_test_fraction"] = c.adaptivity.seen_test_fraction;
  a["replay_fraction"] = c.adaptivity.adapt.replay_fraction;
  json j{
      {"seed", c.seed},
      {"threads", c.threads},
      {"folds", c.folds},
      {"test_fold", c.test_fold},
      {"robustness_trials", c.robustness_trials},
      {"generator",
       {{"slots", g.slots},
        {"benign_count", g.benign_count},
        {"ransomware_count", g.ransomware_count},
        {"families", g.families},
        {"min_ticks", g.min_ticks},
        {"max_ticks", g.max_ticks},
        {"noise_std", g.noise_std},
        {"crypto_slots", g.crypto_slots},
        {"infect_shift", g.infect_shift},
        {"infect_toggle", g.infect_toggle},
        {"infect_volatility", g.infect_volatility},
        {"ramp_min_ticks", g.ramp_min_ticks},
        {"ramp_max_ticks", g.ramp_max_ticks},
        {"ramp_floor", g.ramp_floor},
        {"family_subset", g.family_subset}}},
      {"encoder",
       {{"epochs", ec.epochs},
        {"batch_size", ec.batch_size},
        {"batches_per_epoch", ec.batches_per_epoch},
        {"hidden_dim", ec.hidden_dim},
        {"layers", ec.layers},
        {"window_width", ec.window_width},
        {"stride", ec.stride},
        {"modified_positive_probability", ec.modified_positive_probability},
        {"clip_norm", ec.clip_norm},
        {"lr", ec.adam.lr},
        {"beta1", ec.adam.beta1},
        {"beta2", ec.adam.beta2},
        {"eps", ec.adam.eps},
        {"lambda_pair", ec.weights.lambda_pair},
        {"lambda_cluster", ec.weights.lambda_cluster},
        {"lambda_latency", ec.weights.lambda_latency},
        {"margin", ec.weights.margin},
        {"delta", ec.weights.delta ? json(*ec.weights.delta) : json(nullptr)},
        {"delta_scale", ec.weights.delta_scale},
        {"tau", ec.weights.tau},
        {"gamma", ec.weights.gamma}}},
      {"supernet",
       {{"layers", c.pipeline.supernet.num_layers},
        {"width", c.pipeline.supernet.width},
        {"calibration_size", c.pipeline.calibration_size},
        {"prefix_samples", c.pipeline.prefix_samples},
        {"candidates", kinds}}},
      {"search", classifier_json(c.pipeline.search)},
      {"fine_tune", classifier_json(c.pipeline.fine_tune)},
      {"detector", {{"threshold", c.detector.threshold}, {"confirm_windows", c.detector.confirm_windows}}},
      {"workload",
       {{"files", c.workload.files},
        {"min_bytes", c.workload.min_bytes},
        {"max_bytes", c.workload.max_bytes},
        {"encrypt_per_window", c.workload.encrypt_per_window},
        {"benign_write_rate", c.workload.benign_write_rate}}},
      {"adaptivity", a}};
  return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
  // The hash ignores the thread count, which never changes results.
  auto copy = cfg;
  copy.threads = 1;
  const auto text = config_to_json(copy);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rdetect
