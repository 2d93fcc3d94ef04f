#pragma once

// Pipeline configuration: a JSON tree, strictly parsed. Every key is optional;
// absent keys take the defaults below. Unknown keys and invalid values are
// errors whose message names the offending path.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffult/dataset.hpp"
#include "diffult/diffusion.hpp"
#include "diffult/filter.hpp"
#include "diffult/models.hpp"
#include "diffult/rng.hpp"

namespace diffult {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GenMode { none, ddpm, cbdm };

inline const char* gen_mode_name(GenMode g) {
  switch (g) {
    case GenMode::none: return "none";
    case GenMode::ddpm: return "ddpm";
    case GenMode::cbdm: return "cbdm";
  }
  return "?";
}

struct DataConfig {
  std::string source = "shapes";  // shapes | cifar10
  std::vector<std::string> cifar_train;
  std::vector<std::string> cifar_test;
  int num_classes = 10;
  std::size_t n1 = 500;
  double ratio = 20.0;
  LongTailProfile profile = LongTailProfile::exponential;
  std::uint32_t height = 16;
  std::uint32_t width = 16;
  std::uint32_t channels = 1;
  double noise = 0.5;
  std::size_t test_per_class = 100;
  std::size_t many_min = 100;
  std::size_t few_max = 20;
};

struct ScheduleConfig {
  std::size_t steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct DiffusionConfig {
  GenMode mode = GenMode::cbdm;
  double tau = 1.0;
  double gamma = 0.25;
  ContrastSampling contrast = ContrastSampling::uniform_class;
  std::uint32_t base_width = 16;
  std::uint32_t emb_dim = 64;
  std::uint32_t groups = 8;
  std::size_t steps = 3000;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double grad_clip = 1.0;
  double ema_decay = 0.0;
  std::size_t warmup = 100;
  std::size_t sample_batch = 256;
};

struct ClassifierConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double val_fraction = 0.1;
  bool augment = true;
  std::vector<std::uint32_t> widths = {16, 32, 64};
  std::uint32_t blocks_per_stage = 1;
};

struct EvalConfig {
  // Proxy FID/IS against a classifier trained on a separate balanced set.
  bool proxy = false;
  std::size_t yardstick_per_class = 200;
  std::size_t yardstick_epochs = 8;
};

// Optional explicit seeds; when absent each is derived from the master seed.
struct SeedConfig {
  std::optional<std::uint64_t> data, diffusion, classifier, sampling;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  SeedConfig seeds;
  DataConfig data;
  ScheduleConfig schedule;
  DiffusionConfig diffusion;
  std::size_t target_per_class = 500;  // N_t
  std::optional<FilterConfig> filter = FilterConfig{};
  // When set, the filter threshold is recalibrated to keep this fraction of
  // the generated set.
  std::optional<double> filter_keep_fraction;
  double omega = 0.3;
  ClassifierConfig classifier;
  EvalConfig eval;
  std::string out = "out";

  std::uint64_t data_seed() const { return seeds.data.value_or(derive_seed(seed, "data")); }
  std::uint64_t diffusion_seed() const { return seeds.diffusion.value_or(derive_seed(seed, "diffusion")); }
  std::uint64_t classifier_seed() const { return seeds.classifier.value_or(derive_seed(seed, "classifier")); }
  std::uint64_t sampling_seed() const { return seeds.sampling.value_or(derive_seed(seed, "sampling")); }

  NoiseSchedule noise_schedule() const { return make_schedule(schedule.steps, schedule.beta_start, schedule.beta_end); }

  std::optional<CbdmConfig> cbdm() const {
    if (diffusion.mode != GenMode::cbdm) return std::nullopt;
    CbdmConfig c;
    c.tau = diffusion.tau;
    c.gamma = diffusion.gamma;
    c.sampling = diffusion.contrast;
    return c;
  }

  DenoiserArch denoiser_arch() const {
    DenoiserArch a;
    a.channels = data.channels;
    a.num_classes = static_cast<std::uint32_t>(data.num_classes);
    a.steps = static_cast<std::uint32_t>(schedule.steps);
    a.base_width = diffusion.base_width;
    a.emb_dim = diffusion.emb_dim;
    a.groups = diffusion.groups;
    return a;
  }

  DenoiserTrainConfig denoiser_train() const {
    DenoiserTrainConfig t;
    t.steps = diffusion.steps;
    t.batch_size = diffusion.batch_size;
    t.lr = diffusion.lr;
    t.grad_clip = diffusion.grad_clip;
    t.ema_decay = diffusion.ema_decay;
    t.warmup = diffusion.warmup;
    t.seed = diffusion_seed();
    return t;
  }

  ClassifierArch classifier_arch() const {
    ClassifierArch a;
    a.channels = data.channels;
    a.num_classes = static_cast<std::uint32_t>(data.num_classes);
    a.widths = classifier.widths;
    a.blocks_per_stage = classifier.blocks_per_stage;
    return a;
  }

  ClassifierTrainConfig classifier_train(double w) const {
    ClassifierTrainConfig t;
    t.epochs = classifier.epochs;
    t.batch_size = classifier.batch_size;
    t.lr = classifier.lr;
    t.momentum = classifier.momentum;
    t.weight_decay = classifier.weight_decay;
    t.omega = w;
    t.val_fraction = classifier.val_fraction;
    t.augment = classifier.augment;
    t.seed = classifier_seed();
    return t;
  }
};

// ---------------------------------------------------------------------------
// JSON reading

namespace config_detail {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return nullptr;
    return &*it;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    out = convert<T>(*v, at(key));
  }

  template <typename T>
  void get_opt(const std::string& key, std::optional<T>& out) {
    const json* v = find(key);
    if (!v) return;
    out = convert<T>(*v, at(key));
  }

  Reader child(const std::string& key) {
    const json* v = find(key);
    static const json empty = json::object();
    return Reader(v ? *v : empty, at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
  }

  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
        throw ConfigError(path + ": must be >= 0");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(path + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

inline std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace config_detail

inline void validate(const PipelineConfig& c) {
  using config_detail::num;
  using config_detail::require;
  const auto& d = c.data;
  require(d.source == "shapes" || d.source == "cifar10", "config.data.source", "must be 'shapes' or 'cifar10'");
  if (d.source == "cifar10") {
    require(!d.cifar_train.empty(), "config.data.cifar_train", "at least one file required for source 'cifar10'");
    require(!d.cifar_test.empty(), "config.data.cifar_test", "at least one file required for source 'cifar10'");
    require(d.num_classes == 10, "config.data.num_classes", "must be 10 for source 'cifar10'");
  } else {
    require(d.num_classes >= 2 && d.num_classes <= shapes::kTemplateCount, "config.data.num_classes",
            "must lie in [2, " + std::to_string(shapes::kTemplateCount) + "]");
    require(d.height >= 16 && d.width >= 16, "config.data.height", "images must be at least 16x16");
    require(d.channels >= 1, "config.data.channels", "must be >= 1");
    require(d.noise >= 0.0, "config.data.noise", "must be >= 0");
  }
  require(d.n1 >= 1, "config.data.n1", "must be >= 1");
  require(d.ratio >= 1.0 && std::isfinite(d.ratio), "config.data.ratio", "must be >= 1 (got " + num(d.ratio) + ")");
  require(std::lround(static_cast<double>(d.n1) / d.ratio) >= 1, "config.data.ratio",
          "n1 / ratio rounds to 0 and would leave an empty class");
  require(d.test_per_class >= 1, "config.data.test_per_class", "must be >= 1");
  require(d.many_min > d.few_max, "config.data.many_min", "must exceed config.data.few_max");

  const auto& s = c.schedule;
  require(s.steps >= 1, "config.schedule.steps", "must be >= 1");
  require(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0, "config.schedule",
          "need 0 < beta_start <= beta_end < 1");

  const auto& g = c.diffusion;
  require(g.tau >= 0.0 && std::isfinite(g.tau), "config.diffusion.tau", "must be finite and >= 0 (got " + num(g.tau) + ")");
  require(g.gamma >= 0.0 && std::isfinite(g.gamma), "config.diffusion.gamma", "must be finite and >= 0");
  require(g.base_width >= 1 && g.emb_dim >= 1, "config.diffusion.base_width", "widths must be >= 1");
  require(g.groups >= 1 && g.base_width % g.groups == 0, "config.diffusion.groups",
          "must divide config.diffusion.base_width");
  require(g.steps >= 1 && g.batch_size >= 1 && g.sample_batch >= 1, "config.diffusion.steps",
          "steps, batch_size and sample_batch must be >= 1");
  require(g.lr > 0.0, "config.diffusion.lr", "must be > 0");
  require(g.ema_decay >= 0.0 && g.ema_decay < 1.0, "config.diffusion.ema_decay", "must lie in [0, 1)");

  if (c.filter) {
    try {
      c.filter->validate();
    } catch (const FilterError& e) {
      throw ConfigError(std::string("config.filter: ") + e.what());
    }
  }
  if (c.filter_keep_fraction)
    require(*c.filter_keep_fraction > 0.0 && *c.filter_keep_fraction <= 1.0, "config.filter.keep_fraction",
            "must lie in (0, 1]");
  require(c.omega >= 0.0 && c.omega <= 1.0, "config.omega", "must lie in [0, 1] (got " + num(c.omega) + ")");

  const auto& k = c.classifier;
  require(k.epochs >= 1 && k.batch_size >= 1, "config.classifier.epochs", "epochs and batch_size must be >= 1");
  require(k.lr > 0.0, "config.classifier.lr", "must be > 0");
  require(k.momentum >= 0.0 && k.momentum < 1.0, "config.classifier.momentum", "must lie in [0, 1)");
  require(k.weight_decay >= 0.0, "config.classifier.weight_decay", "must be >= 0");
  require(k.val_fraction >= 0.0 && k.val_fraction < 1.0, "config.classifier.val_fraction", "must lie in [0, 1)");
  require(!k.widths.empty(), "config.classifier.widths", "must be non-empty");
  for (auto w : k.widths) require(w >= 1, "config.classifier.widths", "entries must be >= 1");
  require(k.blocks_per_stage >= 1, "config.classifier.blocks_per_stage", "must be >= 1");

  require(c.eval.yardstick_per_class >= 2 && c.eval.yardstick_epochs >= 1, "config.eval",
          "yardstick_per_class must be >= 2 and yardstick_epochs >= 1");
  require(!c.out.empty(), "config.out", "must be non-empty");
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using config_detail::Reader;
  PipelineConfig c;
  Reader r(j, "config");
  r.get("seed", c.seed);
  {
    auto s = r.child("seeds");
    s.get_opt("data", c.seeds.data);
    s.get_opt("diffusion", c.seeds.diffusion);
    s.get_opt("classifier", c.seeds.classifier);
    s.get_opt("sampling", c.seeds.sampling);
    s.finish();
  }
  {
    auto d = r.child("data");
    d.get("source", c.data.source);
    d.get("cifar_train", c.data.cifar_train);
    d.get("cifar_test", c.data.cifar_test);
    d.get("num_classes", c.data.num_classes);
    d.get("n1", c.data.n1);
    d.get("ratio", c.data.ratio);
    std::string profile = "exponential";
    d.get("profile", profile);
    if (profile == "exponential")
      c.data.profile = LongTailProfile::exponential;
    else if (profile == "step")
      c.data.profile = LongTailProfile::step;
    else
      throw ConfigError(d.at("profile") + ": must be 'exponential' or 'step'");
    d.get("height", c.data.height);
    d.get("width", c.data.width);
    d.get("channels", c.data.channels);
    d.get("noise", c.data.noise);
    d.get("test_per_class", c.data.test_per_class);
    d.get("many_min", c.data.many_min);
    d.get("few_max", c.data.few_max);
    d.finish();
  }
  {
    auto s = r.child("schedule");
    s.get("steps", c.schedule.steps);
    s.get("beta_start", c.schedule.beta_start);
    s.get("beta_end", c.schedule.beta_end);
    s.finish();
  }
  {
    auto g = r.child("diffusion");
    std::string mode = "cbdm";
    g.get("mode", mode);
    if (mode == "none")
      c.diffusion.mode = GenMode::none;
    else if (mode == "ddpm")
      c.diffusion.mode = GenMode::ddpm;
    else if (mode == "cbdm")
      c.diffusion.mode = GenMode::cbdm;
    else
      throw ConfigError(g.at("mode") + ": must be 'none', 'ddpm' or 'cbdm'");
    g.get("tau", c.diffusion.tau);
    g.get("gamma", c.diffusion.gamma);
    std::string contrast = "uniform";
    g.get("contrast", contrast);
    if (contrast == "uniform")
      c.diffusion.contrast = ContrastSampling::uniform_class;
    else if (contrast == "frequency")
      c.diffusion.contrast = ContrastSampling::dataset_frequency;
    else
      throw ConfigError(g.at("contrast") + ": must be 'uniform' or 'frequency'");
    g.get("base_width", c.diffusion.base_width);
    g.get("emb_dim", c.diffusion.emb_dim);
    g.get("groups", c.diffusion.groups);
    g.get("steps", c.diffusion.steps);
    g.get("batch_size", c.diffusion.batch_size);
    g.get("lr", c.diffusion.lr);
    g.get("grad_clip", c.diffusion.grad_clip);
    g.get("ema_decay", c.diffusion.ema_decay);
    g.get("warmup", c.diffusion.warmup);
    g.get("sample_batch", c.diffusion.sample_batch);
    g.finish();
  }
  r.get("target_per_class", c.target_per_class);
  if (r.has("filter") && j.at("filter").is_null()) {
    r.find("filter");
    c.filter.reset();
  } else {
    auto f = r.child("filter");
    std::string metric = metric_name(c.filter->metric);
    f.get("metric", metric);
    try {
      c.filter->metric = parse_metric(metric);
    } catch (const FilterError&) {
      throw ConfigError(f.at("metric") + ": must be 'd1', 'd2' or 'd3'");
    }
    f.get("threshold", c.filter->threshold);
    f.get_opt("keep_fraction", c.filter_keep_fraction);
    f.finish();
  }
  r.get("omega", c.omega);
  {
    auto k = r.child("classifier");
    k.get("epochs", c.classifier.epochs);
    k.get("batch_size", c.classifier.batch_size);
    k.get("lr", c.classifier.lr);
    k.get("momentum", c.classifier.momentum);
    k.get("weight_decay", c.classifier.weight_decay);
    k.get("val_fraction", c.classifier.val_fraction);
    k.get("augment", c.classifier.augment);
    k.get("widths", c.classifier.widths);
    k.get("blocks_per_stage", c.classifier.blocks_per_stage);
    k.finish();
  }
  {
    auto e = r.child("eval");
    e.get("proxy", c.eval.proxy);
    e.get("yardstick_per_class", c.eval.yardstick_per_class);
    e.get("yardstick_epochs", c.eval.yardstick_epochs);
    e.finish();
  }
  r.get("out", c.out);
  r.finish();
  validate(c);
  return c;
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  using nlohmann::json;
  json j;
  j["seed"] = c.seed;
  json seeds = json::object();
  if (c.seeds.data) seeds["data"] = *c.seeds.data;
  if (c.seeds.diffusion) seeds["diffusion"] = *c.seeds.diffusion;
  if (c.seeds.classifier) seeds["classifier"] = *c.seeds.classifier;
  if (c.seeds.sampling) seeds["sampling"] = *c.seeds.sampling;
  j["seeds"] = seeds;
  const auto& d = c.data;
  j["data"] = {{"source", d.source},
               {"cifar_train", d.cifar_train},
               {"cifar_test", d.cifar_test},
               {"num_classes", d.num_classes},
               {"n1", d.n1},
               {"ratio", d.ratio},
               {"profile", d.profile == LongTailProfile::exponential ? "exponential" : "step"},
               {"height", d.height},
               {"width", d.width},
               {"channels", d.channels},
               {"noise", d.noise},
               {"test_per_class", d.test_per_class},
               {"many_min", d.many_min},
               {"few_max", d.few_max}};
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  const auto& g = c.diffusion;
  j["diffusion"] = {{"mode", gen_mode_name(g.mode)},
                    {"tau", g.tau},
                    {"gamma", g.gamma},
                    {"contrast", g.contrast == ContrastSampling::uniform_class ? "uniform" : "frequency"},
                    {"base_width", g.base_width},
                    {"emb_dim", g.emb_dim},
                    {"groups", g.groups},
                    {"steps", g.steps},
                    {"batch_size", g.batch_size},
                    {"lr", g.lr},
                    {"grad_clip", g.grad_clip},
                    {"ema_decay", g.ema_decay},
                    {"warmup", g.warmup},
                    {"sample_batch", g.sample_batch}};
  j["target_per_class"] = c.target_per_class;
  if (c.filter) {
    j["filter"] = {{"metric", metric_name(c.filter->metric)}, {"threshold", c.filter->threshold}};
    if (c.filter_keep_fraction) j["filter"]["keep_fraction"] = *c.filter_keep_fraction;
  } else {
    j["filter"] = nullptr;
  }
  j["omega"] = c.omega;
  const auto& k = c.classifier;
  j["classifier"] = {{"epochs", k.epochs},
                     {"batch_size", k.batch_size},
                     {"lr", k.lr},
                     {"momentum", k.momentum},
                     {"weight_decay", k.weight_decay},
                     {"val_fraction", k.val_fraction},
                     {"augment", k.augment},
                     {"widths", k.widths},
                     {"blocks_per_stage", k.blocks_per_stage}};
  j["eval"] = {{"proxy", c.eval.proxy},
               {"yardstick_per_class", c.eval.yardstick_per_class},
               {"yardstick_epochs", c.eval.yardstick_epochs}};
  j["out"] = c.out;
  return j;
}

inline PipelineConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = text.find_first_not_of(" \t\r\n") == std::string::npos ? nlohmann::json::object()
                                                               : nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline PipelineConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

// Sets one value by dotted path, e.g. "classifier.epochs=5". The value is
// parsed as JSON, falling back to a plain string.
inline PipelineConfig apply_override(const PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  auto j = config_to_json(c);
  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      if (node->is_null()) *node = nlohmann::json::object();
      (*node)[part] = value;
      break;
    }
    if (node->is_null()) *node = nlohmann::json::object();
    node = &(*node)[part];
    pos = dot + 1;
  }
  return config_from_json(j);
}

inline std::string config_dump(const PipelineConfig& c) { return config_to_json(c).dump(2) + "\n"; }

// FNV-1a over the canonical JSON form (keys sorted).
inline std::string hash_text(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xf];
  return out;
}

inline std::string config_hash(const PipelineConfig& c) {
  auto j = config_to_json(c);
  j.erase("out");
  return hash_text(j.dump());
}

}  // namespace diffult
