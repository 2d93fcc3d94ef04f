#pragma once

// The four-stage pipeline (train denoiser and f0, generate, filter, train the
// final classifier), its on-disk artifacts, and the experiment sweeps.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffult/config.hpp"
#include "diffult/dataset.hpp"
#include "diffult/diffusion.hpp"
#include "diffult/filter.hpp"
#include "diffult/metrics.hpp"
#include "diffult/models.hpp"

namespace diffult {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Logging

inline bool& log_enabled() {
  static bool on = true;
  return on;
}

inline void log_line(const std::string& msg) {
  if (!log_enabled()) return;
  using clock = std::chrono::steady_clock;
  static const auto start = clock::now();
  const double s = std::chrono::duration<double>(clock::now() - start).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, "[%8.1fs] ", s);
  std::clog << buf << msg << std::endl;
}

// ---------------------------------------------------------------------------
// Artifact layout

struct RunPaths {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path ckpt_dir() const { return root / "ckpt"; }
  fs::path gen_dir() const { return root / "gen"; }
  fs::path reports_dir() const { return root / "reports"; }

  fs::path train() const { return data_dir() / "train.ltds"; }
  fs::path test() const { return data_dir() / "test.ltds"; }
  fs::path denoiser() const { return ckpt_dir() / "denoiser.bin"; }
  fs::path f0() const { return ckpt_dir() / "f0.bin"; }
  fs::path final_model() const { return ckpt_dir() / "final.bin"; }
  fs::path gen() const { return gen_dir() / "gen.ltds"; }
  fs::path filt() const { return gen_dir() / "filt.ltds"; }
  fs::path effective_config() const { return root / "config.effective"; }
  fs::path report(const std::string& name) const { return reports_dir() / (name + ".csv"); }

  void create() const {
    for (const auto& d : {data_dir(), ckpt_dir(), gen_dir(), reports_dir()}) fs::create_directories(d);
  }
};

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw PipelineError("cannot write " + p.string());
  os << text;
}

// ---------------------------------------------------------------------------
// Data

struct DataBundle {
  LongTailDataset train;
  LongTailDataset test;
  std::vector<std::size_t> counts;
  ClassGroups groups;
};

inline ShapesSpec shapes_spec(const PipelineConfig& c, std::size_t per_class, std::uint64_t seed) {
  ShapesSpec s;
  s.num_classes = c.data.num_classes;
  s.per_class = per_class;
  s.height = c.data.height;
  s.width = c.data.width;
  s.channels = c.data.channels;
  s.noise = c.data.noise;
  s.seed = seed;
  return s;
}

inline std::vector<std::size_t> longtail_counts(const PipelineConfig& c) {
  return build_longtail_counts(c.data.n1, c.data.ratio, c.data.num_classes, c.data.profile);
}

inline ClassGroups groups_for(const PipelineConfig& c, const std::vector<std::size_t>& counts) {
  return class_groups(counts, c.data.many_min, c.data.few_max);
}

// Long-tailed training set and balanced test set, both functions of the data
// seed alone.
inline DataBundle make_data(const PipelineConfig& c) {
  const auto seed = c.data_seed();
  const auto counts = longtail_counts(c);
  DataBundle b;
  if (c.data.source == "shapes") {
    const auto pool = generate_shapes_dataset(shapes_spec(c, c.data.n1, derive_seed(seed, "pool")));
    b.train = subsample_longtail(pool, counts, derive_seed(seed, "subsample"));
    b.test = generate_shapes_dataset(shapes_spec(c, c.data.test_per_class, derive_seed(seed, "test")));
  } else {
    const auto pool = load_cifar10_binary(c.data.cifar_train);
    b.train = subsample_longtail(pool, counts, derive_seed(seed, "subsample"));
    b.test = load_cifar10_binary(c.data.cifar_test);
  }
  b.counts = b.train.class_counts();
  b.groups = groups_for(c, b.counts);
  return b;
}

inline DataBundle load_data(const PipelineConfig& c, const RunPaths& p) {
  DataBundle b;
  b.train = read_ltds(p.train().string());
  b.test = read_ltds(p.test().string());
  b.counts = b.train.class_counts();
  b.groups = groups_for(c, b.counts);
  return b;
}

// ---------------------------------------------------------------------------
// Cache of expensive stage outputs, keyed by the configuration that produced
// them. Sweeps share one cache so that, e.g., variants differing only in the
// classifier loss reuse one denoiser and one generated set.

class ArtifactCache {
 public:
  explicit ArtifactCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  fs::path path(const std::string& kind, const std::string& key, const std::string& ext) const {
    return dir_ / (kind + "-" + key + ext);
  }
  bool has(const std::string& kind, const std::string& key, const std::string& ext) const {
    return fs::exists(path(kind, key, ext));
  }

 private:
  fs::path dir_;
};

namespace pipeline_detail {

using nlohmann::json;

inline json data_key(const PipelineConfig& c) {
  auto j = config_to_json(c)["data"];
  j["seed"] = c.data_seed();
  return j;
}

inline std::string denoiser_key(const PipelineConfig& c, std::optional<double> role_p_ma) {
  json j;
  j["data"] = data_key(c);
  j["schedule"] = config_to_json(c)["schedule"];
  auto d = config_to_json(c)["diffusion"];
  d.erase("sample_batch");
  if (c.diffusion.mode != GenMode::cbdm) {
    d.erase("tau");
    d.erase("gamma");
    d.erase("contrast");
  }
  j["diffusion"] = d;
  j["seed"] = c.diffusion_seed();
  if (role_p_ma) j["role_p_ma"] = *role_p_ma;
  return hash_text(j.dump());
}

inline std::string gen_key(const PipelineConfig& c, std::optional<double> role_p_ma) {
  json j;
  j["denoiser"] = denoiser_key(c, role_p_ma);
  j["target"] = c.target_per_class;
  j["seed"] = c.sampling_seed();
  j["med_few_only"] = role_p_ma.has_value();
  return hash_text(j.dump());
}

inline std::string classifier_key(const PipelineConfig& c, const std::string& extra) {
  json j;
  j["data"] = data_key(c);
  j["classifier"] = config_to_json(c)["classifier"];
  j["seed"] = c.classifier_seed();
  j["extra"] = extra;
  return hash_text(j.dump());
}

}  // namespace pipeline_detail

// ---------------------------------------------------------------------------
// Stages

inline std::vector<int> generation_labels(const std::vector<std::size_t>& per_class) {
  std::vector<int> labels;
  for (std::size_t j = 0; j < per_class.size(); ++j) labels.insert(labels.end(), per_class[j], static_cast<int>(j));
  return labels;
}

// Per-class budget; with `med_few_only` the many-shot classes get nothing.
inline GenerationBudget pipeline_budget(const PipelineConfig& c, const DataBundle& d, bool med_few_only) {
  auto b = generation_budget(d.counts, c.target_per_class);
  if (med_few_only) {
    for (int j : d.groups.many) {
      b.total -= b.per_class[static_cast<std::size_t>(j)];
      b.per_class[static_cast<std::size_t>(j)] = 0;
    }
  }
  return b;
}

// Denoiser training set for the role study: every medium/few sample plus a
// seeded fraction p_ma of each many-shot class.
inline LongTailDataset role_training_set(const DataBundle& d, double p_ma, std::uint64_t seed) {
  std::vector<std::size_t> keep;
  for (int j = 0; j < d.train.num_classes; ++j) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.train.size(); ++i)
      if (d.train.samples[i].label == j) idx.push_back(i);
    std::size_t take = idx.size();
    if (d.groups.many.count(j)) {
      Rng rng(derive_seed(derive_seed(seed, "role"), static_cast<std::uint64_t>(j)));
      shuffle(idx.begin(), idx.end(), rng);
      take = static_cast<std::size_t>(std::lround(p_ma * static_cast<double>(idx.size())));
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());
  LongTailDataset out{d.train.shape, d.train.num_classes, {}};
  for (auto i : keep) out.samples.push_back(d.train.samples[i]);
  return out;
}

inline DenoiserResult<float> stage_train_denoiser(const PipelineConfig& c, const LongTailDataset& train) {
  const auto sched = c.noise_schedule();
  const auto cfg = c.denoiser_train();
  const std::size_t every = std::max<std::size_t>(1, cfg.steps / 10);
  return train_denoiser<float>(train, sched, c.cbdm(), cfg, c.denoiser_arch(), [&](std::size_t step, double loss) {
    if (step % every == 0 || step == cfg.steps)
      log_line("  denoiser step " + std::to_string(step) + "/" + std::to_string(cfg.steps) + " loss " +
               csv_number(loss));
  });
}

inline LongTailDataset stage_generate(const PipelineConfig& c, const DenoiserNet<float>& model,
                                      const GenerationBudget& budget, ImageShape shape) {
  LongTailDataset gen{shape, c.data.num_classes, {}};
  const auto labels = generation_labels(budget.per_class);
  if (labels.empty()) return gen;
  const auto sched = c.noise_schedule();
  SampleOptions opt;
  opt.batch_size = c.diffusion.sample_batch;
  // Chunks keep progress visible; per-image streams make the result
  // independent of the chunking.
  const std::size_t chunk = 512;
  gen.samples.reserve(labels.size());
  for (std::size_t b0 = 0; b0 < labels.size(); b0 += chunk) {
    const std::size_t nb = std::min(chunk, labels.size() - b0);
    const auto imgs = sample(model, sched, {shape.channels, shape.height, shape.width},
                             std::span<const int>(labels.data() + b0, nb), derive_seed(c.sampling_seed(), b0), opt);
    for (std::size_t i = 0; i < nb; ++i)
      gen.samples.push_back(sample_from_tensor(imgs, i, labels[b0 + i], Origin::generated));
    log_line("  generated " + std::to_string(b0 + nb) + "/" + std::to_string(labels.size()));
  }
  return gen;
}

inline ClassifierResult<float> stage_train_classifier(const PipelineConfig& c, const LongTailDataset& data,
                                                      const std::string& what) {
  auto res = train_classifier<float>(data, c.classifier_train(c.omega), c.classifier_arch());
  log_line("  " + what + ": best epoch " + std::to_string(res.best_epoch) + ", balanced val acc " +
           csv_number(res.best_val_accuracy));
  return res;
}

inline EvalReport stage_evaluate(const ClassifierNet<float>& model, const DataBundle& d) {
  std::vector<int> labels;
  labels.reserve(d.test.size());
  for (const auto& s : d.test.samples) labels.push_back(s.label);
  return grouped_accuracy(predict(model, d.test), labels, d.groups, d.test.num_classes);
}

// ---------------------------------------------------------------------------
// Proxy FID / IS against a yardstick classifier trained on balanced data.

struct ProxyScores {
  double fid = std::numeric_limits<double>::quiet_NaN();
  double is = std::numeric_limits<double>::quiet_NaN();
};

inline ClassifierNet<float> yardstick_classifier(const PipelineConfig& c, ArtifactCache* cache) {
  if (c.data.source != "shapes") throw PipelineError("proxy metrics need the shapes source");
  const std::string key = pipeline_detail::classifier_key(
      c, "yardstick/" + std::to_string(c.eval.yardstick_per_class) + "/" + std::to_string(c.eval.yardstick_epochs));
  if (cache && cache->has("yardstick", key, ".bin"))
    return ClassifierNet<float>::load(cache->path("yardstick", key, ".bin").string());
  const auto data =
      generate_shapes_dataset(shapes_spec(c, c.eval.yardstick_per_class, derive_seed(c.data_seed(), "yardstick")));
  auto cfg = c.classifier_train(1.0);
  cfg.epochs = c.eval.yardstick_epochs;
  cfg.seed = derive_seed(c.classifier_seed(), "yardstick");
  log_line("training yardstick classifier on " + std::to_string(data.size()) + " balanced samples");
  auto res = train_classifier<float>(data, cfg, c.classifier_arch());
  if (cache) res.model.save(cache->path("yardstick", key, ".bin").string());
  return std::move(res.model);
}

// FID between D_gen and a fresh real set with the same label histogram; IS of
// D_gen under the yardstick's class probabilities.
inline ProxyScores proxy_scores(const PipelineConfig& c, const LongTailDataset& gen, ArtifactCache* cache) {
  ProxyScores out;
  if (gen.size() < 2) return out;
  const auto yard = yardstick_classifier(c, cache);
  const auto gen_counts = gen.class_counts();
  const auto most = *std::max_element(gen_counts.begin(), gen_counts.end());
  const auto pool = generate_shapes_dataset(shapes_spec(c, most, derive_seed(c.data_seed(), "reference")));
  const auto ref = subsample_longtail(pool, gen_counts, derive_seed(c.data_seed(), "reference.pick"));
  const auto fx = strip_head(yard);
  out.fid = proxy_fid(fx.extract(to_tensor<float>(ref)), fx.extract(to_tensor<float>(gen)));
  const auto logits = predict_logits(yard, to_tensor<float>(gen));
  const std::size_t m = logits.dim(1);
  Tensor<double> probs({gen.size(), m});
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const auto p = ops::softmax_row<double>(std::vector<double>(logits.raw() + i * m, logits.raw() + (i + 1) * m));
    std::copy(p.begin(), p.end(), probs.raw() + i * m);
  }
  out.is = proxy_is(probs);
  return out;
}

// ---------------------------------------------------------------------------
// Full run

struct RunOptions {
  ArtifactCache* cache = nullptr;
  // Role study: denoiser sees med/few plus this fraction of many-shot
  // samples, and only med/few classes are generated.
  std::optional<double> role_p_ma;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> timings;
  std::size_t n_gen = 0;
  std::size_t n_filt = 0;
  EvalReport eval;
  double filter_threshold = std::numeric_limits<double>::quiet_NaN();
};

inline std::string run_csv_header(int num_classes) {
  return "config_hash,seed,n_gen,n_filt,filter_threshold," + eval_csv_header(num_classes) + ",seconds";
}

inline std::string run_csv_row(const RunRecord& r) {
  double total = 0;
  for (const auto& [k, v] : r.timings) total += v;
  return r.config_hash + "," + std::to_string(r.seed) + "," + std::to_string(r.n_gen) + "," +
         std::to_string(r.n_filt) + "," + csv_number(r.filter_threshold) + "," + eval_csv_row(r.eval) + "," +
         csv_number(total);
}

namespace pipeline_detail {

template <typename F>
auto timed(RunRecord& rec, const std::string& stage, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  log_line("stage " + stage);
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      rec.timings.emplace_back(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } else {
      auto r = f();
      rec.timings.emplace_back(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      return r;
    }
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError("stage '" + stage + "' failed: " + e.what());
  }
}

inline void write_eval(const RunPaths& p, const EvalReport& r, int num_classes) {
  write_text(p.report("eval"), eval_csv_header(num_classes) + "\n" + eval_csv_row(r) + "\n");
}

}  // namespace pipeline_detail

// Runs all stages and writes every artifact under cfg.out.
inline RunRecord run_pipeline(const PipelineConfig& cfg, const RunOptions& opt = {}) {
  using namespace pipeline_detail;
  validate(cfg);
  const RunPaths paths{cfg.out};
  paths.create();
  write_text(paths.effective_config(), config_dump(cfg));

  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.seed;
  ArtifactCache* cache = opt.cache;

  const auto data = timed(rec, "make-data", [&] {
    auto d = make_data(cfg);
    write_ltds(paths.train().string(), d.train);
    write_ltds(paths.test().string(), d.test);
    return d;
  });
  log_line("  train " + std::to_string(data.train.size()) + " samples, test " + std::to_string(data.test.size()));

  const bool med_few_only = opt.role_p_ma.has_value();
  const auto budget = pipeline_budget(cfg, data, med_few_only);
  const bool generate = cfg.diffusion.mode != GenMode::none && budget.total > 0;

  // f0 on D; it doubles as the final model when nothing is generated.
  const std::string f0_key = classifier_key(cfg, "f0/omega-inert");
  auto f0 = timed(rec, "train-classifier-f0", [&] {
    if (cache && cache->has("classifier", f0_key, ".bin")) {
      log_line("  f0 from cache");
      return ClassifierNet<float>::load(cache->path("classifier", f0_key, ".bin").string());
    }
    auto res = stage_train_classifier(cfg, data.train, "f0");
    write_epoch_log(paths.report("f0_epochs").string(), res.log);
    if (cache) res.model.save(cache->path("classifier", f0_key, ".bin").string());
    return std::move(res.model);
  });
  f0.save(paths.f0().string());

  LongTailDataset gen{data.train.shape, data.train.num_classes, {}};
  if (generate) {
    const std::string gk = gen_key(cfg, opt.role_p_ma);
    if (cache && cache->has("gen", gk, ".ltds")) {
      timed(rec, "generate", [&] {
        log_line("  generated set from cache");
        gen = read_ltds(cache->path("gen", gk, ".ltds").string());
      });
    } else {
      const std::string dk = denoiser_key(cfg, opt.role_p_ma);
      auto den = timed(rec, "train-diffusion", [&] {
        if (cache && cache->has("denoiser", dk, ".bin")) {
          log_line("  denoiser from cache");
          return DenoiserNet<float>::load(cache->path("denoiser", dk, ".bin").string());
        }
        const auto train_set =
            opt.role_p_ma ? role_training_set(data, *opt.role_p_ma, cfg.data_seed()) : data.train;
        auto res = stage_train_denoiser(cfg, train_set);
        write_step_log(paths.report("denoiser_loss").string(), res.log);
        if (cache) res.model.save(cache->path("denoiser", dk, ".bin").string());
        return std::move(res.model);
      });
      den.save(paths.denoiser().string());
      gen = timed(rec, "generate", [&] { return stage_generate(cfg, den, budget, data.train.shape); });
      if (cache) write_ltds(cache->path("gen", gk, ".ltds").string(), gen);
    }
    write_ltds(paths.gen().string(), gen);
  }
  rec.n_gen = gen.size();

  LongTailDataset filt = gen;
  if (generate && cfg.filter) {
    filt = timed(rec, "filter", [&] {
      std::optional<FeatureExtractor<float>> fx;
      if (cfg.filter->metric == FilterMetric::d2) fx.emplace(strip_head(f0));
      const FilterResources res{&data.train, &f0, fx ? &*fx : nullptr};
      auto fc = *cfg.filter;
      const auto scores = score_all(gen, fc.metric, res);
      if (cfg.filter_keep_fraction) fc.threshold = calibrate_threshold(scores, fc.metric, *cfg.filter_keep_fraction);
      auto out = filter_by_scores(gen, scores, fc);
      write_filter_report(paths.report("filter").string(), out.report);
      rec.filter_threshold = fc.threshold;
      log_line("  kept " + std::to_string(out.report.kept_count) + " of " + std::to_string(gen.size()) +
               " (threshold " + csv_number(fc.threshold) + ")");
      return std::move(out.filtered);
    });
    write_ltds(paths.filt().string(), filt);
  }
  rec.n_filt = filt.size();

  if (filt.size() == 0) {
    f0.save(paths.final_model().string());
    rec.eval = timed(rec, "evaluate", [&] { return stage_evaluate(f0, data); });
  } else {
    auto final_model = timed(rec, "train-classifier", [&] {
      auto res = stage_train_classifier(cfg, merge(data.train, filt), "final");
      write_epoch_log(paths.report("final_epochs").string(), res.log);
      return std::move(res.model);
    });
    final_model.save(paths.final_model().string());
    rec.eval = timed(rec, "evaluate", [&] { return stage_evaluate(final_model, data); });
  }

  if (cfg.eval.proxy && gen.size() >= 2) {
    const auto ps = timed(rec, "proxy-metrics", [&] { return proxy_scores(cfg, gen, cache); });
    rec.eval.proxy_fid = ps.fid;
    rec.eval.proxy_is = ps.is;
  }

  write_eval(paths, rec.eval, data.test.num_classes);
  write_text(paths.report("run"), run_csv_header(data.test.num_classes) + "\n" + run_csv_row(rec) + "\n");
  {
    std::string t = "stage,seconds\n";
    for (const auto& [k, v] : rec.timings) t += k + "," + csv_number(v) + "\n";
    write_text(paths.report("timings"), t);
  }
  log_line("overall " + csv_number(rec.eval.overall) + "  many " + csv_number(rec.eval.many) + "  med " +
           csv_number(rec.eval.med) + "  few " + csv_number(rec.eval.few));
  return rec;
}

// ---------------------------------------------------------------------------
// Sweeps. Each writes one CSV with a header row; every row is reproducible by
// run_pipeline on the variant's config and seed.

struct AblationVariant {
  GenMode gen = GenMode::none;
  bool weight = false;
  bool filter = false;

  std::string name() const {
    if (gen == GenMode::none) return weight || filter ? std::string("baseline+") + (weight ? "W" : "") + (filter ? "F" : "") : "baseline";
    std::string s = gen == GenMode::ddpm ? "Gen-D" : "Gen-C";
    if (weight) s += "+W";
    if (filter) s += "+F";
    return s;
  }
};

inline std::vector<AblationVariant> default_ablation_variants() {
  return {{GenMode::none, false, false}, {GenMode::ddpm, false, false}, {GenMode::cbdm, false, false},
          {GenMode::ddpm, true, false},  {GenMode::cbdm, true, false},  {GenMode::cbdm, true, true}};
}

// Weight off means every sample counts fully (omega = 1).
inline PipelineConfig ablation_config(const PipelineConfig& base, const AblationVariant& v, std::uint64_t seed) {
  PipelineConfig c = base;
  c.seed = seed;
  c.diffusion.mode = v.gen;
  if (!v.weight) c.omega = 1.0;
  if (!v.filter) {
    c.filter.reset();
    c.filter_keep_fraction.reset();
  } else if (!c.filter) {
    c.filter = FilterConfig{};
  }
  return c;
}

struct SweepContext {
  fs::path out;
  ArtifactCache* cache = nullptr;

  fs::path run_dir(const std::string& name) const { return out / "runs" / name; }
};

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::string& header) : path_(path) {
    fs::create_directories(path.parent_path());
    os_.open(path);
    if (!os_) throw PipelineError("cannot write " + path.string());
    os_ << header << '\n';
    os_.flush();
  }
  void row(const std::string& r) {
    os_ << r << '\n';
    os_.flush();
  }

 private:
  fs::path path_;
  std::ofstream os_;
};

inline std::string group_cols(const EvalReport& e) {
  return csv_number(e.overall) + "," + csv_number(e.many) + "," + csv_number(e.med) + "," + csv_number(e.few) + "," +
         csv_number(e.mf);
}

// Columns: variant,gen,weight,filter,seed,overall,many,med,few,acc_mf,n_gen,n_filt
inline std::vector<std::pair<AblationVariant, RunRecord>> run_ablation_grid(const PipelineConfig& base,
                                                                            const std::vector<AblationVariant>& variants,
                                                                            const std::vector<std::uint64_t>& seeds,
                                                                            const SweepContext& ctx) {
  if (seeds.empty()) throw PipelineError("ablation: at least one seed required");
  CsvWriter csv(ctx.out / "reports" / "ablation.csv",
                "variant,gen,weight,filter,seed,overall,many,med,few,acc_mf,n_gen,n_filt");
  std::vector<std::pair<AblationVariant, RunRecord>> out;
  for (auto seed : seeds)
    for (const auto& v : variants) {
      auto c = ablation_config(base, v, seed);
      c.out = ctx.run_dir(v.name() + "_s" + std::to_string(seed)).string();
      log_line("== ablation " + v.name() + " seed " + std::to_string(seed));
      auto rec = run_pipeline(c, {ctx.cache, std::nullopt});
      csv.row(v.name() + "," + gen_mode_name(v.gen) + "," + (v.weight ? "on" : "off") + "," + (v.filter ? "on" : "off") +
              "," + std::to_string(seed) + "," + group_cols(rec.eval) + "," + std::to_string(rec.n_gen) + "," +
              std::to_string(rec.n_filt));
      out.emplace_back(v, std::move(rec));
    }
  return out;
}

// Columns: omega,seed,overall,many,med,few,acc_mf,n_gen,n_filt
inline std::vector<RunRecord> run_omega_sweep(const PipelineConfig& base, const std::vector<double>& omegas,
                                              const std::vector<std::uint64_t>& seeds, const SweepContext& ctx) {
  for (double w : omegas)
    if (!(w >= 0.0 && w <= 1.0)) throw PipelineError("omega sweep: every omega must lie in [0, 1]");
  CsvWriter csv(ctx.out / "reports" / "omega.csv", "omega,seed,overall,many,med,few,acc_mf,n_gen,n_filt");
  std::vector<RunRecord> out;
  for (auto seed : seeds)
    for (double w : omegas) {
      PipelineConfig c = base;
      c.seed = seed;
      c.omega = w;
      c.out = ctx.run_dir("omega" + csv_number(w) + "_s" + std::to_string(seed)).string();
      log_line("== omega " + csv_number(w) + " seed " + std::to_string(seed));
      auto rec = run_pipeline(c, {ctx.cache, std::nullopt});
      csv.row(csv_number(w) + "," + std::to_string(seed) + "," + group_cols(rec.eval) + "," +
              std::to_string(rec.n_gen) + "," + std::to_string(rec.n_filt));
      out.push_back(std::move(rec));
    }
  return out;
}

// A filter setting: fixed threshold, or a threshold calibrated to keep a
// fraction of the generated set.
struct FilterSetting {
  FilterMetric metric = FilterMetric::d3;
  std::optional<double> threshold;
  std::optional<double> keep_fraction;

  std::string label() const {
    return std::string(metric_name(metric)) +
           (keep_fraction ? "_keep" + csv_number(*keep_fraction) : "_t" + csv_number(threshold.value_or(0)));
  }
};

// Columns: metric,threshold,keep_fraction,seed,n_gen,n_filt,overall,many,med,few,acc_mf
inline std::vector<RunRecord> run_filter_sweep(const PipelineConfig& base, const std::vector<FilterSetting>& grid,
                                               const std::vector<std::uint64_t>& seeds, const SweepContext& ctx) {
  for (const auto& s : grid) {
    if (!s.threshold && !s.keep_fraction) throw PipelineError("filter sweep: each setting needs a threshold or keep fraction");
    if (s.threshold) FilterConfig{s.metric, *s.threshold}.validate();
  }
  CsvWriter csv(ctx.out / "reports" / "filter.csv",
                "metric,threshold,keep_fraction,seed,n_gen,n_filt,overall,many,med,few,acc_mf");
  std::vector<RunRecord> out;
  for (auto seed : seeds)
    for (const auto& s : grid) {
      PipelineConfig c = base;
      c.seed = seed;
      c.filter = FilterConfig{s.metric, s.threshold.value_or(0.0)};
      c.filter_keep_fraction = s.keep_fraction;
      c.out = ctx.run_dir("filter_" + s.label() + "_s" + std::to_string(seed)).string();
      log_line("== filter " + s.label() + " seed " + std::to_string(seed));
      auto rec = run_pipeline(c, {ctx.cache, std::nullopt});
      csv.row(std::string(metric_name(s.metric)) + "," + csv_number(rec.filter_threshold) + "," +
              (s.keep_fraction ? csv_number(*s.keep_fraction) : "nan") + "," + std::to_string(seed) + "," +
              std::to_string(rec.n_gen) + "," + std::to_string(rec.n_filt) + "," + group_cols(rec.eval));
      out.push_back(std::move(rec));
    }
  return out;
}

// Columns: setting,p_ma,seed,acc_mf,overall,many,med,few,n_gen
inline std::vector<RunRecord> run_role_study(const PipelineConfig& base, const std::vector<double>& p_ma,
                                             const std::vector<std::uint64_t>& seeds, const SweepContext& ctx) {
  for (double p : p_ma)
    if (!(p >= 0.0 && p <= 1.0)) throw PipelineError("role study: every p_ma must lie in [0, 1]");
  CsvWriter csv(ctx.out / "reports" / "role.csv", "setting,p_ma,seed,acc_mf,overall,many,med,few,n_gen");
  std::vector<RunRecord> out;
  auto row = [&](const std::string& setting, double p, std::uint64_t seed, const RunRecord& r) {
    csv.row(setting + "," + csv_number(p) + "," + std::to_string(seed) + "," + csv_number(r.eval.mf) + "," +
            csv_number(r.eval.overall) + "," + csv_number(r.eval.many) + "," + csv_number(r.eval.med) + "," +
            csv_number(r.eval.few) + "," + std::to_string(r.n_gen));
  };
  for (auto seed : seeds) {
    PipelineConfig c = base;
    c.seed = seed;
    c.diffusion.mode = GenMode::none;
    c.out = ctx.run_dir("role_wo_gen_s" + std::to_string(seed)).string();
    log_line("== role w/o gen seed " + std::to_string(seed));
    auto rec = run_pipeline(c, {ctx.cache, std::nullopt});
    row("w/o gen", std::numeric_limits<double>::quiet_NaN(), seed, rec);
    out.push_back(std::move(rec));
    for (double p : p_ma) {
      PipelineConfig g = base;
      g.seed = seed;
      if (g.diffusion.mode == GenMode::none) g.diffusion.mode = GenMode::cbdm;
      g.out = ctx.run_dir("role_p" + csv_number(p) + "_s" + std::to_string(seed)).string();
      log_line("== role p_ma " + csv_number(p) + " seed " + std::to_string(seed));
      auto r = run_pipeline(g, {ctx.cache, p});
      row("gen", p, seed, r);
      out.push_back(std::move(r));
    }
  }
  return out;
}

// tau = nullopt is plain DDPM. Columns: tau,seed,proxy_fid,proxy_is,acc,many,med,few,acc_mf,n_gen
inline std::vector<RunRecord> run_tau_study(const PipelineConfig& base, const std::vector<std::optional<double>>& taus,
                                            const std::vector<std::uint64_t>& seeds, const SweepContext& ctx) {
  for (const auto& t : taus)
    if (t && !(*t >= 0.0 && std::isfinite(*t))) throw PipelineError("tau study: every tau must be finite and >= 0");
  CsvWriter csv(ctx.out / "reports" / "tau.csv", "tau,seed,proxy_fid,proxy_is,acc,many,med,few,acc_mf,n_gen");
  std::vector<RunRecord> out;
  for (auto seed : seeds)
    for (const auto& t : taus) {
      PipelineConfig c = base;
      c.seed = seed;
      c.eval.proxy = true;
      if (t) {
        c.diffusion.mode = GenMode::cbdm;
        c.diffusion.tau = *t;
      } else {
        c.diffusion.mode = GenMode::ddpm;
      }
      const std::string label = t ? csv_number(*t) : "none";
      c.out = ctx.run_dir("tau_" + label + "_s" + std::to_string(seed)).string();
      log_line("== tau " + label + " seed " + std::to_string(seed));
      auto rec = run_pipeline(c, {ctx.cache, std::nullopt});
      csv.row(label + "," + std::to_string(seed) + "," + csv_number(rec.eval.proxy_fid) + "," +
              csv_number(rec.eval.proxy_is) + "," + csv_number(rec.eval.overall) + "," + csv_number(rec.eval.many) +
              "," + csv_number(rec.eval.med) + "," + csv_number(rec.eval.few) + "," + csv_number(rec.eval.mf) + "," +
              std::to_string(rec.n_gen));
      out.push_back(std::move(rec));
    }
  return out;
}

}  // namespace diffult
