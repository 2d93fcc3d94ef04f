// diffult: command-line front end for the long-tail generation pipeline.
//
//   diffult pipeline --config cfg.json --seed 1 --out runs/a
//   diffult make-data --out runs/a && diffult train-diffusion --out runs/a && ...
//   diffult sweep ablation --seeds 0,1,2 --out runs/grid
//
// Stage subcommands read and write the same artifact layout as `pipeline`, so
// running them in order reproduces a pipeline run.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "diffult/pipeline.hpp"
#include "diffult/runtime.hpp"

using namespace diffult;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration file (absent keys take defaults)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--set", c.overrides, "override a config value, e.g. classifier.epochs=5")->take_all();
  app->add_flag("--quiet", c.quiet, "suppress progress output");
}

PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? parse_config_text("") : parse_config(c.config);
  for (const auto& o : c.overrides) cfg = apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  validate(cfg);
  log_enabled() = !c.quiet;
  return cfg;
}

RunPaths prepare(const PipelineConfig& cfg) {
  RunPaths p{cfg.out};
  p.create();
  write_text(p.effective_config(), config_dump(cfg));
  return p;
}

template <typename T>
std::vector<T> split_list(const std::string& s, T (*conv)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(conv(item));
  return out;
}

std::uint64_t to_u64(const std::string& s) { return std::stoull(s); }
double to_double(const std::string& s) { return std::stod(s); }
std::optional<double> to_tau(const std::string& s) {
  if (s == "none" || s == "ddpm") return std::nullopt;
  return std::stod(s);
}

AblationVariant to_variant(const std::string& s) {
  // gen/weight/filter, e.g. cbdm/on/off
  const auto a = s.find('/'), b = s.rfind('/');
  if (a == std::string::npos || a == b) throw CLI::ValidationError("variant '" + s + "' must look like cbdm/on/off");
  AblationVariant v;
  const std::string g = s.substr(0, a), w = s.substr(a + 1, b - a - 1), f = s.substr(b + 1);
  if (g == "none") v.gen = GenMode::none;
  else if (g == "ddpm") v.gen = GenMode::ddpm;
  else if (g == "cbdm") v.gen = GenMode::cbdm;
  else throw CLI::ValidationError("variant '" + s + "': gen must be none, ddpm or cbdm");
  if ((w != "on" && w != "off") || (f != "on" && f != "off"))
    throw CLI::ValidationError("variant '" + s + "': weight and filter must be on or off");
  v.weight = w == "on";
  v.filter = f == "on";
  return v;
}

// metric:threshold or metric@keep_fraction, e.g. d3:5e-7 or d1@0.8
FilterSetting to_filter_setting(const std::string& s) {
  FilterSetting f;
  const auto colon = s.find(':'), at = s.find('@');
  const auto cut = colon != std::string::npos ? colon : at;
  if (cut == std::string::npos) throw CLI::ValidationError("filter setting '" + s + "' must be metric:threshold or metric@fraction");
  f.metric = parse_metric(s.substr(0, cut));
  const double v = std::stod(s.substr(cut + 1));
  if (colon != std::string::npos) f.threshold = v;
  else f.keep_fraction = v;
  return f;
}

LongTailDataset generated_for_final(const PipelineConfig& cfg, const RunPaths& p, const DataBundle& d) {
  const bool generate = cfg.diffusion.mode != GenMode::none && pipeline_budget(cfg, d, false).total > 0;
  if (!generate) return {d.train.shape, d.train.num_classes, {}};
  const auto path = cfg.filter ? p.filt() : p.gen();
  if (!fs::exists(path)) throw PipelineError("missing " + path.string() + " (run the earlier stages first)");
  return read_ltds(path.string());
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Long-tail recognition with diffusion-generated samples"};
  app.require_subcommand(1);

  Common c;
  auto* make_data_cmd = app.add_subcommand("make-data", "build the long-tailed train set and balanced test set");
  auto* train_diff_cmd = app.add_subcommand("train-diffusion", "train the class-conditional denoiser on data/train.ltds");
  auto* generate_cmd = app.add_subcommand("generate", "sample the generation budget into gen/gen.ltds");
  auto* filter_cmd = app.add_subcommand("filter", "score gen/gen.ltds and write gen/filt.ltds");
  auto* train_cls_cmd = app.add_subcommand("train-classifier", "train f0 on D, or the final classifier on D plus generated data");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "grouped test accuracy of a classifier checkpoint");
  auto* pipeline_cmd = app.add_subcommand("pipeline", "run every stage");
  auto* sweep_cmd = app.add_subcommand("sweep", "experiment sweeps");
  sweep_cmd->require_subcommand(1);
  auto* sw_ablation = sweep_cmd->add_subcommand("ablation", "generation / weighting / filtering grid");
  auto* sw_omega = sweep_cmd->add_subcommand("omega", "weight of generated samples");
  auto* sw_filter = sweep_cmd->add_subcommand("filter", "filter metric and threshold grid");
  auto* sw_role = sweep_cmd->add_subcommand("role", "share of many-shot images seen by the denoiser");
  auto* sw_tau = sweep_cmd->add_subcommand("tau", "class-balancing strength vs proxy FID/IS and accuracy");

  for (auto* s : {make_data_cmd, train_diff_cmd, generate_cmd, filter_cmd, train_cls_cmd, evaluate_cmd, pipeline_cmd,
                  sw_ablation, sw_omega, sw_filter, sw_role, sw_tau})
    add_common(s, c);

  std::string stage = "final", checkpoint;
  train_cls_cmd->add_option("--stage", stage, "f0 or final")->check(CLI::IsMember({"f0", "final"}));
  evaluate_cmd->add_option("--checkpoint", checkpoint, "classifier checkpoint (default ckpt/final.bin)");

  std::string seeds = "0,1,2", variants, omegas = "0,0.3,1", grid = "d3:0,d3:5e-7,d3:0.01,d3:0.1,d3:0.5",
              pmas = "0,0.5,1", taus = "none,1,5";
  for (auto* s : {sw_ablation, sw_omega, sw_filter, sw_role, sw_tau})
    s->add_option("--seeds", seeds, "comma-separated master seeds")->capture_default_str();
  sw_ablation->add_option("--variants", variants, "comma-separated gen/weight/filter triples (default: the six-row grid)");
  sw_omega->add_option("--omegas", omegas, "comma-separated omegas")->capture_default_str();
  sw_filter->add_option("--grid", grid, "comma-separated metric:threshold or metric@keep_fraction")->capture_default_str();
  sw_role->add_option("--p-ma", pmas, "comma-separated many-shot fractions")->capture_default_str();
  sw_tau->add_option("--taus", taus, "comma-separated taus; 'none' is plain DDPM")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = resolve(c);
    if (make_data_cmd->parsed()) {
      const auto p = prepare(cfg);
      const auto d = make_data(cfg);
      write_ltds(p.train().string(), d.train);
      write_ltds(p.test().string(), d.test);
      std::cout << "train " << d.train.size() << " samples, test " << d.test.size() << " samples\n";
    } else if (train_diff_cmd->parsed()) {
      const auto p = prepare(cfg);
      const auto d = load_data(cfg, p);
      auto res = stage_train_denoiser(cfg, d.train);
      write_step_log(p.report("denoiser_loss").string(), res.log);
      res.model.save(p.denoiser().string());
    } else if (generate_cmd->parsed()) {
      const auto p = prepare(cfg);
      const auto d = load_data(cfg, p);
      const auto den = DenoiserNet<float>::load(p.denoiser().string());
      const auto gen = stage_generate(cfg, den, pipeline_budget(cfg, d, false), d.train.shape);
      write_ltds(p.gen().string(), gen);
      std::cout << "generated " << gen.size() << " samples\n";
    } else if (filter_cmd->parsed()) {
      if (!cfg.filter) throw PipelineError("filter is disabled in the configuration");
      const auto p = prepare(cfg);
      const auto d = load_data(cfg, p);
      const auto gen = read_ltds(p.gen().string());
      const auto f0 = ClassifierNet<float>::load(p.f0().string());
      std::optional<FeatureExtractor<float>> fx;
      if (cfg.filter->metric == FilterMetric::d2) fx.emplace(strip_head(f0));
      auto fc = *cfg.filter;
      const auto scores = score_all(gen, fc.metric, {&d.train, &f0, fx ? &*fx : nullptr});
      if (cfg.filter_keep_fraction) fc.threshold = calibrate_threshold(scores, fc.metric, *cfg.filter_keep_fraction);
      const auto res = filter_by_scores(gen, scores, fc);
      write_filter_report(p.report("filter").string(), res.report);
      write_ltds(p.filt().string(), res.filtered);
      std::cout << "kept " << res.report.kept_count << " of " << gen.size() << " (threshold " << csv_number(fc.threshold)
                << ")\n";
    } else if (train_cls_cmd->parsed()) {
      const auto p = prepare(cfg);
      const auto d = load_data(cfg, p);
      if (stage == "f0") {
        auto res = stage_train_classifier(cfg, d.train, "f0");
        write_epoch_log(p.report("f0_epochs").string(), res.log);
        res.model.save(p.f0().string());
      } else {
        const auto extra = generated_for_final(cfg, p, d);
        auto res = stage_train_classifier(cfg, extra.size() ? merge(d.train, extra) : d.train, "final");
        write_epoch_log(p.report("final_epochs").string(), res.log);
        res.model.save(p.final_model().string());
      }
    } else if (evaluate_cmd->parsed()) {
      const auto p = prepare(cfg);
      const auto d = load_data(cfg, p);
      const auto model = ClassifierNet<float>::load(checkpoint.empty() ? p.final_model().string() : checkpoint);
      const auto r = stage_evaluate(model, d);
      const std::string text = eval_csv_header(d.test.num_classes) + "\n" + eval_csv_row(r) + "\n";
      write_text(p.report("eval"), text);
      std::cout << text;
    } else if (pipeline_cmd->parsed()) {
      const auto rec = run_pipeline(cfg);
      std::cout << run_csv_header(cfg.data.num_classes) << "\n" << run_csv_row(rec) << "\n";
    } else {
      fs::create_directories(cfg.out);
      write_text(fs::path(cfg.out) / "config.effective", config_dump(cfg));
      ArtifactCache cache(fs::path(cfg.out) / "cache");
      const SweepContext ctx{cfg.out, &cache};
      const auto seed_list = split_list<std::uint64_t>(seeds, to_u64);
      if (sw_ablation->parsed()) {
        const auto vs = variants.empty() ? default_ablation_variants() : split_list<AblationVariant>(variants, to_variant);
        run_ablation_grid(cfg, vs, seed_list, ctx);
      } else if (sw_omega->parsed()) {
        run_omega_sweep(cfg, split_list<double>(omegas, to_double), seed_list, ctx);
      } else if (sw_filter->parsed()) {
        run_filter_sweep(cfg, split_list<FilterSetting>(grid, to_filter_setting), seed_list, ctx);
      } else if (sw_role->parsed()) {
        run_role_study(cfg, split_list<double>(pmas, to_double), seed_list, ctx);
      } else if (sw_tau->parsed()) {
        run_tau_study(cfg, split_list<std::optional<double>>(taus, to_tau), seed_list, ctx);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
