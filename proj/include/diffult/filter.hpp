#pragma once

// Scoring of generated samples (pixel distance, feature distance, classifier
// confidence) and threshold filtering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "diffult/dataset.hpp"
#include "diffult/models.hpp"
#include "diffult/ops.hpp"

namespace diffult {

class FilterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FilterMetric { d1, d2, d3 };

inline const char* metric_name(FilterMetric m) {
  switch (m) {
    case FilterMetric::d1: return "d1";
    case FilterMetric::d2: return "d2";
    case FilterMetric::d3: return "d3";
  }
  return "?";
}

inline FilterMetric parse_metric(const std::string& s) {
  if (s == "d1") return FilterMetric::d1;
  if (s == "d2") return FilterMetric::d2;
  if (s == "d3") return FilterMetric::d3;
  throw FilterError("unknown filter metric '" + s + "' (expected d1, d2 or d3)");
}

// d1 and d2 keep scores <= threshold; d3 keeps scores >= threshold.
struct FilterConfig {
  FilterMetric metric = FilterMetric::d3;
  double threshold = 5e-7;

  void validate() const {
    if (!std::isfinite(threshold)) throw FilterError("filter.threshold must be finite");
    if (metric == FilterMetric::d3 && !(threshold >= 0.0 && threshold <= 1.0))
      throw FilterError("filter.threshold must lie in [0, 1] for d3");
  }
  bool keeps(double score) const { return metric == FilterMetric::d3 ? score >= threshold : score <= threshold; }
  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

// ---------------------------------------------------------------------------
// Single-sample scores

// Euclidean distance on 0-255 byte values to the nearest real sample of the
// same label.
inline double score_d1(const Sample& x, const LongTailDataset& real) {
  std::int64_t best = -1;
  for (const auto& r : real.samples) {
    if (r.label != x.label) continue;
    if (r.pixels.size() != x.pixels.size()) throw FilterError("d1: pixel count mismatch");
    std::int64_t s = 0;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      const std::int64_t d = static_cast<std::int64_t>(x.pixels[i]) - r.pixels[i];
      s += d * d;
    }
    if (best < 0 || s < best) best = s;
  }
  if (best < 0) throw FilterError("d1: no real sample with label " + std::to_string(x.label));
  return std::sqrt(static_cast<double>(best));
}

namespace detail {

inline double min_feature_distance(std::span<const float> f, const Tensor<float>& bank,
                                   const std::vector<std::size_t>& rows) {
  const std::size_t d = f.size();
  double best = std::numeric_limits<double>::infinity();
  for (auto r : rows) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(f[k]) - bank[r * d + k];
      s += diff * diff;
    }
    best = std::min(best, s);
  }
  return std::sqrt(best);
}

}  // namespace detail

// Euclidean distance in extractor feature space to the nearest real sample of
// the same label.
inline double score_d2(const Sample& x, const LongTailDataset& real, const FeatureExtractor<float>& fx) {
  LongTailDataset one{real.shape, real.num_classes, {x}};
  const auto fxx = fx.extract(to_tensor<float>(one));
  std::vector<std::size_t> same;
  for (std::size_t i = 0; i < real.size(); ++i)
    if (real.samples[i].label == x.label) same.push_back(i);
  if (same.empty()) throw FilterError("d2: no real sample with label " + std::to_string(x.label));
  const auto bank = fx.extract(to_tensor<float>(real, same));
  std::vector<std::size_t> rows(same.size());
  std::iota(rows.begin(), rows.end(), 0);
  return detail::min_feature_distance(fxx.data(), bank, rows);
}

// Softmax probability that f0 assigns to the sample's label.
inline double score_d3(const Sample& x, const LongTailDataset& like, const ClassifierNet<float>& f0) {
  LongTailDataset one{like.shape, like.num_classes, {x}};
  const auto logits = predict_logits(f0, to_tensor<float>(one));
  const auto p = ops::softmax_row<double>(std::vector<double>(logits.data().begin(), logits.data().end()));
  return p.at(static_cast<std::size_t>(x.label));
}

// ---------------------------------------------------------------------------
// Batch scoring and filtering

struct FilterResources {
  const LongTailDataset* real = nullptr;
  const ClassifierNet<float>* f0 = nullptr;
  const FeatureExtractor<float>* extractor = nullptr;
};

// Scores every generated sample; nearest-neighbour search is exhaustive.
inline std::vector<double> score_all(const LongTailDataset& gen, FilterMetric metric, const FilterResources& res) {
  std::vector<double> scores(gen.size());
  if (gen.size() == 0) return scores;
  switch (metric) {
    case FilterMetric::d1: {
      if (!res.real) throw FilterError("filter d1 needs the real dataset");
      for (std::size_t i = 0; i < gen.size(); ++i) scores[i] = score_d1(gen.samples[i], *res.real);
      break;
    }
    case FilterMetric::d2: {
      if (!res.real || !res.extractor) throw FilterError("filter d2 needs the real dataset and a feature extractor");
      const auto bank = res.extractor->extract(to_tensor<float>(*res.real));
      const auto feats = res.extractor->extract(to_tensor<float>(gen));
      std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(res.real->num_classes));
      for (std::size_t i = 0; i < res.real->size(); ++i)
        by_class[static_cast<std::size_t>(res.real->samples[i].label)].push_back(i);
      const std::size_t d = res.extractor->dim();
      for (std::size_t i = 0; i < gen.size(); ++i) {
        const auto y = static_cast<std::size_t>(gen.samples[i].label);
        if (y >= by_class.size() || by_class[y].empty())
          throw FilterError("d2: no real sample with label " + std::to_string(y));
        scores[i] = detail::min_feature_distance(std::span<const float>(feats.raw() + i * d, d), bank, by_class[y]);
      }
      break;
    }
    case FilterMetric::d3: {
      if (!res.f0) throw FilterError("filter d3 needs the classifier f0");
      const auto logits = predict_logits(*res.f0, to_tensor<float>(gen));
      const std::size_t m = logits.dim(1);
      for (std::size_t i = 0; i < gen.size(); ++i) {
        const std::vector<double> row(logits.raw() + i * m, logits.raw() + (i + 1) * m);
        scores[i] = ops::softmax_row<double>(row).at(static_cast<std::size_t>(gen.samples[i].label));
      }
      break;
    }
  }
  return scores;
}

struct FilterReport {
  FilterConfig config;
  std::vector<double> scores;
  std::vector<bool> kept;
  std::vector<int> labels;
  std::size_t kept_count = 0;
  std::size_t removed_count = 0;
  std::vector<std::size_t> per_class_kept;
};

struct FilterResult {
  LongTailDataset filtered;
  FilterReport report;
};

// Applies the keep rule to precomputed scores; survivors keep their order.
inline FilterResult filter_by_scores(const LongTailDataset& gen, const std::vector<double>& scores,
                                     const FilterConfig& cfg) {
  cfg.validate();
  if (scores.size() != gen.size()) throw FilterError("filter: one score per generated sample required");
  FilterResult out{LongTailDataset{gen.shape, gen.num_classes, {}}, {}};
  auto& rep = out.report;
  rep.config = cfg;
  rep.scores = scores;
  rep.per_class_kept.assign(static_cast<std::size_t>(gen.num_classes), 0);
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const bool keep = cfg.keeps(scores[i]);
    rep.kept.push_back(keep);
    rep.labels.push_back(gen.samples[i].label);
    if (keep) {
      out.filtered.samples.push_back(gen.samples[i]);
      ++rep.per_class_kept[static_cast<std::size_t>(gen.samples[i].label)];
    }
  }
  rep.kept_count = out.filtered.size();
  rep.removed_count = gen.size() - rep.kept_count;
  return out;
}

inline FilterResult apply_filter(const LongTailDataset& gen, const FilterConfig& cfg, const FilterResources& res) {
  cfg.validate();
  return filter_by_scores(gen, score_all(gen, cfg.metric, res), cfg);
}

// Threshold that keeps (at least) the given fraction of samples under the
// metric's keep rule: an order statistic of the score distribution.
inline double calibrate_threshold(std::vector<double> scores, FilterMetric metric, double keep_fraction) {
  if (scores.empty()) throw FilterError("calibrate: no scores");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw FilterError("calibrate: keep fraction must lie in (0, 1]");
  if (metric == FilterMetric::d3)
    std::sort(scores.begin(), scores.end(), std::greater<>());
  else
    std::sort(scores.begin(), scores.end());
  const auto k = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(scores.size())));
  return scores[std::clamp<std::size_t>(k, 1, scores.size()) - 1];
}

inline void write_filter_report(const std::string& path, const FilterReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "sample_index,class,score,kept\n";
  os.precision(6);
  for (std::size_t i = 0; i < r.scores.size(); ++i)
    os << i << ',' << r.labels[i] << ',' << r.scores[i] << ',' << (r.kept[i] ? 1 : 0) << '\n';
}

}  // namespace diffult
