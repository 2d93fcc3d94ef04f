#include <cmath>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "diffult/filter.hpp"
#include "test_util.hpp"

using namespace diffult;

namespace {

LongTailDataset random_dataset(std::size_t n, int classes, ImageShape shape, Origin origin, Rng& rng) {
  LongTailDataset d{shape, classes, {}};
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<int>(i % static_cast<std::size_t>(classes));
    s.origin = origin;
    s.pixels.resize(shape.numel());
    for (auto& p : s.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    d.samples.push_back(std::move(s));
  }
  return d;
}

double brute_d1(const Sample& x, const LongTailDataset& real) {
  double best = INFINITY;
  for (const auto& r : real.samples) {
    if (r.label != x.label) continue;
    double s = 0;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      const double d = double(x.pixels[i]) - double(r.pixels[i]);
      s += d * d;
    }
    best = std::min(best, std::sqrt(s));
  }
  return best;
}

ClassifierArch tiny_arch(int classes) {
  ClassifierArch a;
  a.num_classes = static_cast<std::uint32_t>(classes);
  a.widths = {4, 8};
  a.blocks_per_stage = 1;
  return a;
}

}  // namespace

TEST(FilterConfig, ValidationAndKeepRule) {
  FilterConfig c{FilterMetric::d3, 0.5};
  EXPECT_TRUE(c.keeps(0.5));
  EXPECT_FALSE(c.keeps(0.49));
  c = {FilterMetric::d1, 10.0};
  EXPECT_TRUE(c.keeps(10.0));
  EXPECT_FALSE(c.keeps(10.01));
  EXPECT_THROW((FilterConfig{FilterMetric::d3, 1.5}.validate()), FilterError);
  EXPECT_THROW((FilterConfig{FilterMetric::d3, -0.1}.validate()), FilterError);
  EXPECT_THROW((FilterConfig{FilterMetric::d1, NAN}.validate()), FilterError);
  EXPECT_NO_THROW((FilterConfig{FilterMetric::d1, 1e6}.validate()));
  EXPECT_EQ(parse_metric("d2"), FilterMetric::d2);
  EXPECT_THROW(parse_metric("d4"), FilterError);
}

TEST(ScoreD1, MatchesBruteForceOnRandomInstances) {
  Rng rng(101);
  for (int inst = 0; inst < 100; ++inst) {
    const int classes = rng.uniform_int(1, 4);
    const ImageShape shape{static_cast<std::uint32_t>(rng.uniform_int(1, 5)), static_cast<std::uint32_t>(rng.uniform_int(1, 5)),
                           static_cast<std::uint32_t>(rng.uniform_int(1, 3))};
    auto real = random_dataset(static_cast<std::size_t>(rng.uniform_int(classes, 3 * classes + 5)), classes, shape,
                               Origin::real, rng);
    auto gen = random_dataset(static_cast<std::size_t>(rng.uniform_int(1, 12)), classes, shape, Origin::generated, rng);
    const auto scores = score_all(gen, FilterMetric::d1, {&real, nullptr, nullptr});
    for (std::size_t i = 0; i < gen.size(); ++i) {
      EXPECT_NEAR(scores[i], brute_d1(gen.samples[i], real), 1e-9);
      EXPECT_DOUBLE_EQ(scores[i], score_d1(gen.samples[i], real));
    }
  }
}

TEST(ScoreD1, ZeroForCopyOfRealSampleAndLabelRestricted) {
  Rng rng(5);
  auto real = random_dataset(6, 2, {4, 4, 1}, Origin::real, rng);
  Sample copy = real.samples[3];
  copy.origin = Origin::generated;
  EXPECT_EQ(score_d1(copy, real), 0.0);
  copy.label = 1 - copy.label;
  EXPECT_GT(score_d1(copy, real), 0.0);
  copy.label = 7;
  EXPECT_THROW(score_d1(copy, real), FilterError);
}

TEST(ScoreD2, MatchesBruteForceOverExtractedFeatures) {
  Rng rng(77);
  const ImageShape shape{8, 8, 1};
  auto real = random_dataset(15, 3, shape, Origin::real, rng);
  auto gen = random_dataset(9, 3, shape, Origin::generated, rng);
  ClassifierNet<float> net(tiny_arch(3), 4);
  const auto fx = strip_head(net);
  const auto rf = fx.extract(to_tensor<float>(real));
  const auto gf = fx.extract(to_tensor<float>(gen));
  const std::size_t d = fx.dim();
  const auto scores = score_all(gen, FilterMetric::d2, {&real, nullptr, &fx});
  for (std::size_t i = 0; i < gen.size(); ++i) {
    double best = INFINITY;
    for (std::size_t j = 0; j < real.size(); ++j) {
      if (real.samples[j].label != gen.samples[i].label) continue;
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = double(gf[i * d + k]) - double(rf[j * d + k]);
        s += diff * diff;
      }
      best = std::min(best, std::sqrt(s));
    }
    EXPECT_NEAR(scores[i], best, 1e-6 * (1 + best));
    EXPECT_NEAR(score_d2(gen.samples[i], real, fx), best, 1e-6 * (1 + best));
  }
}

TEST(ScoreD3, IsSoftmaxOfLabelAndInUnitInterval) {
  Rng rng(12);
  const ImageShape shape{8, 8, 1};
  auto gen = random_dataset(10, 4, shape, Origin::generated, rng);
  ClassifierNet<float> net(tiny_arch(4), 9);
  const auto scores = score_all(gen, FilterMetric::d3, {nullptr, &net, nullptr});
  const auto logits = predict_logits(net, to_tensor<float>(gen));
  for (std::size_t i = 0; i < gen.size(); ++i) {
    double z = 0;
    for (std::size_t m = 0; m < 4; ++m) z += std::exp(double(logits[i * 4 + m]));
    const double p = std::exp(double(logits[i * 4 + static_cast<std::size_t>(gen.samples[i].label)])) / z;
    EXPECT_NEAR(scores[i], p, 1e-9);
    EXPECT_GE(scores[i], 0.0);
    EXPECT_LE(scores[i], 1.0);
    // Batch-of-one inference takes a different GEMM blocking in float.
    EXPECT_NEAR(score_d3(gen.samples[i], gen, net), p, 1e-6);
  }
}

TEST(ScoreAll, MissingResourcesThrow) {
  Rng rng(1);
  auto gen = random_dataset(3, 2, {2, 2, 1}, Origin::generated, rng);
  EXPECT_THROW(score_all(gen, FilterMetric::d1, {}), FilterError);
  EXPECT_THROW(score_all(gen, FilterMetric::d2, {}), FilterError);
  EXPECT_THROW(score_all(gen, FilterMetric::d3, {}), FilterError);
}

TEST(ApplyFilter, KeepsExactlyQualifyingSamplesInOrder) {
  Rng rng(303);
  for (int inst = 0; inst < 100; ++inst) {
    const int classes = rng.uniform_int(1, 5);
    auto gen = random_dataset(static_cast<std::size_t>(rng.uniform_int(0, 40)), classes, {2, 2, 1}, Origin::generated, rng);
    std::vector<double> scores(gen.size());
    // Coarse grid so ties with the threshold occur.
    for (auto& s : scores) s = rng.uniform_int(0, 10) / 10.0;
    const FilterMetric metric = rng.uniform_int(0, 1) ? FilterMetric::d3 : FilterMetric::d2;
    const double thr = rng.uniform_int(0, 10) / 10.0;
    const auto res = filter_by_scores(gen, scores, {metric, thr});

    LongTailDataset expect{gen.shape, gen.num_classes, {}};
    for (std::size_t i = 0; i < gen.size(); ++i) {
      const bool keep = metric == FilterMetric::d3 ? scores[i] >= thr : scores[i] <= thr;
      if (keep) expect.samples.push_back(gen.samples[i]);
      EXPECT_EQ(res.report.kept[i], keep);
    }
    EXPECT_EQ(res.filtered, expect);
    EXPECT_EQ(res.report.kept_count + res.report.removed_count, gen.size());
    std::size_t per = 0;
    for (auto c : res.report.per_class_kept) per += c;
    EXPECT_EQ(per, res.report.kept_count);
  }
}

TEST(ApplyFilter, SurvivorsAreMonotoneInThreshold) {
  Rng rng(9);
  auto gen = random_dataset(200, 3, {2, 2, 1}, Origin::generated, rng);
  std::vector<double> scores(gen.size());
  for (auto& s : scores) s = rng.uniform();
  std::size_t prev_d3 = gen.size() + 1, prev_d1 = 0;
  for (int k = 0; k <= 20; ++k) {
    const double thr = k / 20.0;
    const auto a = filter_by_scores(gen, scores, {FilterMetric::d3, thr}).report.kept_count;
    const auto b = filter_by_scores(gen, scores, {FilterMetric::d1, thr}).report.kept_count;
    EXPECT_LE(a, prev_d3);
    EXPECT_GE(b, prev_d1);
    prev_d3 = a;
    prev_d1 = b;
  }
  EXPECT_EQ(filter_by_scores(gen, scores, {FilterMetric::d3, 0.0}).report.kept_count, gen.size());
}

TEST(ApplyFilter, ScoreCountMismatchThrows) {
  Rng rng(2);
  auto gen = random_dataset(4, 2, {2, 2, 1}, Origin::generated, rng);
  EXPECT_THROW(filter_by_scores(gen, {0.1, 0.2}, {FilterMetric::d1, 1.0}), FilterError);
}

TEST(CalibrateThreshold, KeepsRequestedFraction) {
  Rng rng(41);
  std::vector<double> scores(1000);
  for (auto& s : scores) s = rng.uniform();
  for (double f : {0.1, 0.5, 0.73, 1.0}) {
    const double t3 = calibrate_threshold(scores, FilterMetric::d3, f);
    const double t1 = calibrate_threshold(scores, FilterMetric::d1, f);
    const auto k = static_cast<std::size_t>(std::ceil(f * 1000));
    EXPECT_EQ(std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= t3; }), static_cast<long>(k));
    EXPECT_EQ(std::count_if(scores.begin(), scores.end(), [&](double s) { return s <= t1; }), static_cast<long>(k));
  }
  EXPECT_THROW(calibrate_threshold({}, FilterMetric::d1, 0.5), FilterError);
  EXPECT_THROW(calibrate_threshold(scores, FilterMetric::d1, 0.0), FilterError);
}

TEST(FilterReport, CsvHasOneRowPerSample) {
  Rng rng(3);
  auto gen = random_dataset(5, 2, {2, 2, 1}, Origin::generated, rng);
  const auto res = filter_by_scores(gen, {0.1, 0.9, 0.5, 0.2, 0.7}, {FilterMetric::d3, 0.5});
  const auto path = (diffult::testing::scratch_dir() / "filter.csv").string();
  write_filter_report(path, res.report);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "sample_index,class,score,kept");
  std::vector<std::string> rows;
  while (std::getline(is, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[1], "1,1,0.9,1");
  EXPECT_EQ(rows[3], "3,1,0.2,0");
}
