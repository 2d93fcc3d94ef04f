#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "diffult/dataset.hpp"
#include "test_util.hpp"

using namespace diffult;

namespace {

TEST(LongTailCounts, TailEqualsHeadOverRatio) {
  const auto c = build_longtail_counts(5000, 100, 10);
  ASSERT_EQ(c.size(), 10u);
  EXPECT_EQ(c[0], 5000u);
  EXPECT_EQ(c[9], 50u);
}

TEST(LongTailCounts, RatioOneIsBalanced) {
  EXPECT_EQ(build_longtail_counts(100, 1, 5), (std::vector<std::size_t>{100, 100, 100, 100, 100}));
}

TEST(LongTailCounts, ThreeClassHandComputed) {
  // 100 * 100^0 = 100, 100 * 100^-0.5 = 10, 100 * 100^-1 = 1
  EXPECT_EQ(build_longtail_counts(100, 100, 3), (std::vector<std::size_t>{100, 10, 1}));
}

TEST(LongTailCounts, StepProfile) {
  EXPECT_EQ(build_longtail_counts(100, 10, 4, LongTailProfile::step), (std::vector<std::size_t>{100, 100, 10, 10}));
}

TEST(LongTailCounts, RejectsInvalidArguments) {
  EXPECT_THROW(build_longtail_counts(100, 0.5, 10), DatasetError);
  EXPECT_THROW(build_longtail_counts(10, 100, 10), DatasetError);  // 10/100 rounds to 0
  EXPECT_THROW(build_longtail_counts(0, 2, 10), DatasetError);
  EXPECT_THROW(build_longtail_counts(100, 2, 1), DatasetError);
}

TEST(LongTailCounts, PropertyNonIncreasingAndRatio) {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = static_cast<int>(rng.uniform_int(2, 120));
    const auto n1 = static_cast<std::size_t>(rng.uniform_int(1, 20000));
    const double r = rng.uniform(1.0, std::max(1.0, static_cast<double>(n1)));
    for (auto profile : {LongTailProfile::exponential, LongTailProfile::step}) {
      const auto c = build_longtail_counts(n1, r, m, profile);
      ASSERT_TRUE(std::is_sorted(c.rbegin(), c.rend())) << "n1=" << n1 << " r=" << r << " m=" << m;
      EXPECT_EQ(c.front(), n1);
      EXPECT_EQ(static_cast<long>(c.back()), std::lround(static_cast<double>(n1) / r));
      EXPECT_GE(c.back(), 1u);
    }
  }
}

LongTailDataset tiny_balanced(std::size_t per_class, int classes, std::uint64_t seed = 1) {
  LongTailDataset d{{2, 2, 1}, classes, {}};
  Rng rng(seed);
  for (int j = 0; j < classes; ++j)
    for (std::size_t i = 0; i < per_class; ++i) {
      Sample s;
      s.label = j;
      s.pixels = {static_cast<std::uint8_t>(rng.uniform_int(0, 255)), static_cast<std::uint8_t>(i),
                  static_cast<std::uint8_t>(j), 7};
      d.samples.push_back(s);
    }
  return d;
}

TEST(Subsample, TwoClassExample) {
  auto d = tiny_balanced(5, 2);
  auto lt = subsample_longtail(d, {2, 1}, 3);
  EXPECT_EQ(lt.size(), 3u);
  EXPECT_EQ(lt.class_counts(), (std::vector<std::size_t>{2, 1}));
  EXPECT_TRUE(lt.is_longtail_ordered());
}

TEST(Subsample, FullCountsIsIdentityMembership) {
  auto d = tiny_balanced(6, 3);
  auto lt = subsample_longtail(d, {6, 6, 6}, 9);
  EXPECT_EQ(lt, d);
}

TEST(Subsample, DeterministicAndResetsOrigin) {
  auto d = tiny_balanced(20, 3);
  for (auto& s : d.samples) s.origin = Origin::generated;
  auto a = subsample_longtail(d, {10, 5, 2}, 11);
  auto b = subsample_longtail(d, {10, 5, 2}, 11);
  auto c = subsample_longtail(d, {10, 5, 2}, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.count(Origin::real), a.size());
}

TEST(Subsample, InsufficientSamplesIsError) {
  auto d = tiny_balanced(3, 2);
  EXPECT_THROW(subsample_longtail(d, {4, 1}, 1), DatasetError);
  EXPECT_THROW(subsample_longtail(d, {1}, 1), DatasetError);
}

TEST(ClassGroups, BoundariesFollowStrictInequalities) {
  const auto g = class_groups({101, 100, 20, 19});
  EXPECT_EQ(g.many, (std::set<int>{0}));
  EXPECT_EQ(g.med, (std::set<int>{1, 2}));
  EXPECT_EQ(g.few, (std::set<int>{3}));
  EXPECT_THROW(class_groups({1, 2}, 20, 20), DatasetError);
}

TEST(ClassGroups, PropertyPartition) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(rng.uniform_int(1, 60)));
    for (auto& c : counts) c = static_cast<std::size_t>(rng.uniform_int(1, 300));
    const auto few_max = static_cast<std::size_t>(rng.uniform_int(1, 100));
    const auto many_min = few_max + static_cast<std::size_t>(rng.uniform_int(1, 100));
    const auto g = class_groups(counts, many_min, few_max);
    EXPECT_EQ(g.many.size() + g.med.size() + g.few.size(), counts.size());
    for (int j = 0; j < static_cast<int>(counts.size()); ++j) {
      const int in = static_cast<int>(g.many.count(j) + g.med.count(j) + g.few.count(j));
      EXPECT_EQ(in, 1) << "class " << j;
    }
  }
}

TEST(GenerationBudget, Examples) {
  const auto b = generation_budget({500, 100, 10}, 500);
  EXPECT_EQ(b.per_class, (std::vector<std::size_t>{0, 400, 490}));
  EXPECT_EQ(b.total, 890u);
  const auto z = generation_budget({500, 100, 10}, 0);
  EXPECT_EQ(z.per_class, (std::vector<std::size_t>{0, 0, 0}));
  EXPECT_EQ(z.total, 0u);
}

TEST(GenerationBudget, PropertyTotalsReachTarget) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(rng.uniform_int(1, 100)));
    for (auto& c : counts) c = static_cast<std::size_t>(rng.uniform_int(1, 6000));
    const auto nt = static_cast<std::size_t>(rng.uniform_int(0, 6000));
    const auto b = generation_budget(counts, nt);
    std::size_t closed = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      EXPECT_EQ(counts[j] + b.per_class[j], std::max(counts[j], nt));
      closed += counts[j] < nt ? nt - counts[j] : 0;
    }
    EXPECT_EQ(b.total, closed);
  }
}

TEST(Shapes, SizeAndCounts) {
  const auto d = generate_shapes_dataset({10, 500, 16, 16, 1, 7});
  EXPECT_EQ(d.size(), 5000u);
  EXPECT_EQ(d.class_counts(), std::vector<std::size_t>(10, 500));
  d.validate();
}

TEST(Shapes, DeterministicGivenSeed) {
  const ShapesSpec spec{10, 20, 16, 16, 1, 7};
  const auto a = generate_shapes_dataset(spec);
  const auto b = generate_shapes_dataset(spec);
  EXPECT_EQ(a, b);
  auto other = spec;
  other.seed = 8;
  EXPECT_NE(a, generate_shapes_dataset(other));
}

TEST(Shapes, ClassMeanImagesDiffer) {
  const auto d = generate_shapes_dataset({10, 200, 16, 16, 1, 7});
  const std::size_t px = d.shape.numel();
  std::vector<std::vector<double>> mean(10, std::vector<double>(px, 0.0));
  for (const auto& s : d.samples)
    for (std::size_t i = 0; i < px; ++i) mean[static_cast<std::size_t>(s.label)][i] += byte_to_unit(s.pixels[i]) / 200.0;
  for (int a = 0; a < 10; ++a)
    for (int b = a + 1; b < 10; ++b) {
      double sq = 0.0;
      for (std::size_t i = 0; i < px; ++i) sq += std::pow(mean[a][i] - mean[b][i], 2);
      EXPECT_GT(std::sqrt(sq), 0.05) << shapes::kTemplateNames[a] << " vs " << shapes::kTemplateNames[b];
    }
}

TEST(Shapes, RejectsUnsupportedSpecs) {
  EXPECT_THROW(generate_shapes_dataset({10, 1, 15, 16, 1, 7}), DatasetError);
  EXPECT_THROW(generate_shapes_dataset({11, 1, 16, 16, 1, 7}), DatasetError);
}

TEST(Shapes, MultiChannel) {
  const auto d = generate_shapes_dataset({3, 4, 20, 18, 3, 1});
  EXPECT_EQ(d.shape, (ImageShape{20, 18, 3}));
  d.validate();
}

TEST(Pixels, ByteMappingEndpoints) {
  EXPECT_FLOAT_EQ(byte_to_unit(0), -1.0f);
  EXPECT_FLOAT_EQ(byte_to_unit(255), 1.0f);
  for (int b = 0; b < 256; ++b) EXPECT_EQ(unit_to_byte(byte_to_unit(static_cast<std::uint8_t>(b))), b);
  EXPECT_EQ(unit_to_byte(3.0), 255);
  EXPECT_EQ(unit_to_byte(-3.0), 0);
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(Cifar10, ParsesRecords) {
  const auto dir = diffult::testing::scratch_dir();
  std::vector<std::uint8_t> bytes;
  for (int r = 0; r < 10; ++r) {
    bytes.push_back(static_cast<std::uint8_t>(r == 4 ? 3 : r));
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 1024; ++i) bytes.push_back(static_cast<std::uint8_t>(c == 0 ? 0 : (c == 1 ? 255 : i % 256)));
  }
  ASSERT_EQ(bytes.size(), 30730u);
  write_bytes(dir / "batch.bin", bytes);
  const auto d = load_cifar10_binary({(dir / "batch.bin").string()});
  EXPECT_EQ(d.size(), 10u);
  EXPECT_EQ(d.num_classes, 10);
  EXPECT_EQ(d.samples[4].label, 3);
  // planar -> interleaved: pixel 0 is (R=0, G=255, B=0)
  EXPECT_FLOAT_EQ(byte_to_unit(d.samples[0].pixels[0]), -1.0f);
  EXPECT_FLOAT_EQ(byte_to_unit(d.samples[0].pixels[1]), 1.0f);
  EXPECT_EQ(d.samples[0].pixels[3 * 5 + 2], 5);
}

TEST(Cifar10, RejectsMalformedFiles) {
  const auto dir = diffult::testing::scratch_dir();
  write_bytes(dir / "short.bin", std::vector<std::uint8_t>(3072, 0));
  EXPECT_THROW(load_cifar10_binary({(dir / "short.bin").string()}), DatasetError);
  std::vector<std::uint8_t> bad(3073, 0);
  bad[0] = 10;
  write_bytes(dir / "label.bin", bad);
  EXPECT_THROW(load_cifar10_binary({(dir / "label.bin").string()}), DatasetError);
}

LongTailDataset random_dataset(Rng& rng) {
  LongTailDataset d;
  d.num_classes = static_cast<int>(rng.uniform_int(1, 300));
  d.shape = {static_cast<std::uint32_t>(rng.uniform_int(1, 5)), static_cast<std::uint32_t>(rng.uniform_int(1, 5)),
             static_cast<std::uint32_t>(rng.uniform_int(1, 3))};
  const auto n = rng.uniform_int(0, 40);
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<int>(rng.uniform_int(0, d.num_classes - 1));
    s.origin = rng.bernoulli(0.5) ? Origin::generated : Origin::real;
    s.pixels.resize(d.shape.numel());
    for (auto& p : s.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    d.samples.push_back(std::move(s));
  }
  return d;
}

TEST(Ltds, PropertyRoundTrip) {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto d = random_dataset(rng);
    EXPECT_EQ(decode_ltds(encode_ltds(d)), d);
  }
}

TEST(Ltds, FileRoundTripAndEmptySize) {
  const auto dir = diffult::testing::scratch_dir();
  LongTailDataset empty{{16, 16, 1}, 10, {}};
  write_ltds((dir / "e.ltds").string(), empty);
  EXPECT_EQ(std::filesystem::file_size(dir / "e.ltds"), 25u);
  EXPECT_EQ(read_ltds((dir / "e.ltds").string()), empty);
  const auto d = generate_shapes_dataset({4, 3, 16, 16, 1, 2});
  write_ltds((dir / "d.ltds").string(), d);
  EXPECT_EQ(read_ltds((dir / "d.ltds").string()), d);
}

TEST(Ltds, DecodeErrors) {
  LongTailDataset d{{1, 1, 1}, 3, {{{9}, 2, Origin::real}}};
  auto bytes = encode_ltds(d);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_ltds(bad_magic), DatasetError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_ltds(truncated), DatasetError);
  auto bad_label = bytes;
  bad_label[25] = 3;  // label == M
  EXPECT_THROW(decode_ltds(bad_label), DatasetError);
  EXPECT_THROW(decode_ltds(std::vector<std::uint8_t>{'L', 'T', 'D', 'S', '1', 0}), DatasetError);
}

}  // namespace
