#pragma once

// Long-tailed image datasets: construction, grouping, generation budgets,
// the built-in procedural shapes dataset, CIFAR-10 import and LTDS files.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffult/rng.hpp"
#include "diffult/tensor.hpp"

namespace diffult {

enum class Origin : std::uint8_t { real = 0, generated = 1 };

struct ImageShape {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::size_t numel() const { return std::size_t{height} * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// One image stored as H x W x C bytes (interleaved). Byte b maps to the real
// value 2 * b / 255 - 1.
struct Sample {
  std::vector<std::uint8_t> pixels;
  int label = 0;
  Origin origin = Origin::real;
  friend bool operator==(const Sample&, const Sample&) = default;
};

inline float byte_to_unit(std::uint8_t b) { return 2.0f * (static_cast<float>(b) / 255.0f) - 1.0f; }

inline std::uint8_t unit_to_byte(double x) {
  const double c = std::clamp(x, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(255.0 * (c + 1.0) / 2.0));
}

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LongTailDataset {
  ImageShape shape;
  int num_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (const auto& s : samples) ++counts.at(static_cast<std::size_t>(s.label));
    return counts;
  }

  std::size_t count(Origin o) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [o](const Sample& s) { return s.origin == o; }));
  }

  // Largest over smallest class count (classes with zero samples excluded).
  double ratio() const {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (auto c : class_counts())
      if (c > 0) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
    return hi == 0 ? 0.0 : static_cast<double>(hi) / static_cast<double>(lo);
  }

  // Every class non-empty and counts non-increasing in class index.
  bool is_longtail_ordered() const {
    const auto c = class_counts();
    if (c.empty() || c.back() == 0) return false;
    return std::is_sorted(c.rbegin(), c.rend());
  }

  void validate() const {
    if (num_classes < 1) throw DatasetError("dataset: num_classes must be >= 1");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.label < 0 || s.label >= num_classes)
        throw DatasetError("dataset: sample " + std::to_string(i) + " has label " + std::to_string(s.label) +
                           " outside [0," + std::to_string(num_classes) + ")");
      if (s.pixels.size() != shape.numel())
        throw DatasetError("dataset: sample " + std::to_string(i) + " has " + std::to_string(s.pixels.size()) +
                           " pixel bytes, expected " + std::to_string(shape.numel()));
    }
  }

  friend bool operator==(const LongTailDataset&, const LongTailDataset&) = default;
};

// Images of the selected samples as an NCHW tensor in [-1, 1].
template <typename T = float>
Tensor<T> to_tensor(const LongTailDataset& d, std::span<const std::size_t> indices) {
  const auto& s = d.shape;
  Tensor<T> out({indices.size(), s.channels, s.height, s.width});
  const std::size_t hw = std::size_t{s.height} * s.width;
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& px = d.samples.at(indices[n]).pixels;
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) out[(n * s.channels + c) * hw + i] = static_cast<T>(byte_to_unit(px[i * s.channels + c]));
  }
  return out;
}

template <typename T = float>
Tensor<T> to_tensor(const LongTailDataset& d) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  return to_tensor<T>(d, idx);
}

// Quantizes image n of an NCHW tensor into a sample.
template <typename T>
Sample sample_from_tensor(const Tensor<T>& images, std::size_t n, int label, Origin origin) {
  const std::size_t ch = images.dim(1), hw = images.dim(2) * images.dim(3);
  Sample s;
  s.label = label;
  s.origin = origin;
  s.pixels.resize(ch * hw);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      s.pixels[i * ch + c] = unit_to_byte(static_cast<double>(images[(n * ch + c) * hw + i]));
  return s;
}

enum class LongTailProfile { exponential, step };

// Per-class counts, largest first. Exponential: n_j = round(n1 * r^(-j/(M-1)))
// for j = 0..M-1. Step: the first floor(M/2) classes keep n1, the rest n1/r.
inline std::vector<std::size_t> build_longtail_counts(std::size_t n1, double r, int num_classes,
                                                      LongTailProfile profile = LongTailProfile::exponential) {
  if (n1 < 1) throw DatasetError("build_longtail_counts: n1 must be >= 1");
  if (!(r >= 1.0) || !std::isfinite(r)) throw DatasetError("build_longtail_counts: ratio r must be >= 1");
  if (num_classes < 2) throw DatasetError("build_longtail_counts: need at least 2 classes");
  const double n = static_cast<double>(n1);
  if (std::lround(n / r) < 1)
    throw DatasetError("build_longtail_counts: n1 / r rounds to 0 and would leave an empty class");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes));
  const int m = num_classes;
  for (int j = 0; j < m; ++j) {
    double v;
    if (profile == LongTailProfile::exponential)
      v = n * std::pow(r, -static_cast<double>(j) / static_cast<double>(m - 1));
    else
      v = j < m / 2 ? n : n / r;
    counts[static_cast<std::size_t>(j)] = static_cast<std::size_t>(std::max<long>(1, std::lround(v)));
  }
  counts[0] = n1;
  return counts;
}

// Draws counts[j] samples of each class j without replacement. Selected
// samples keep their relative order from `balanced`; origin flags are reset.
inline LongTailDataset subsample_longtail(const LongTailDataset& balanced, const std::vector<std::size_t>& counts,
                                          std::uint64_t seed) {
  if (counts.size() != static_cast<std::size_t>(balanced.num_classes))
    throw DatasetError("subsample_longtail: " + std::to_string(counts.size()) + " counts for " +
                       std::to_string(balanced.num_classes) + " classes");
  std::vector<std::vector<std::size_t>> by_class(counts.size());
  for (std::size_t i = 0; i < balanced.samples.size(); ++i)
    by_class[static_cast<std::size_t>(balanced.samples[i].label)].push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    auto& idx = by_class[j];
    if (counts[j] > idx.size())
      throw DatasetError("subsample_longtail: class " + std::to_string(j) + " has " + std::to_string(idx.size()) +
                         " samples, " + std::to_string(counts[j]) + " requested");
    Rng rng(derive_seed(seed, j));
    shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(counts[j]));
  }
  std::sort(keep.begin(), keep.end());
  LongTailDataset out{balanced.shape, balanced.num_classes, {}};
  out.samples.reserve(keep.size());
  for (auto i : keep) {
    out.samples.push_back(balanced.samples[i]);
    out.samples.back().origin = Origin::real;
  }
  return out;
}

struct ClassGroups {
  std::set<int> many, med, few;

  enum class Group { many, med, few };
  Group of(int c) const {
    if (many.count(c)) return Group::many;
    if (few.count(c)) return Group::few;
    return Group::med;
  }
};

// many: count > many_min; few: count < few_max; med: the rest.
inline ClassGroups class_groups(const std::vector<std::size_t>& counts, std::size_t many_min = 100,
                                std::size_t few_max = 20) {
  if (many_min <= few_max) throw DatasetError("class_groups: many_min must exceed few_max");
  ClassGroups g;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const int c = static_cast<int>(j);
    if (counts[j] > many_min)
      g.many.insert(c);
    else if (counts[j] < few_max)
      g.few.insert(c);
    else
      g.med.insert(c);
  }
  return g;
}

struct GenerationBudget {
  std::vector<std::size_t> per_class;
  std::size_t total = 0;  // N_gen
};

// Classes below the target N_t receive N_t - |c_j| generated samples.
inline GenerationBudget generation_budget(const std::vector<std::size_t>& counts, std::size_t target) {
  GenerationBudget b;
  b.per_class.reserve(counts.size());
  for (auto c : counts) {
    const std::size_t n = target > c ? target - c : 0;
    b.per_class.push_back(n);
    b.total += n;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Procedural shapes dataset

struct ShapesSpec {
  int num_classes = 10;
  std::size_t per_class = 500;
  std::uint32_t height = 16;
  std::uint32_t width = 16;
  std::uint32_t channels = 1;
  std::uint64_t seed = 7;
  double noise = 0.5;  // additive Gaussian noise, in [-1, 1] units
};

namespace shapes {

inline constexpr int kTemplateCount = 10;
inline constexpr std::array<const char*, kTemplateCount> kTemplateNames = {
    "disk",    "ring",          "square", "square_outline", "triangle",
    "triangle_outline", "diamond", "diamond_outline", "plus",      "cross"};

inline bool in_triangle(double u, double v, double s) {
  // Apex up (v grows downward); scaled by s about the centroid.
  constexpr double cy = (-1.0 + 0.75 + 0.75) / 3.0;
  const double ax = 0.0, ay = cy + s * (-1.0 - cy);
  const double bx = -0.95 * s, by = cy + s * (0.75 - cy);
  const double qx = 0.95 * s, qy = by;
  auto edge = [](double px, double py, double x0, double y0, double x1, double y1) {
    return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
  };
  const double e0 = edge(u, v, ax, ay, bx, by), e1 = edge(u, v, bx, by, qx, qy), e2 = edge(u, v, qx, qy, ax, ay);
  return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
}

inline bool in_plus(double u, double v) {
  return (std::abs(u) <= 0.28 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.28 && std::abs(u) <= 1.0);
}

// Membership test in the canonical frame where shapes span about [-1, 1].
inline bool inside(int kind, double u, double v) {
  const double r2 = u * u + v * v;
  const double box = std::max(std::abs(u), std::abs(v));
  const double l1 = std::abs(u) + std::abs(v);
  switch (kind) {
    case 0: return r2 <= 1.0;
    case 1: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 2: return box <= 0.85;
    case 3: return box <= 0.85 && box >= 0.45;
    case 4: return in_triangle(u, v, 1.0);
    case 5: return in_triangle(u, v, 1.0) && !in_triangle(u, v, 0.45);
    case 6: return l1 <= 1.1;
    case 7: return l1 <= 1.1 && l1 >= 0.6;
    case 8: return in_plus(u, v);
    case 9: {
      constexpr double k = 0.70710678118654752;
      return in_plus(k * (u - v), k * (u + v));
    }
    default: throw DatasetError("shapes: unknown template " + std::to_string(kind));
  }
}

// Renders one image (H x W x C bytes) with randomized placement, rotation,
// scale, intensity and additive noise.
inline std::vector<std::uint8_t> render(int kind, const ShapesSpec& spec, Rng& rng) {
  const double h = spec.height, w = spec.width;
  const double unit = std::min(h, w) / 16.0;
  const double cx = w / 2.0 + rng.uniform(-2.5, 2.5) * unit;
  const double cy = h / 2.0 + rng.uniform(-2.5, 2.5) * unit;
  const double radius = rng.uniform(4.0, 6.2) * unit;
  const double theta = rng.uniform(-0.35, 0.35);
  const double bg = rng.uniform(-1.0, -0.6);
  const double fg = rng.uniform(0.3, 1.0);
  std::vector<double> tint(spec.channels, 1.0);
  if (spec.channels > 1)
    for (auto& t : tint) t = rng.uniform(0.6, 1.0);
  const double ct = std::cos(theta), st = std::sin(theta);
  constexpr int ss = 4;
  std::vector<std::uint8_t> px(std::size_t{spec.height} * spec.width * spec.channels);
  for (std::uint32_t y = 0; y < spec.height; ++y)
    for (std::uint32_t x = 0; x < spec.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double dx = (x + (sx + 0.5) / ss) - cx, dy = (y + (sy + 0.5) / ss) - cy;
          const double u = (ct * dx + st * dy) / radius, v = (-st * dx + ct * dy) / radius;
          hits += inside(kind, u, v) ? 1 : 0;
        }
      const double cover = static_cast<double>(hits) / (ss * ss);
      for (std::uint32_t c = 0; c < spec.channels; ++c) {
        const double val = bg + (fg * tint[c] - bg) * cover + spec.noise * rng.normal();
        px[(std::size_t{y} * spec.width + x) * spec.channels + c] = unit_to_byte(val);
      }
    }
  return px;
}

}  // namespace shapes

// Balanced dataset of procedural shapes, class-major order. Sample i of class
// j depends only on (seed, j, i), so datasets with different per-class counts
// share their leading samples.
inline LongTailDataset generate_shapes_dataset(const ShapesSpec& spec) {
  if (spec.height < 16 || spec.width < 16)
    throw DatasetError("generate_shapes_dataset: images must be at least 16x16");
  if (spec.channels < 1) throw DatasetError("generate_shapes_dataset: need at least one channel");
  if (spec.num_classes < 1 || spec.num_classes > shapes::kTemplateCount)
    throw DatasetError("generate_shapes_dataset: num_classes must be in [1," + std::to_string(shapes::kTemplateCount) +
                       "]");
  LongTailDataset d{{spec.height, spec.width, spec.channels}, spec.num_classes, {}};
  d.samples.reserve(static_cast<std::size_t>(spec.num_classes) * spec.per_class);
  for (int j = 0; j < spec.num_classes; ++j)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng(derive_seed(derive_seed(spec.seed, static_cast<std::uint64_t>(j)), i));
      d.samples.push_back({shapes::render(j, spec, rng), j, Origin::real});
    }
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records (label, then 32x32x3 planar).

inline LongTailDataset load_cifar10_binary(const std::vector<std::string>& paths) {
  constexpr std::size_t kRecord = 3073, kPlane = 1024;
  LongTailDataset d{{32, 32, 3}, 10, {}};
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetError("cifar10: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() % kRecord != 0)
      throw DatasetError("cifar10: " + path + " has " + std::to_string(buf.size()) +
                         " bytes, not a multiple of 3073");
    for (std::size_t off = 0; off < buf.size(); off += kRecord) {
      const int label = buf[off];
      if (label > 9)
        throw DatasetError("cifar10: " + path + " record " + std::to_string(off / kRecord) + " has label byte " +
                           std::to_string(label));
      Sample s;
      s.label = label;
      s.pixels.resize(3 * kPlane);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < kPlane; ++i) s.pixels[i * 3 + c] = buf[off + 1 + c * kPlane + i];
      d.samples.push_back(std::move(s));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// LTDS files: "LTDS1", u32 N, M, H, W, C (little-endian), then N records of
// (u16 label, u8 origin, H*W*C pixel bytes).

inline constexpr char kLtdsMagic[5] = {'L', 'T', 'D', 'S', '1'};

namespace ltds_detail {
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace ltds_detail

inline std::vector<std::uint8_t> encode_ltds(const LongTailDataset& d) {
  d.validate();
  if (d.num_classes > 65536) throw DatasetError("ltds: too many classes for u16 labels");
  std::vector<std::uint8_t> b(kLtdsMagic, kLtdsMagic + 5);
  b.reserve(25 + d.size() * (3 + d.shape.numel()));
  ltds_detail::put_u32(b, static_cast<std::uint32_t>(d.size()));
  ltds_detail::put_u32(b, static_cast<std::uint32_t>(d.num_classes));
  ltds_detail::put_u32(b, d.shape.height);
  ltds_detail::put_u32(b, d.shape.width);
  ltds_detail::put_u32(b, d.shape.channels);
  for (const auto& s : d.samples) {
    b.push_back(static_cast<std::uint8_t>(s.label & 0xff));
    b.push_back(static_cast<std::uint8_t>((s.label >> 8) & 0xff));
    b.push_back(static_cast<std::uint8_t>(s.origin));
    b.insert(b.end(), s.pixels.begin(), s.pixels.end());
  }
  return b;
}

inline LongTailDataset decode_ltds(std::span<const std::uint8_t> b) {
  if (b.size() < 5 || std::memcmp(b.data(), kLtdsMagic, 5) != 0) throw DatasetError("ltds: bad magic");
  if (b.size() < 25) throw DatasetError("ltds: truncated header");
  const auto n = ltds_detail::get_u32(b.data() + 5);
  LongTailDataset d;
  d.num_classes = static_cast<int>(ltds_detail::get_u32(b.data() + 9));
  d.shape = {ltds_detail::get_u32(b.data() + 13), ltds_detail::get_u32(b.data() + 17),
             ltds_detail::get_u32(b.data() + 21)};
  const std::size_t rec = 3 + d.shape.numel();
  if (b.size() < 25 + std::size_t{n} * rec) throw DatasetError("ltds: truncated after header (N=" + std::to_string(n) + ")");
  if (b.size() > 25 + std::size_t{n} * rec) throw DatasetError("ltds: trailing bytes after last record");
  d.samples.resize(n);
  const std::uint8_t* p = b.data() + 25;
  for (std::uint32_t i = 0; i < n; ++i, p += rec) {
    auto& s = d.samples[i];
    s.label = static_cast<int>(p[0]) | (static_cast<int>(p[1]) << 8);
    if (s.label >= d.num_classes)
      throw DatasetError("ltds: record " + std::to_string(i) + " label " + std::to_string(s.label) +
                         " >= M=" + std::to_string(d.num_classes));
    if (p[2] > 1) throw DatasetError("ltds: record " + std::to_string(i) + " has invalid origin flag");
    s.origin = static_cast<Origin>(p[2]);
    s.pixels.assign(p + 3, p + rec);
  }
  return d;
}

inline void write_ltds(const std::string& path, const LongTailDataset& d) {
  const auto bytes = encode_ltds(d);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("ltds: cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DatasetError("ltds: write failed for " + path);
}

inline LongTailDataset read_ltds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("ltds: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_ltds(buf);
}

// Concatenation of two datasets with identical geometry and class count.
inline LongTailDataset merge(const LongTailDataset& a, const LongTailDataset& b) {
  if (!(a.shape == b.shape) || a.num_classes != b.num_classes)
    throw DatasetError("merge: datasets differ in image shape or class count");
  LongTailDataset out = a;
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  return out;
}

}  // namespace diffult
