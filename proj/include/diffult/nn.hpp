#pragma once

// Parameterized layers and checkpoint serialization.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffult/autograd.hpp"
#include "diffult/ops.hpp"
#include "diffult/rng.hpp"

namespace diffult::nn {

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  // He-normal initialization scaled by `gain`.
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
         std::size_t stride_, std::size_t pad_, Rng& rng, double gain = 1.0)
      : stride(stride_), pad(pad_) {
    const double fan_in = static_cast<double>(cin * k * k);
    weight = &ps.add(name + ".weight", normal_init<T>({cout, cin, k, k}, gain * std::sqrt(2.0 / fan_in), rng));
    bias = &ps.add(name + ".bias", Tensor<T>({cout}));
  }

  Var<T> operator()(Tape<T>& tp, const Var<T>& x) const {
    return ops::conv2d(x, tp.leaf(*weight), tp.leaf(*bias), stride, pad);
  }
  std::size_t out_channels() const { return weight->value.dim(0); }
};

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         double gain = 1.0) {
    weight = &ps.add(name + ".weight", normal_init<T>({out, in}, gain * std::sqrt(1.0 / static_cast<double>(in)), rng));
    bias = &ps.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(Tape<T>& tp, const Var<T>& x) const {
    return ops::linear(x, tp.leaf(*weight), tp.leaf(*bias));
  }
};

template <typename T>
struct GroupNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterSet<T>& ps, const std::string& name, std::size_t ch, std::size_t groups_) : groups(groups_) {
    if (ch % groups != 0)
      throw std::invalid_argument(name + ": " + std::to_string(ch) + " channels not divisible by " +
                                  std::to_string(groups) + " groups");
    gamma = &ps.add(name + ".gamma", Tensor<T>({ch}, T{1}));
    beta = &ps.add(name + ".beta", Tensor<T>({ch}));
  }

  Var<T> operator()(Tape<T>& tp, const Var<T>& x) const {
    return ops::group_norm(x, tp.leaf(*gamma), tp.leaf(*beta), groups);
  }
};

template <typename T>
struct BatchNorm2d {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  ops::BatchNormStats<T>* stats = nullptr;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterSet<T>& ps, std::deque<std::pair<std::string, ops::BatchNormStats<T>>>& buffers,
              const std::string& name, std::size_t ch) {
    gamma = &ps.add(name + ".gamma", Tensor<T>({ch}, T{1}));
    beta = &ps.add(name + ".beta", Tensor<T>({ch}));
    buffers.emplace_back(name, ops::BatchNormStats<T>(ch));
    stats = &buffers.back().second;
  }

  Var<T> operator()(Tape<T>& tp, const Var<T>& x, bool training) const {
    return ops::batch_norm(x, tp.leaf(*gamma), tp.leaf(*beta), *stats, training);
  }
};

// Named tensors making up a model's full state.
template <typename T>
using StateDict = std::vector<std::pair<std::string, Tensor<T>*>>;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic(8) version(u32) kind(u32 len + bytes) meta(u32 count, u32 values)
// entries(u32 count; each: name, rank, dims, float32 payload). Little-endian.
template <typename T>
void save_checkpoint(const std::string& path, const std::string& kind, const std::vector<std::uint32_t>& meta,
                     const StateDict<T>& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(kind.size()));
  os.write(kind.data(), static_cast<std::streamsize>(kind.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(meta.size()));
  for (auto v : meta) detail::write_u32(os, v);
  detail::write_u32(os, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
    for (T v : t->data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::write_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct CheckpointHeader {
  std::string kind;
  std::vector<std::uint32_t> meta;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const auto version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  CheckpointHeader h;
  h.kind.resize(detail::read_u32(is));
  if (!is.read(h.kind.data(), static_cast<std::streamsize>(h.kind.size())))
    throw std::runtime_error("checkpoint: truncated");
  h.meta.resize(detail::read_u32(is));
  for (auto& v : h.meta) v = detail::read_u32(is);
  return h;
}

inline CheckpointHeader peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_checkpoint_header(is);
}

// Loads every entry of `state` by name; extra or missing entries are errors.
template <typename T>
CheckpointHeader load_checkpoint(const std::string& path, const std::string& expected_kind, const StateDict<T>& state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  auto h = read_checkpoint_header(is);
  if (h.kind != expected_kind)
    throw std::runtime_error("checkpoint: " + path + " holds a '" + h.kind + "', expected '" + expected_kind + "'");
  std::map<std::string, Tensor<T>*> by_name;
  for (const auto& [n, t] : state) by_name[n] = t;
  const auto count = detail::read_u32(is);
  if (count != state.size())
    throw std::runtime_error("checkpoint: entry count " + std::to_string(count) + " != " + std::to_string(state.size()));
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name(detail::read_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw std::runtime_error("checkpoint: truncated");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: unexpected entry " + name);
    Shape s(detail::read_u32(is));
    for (auto& d : s) d = detail::read_u32(is);
    if (s != it->second->shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " + shape_str(s) + " vs " +
                               shape_str(it->second->shape()));
    for (auto& v : it->second->data()) {
      const std::uint32_t bits = detail::read_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
  }
  return h;
}

}  // namespace diffult::nn
