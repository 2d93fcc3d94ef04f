#pragma once

// Conditional U-Net noise predictor, residual classifier, weighted
// cross-entropy, and the training loops for both.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffult/autograd.hpp"
#include "diffult/dataset.hpp"
#include "diffult/diffusion.hpp"
#include "diffult/nn.hpp"
#include "diffult/ops.hpp"
#include "diffult/optim.hpp"
#include "diffult/rng.hpp"

namespace diffult {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserArch {
  std::uint32_t channels = 1;
  std::uint32_t num_classes = 10;
  std::uint32_t steps = 200;  // valid t is [1, steps]
  std::uint32_t base_width = 32;
  std::uint32_t emb_dim = 128;
  std::uint32_t groups = 8;

  std::vector<std::uint32_t> to_meta() const { return {channels, num_classes, steps, base_width, emb_dim, groups}; }
  static DenoiserArch from_meta(const std::vector<std::uint32_t>& m) {
    if (m.size() != 6) throw std::runtime_error("denoiser checkpoint: bad metadata");
    return {m[0], m[1], m[2], m[3], m[4], m[5]};
  }
  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

// Sinusoidal embedding of integer steps: [sin(t f_i), cos(t f_i)],
// f_i = 10000^(-i / half).
template <typename T>
Tensor<T> timestep_embedding(std::span<const int> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[b * dim + i] = static_cast<T>(std::sin(t[b] * f));
      out[b * dim + half + i] = static_cast<T>(std::cos(t[b] * f));
    }
  return out;
}

template <typename T>
struct ResBlock {
  nn::GroupNorm<T> norm1, norm2;
  nn::Conv2d<T> conv1, conv2;
  nn::Linear<T> emb_proj;
  std::optional<nn::Conv2d<T>> skip;

  ResBlock(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t emb_dim,
           std::size_t groups, Rng& rng)
      : norm1(ps, name + ".norm1", cin, groups),
        norm2(ps, name + ".norm2", cout, groups),
        conv1(ps, name + ".conv1", cin, cout, 3, 1, 1, rng),
        conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng, 0.5),
        emb_proj(ps, name + ".emb", emb_dim, cout, rng) {
    if (cin != cout) skip.emplace(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
  }

  // `emb_act` is SiLU of the conditioning embedding, shared by all blocks.
  Var<T> operator()(Tape<T>& tp, const Var<T>& x, const Var<T>& emb_act) const {
    auto h = conv1(tp, ops::silu(norm1(tp, x)));
    h = ops::add_channel(h, emb_proj(tp, emb_act));
    h = conv2(tp, ops::silu(norm2(tp, h)));
    return ops::add(skip ? (*skip)(tp, x) : x, h);
  }
};

// Two-resolution U-Net: eps_theta(x_t, t, y). The class embedding is added to
// the time embedding after its MLP.
template <typename T>
class DenoiserNet {
 public:
  using scalar_type = T;

  DenoiserNet(const DenoiserArch& arch, std::uint64_t seed) : arch_(arch), ps_(std::make_unique<ParameterSet<T>>()) {
    if (arch.num_classes < 1 || arch.steps < 1 || arch.channels < 1 || arch.emb_dim < 2 || arch.emb_dim % 2)
      throw std::invalid_argument("denoiser: invalid architecture");
    Rng rng(seed);
    auto& ps = *ps_;
    const std::size_t w = arch.base_width, e = arch.emb_dim, g = arch.groups, c = arch.channels;
    time1_ = nn::Linear<T>(ps, "time.fc1", e, e, rng);
    time2_ = nn::Linear<T>(ps, "time.fc2", e, e, rng);
    class_emb_ = &ps.add("class_emb", nn::normal_init<T>({arch.num_classes, e}, 1.0, rng));
    in_ = nn::Conv2d<T>(ps, "in", c, w, 3, 1, 1, rng);
    blocks_.reserve(9);
    blocks_.emplace_back(ps, "enc0.0", w, w, e, g, rng);
    blocks_.emplace_back(ps, "enc0.1", w, w, e, g, rng);
    down_ = nn::Conv2d<T>(ps, "down", w, w, 3, 2, 1, rng);
    blocks_.emplace_back(ps, "enc1.0", w, 2 * w, e, g, rng);
    blocks_.emplace_back(ps, "enc1.1", 2 * w, 2 * w, e, g, rng);
    blocks_.emplace_back(ps, "mid", 2 * w, 2 * w, e, g, rng);
    blocks_.emplace_back(ps, "dec1.0", 4 * w, 2 * w, e, g, rng);
    blocks_.emplace_back(ps, "dec1.1", 4 * w, 2 * w, e, g, rng);
    up_ = nn::Conv2d<T>(ps, "up", 2 * w, w, 3, 1, 1, rng);
    blocks_.emplace_back(ps, "dec0.0", 2 * w, w, e, g, rng);
    blocks_.emplace_back(ps, "dec0.1", 2 * w, w, e, g, rng);
    out_norm_ = nn::GroupNorm<T>(ps, "out.norm", w, g);
    out_ = nn::Conv2d<T>(ps, "out", w, c, 3, 1, 1, rng);
    std::vector<int> all(arch.steps);
    std::iota(all.begin(), all.end(), 1);
    time_table_ = timestep_embedding<T>(all, e);
  }

  DenoiserNet(const DenoiserNet&) = delete;
  DenoiserNet& operator=(const DenoiserNet&) = delete;
  DenoiserNet(DenoiserNet&&) = default;
  DenoiserNet& operator=(DenoiserNet&&) = default;

  const DenoiserArch& arch() const { return arch_; }
  ParameterSet<T>& parameters() { return *ps_; }
  const ParameterSet<T>& parameters() const { return *ps_; }

  Var<T> forward(Tape<T>& tp, const Var<T>& x, std::span<const int> t, std::span<const int> y) const {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[1] != arch_.channels || xs[2] % 2 || xs[3] % 2)
      throw std::invalid_argument("denoiser: expected [B," + std::to_string(arch_.channels) +
                                  ",H,W] with even H, W; got " + shape_str(xs));
    if (t.size() != xs[0] || y.size() != xs[0]) throw std::invalid_argument("denoiser: one t and y per sample");
    for (int s : t)
      if (s < 1 || static_cast<std::uint32_t>(s) > arch_.steps)
        throw std::out_of_range("denoiser: step " + std::to_string(s) + " outside [1," + std::to_string(arch_.steps) + "]");
    for (int c : y)
      if (c < 0 || static_cast<std::uint32_t>(c) >= arch_.num_classes)
        throw std::out_of_range("denoiser: label " + std::to_string(c) + " outside [0," +
                                std::to_string(arch_.num_classes) + ")");

    const std::size_t e = arch_.emb_dim;
    Tensor<T> tt({t.size(), e});
    for (std::size_t b = 0; b < t.size(); ++b)
      std::copy_n(time_table_.raw() + static_cast<std::size_t>(t[b] - 1) * e, e, tt.raw() + b * e);
    auto temb = tp.constant(std::move(tt));
    temb = time2_(tp, ops::silu(time1_(tp, temb)));
    auto emb = ops::silu(ops::add(temb, ops::embedding(tp.leaf(*class_emb_), y)));

    auto h = in_(tp, x);
    auto e00 = blocks_[0](tp, h, emb);
    auto e01 = blocks_[1](tp, e00, emb);
    auto d = down_(tp, e01);
    auto e10 = blocks_[2](tp, d, emb);
    auto e11 = blocks_[3](tp, e10, emb);
    h = blocks_[4](tp, e11, emb);
    h = blocks_[5](tp, ops::concat_channels(h, e11), emb);
    h = blocks_[6](tp, ops::concat_channels(h, e10), emb);
    h = up_(tp, ops::upsample_nearest2x(h));
    h = blocks_[7](tp, ops::concat_channels(h, e01), emb);
    h = blocks_[8](tp, ops::concat_channels(h, e00), emb);
    return out_(tp, ops::silu(out_norm_(tp, h)));
  }

  nn::StateDict<T> state() {
    nn::StateDict<T> s;
    for (auto& p : *ps_) s.emplace_back(p.name, &p.value);
    return s;
  }

  void save(const std::string& path) { nn::save_checkpoint<T>(path, "denoiser", arch_.to_meta(), state()); }

  static DenoiserNet load(const std::string& path) {
    DenoiserNet net(DenoiserArch::from_meta(nn::peek_checkpoint(path).meta), 0);
    nn::load_checkpoint<T>(path, "denoiser", net.state());
    return net;
  }

 private:
  DenoiserArch arch_;
  std::unique_ptr<ParameterSet<T>> ps_;
  nn::Linear<T> time1_, time2_;
  Parameter<T>* class_emb_ = nullptr;
  nn::Conv2d<T> in_, down_, up_, out_;
  std::vector<ResBlock<T>> blocks_;
  nn::GroupNorm<T> out_norm_;
  Tensor<T> time_table_;  // row t-1 is the embedding of step t
};

// ---------------------------------------------------------------------------
// Classifier

struct ClassifierArch {
  std::uint32_t channels = 1;
  std::uint32_t num_classes = 10;
  std::vector<std::uint32_t> widths = {16, 32, 64};
  std::uint32_t blocks_per_stage = 2;

  std::vector<std::uint32_t> to_meta() const {
    std::vector<std::uint32_t> m{channels, num_classes, blocks_per_stage, static_cast<std::uint32_t>(widths.size())};
    m.insert(m.end(), widths.begin(), widths.end());
    return m;
  }
  static ClassifierArch from_meta(const std::vector<std::uint32_t>& m) {
    if (m.size() < 4 || m.size() != 4 + m[3]) throw std::runtime_error("classifier checkpoint: bad metadata");
    return {m[0], m[1], {m.begin() + 4, m.end()}, m[2]};
  }
  std::size_t feature_dim() const { return widths.back(); }
  friend bool operator==(const ClassifierArch&, const ClassifierArch&) = default;
};

template <typename T>
struct BasicBlock {
  nn::Conv2d<T> conv1, conv2;
  nn::BatchNorm2d<T> bn1, bn2;
  std::optional<nn::Conv2d<T>> proj;
  std::optional<nn::BatchNorm2d<T>> proj_bn;

  BasicBlock(ParameterSet<T>& ps, std::deque<std::pair<std::string, ops::BatchNormStats<T>>>& buf,
             const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng)
      : conv1(ps, name + ".conv1", cin, cout, 3, stride, 1, rng),
        conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng),
        bn1(ps, buf, name + ".bn1", cout),
        bn2(ps, buf, name + ".bn2", cout) {
    if (cin != cout || stride != 1) {
      proj.emplace(ps, name + ".proj", cin, cout, 1, stride, 0, rng);
      proj_bn.emplace(ps, buf, name + ".proj_bn", cout);
    }
  }

  Var<T> operator()(Tape<T>& tp, const Var<T>& x, bool training) const {
    auto h = ops::relu(bn1(tp, conv1(tp, x), training));
    h = bn2(tp, conv2(tp, h), training);
    auto s = proj ? (*proj_bn)(tp, (*proj)(tp, x), training) : x;
    return ops::relu(ops::add(h, s));
  }
};

template <typename T>
class ClassifierNet {
 public:
  using scalar_type = T;

  ClassifierNet(const ClassifierArch& arch, std::uint64_t seed)
      : arch_(arch),
        ps_(std::make_unique<ParameterSet<T>>()),
        buffers_(std::make_unique<std::deque<std::pair<std::string, ops::BatchNormStats<T>>>>()) {
    if (arch.widths.empty() || arch.num_classes < 1 || arch.channels < 1 || arch.blocks_per_stage < 1)
      throw std::invalid_argument("classifier: invalid architecture");
    Rng rng(seed);
    auto& ps = *ps_;
    stem_ = nn::Conv2d<T>(ps, "stem", arch.channels, arch.widths[0], 3, 1, 1, rng);
    stem_bn_ = nn::BatchNorm2d<T>(ps, *buffers_, "stem_bn", arch.widths[0]);
    std::size_t cin = arch.widths[0];
    for (std::size_t s = 0; s < arch.widths.size(); ++s)
      for (std::size_t b = 0; b < arch.blocks_per_stage; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back(ps, *buffers_, "stage" + std::to_string(s) + "." + std::to_string(b), cin,
                             arch.widths[s], stride, rng);
        cin = arch.widths[s];
      }
    head_ = nn::Linear<T>(ps, "head", cin, arch.num_classes, rng);
  }

  ClassifierNet(const ClassifierNet&) = delete;
  ClassifierNet& operator=(const ClassifierNet&) = delete;
  ClassifierNet(ClassifierNet&&) = default;
  ClassifierNet& operator=(ClassifierNet&&) = default;

  const ClassifierArch& arch() const { return arch_; }
  ParameterSet<T>& parameters() { return *ps_; }
  const ParameterSet<T>& parameters() const { return *ps_; }
  const Parameter<T>& head_weight() const { return *head_.weight; }
  const Parameter<T>& head_bias() const { return *head_.bias; }

  // Pooled pre-head features [B, feature_dim].
  Var<T> features(Tape<T>& tp, const Var<T>& x, bool training) const {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[1] != arch_.channels)
      throw std::invalid_argument("classifier: expected [B," + std::to_string(arch_.channels) + ",H,W], got " +
                                  shape_str(xs));
    auto h = ops::relu(stem_bn_(tp, stem_(tp, x), training));
    for (const auto& b : blocks_) h = b(tp, h, training);
    return ops::global_avg_pool(h);
  }

  Var<T> forward(Tape<T>& tp, const Var<T>& x, bool training) const {
    return head_(tp, features(tp, x, training));
  }

  // Parameters followed by batch-norm running statistics.
  nn::StateDict<T> state() {
    nn::StateDict<T> s;
    for (auto& p : *ps_) s.emplace_back(p.name, &p.value);
    for (auto& [name, st] : *buffers_) {
      s.emplace_back(name + ".running_mean", &st.mean);
      s.emplace_back(name + ".running_var", &st.var);
    }
    return s;
  }

  // Copies every state tensor (parameters and statistics), in state() order.
  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : *ps_) out.push_back(p.value);
    for (const auto& [name, st] : *buffers_) {
      out.push_back(st.mean);
      out.push_back(st.var);
    }
    return out;
  }
  void restore(const std::vector<Tensor<T>>& snap) {
    auto s = state();
    if (snap.size() != s.size()) throw std::invalid_argument("classifier: snapshot size mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) *s[i].second = snap[i];
  }

  ClassifierNet clone() const {
    ClassifierNet c(arch_, 0);
    c.restore(snapshot());
    return c;
  }

  void save(const std::string& path) { nn::save_checkpoint<T>(path, "classifier", arch_.to_meta(), state()); }

  static ClassifierNet load(const std::string& path) {
    ClassifierNet net(ClassifierArch::from_meta(nn::peek_checkpoint(path).meta), 0);
    nn::load_checkpoint<T>(path, "classifier", net.state());
    return net;
  }

 private:
  ClassifierArch arch_;
  std::unique_ptr<ParameterSet<T>> ps_;
  std::unique_ptr<std::deque<std::pair<std::string, ops::BatchNormStats<T>>>> buffers_;
  nn::Conv2d<T> stem_;
  nn::BatchNorm2d<T> stem_bn_;
  std::vector<BasicBlock<T>> blocks_;
  nn::Linear<T> head_;
};

// A classifier whose head is ignored; features() is the pooled trunk output.
template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ClassifierNet<T> trunk) : net_(std::move(trunk)) {}

  std::size_t dim() const { return net_.arch().feature_dim(); }

  Var<T> features(Tape<T>& tp, const Var<T>& x) const { return net_.features(tp, x, false); }

  // Batched inference over an NCHW tensor; returns [N, dim].
  Tensor<T> extract(const Tensor<T>& images, std::size_t batch = 256) const {
    const std::size_t n = images.dim(0);
    Tensor<T> out({n, dim()});
    for (std::size_t b0 = 0; b0 < n; b0 += batch) {
      const std::size_t nb = std::min(batch, n - b0);
      Tape<T> tp(false);
      auto f = features(tp, tp.constant(images.rows(b0, nb)));
      std::copy(f.value().data().begin(), f.value().data().end(), out.raw() + b0 * dim());
    }
    return out;
  }

 private:
  ClassifierNet<T> net_;
};

template <typename T>
FeatureExtractor<T> strip_head(const ClassifierNet<T>& c) {
  return FeatureExtractor<T>(c.clone());
}

// Eval-mode logits for an NCHW tensor; returns [N, M].
template <typename T>
Tensor<T> predict_logits(const ClassifierNet<T>& net, const Tensor<T>& images, std::size_t batch = 256) {
  const std::size_t n = images.dim(0), m = net.arch().num_classes;
  Tensor<T> out({n, m});
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t nb = std::min(batch, n - b0);
    Tape<T> tp(false);
    auto l = net.forward(tp, tp.constant(images.rows(b0, nb)), false);
    std::copy(l.value().data().begin(), l.value().data().end(), out.raw() + b0 * m);
  }
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (logits[i * m + j] > logits[i * m + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const ClassifierNet<T>& net, const LongTailDataset& d) {
  return argmax_rows(predict_logits(net, to_tensor<T>(d)));
}

// ---------------------------------------------------------------------------
// Weighted cross-entropy

// Generated samples are weighted by omega, real samples by 1; batch mean.
template <typename T>
Var<T> wce_loss(const Var<T>& logits, std::span<const int> labels, std::span<const Origin> origin, double omega) {
  if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("wce_loss: omega must lie in [0, 1]");
  if (origin.size() != labels.size()) throw std::invalid_argument("wce_loss: one origin flag per label");
  std::vector<T> w(labels.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = origin[i] == Origin::generated ? static_cast<T>(omega) : T{1};
  return ops::weighted_cross_entropy(logits, labels, std::span<const T>(w));
}

// ---------------------------------------------------------------------------
// Training

struct ClassifierTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double omega = 0.3;
  double val_fraction = 0.1;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("classifier.omega must lie in [0, 1]");
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("classifier: epochs and batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("classifier.lr must be > 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
      throw std::invalid_argument("classifier.val_fraction must lie in [0, 1)");
  }
};

struct ValidationSplit {
  std::vector<std::size_t> train, val;
};

// Per class, round(fraction * n_real) real samples (at least 1, and never the
// only real sample of a class) go to validation. Generated samples always train.
inline ValidationSplit split_validation(const LongTailDataset& d, double fraction, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> real(static_cast<std::size_t>(d.num_classes));
  ValidationSplit out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.samples[i].origin == Origin::real)
      real[static_cast<std::size_t>(d.samples[i].label)].push_back(i);
  }
  std::vector<char> is_val(d.size(), 0);
  if (fraction > 0.0)
    for (std::size_t c = 0; c < real.size(); ++c) {
      auto& idx = real[c];
      if (idx.size() < 2) continue;
      std::size_t nv = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * idx.size())));
      nv = std::min(nv, idx.size() - 1);
      Rng rng(derive_seed(derive_seed(seed, "validation"), c));
      shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t k = 0; k < nv; ++k) is_val[idx[k]] = 1;
    }
  for (std::size_t i = 0; i < d.size(); ++i) (is_val[i] ? out.val : out.train).push_back(i);
  return out;
}

// Horizontal flip with probability 1/2 and a shift of up to `max_shift`
// pixels per axis with edge replication, in place on an NCHW tensor.
template <typename T>
void augment_batch(Tensor<T>& x, Rng& rng, int max_shift = 2) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> tmp(c * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    const bool flip = rng.bernoulli(0.5);
    const int dy = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    const int dx = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    T* img = x.raw() + i * c * h * w;
    std::copy(img, img + c * h * w, tmp.begin());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const int sy = std::clamp(static_cast<int>(yy) - dy, 0, static_cast<int>(h) - 1);
          int sx = std::clamp(static_cast<int>(xx) - dx, 0, static_cast<int>(w) - 1);
          if (flip) sx = static_cast<int>(w) - 1 - sx;
          img[(ch * h + yy) * w + xx] = tmp[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
  }
}

// Mean over classes present in `indices` of per-class accuracy.
inline double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& labels, int num_classes) {
  std::vector<std::size_t> hit(static_cast<std::size_t>(num_classes)), tot(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++tot[static_cast<std::size_t>(labels[i])];
    if (pred[i] == labels[i]) ++hit[static_cast<std::size_t>(labels[i])];
  }
  double s = 0.0;
  int k = 0;
  for (std::size_t c = 0; c < tot.size(); ++c)
    if (tot[c]) {
      s += static_cast<double>(hit[c]) / static_cast<double>(tot[c]);
      ++k;
    }
  return k ? s / k : 0.0;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
};

template <typename T>
struct ClassifierResult {
  ClassifierNet<T> model;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochLog> log;
};

// Minibatch SGD with cosine decay over all steps. After each epoch the model is
// scored on the validation split (class-balanced accuracy) and the best state
// is kept. Without a validation split the final state is returned.
template <typename T = float>
ClassifierResult<T> train_classifier(const LongTailDataset& data, const ClassifierTrainConfig& cfg,
                                     const ClassifierArch& arch_in = {}) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw TrainingError("train_classifier: empty dataset");
  for (auto c : data.class_counts())
    if (c == 0) throw TrainingError("train_classifier: every class needs at least one sample");
  ClassifierArch arch = arch_in;
  arch.channels = data.shape.channels;
  arch.num_classes = static_cast<std::uint32_t>(data.num_classes);

  ClassifierResult<T> res{ClassifierNet<T>(arch, derive_seed(cfg.seed, "classifier.init")), 0, -1.0, {}};
  auto& net = res.model;
  auto split = split_validation(data, cfg.val_fraction, cfg.seed);
  const auto images = to_tensor<T>(data);
  std::vector<int> labels(data.size());
  std::vector<Origin> origins(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels[i] = data.samples[i].label;
    origins[i] = data.samples[i].origin;
  }
  Tensor<T> val_images;
  std::vector<int> val_labels;
  if (!split.val.empty()) {
    val_images = to_tensor<T>(data, split.val);
    for (auto i : split.val) val_labels.push_back(labels[i]);
  }

  optim::Sgd<T> opt(net.parameters(), {cfg.lr, cfg.momentum, cfg.weight_decay});
  Rng rng(derive_seed(cfg.seed, "classifier.batches"));
  const std::size_t n = split.train.size(), per = images.size() / data.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  std::vector<Tensor<T>> best;
  auto order = split.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, n - b0);
      Tensor<T> x({nb, images.dim(1), images.dim(2), images.dim(3)});
      std::vector<int> y(nb);
      std::vector<Origin> g(nb);
      for (std::size_t k = 0; k < nb; ++k) {
        const auto i = order[b0 + k];
        std::copy_n(images.raw() + i * per, per, x.raw() + k * per);
        y[k] = labels[i];
        g[k] = origins[i];
      }
      if (cfg.augment) augment_batch(x, rng);
      opt.set_lr(optim::cosine_lr(cfg.lr, step++, total));
      net.parameters().zero_grad();
      Tape<T> tp;
      auto loss = wce_loss(net.forward(tp, tp.constant(std::move(x)), true), y, g, cfg.omega);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw TrainingError("train_classifier: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(step));
      tp.backward(loss);
      opt.step();
      loss_sum += lv * static_cast<double>(nb);
    }
    EpochLog e{epoch, loss_sum / static_cast<double>(n), 0.0};
    if (!val_labels.empty()) {
      e.val_accuracy = balanced_accuracy(argmax_rows(predict_logits(net, val_images)), val_labels, data.num_classes);
      if (e.val_accuracy > res.best_val_accuracy) {
        res.best_val_accuracy = e.val_accuracy;
        res.best_epoch = epoch;
        best = net.snapshot();
      }
    }
    res.log.push_back(e);
  }
  if (!best.empty()) {
    net.restore(best);
  } else {
    res.best_epoch = cfg.epochs;
    res.best_val_accuracy = 0.0;
  }
  return res;
}

struct DenoiserTrainConfig {
  std::size_t steps = 4000;
  std::size_t batch_size = 64;
  double lr = 2e-4;
  double grad_clip = 1.0;
  double ema_decay = 0.0;  // 0 disables the averaged copy
  std::size_t warmup = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || batch_size < 1) throw std::invalid_argument("denoiser: steps and batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("denoiser.lr must be > 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("denoiser.ema_decay must lie in [0, 1)");
  }
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
};

template <typename T>
struct DenoiserResult {
  DenoiserNet<T> model;
  std::vector<StepLog> log;
};

// Trains on the real samples of `data` with the DDPM loss, or the
// class-balancing loss when `cbdm` is set. Contrast labels use their own
// stream, so the main stream is identical with and without the regularizer.
template <typename T = float>
DenoiserResult<T> train_denoiser(const LongTailDataset& data, const NoiseSchedule& sched,
                                 const std::optional<CbdmConfig>& cbdm, const DenoiserTrainConfig& cfg,
                                 const DenoiserArch& arch_in = {},
                                 const std::function<void(std::size_t, double)>& progress = {}) {
  cfg.validate();
  data.validate();
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.samples[i].origin == Origin::real) real.push_back(i);
  if (real.empty()) throw TrainingError("train_denoiser: no real samples");
  DenoiserArch arch = arch_in;
  arch.channels = data.shape.channels;
  arch.num_classes = static_cast<std::uint32_t>(data.num_classes);
  arch.steps = static_cast<std::uint32_t>(sched.steps());

  DenoiserResult<T> res{DenoiserNet<T>(arch, derive_seed(cfg.seed, "denoiser.init")), {}};
  auto& net = res.model;
  const auto images = to_tensor<T>(data, real);
  std::vector<int> labels;
  for (auto i : real) labels.push_back(data.samples[i].label);
  std::vector<std::size_t> counts(static_cast<std::size_t>(data.num_classes));
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  std::optional<CbdmConfig> cb = cbdm;
  if (cb) cb->dataset_size = real.size();

  std::optional<DenoiserNet<T>> ema;
  if (cfg.ema_decay > 0) {
    ema.emplace(arch, 0);
    for (std::size_t k = 0; k < net.parameters().size(); ++k) ema->parameters()[k].value = net.parameters()[k].value;
  }

  optim::Adam<T> opt(net.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
  Rng rng(derive_seed(cfg.seed, "denoiser.batches"));
  Rng contrast_rng(derive_seed(cfg.seed, "denoiser.contrast"));
  const std::size_t n = real.size(), per = images.size() / n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    DiffusionBatch<T> batch{Tensor<T>({cfg.batch_size, images.dim(1), images.dim(2), images.dim(3)}),
                            std::vector<int>(cfg.batch_size)};
    for (std::size_t k = 0; k < cfg.batch_size; ++k) {
      if (cursor == n) {
        shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto i = order[cursor++];
      std::copy_n(images.raw() + i * per, per, batch.x0.raw() + k * per);
      batch.y[k] = labels[i];
    }
    if (cfg.warmup) opt.set_lr(cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup)));
    net.parameters().zero_grad();
    Tape<T> tp;
    DiffusionLoss<T> loss;
    if (cb) {
      const auto yc = draw_contrast_labels(cfg.batch_size, counts, cb->sampling, contrast_rng);
      loss = cbdm_loss(tp, net, batch, sched, *cb, yc, rng);
    } else {
      loss = ddpm_loss(tp, net, batch, sched, rng);
    }
    const double lv = loss.total.value()[0];
    if (!std::isfinite(lv)) throw TrainingError("train_denoiser: non-finite loss at step " + std::to_string(step));
    tp.backward(loss.total);
    opt.step();
    if (ema) {
      const T d = static_cast<T>(cfg.ema_decay);
      for (std::size_t k = 0; k < net.parameters().size(); ++k) {
        auto& e = ema->parameters()[k].value;
        const auto& v = net.parameters()[k].value;
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = d * e[i] + (T{1} - d) * v[i];
      }
    }
    res.log.push_back({step, lv});
    if (progress) progress(step, lv);
  }
  if (ema) res.model = std::move(*ema);
  return res;
}

inline void write_step_log(const std::string& path, const std::vector<StepLog>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "step,loss\n";
  os.precision(6);
  for (const auto& e : log) os << e.step << ',' << e.loss << '\n';
}

inline void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "epoch,loss,val_accuracy\n";
  os.precision(6);
  for (const auto& e : log) os << e.epoch << ',' << e.loss << ',' << e.val_accuracy << '\n';
}

}  // namespace diffult
