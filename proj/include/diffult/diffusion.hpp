#pragma once

// Noise schedule, forward process, DDPM / class-balancing training losses and
// ancestral conditional sampling.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffult/autograd.hpp"
#include "diffult/ops.hpp"
#include "diffult/rng.hpp"
#include "diffult/tensor.hpp"

namespace diffult {

class DiffusionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScheduleKind { linear };

// Steps are 1-based: beta(t) and alpha_bar(t) for t in [1, T].
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw DiffusionError("schedule: T must be >= 1");
    alpha_bar_.resize(beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw DiffusionError("schedule: every beta must lie in (0, 1)");
      prod *= 1.0 - beta_[i];
      alpha_bar_[i] = prod;
    }
  }

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(index(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(index(t)); }
  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t index(int t) const {
    if (t < 1 || t > steps())
      throw DiffusionError("schedule: step " + std::to_string(t) + " outside [1," + std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_schedule(int steps, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::linear) {
  if (steps < 1) throw DiffusionError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw DiffusionError("make_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> b(static_cast<std::size_t>(steps));
  switch (kind) {
    case ScheduleKind::linear:
      for (int i = 0; i < steps; ++i)
        b[static_cast<std::size_t>(i)] =
            steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
      break;
  }
  return NoiseSchedule(std::move(b));
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with one step per leading-axis
// element of x0.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, std::span<const int> steps, const Tensor<T>& eps,
                          const NoiseSchedule& sched) {
  x0.check_same(eps, "forward_diffuse");
  if (x0.rank() == 0 || x0.dim(0) != steps.size())
    throw DiffusionError("forward_diffuse: one step per sample required");
  const std::size_t per = x0.size() / x0.dim(0);
  Tensor<T> out(x0.shape());
  for (std::size_t b = 0; b < steps.size(); ++b) {
    const double ab = sched.alpha_bar(steps[b]);
    const T s = static_cast<T>(std::sqrt(ab)), n = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = s * x0[b * per + i] + n * eps[b * per + i];
  }
  return out;
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int step, const Tensor<T>& eps, const NoiseSchedule& sched) {
  x0.check_same(eps, "forward_diffuse");
  sched.alpha_bar(step);  // range check
  const std::vector<int> steps(x0.rank() ? x0.dim(0) : 0, step);
  if (x0.rank() == 0) throw DiffusionError("forward_diffuse: empty tensor");
  return forward_diffuse(x0, std::span<const int>(steps), eps, sched);
}

// A noise predictor eps_theta(x_t, t, y).
template <typename M>
concept Denoiser = requires(const M& m, Tape<typename M::scalar_type>& tp, Var<typename M::scalar_type> x,
                            std::span<const int> t, std::span<const int> y) {
  typename M::scalar_type;
  { m.forward(tp, x, t, y) } -> std::same_as<Var<typename M::scalar_type>>;
};

template <typename T>
struct DiffusionBatch {
  Tensor<T> x0;        // [B, C, H, W]
  std::vector<int> y;  // class labels
};

enum class ContrastSampling { uniform_class, dataset_frequency };

struct CbdmConfig {
  double tau = 1.0;
  double gamma = 0.25;
  std::size_t dataset_size = 1;  // |D| in the tau * t / |D| factor
  ContrastSampling sampling = ContrastSampling::uniform_class;

  void validate() const {
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw DiffusionError("cbdm: tau must be finite and >= 0");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw DiffusionError("cbdm: gamma must be finite and >= 0");
    if (dataset_size == 0) throw DiffusionError("cbdm: dataset_size must be >= 1");
  }
};

// One contrast label per batch element: uniform over classes, or drawn with
// the real dataset's class frequencies.
inline std::vector<int> draw_contrast_labels(std::size_t n, const std::vector<std::size_t>& class_counts,
                                             ContrastSampling mode, Rng& rng) {
  if (class_counts.empty()) throw DiffusionError("contrast labels: no classes");
  std::vector<int> out(n);
  if (mode == ContrastSampling::uniform_class) {
    for (auto& y : out) y = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(class_counts.size()) - 1));
    return out;
  }
  std::size_t total = 0;
  for (auto c : class_counts) total += c;
  if (total == 0) throw DiffusionError("contrast labels: empty dataset");
  for (auto& y : out) {
    auto r = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    std::size_t j = 0;
    while (r >= class_counts[j]) r -= class_counts[j++];
    y = static_cast<int>(j);
  }
  return out;
}

template <typename T>
struct DiffusionLoss {
  Var<T> total;
  double ddpm = 0.0;            // noise-prediction term
  double regularizer = 0.0;     // class-balancing term (0 for plain DDPM)
  std::vector<int> steps;       // drawn t per element
};

namespace detail {

template <typename T>
struct NoisedBatch {
  std::vector<int> steps;
  Tensor<T> eps;
  Tensor<T> xt;
};

// Draws t ~ U{1..T} per element, then eps ~ N(0, I), in that order.
template <typename T>
NoisedBatch<T> draw_noised(const DiffusionBatch<T>& batch, const NoiseSchedule& sched, Rng& rng) {
  if (batch.x0.rank() != 4 || batch.x0.dim(0) == 0 || batch.y.size() != batch.x0.dim(0))
    throw DiffusionError("diffusion loss: need a non-empty [B,C,H,W] batch with B labels");
  NoisedBatch<T> nb;
  nb.steps.resize(batch.y.size());
  for (auto& t : nb.steps) t = static_cast<int>(rng.uniform_int(1, sched.steps()));
  nb.eps = Tensor<T>(batch.x0.shape());
  for (auto& v : nb.eps.data()) v = static_cast<T>(rng.normal());
  nb.xt = forward_diffuse(batch.x0, std::span<const int>(nb.steps), nb.eps, sched);
  return nb;
}

}  // namespace detail

// Mean over batch and pixels of (eps - eps_theta(x_t, t, y))^2.
template <Denoiser M, typename T = typename M::scalar_type>
DiffusionLoss<T> ddpm_loss(Tape<T>& tp, const M& model, const DiffusionBatch<T>& batch, const NoiseSchedule& sched,
                           Rng& rng) {
  auto nb = detail::draw_noised(batch, sched, rng);
  const std::size_t bsz = batch.y.size(), per = batch.x0.size() / bsz;
  auto pred = model.forward(tp, tp.constant(nb.xt), nb.steps, batch.y);
  const std::vector<T> w(bsz, static_cast<T>(1.0 / static_cast<double>(bsz * per)));
  auto loss = ops::weighted_sse(ops::sub(pred, tp.constant(std::move(nb.eps))), std::span<const T>(w));
  return {loss, static_cast<double>(loss.value()[0]), 0.0, std::move(nb.steps)};
}

// DDPM loss plus, per element b with contrast label y'_b,
//   (tau t_b / |D|) * [ mean (e_y - sg(e_y'))^2 + gamma * mean (sg(e_y) - e_y')^2 ],
// averaged over the batch. Pixel means keep both terms on the DDPM scale.
template <Denoiser M, typename T = typename M::scalar_type>
DiffusionLoss<T> cbdm_loss(Tape<T>& tp, const M& model, const DiffusionBatch<T>& batch, const NoiseSchedule& sched,
                           const CbdmConfig& cfg, std::span<const int> contrast_labels, Rng& rng) {
  cfg.validate();
  auto nb = detail::draw_noised(batch, sched, rng);
  const std::size_t bsz = batch.y.size(), per = batch.x0.size() / bsz;
  if (contrast_labels.size() != bsz) throw DiffusionError("cbdm loss: one contrast label per element required");
  auto xt = tp.constant(nb.xt);
  auto pred = model.forward(tp, xt, nb.steps, batch.y);
  auto pred_contrast = model.forward(tp, xt, nb.steps, contrast_labels);

  const double inv = 1.0 / static_cast<double>(bsz * per);
  const std::vector<T> w(bsz, static_cast<T>(inv));
  auto ddpm = ops::weighted_sse(ops::sub(pred, tp.constant(std::move(nb.eps))), std::span<const T>(w));

  std::vector<T> w1(bsz), w2(bsz);
  for (std::size_t b = 0; b < bsz; ++b) {
    const double f = cfg.tau * nb.steps[b] / static_cast<double>(cfg.dataset_size) * inv;
    w1[b] = static_cast<T>(f);
    w2[b] = static_cast<T>(cfg.gamma * f);
  }
  auto reg1 = ops::weighted_sse(ops::sub(pred, ops::detach(pred_contrast)), std::span<const T>(w1));
  auto reg2 = ops::weighted_sse(ops::sub(ops::detach(pred), pred_contrast), std::span<const T>(w2));
  auto reg = ops::add(reg1, reg2);
  auto total = ops::add(ddpm, reg);
  return {total, static_cast<double>(ddpm.value()[0]), static_cast<double>(reg.value()[0]), std::move(nb.steps)};
}

template <typename M>
bool parameters_finite(const M& model) {
  for (const auto& p : model.parameters())
    for (auto v : p.value.data())
      if (!std::isfinite(v)) return false;
  return true;
}

struct SampleOptions {
  std::size_t batch_size = 256;
};

// Ancestral sampling from x_T ~ N(0, I):
//   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_theta) / sqrt(1 - beta_t) + sigma_t z,
// sigma_t^2 = beta_t, z = 0 at t = 1. Image i draws all of its noise from its
// own stream derived from (seed, i). Output is clamped to [-1, 1].
template <Denoiser M, typename T = typename M::scalar_type>
Tensor<T> sample(const M& model, const NoiseSchedule& sched, Shape image_shape, std::span<const int> labels,
                 std::uint64_t seed, SampleOptions opt = {}) {
  if (labels.empty()) throw DiffusionError("sample: n must be >= 1");
  if (image_shape.size() != 3) throw DiffusionError("sample: image shape must be [C,H,W]");
  if (!parameters_finite(model)) throw DiffusionError("sample: model parameters are not finite");
  const std::size_t n = labels.size(), per = shape_numel(image_shape);
  Tensor<T> out({n, image_shape[0], image_shape[1], image_shape[2]});
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t b0 = 0; b0 < n; b0 += bs) {
    const std::size_t nb = std::min(bs, n - b0);
    std::vector<Rng> rngs;
    rngs.reserve(nb);
    for (std::size_t i = 0; i < nb; ++i) rngs.emplace_back(derive_seed(seed, b0 + i));
    Tensor<T> x({nb, image_shape[0], image_shape[1], image_shape[2]});
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t k = 0; k < per; ++k) x[i * per + k] = static_cast<T>(rngs[i].normal());
    const std::vector<int> y(labels.begin() + static_cast<std::ptrdiff_t>(b0),
                             labels.begin() + static_cast<std::ptrdiff_t>(b0 + nb));
    for (int t = sched.steps(); t >= 1; --t) {
      const std::vector<int> steps(nb, t);
      Tensor<T> eps_hat;
      {
        Tape<T> tp(false);
        eps_hat = model.forward(tp, tp.constant(x), steps, y).value();
      }
      const double beta = sched.beta(t), ab = sched.alpha_bar(t);
      const T c_in = static_cast<T>(1.0 / std::sqrt(1.0 - beta));
      const T c_eps = static_cast<T>(beta / std::sqrt(1.0 - ab));
      const T sigma = static_cast<T>(std::sqrt(beta));
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t k = 0; k < per; ++k) {
          const std::size_t idx = i * per + k;
          T v = c_in * (x[idx] - c_eps * eps_hat[idx]);
          if (t > 1) v += sigma * static_cast<T>(rngs[i].normal());
          x[idx] = v;
        }
    }
    for (std::size_t k = 0; k < nb * per; ++k) out[b0 * per + k] = std::clamp(x[k], T{-1}, T{1});
  }
  return out;
}

}  // namespace diffult
