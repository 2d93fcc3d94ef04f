#pragma once

// Central finite-difference oracle for tape gradients (test-only).

#include <cmath>
#include <functional>
#include <vector>

#include "diffult/autograd.hpp"
#include "diffult/ops.hpp"
#include "diffult/rng.hpp"

namespace diffult::testing {

using LossFn = std::function<Var<double>(Tape<double>&, ParameterSet<double>&)>;

inline double eval_loss(const LossFn& f, ParameterSet<double>& ps) {
  Tape<double> tp(false);
  return f(tp, ps).value()[0];
}

// Largest relative error between tape gradients and central differences,
// with relative error |a-n| / max(|a|, |n|, floor).
inline double max_rel_grad_error(const LossFn& f, ParameterSet<double>& ps, double h = 1e-6,
                                 double floor = 1e-6) {
  ps.zero_grad();
  {
    Tape<double> tp;
    auto loss = f(tp, ps);
    tp.backward(loss);
  }
  double worst = 0.0;
  for (auto& p : ps) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = eval_loss(f, ps);
      p.value[i] = orig - h;
      const double down = eval_loss(f, ps);
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

// As max_rel_grad_error, but checks only `count` randomly chosen entries;
// for models too large for an exhaustive sweep.
inline double sampled_rel_grad_error(const LossFn& f, ParameterSet<double>& ps, std::size_t count, std::uint64_t seed,
                                     double h = 1e-5, double floor = 1e-4) {
  ps.zero_grad();
  {
    Tape<double> tp;
    auto loss = f(tp, ps);
    tp.backward(loss);
  }
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (std::size_t i = 0; i < ps[k].value.size(); ++i) entries.emplace_back(k, i);
  Rng rng(seed);
  shuffle(entries.begin(), entries.end(), rng);
  entries.resize(std::min(count, entries.size()));
  double worst = 0.0;
  for (auto [k, i] : entries) {
    auto& p = ps[k];
    const double orig = p.value[i];
    p.value[i] = orig + h;
    const double up = eval_loss(f, ps);
    p.value[i] = orig - h;
    const double down = eval_loss(f, ps);
    p.value[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(p.grad[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(p.grad[i] - numeric) / denom);
  }
  return worst;
}

// Projects a non-scalar output onto fixed random weights so every output
// entry contributes to the checked scalar.
inline Var<double> random_projection(const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(out.shape());
  for (auto& v : w.data()) v = rng.normal();
  auto c = out.tape().constant(std::move(w));
  return ops::sum(ops::mul(out, c));
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace diffult::testing
