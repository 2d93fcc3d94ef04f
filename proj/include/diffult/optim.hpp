#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <numbers>
#include <vector>

#include "diffult/autograd.hpp"

namespace diffult::optim {

// Cosine decay from `base` to 0 over `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(frac, 1.0)));
}

template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  };

  Adam(ParameterSet<T>& params, Options opt) : params_(params), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  void step() {
    ++t_;
    double scale = 1.0;
    if (opt_.grad_clip > 0) {
      double sq = 0.0;
      for (const auto& p : params_)
        for (T g : p.grad.data()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > opt_.grad_clip) scale = opt_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& p : params_) {
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = scale * static_cast<double>(p.grad[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        const double update = opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
      }
      ++k;
    }
  }

 private:
  ParameterSet<T>& params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// SGD with heavy-ball momentum; L2 weight decay is added to the gradient.
template <typename T>
class Sgd {
 public:
  struct Options {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
  };

  Sgd(ParameterSet<T>& params, Options opt) : params_(params), opt_(opt) {
    for (const auto& p : params_) buf_.emplace_back(p.value.size(), T{0});
  }

  void set_lr(double lr) { opt_.lr = lr; }

  void step() {
    std::size_t k = 0;
    for (auto& p : params_) {
      auto& b = buf_[k++];
      const bool decay = p.value.rank() > 1;  // no decay on biases and norm affine terms
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        T g = p.grad[i];
        if (decay) g += static_cast<T>(opt_.weight_decay) * p.value[i];
        b[i] = static_cast<T>(opt_.momentum) * b[i] + g;
        p.value[i] -= static_cast<T>(opt_.lr) * b[i];
      }
    }
  }

 private:
  ParameterSet<T>& params_;
  Options opt_;
  std::vector<std::vector<T>> buf_;
};

}  // namespace diffult::optim
