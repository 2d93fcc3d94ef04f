#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffult/autograd.hpp"

namespace diffult::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// Images per im2col chunk; the column buffer is kept within L2.
inline std::size_t conv_chunk(std::size_t rows, std::size_t cols_per_image, std::size_t batch) {
  const std::size_t budget = std::size_t{1} << 16;
  const std::size_t per = std::max<std::size_t>(1, rows * cols_per_image);
  return std::clamp<std::size_t>(budget / per, 1, batch);
}

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t spatial_out() const { return ho * wo; }
  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
  std::size_t padded_image() const { return cin * hp() * wp(); }
};

template <typename T>
std::unique_ptr<T[]> scratch(std::size_t n) {
  return std::unique_ptr<T[]>(new T[n]);
}

// Reductions with a fixed summation order (16 interleaved lanes), so results
// do not depend on buffer alignment.
inline constexpr std::size_t kLanes = 16;

template <typename T>
T lane_sum(const T* x, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += x[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += x[i];
  T s{0};
  for (T v : acc) s += v;
  return s;
}

template <typename T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += a[i + j] * b[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
  T s{0};
  for (T v : acc) s += v;
  return s;
}

// Applies f to fixed-size blocks of kLanes elements; the tail goes through a
// zero-padded block so every element takes the same (vectorized) code path.
template <typename F>
void blockwise(std::size_t n, F&& f) {
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) f(i, kLanes);
  if (i < n) f(i, n - i);
}

// Copies images [b0, b0+nb) into a zero-bordered buffer [nb, cin, hp, wp].
template <typename T>
void pad_images(const T* x, const ConvGeom& g, std::size_t b0, std::size_t nb, T* xp) {
  const std::size_t hp = g.hp(), wp = g.wp();
  std::fill(xp, xp + nb * g.padded_image(), T{0});
  for (std::size_t bc = 0; bc < nb * g.cin; ++bc) {
    const T* src = x + (b0 * g.cin + bc) * g.h * g.w;
    T* dst = xp + bc * hp * wp + g.pad * wp + g.pad;
    for (std::size_t r = 0; r < g.h; ++r)
      for (std::size_t c = 0; c < g.w; ++c) dst[r * wp + c] = src[r * g.w + c];
  }
}

// cols is [cin*k*k] x [nb*ho*wo], row-major, built from padded images.
template <typename T>
void im2col(const T* xp, const ConvGeom& g, std::size_t nb, T* cols) {
  const std::size_t ncol = nb * g.spatial_out(), hp = g.hp(), wp = g.wp(), s = g.stride;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* img = xp + (b * g.cin + c) * hp * wp + ki * wp + kj;
          T* dst = row + b * g.spatial_out();
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const T* src = img + oh * s * wp;
            T* d = dst + oh * g.wo;
            if (s == 1)
              for (std::size_t ow = 0; ow < g.wo; ++ow) d[ow] = src[ow];
            else
              for (std::size_t ow = 0; ow < g.wo; ++ow) d[ow] = src[ow * s];
          }
        }
      }
}

// Adjoint of im2col: accumulates into a padded buffer.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, std::size_t nb, T* dxp) {
  const std::size_t ncol = nb * g.spatial_out(), hp = g.hp(), wp = g.wp(), s = g.stride;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::size_t b = 0; b < nb; ++b) {
          T* img = dxp + (b * g.cin + c) * hp * wp + ki * wp + kj;
          const T* src = row + b * g.spatial_out();
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            T* d = img + oh * s * wp;
            const T* sr = src + oh * g.wo;
            if (s == 1)
              for (std::size_t ow = 0; ow < g.wo; ++ow) d[ow] += sr[ow];
            else
              for (std::size_t ow = 0; ow < g.wo; ++ow) d[ow * s] += sr[ow];
          }
        }
      }
}

// dx[b0 .. b0+nb) += interior of the padded buffer.
template <typename T>
void unpad_add(const T* dxp, const ConvGeom& g, std::size_t b0, std::size_t nb, T* dx) {
  const std::size_t hp = g.hp(), wp = g.wp();
  for (std::size_t bc = 0; bc < nb * g.cin; ++bc) {
    const T* src = dxp + bc * hp * wp + g.pad * wp + g.pad;
    T* dst = dx + (b0 * g.cin + bc) * g.h * g.w;
    for (std::size_t r = 0; r < g.h; ++r)
      for (std::size_t c = 0; c < g.w; ++c) dst[r * g.w + c] += src[r * wp + c];
  }
}

}  // namespace detail

template <typename T>
Var<T> detach(const Var<T>& x) {
  return x.tape().constant(x.value());
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  return a.tape().op(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
    const Tensor<T> g = tp.grad(self);
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().op(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
    Tensor<T> g = tp.grad(self);
    tp.accumulate(ia, g);
    g *= T{-1};
    tp.accumulate(ib, g);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().op(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.value(ia);
    const auto& bv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  out *= s;
  return a.tape().op(std::move(out), {a}, [ia = a.id(), s](Tape<T>& tp, std::size_t self) {
    Tensor<T> g = tp.grad(self);
    g *= s;
    tp.accumulate(ia, g);
  });
}

// x: [B, C, ...spatial], v: [B, C]; v is broadcast over the spatial extent.
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  const auto& xs = x.shape();
  detail::require(xs.size() >= 2 && v.shape() == Shape{xs[0], xs[1]},
                  "add_channel: expected v of shape [B,C], got " + shape_str(v.shape()) + " for x " +
                      shape_str(xs));
  const std::size_t bc = xs[0] * xs[1];
  const std::size_t sp = x.value().size() / bc;
  Tensor<T> out = x.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t j = 0; j < sp; ++j) out[i * sp + j] += vv[i];
  return x.tape().op(std::move(out), {x, v}, [ix = x.id(), iv = v.id(), bc, sp](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    tp.accumulate(ix, g);
    if (tp.requires_grad(iv)) {
      auto& gv = tp.grad_buffer(iv);
      for (std::size_t i = 0; i < bc; ++i) {
        T s{0};
        for (std::size_t j = 0; j < sp; ++j) s += g[i * sp + j];
        gv[i] += s;
      }
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  using Block = Eigen::Array<T, static_cast<int>(detail::kLanes), 1>;
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  detail::blockwise(xv.size(), [&](std::size_t i, std::size_t len) {
    Block a = Block::Zero();
    std::copy_n(xv.raw() + i, len, a.data());
    const Block r = a / (T{1} + (-a).exp());
    std::copy_n(r.data(), len, out.raw() + i);
  });
  return x.tape().op(std::move(out), {x}, [ix = x.id()](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(ix);
    auto& gx = tp.grad_buffer(ix);
    detail::blockwise(g.size(), [&](std::size_t i, std::size_t len) {
      Block a = Block::Zero(), ga = Block::Zero();
      std::copy_n(xv.raw() + i, len, a.data());
      std::copy_n(g.raw() + i, len, ga.data());
      const Block sg = T{1} / (T{1} + (-a).exp());
      const Block d = ga * sg * (T{1} + a * (T{1} - sg));
      for (std::size_t j = 0; j < len; ++j) gx[i + j] += d[static_cast<Eigen::Index>(j)];
    });
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return x.tape().op(std::move(out), {x}, [ix = x.id()](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(ix);
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

// x: [B, in], w: [out, in], b: [out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  using namespace detail;
  require(x.shape().size() == 2 && w.shape().size() == 2 && w.dim(1) == x.dim(1) &&
              b.shape() == Shape{w.dim(0)},
          "linear: bad shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
              shape_str(b.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), outd = w.dim(0);
  Tensor<T> out({n, outd});
  MapMat<T> y(out.raw(), n, outd);
  y.noalias() = CMapMat<T>(x.value().raw(), n, in) * CMapMat<T>(w.value().raw(), outd, in).transpose();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < outd; ++j) y(i, j) += bv[j];
  return x.tape().op(std::move(out), {x, w, b},
                     [ix = x.id(), iw = w.id(), ib = b.id(), n, in, outd](Tape<T>& tp, std::size_t self) {
                       CMapMat<T> g(tp.grad(self).raw(), n, outd);
                       if (tp.requires_grad(ix)) {
                         MapMat<T> gx(tp.grad_buffer(ix).raw(), n, in);
                         gx.noalias() += g * CMapMat<T>(tp.value(iw).raw(), outd, in);
                       }
                       if (tp.requires_grad(iw)) {
                         MapMat<T> gw(tp.grad_buffer(iw).raw(), outd, in);
                         gw.noalias() += g.transpose() * CMapMat<T>(tp.value(ix).raw(), n, in);
                       }
                       if (tp.requires_grad(ib)) {
                         auto& gb = tp.grad_buffer(ib);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < outd; ++j) gb[j] += g(i, j);
                       }
                     });
}

// x: [B, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  using namespace detail;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && b.shape() == Shape{ws[0]},
          "conv2d: bad shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" + shape_str(b.shape()));
  require(stride >= 1 && xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3], "conv2d: bad geometry");
  const std::size_t batch = xs[0], cout = ws[0];
  ConvGeom g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  const std::size_t sp = g.spatial_out();
  const std::size_t rows = g.rows();
  // A 1x1 stride-1 unpadded conv reads each image directly as its column matrix.
  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
  const std::size_t chunk = pointwise ? 1 : conv_chunk(rows, sp, batch);

  Tensor<T> out({batch, cout, g.ho, g.wo});
  CMapMat<T> wmat(w.value().raw(), cout, rows);
  const auto& bv = b.value();
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(bv.raw(), static_cast<Eigen::Index>(cout));
  if (pointwise) {
    for (std::size_t bi = 0; bi < batch; ++bi) {
      MapMat<T> y(out.raw() + bi * cout * sp, cout, sp);
      y.noalias() = wmat * CMapMat<T>(x.value().raw() + bi * rows * sp, rows, sp);
      y.colwise() += bias;
    }
  } else {
    auto xp = scratch<T>(chunk * g.padded_image());
    auto cols = scratch<T>(rows * chunk * sp);
    RowMat<T> ymat;
    for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, batch - b0);
      pad_images(x.value().raw(), g, b0, nb, xp.get());
      im2col(xp.get(), g, nb, cols.get());
      if (nb == 1) {
        MapMat<T> y(out.raw() + b0 * cout * sp, cout, sp);
        y.noalias() = wmat * CMapMat<T>(cols.get(), rows, sp);
        y.colwise() += bias;
        continue;
      }
      ymat.noalias() = wmat * CMapMat<T>(cols.get(), rows, nb * sp);
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t co = 0; co < cout; ++co) {
          T* dst = out.raw() + ((b0 + bi) * cout + co) * sp;
          const T* src = ymat.data() + co * nb * sp + bi * sp;
          for (std::size_t i = 0; i < sp; ++i) dst[i] = src[i] + bv[co];
        }
    }
  }

  return x.tape().op(
      std::move(out), {x, w, b},
      [ix = x.id(), iw = w.id(), ib = b.id(), g, batch, cout, chunk, pointwise](Tape<T>& tp, std::size_t self) {
        const std::size_t sp = g.spatial_out();
        const std::size_t rows = g.rows();
        const auto& gout = tp.grad(self);
        const bool need_x = tp.requires_grad(ix), need_w = tp.requires_grad(iw), need_b = tp.requires_grad(ib);
        if (need_b) {
          auto& gb = tp.grad_buffer(ib);
          for (std::size_t bi = 0; bi < batch; ++bi)
            for (std::size_t co = 0; co < cout; ++co) {
              const T* src = gout.raw() + (bi * cout + co) * sp;
              T s{0};
              for (std::size_t i = 0; i < sp; ++i) s += src[i];
              gb[co] += s;
            }
        }
        if (!need_x && !need_w) return;
        CMapMat<T> wmat(tp.value(iw).raw(), cout, rows);
        if (pointwise) {
          for (std::size_t bi = 0; bi < batch; ++bi) {
            CMapMat<T> dy(gout.raw() + bi * cout * sp, cout, sp);
            if (need_w) {
              MapMat<T> gw(tp.grad_buffer(iw).raw(), cout, rows);
              gw.noalias() += dy * CMapMat<T>(tp.value(ix).raw() + bi * rows * sp, rows, sp).transpose();
            }
            if (need_x) {
              MapMat<T> gx(tp.grad_buffer(ix).raw() + bi * rows * sp, rows, sp);
              gx.noalias() += wmat.transpose() * dy;
            }
          }
          return;
        }
        auto xp = scratch<T>(chunk * g.padded_image());
        auto cols = scratch<T>(rows * chunk * sp);
        RowMat<T> dy, dcols;
        for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
          const std::size_t nb = std::min(chunk, batch - b0);
          const std::size_t ncol = nb * sp;
          const T* dyp = gout.raw() + b0 * cout * sp;
          if (nb > 1) {
            dy.resize(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ncol));
            for (std::size_t bi = 0; bi < nb; ++bi)
              for (std::size_t co = 0; co < cout; ++co) {
                const T* src = gout.raw() + ((b0 + bi) * cout + co) * sp;
                std::copy(src, src + sp, dy.data() + co * ncol + bi * sp);
              }
            dyp = dy.data();
          }
          CMapMat<T> dym(dyp, cout, ncol);
          if (need_w) {
            pad_images(tp.value(ix).raw(), g, b0, nb, xp.get());
            im2col(xp.get(), g, nb, cols.get());
            MapMat<T> gw(tp.grad_buffer(iw).raw(), cout, rows);
            gw.noalias() += dym * CMapMat<T>(cols.get(), rows, ncol).transpose();
          }
          if (need_x) {
            dcols.noalias() = wmat.transpose() * dym;
            std::fill(xp.get(), xp.get() + nb * g.padded_image(), T{0});
            col2im(dcols.data(), g, nb, xp.get());
            unpad_add(xp.get(), g, b0, nb, tp.grad_buffer(ix).raw());
          }
        }
      });
}

// Normalizes each (sample, group) over channels-in-group x spatial, then
// applies a per-channel affine transform.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups, T eps = T(1e-5)) {
  using namespace detail;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using CMap = Eigen::Map<const Arr>;
  using Map = Eigen::Map<Arr>;
  const auto& xs = x.shape();
  require(xs.size() == 4 && groups >= 1 && xs[1] % groups == 0 && gamma.shape() == Shape{xs[1]} &&
              beta.shape() == Shape{xs[1]},
          "group_norm: bad shapes x" + shape_str(xs) + " groups=" + std::to_string(groups));
  const std::size_t batch = xs[0], ch = xs[1], sp = xs[2] * xs[3], cpg = ch / groups, n = cpg * sp;
  const auto isp = static_cast<Eigen::Index>(sp), in = static_cast<Eigen::Index>(n);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  std::vector<T> inv_std(batch * groups);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = (b * ch + gi * cpg) * sp;
      const CMap seg(xv.raw() + off, in);
      const T mean = lane_sum(xv.raw() + off, n) / static_cast<T>(n);
      Map h(xhat.raw() + off, in);
      h = seg - mean;
      const T var = lane_dot(h.data(), h.data(), n) / static_cast<T>(n);
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[b * groups + gi] = is;
      h *= is;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t cc = gi * cpg + c;
        Map(out.raw() + off + c * sp, isp) = CMap(xhat.raw() + off + c * sp, isp) * gv[cc] + bv[cc];
      }
    }
  return x.tape().op(
      std::move(out), {x, gamma, beta},
      [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch,
       sp, cpg, groups, n, isp](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& gv = tp.value(ig);
        if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
          std::vector<T> dg(ch, T{0}), db(ch, T{0});
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t off = (b * ch + c) * sp;
              dg[c] += detail::lane_dot(g.raw() + off, xhat.raw() + off, sp);
              db[c] += detail::lane_sum(g.raw() + off, sp);
            }
          if (tp.requires_grad(ig)) {
            auto& gg = tp.grad_buffer(ig);
            for (std::size_t c = 0; c < ch; ++c) gg[c] += dg[c];
          }
          if (tp.requires_grad(ib)) {
            auto& gb = tp.grad_buffer(ib);
            for (std::size_t c = 0; c < ch; ++c) gb[c] += db[c];
          }
        }
        if (!tp.requires_grad(ix)) return;
        auto& gx = tp.grad_buffer(ix);
        Arr dh(static_cast<Eigen::Index>(n));
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (b * ch + gi * cpg) * sp;
            for (std::size_t c = 0; c < cpg; ++c)
              dh.segment(static_cast<Eigen::Index>(c * sp), isp) = CMap(g.raw() + off + c * sp, isp) * gv[gi * cpg + c];
            const CMap xh(xhat.raw() + off, static_cast<Eigen::Index>(n));
            const T m1 = detail::lane_sum(dh.data(), n) / static_cast<T>(n);
            const T m2 = detail::lane_dot(dh.data(), xh.data(), n) / static_cast<T>(n);
            Map(gx.raw() + off, static_cast<Eigen::Index>(n)) += inv_std[b * groups + gi] * (dh - m1 - xh * m2);
          }
      });
}

// Running statistics for batch normalization (not trained by gradient).
template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
  explicit BatchNormStats(std::size_t ch = 0) : mean({ch}, T{0}), var({ch}, T{1}) {}
};

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                  bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  using namespace detail;
  const auto& xs = x.shape();
  require(xs.size() == 4 && gamma.shape() == Shape{xs[1]} && beta.shape() == Shape{xs[1]} &&
              stats.mean.shape() == Shape{xs[1]},
          "batch_norm: bad shapes x" + shape_str(xs));
  const std::size_t batch = xs[0], ch = xs[1], sp = xs[2] * xs[3], n = batch * sp;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xs), xhat(xs);
  std::vector<T> inv_std(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    double mean, var;
    if (training) {
      mean = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < sp; ++i) mean += xv[(b * ch + c) * sp + i];
      mean /= static_cast<double>(n);
      var = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < sp; ++i) {
          const double d = xv[(b * ch + c) * sp + i] - mean;
          var += d * d;
        }
      var /= static_cast<double>(n);
      const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
      stats.mean[c] = static_cast<T>((1.0 - momentum) * stats.mean[c] + momentum * mean);
      stats.var[c] = static_cast<T>((1.0 - momentum) * stats.var[c] + momentum * unbiased);
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[c] = is;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < sp; ++i) {
        const std::size_t idx = (b * ch + c) * sp + i;
        const T h = (xv[idx] - static_cast<T>(mean)) * is;
        xhat[idx] = h;
        out[idx] = gv[c] * h + bv[c];
      }
  }
  return x.tape().op(
      std::move(out), {x, gamma, beta},
      [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch,
       sp, n, training](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& gv = tp.value(ig);
        for (std::size_t c = 0; c < ch; ++c) {
          double sg = 0.0, sb = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < sp; ++i) {
              const std::size_t idx = (b * ch + c) * sp + i;
              sg += g[idx] * xhat[idx];
              sb += g[idx];
            }
          if (tp.requires_grad(ig)) tp.grad_buffer(ig)[c] += static_cast<T>(sg);
          if (tp.requires_grad(ib)) tp.grad_buffer(ib)[c] += static_cast<T>(sb);
          if (!tp.requires_grad(ix)) continue;
          auto& gx = tp.grad_buffer(ix);
          const T scale = gv[c] * inv_std[c];
          if (!training) {
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t i = 0; i < sp; ++i) gx[(b * ch + c) * sp + i] += scale * g[(b * ch + c) * sp + i];
            continue;
          }
          const T m1 = static_cast<T>(sb / static_cast<double>(n));
          const T m2 = static_cast<T>(sg / static_cast<double>(n));
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < sp; ++i) {
              const std::size_t idx = (b * ch + c) * sp + i;
              gx[idx] += scale * (g[idx] - m1 - xhat[idx] * m2);
            }
        }
      });
}

// [B, C, H, W] -> [B, C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 4, "global_avg_pool: expected NCHW");
  const std::size_t bc = xs[0] * xs[1], sp = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < bc; ++i) {
    T s{0};
    for (std::size_t j = 0; j < sp; ++j) s += xv[i * sp + j];
    out[i] = s / static_cast<T>(sp);
  }
  return x.tape().op(std::move(out), {x}, [ix = x.id(), bc, sp](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < bc; ++i) {
      const T v = g[i] / static_cast<T>(sp);
      for (std::size_t j = 0; j < sp; ++j) gx[i * sp + j] += v;
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 4, "upsample_nearest2x: expected NCHW");
  const std::size_t bc = xs[0] * xs[1], h = xs[2], w = xs[3];
  Tensor<T> out({xs[0], xs[1], 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t c = 0; c < 2 * w; ++c) out[(i * 2 * h + r) * 2 * w + c] = xv[(i * h + r / 2) * w + c / 2];
  return x.tape().op(std::move(out), {x}, [ix = x.id(), bc, h, w](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < bc; ++i)
      for (std::size_t r = 0; r < 2 * h; ++r)
        for (std::size_t c = 0; c < 2 * w; ++c) gx[(i * h + r / 2) * w + c / 2] += g[(i * 2 * h + r) * 2 * w + c];
  });
}

// Concatenates along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
                  "concat_channels: bad shapes " + shape_str(as) + " " + shape_str(bs));
  const std::size_t batch = as[0], ca = as[1], cb = bs[1], sp = as[2] * as[3];
  Tensor<T> out({batch, ca + cb, as[2], as[3]});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.value().raw() + n * ca * sp, ca * sp, out.raw() + n * (ca + cb) * sp);
    std::copy_n(b.value().raw() + n * cb * sp, cb * sp, out.raw() + n * (ca + cb) * sp + ca * sp);
  }
  return a.tape().op(std::move(out), {a, b}, [ia = a.id(), ib = b.id(), batch, ca, cb, sp](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < ca * sp; ++i) ga[n * ca * sp + i] += g[n * (ca + cb) * sp + i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < cb * sp; ++i) gb[n * cb * sp + i] += g[n * (ca + cb) * sp + ca * sp + i];
    }
  });
}

// table: [M, D]; returns rows table[labels[i]] as [B, D].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> labels) {
  const auto& ts = table.shape();
  detail::require(ts.size() == 2, "embedding: table must be 2-D");
  const std::size_t m = ts[0], d = ts[1];
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= m)
      throw std::out_of_range("embedding: label " + std::to_string(l) + " outside [0," + std::to_string(m) + ")");
  Tensor<T> out({labels.size(), d});
  for (std::size_t i = 0; i < labels.size(); ++i)
    std::copy_n(table.value().raw() + static_cast<std::size_t>(labels[i]) * d, d, out.raw() + i * d);
  return table.tape().op(std::move(out), {table},
                         [it = table.id(), lab = std::vector<int>(labels.begin(), labels.end()), d](Tape<T>& tp,
                                                                                                 std::size_t self) {
                           const auto& g = tp.grad(self);
                           auto& gt = tp.grad_buffer(it);
                           for (std::size_t i = 0; i < lab.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                               gt[static_cast<std::size_t>(lab[i]) * d + j] += g[i * d + j];
                         });
}

// Sum of all entries as a scalar of shape [1].
template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape().op(Tensor<T>({1}, s), {x}, [ix = x.id()](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

// Σ_b weights[b] · Σ_i x[b, i]^2, as a scalar of shape [1].
template <typename T>
Var<T> weighted_sse(const Var<T>& x, std::span<const T> weights) {
  const auto& xs = x.shape();
  detail::require(!xs.empty() && xs[0] == weights.size(), "weighted_sse: one weight per sample required");
  const std::size_t batch = xs[0], per = xs[0] ? x.value().size() / batch : 0;
  const auto& xv = x.value();
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += static_cast<double>(xv[b * per + i]) * xv[b * per + i];
    total += static_cast<double>(weights[b]) * s;
  }
  return x.tape().op(Tensor<T>({1}, static_cast<T>(total)), {x},
                     [ix = x.id(), w = std::vector<T>(weights.begin(), weights.end()), batch, per](Tape<T>& tp,
                                                                                                 std::size_t self) {
                       const T g = tp.grad(self)[0];
                       const auto& xv = tp.value(ix);
                       auto& gx = tp.grad_buffer(ix);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const T f = T{2} * g * w[b];
                         for (std::size_t i = 0; i < per; ++i) gx[b * per + i] += f * xv[b * per + i];
                       }
                     });
}

// Numerically stable log-softmax of each row.
template <typename T>
std::vector<T> log_softmax_row(std::span<const T> logits) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (T v : logits) s += std::exp(static_cast<double>(v - mx));
  const T lse = mx + static_cast<T>(std::log(s));
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

template <typename T>
std::vector<T> softmax_row(std::span<const T> logits) {
  auto out = log_softmax_row(logits);
  for (auto& v : out) v = std::exp(v);
  return out;
}

// (1/B) Σ_b weights[b] · (−log softmax(logits_b)[labels_b]); logits [B, M].
template <typename T>
Var<T> weighted_cross_entropy(const Var<T>& logits, std::span<const int> labels, std::span<const T> weights) {
  const auto& ls = logits.shape();
  detail::require(ls.size() == 2 && ls[0] == labels.size() && labels.size() == weights.size() && ls[0] > 0,
                  "weighted_cross_entropy: need [B,M] logits with B labels and B weights");
  const std::size_t batch = ls[0], m = ls[1];
  Tensor<T> probs({batch, m});
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= m)
      throw std::out_of_range("weighted_cross_entropy: label out of range");
    const auto lsm = log_softmax_row<T>(std::span<const T>(logits.value().raw() + b * m, m));
    total += static_cast<double>(weights[b]) * -static_cast<double>(lsm[static_cast<std::size_t>(labels[b])]);
    for (std::size_t j = 0; j < m; ++j) probs[b * m + j] = std::exp(lsm[j]);
  }
  total /= static_cast<double>(batch);
  return logits.tape().op(Tensor<T>({1}, static_cast<T>(total)), {logits},
                          [il = logits.id(), probs = std::move(probs), lab = std::vector<int>(labels.begin(), labels.end()),
                           w = std::vector<T>(weights.begin(), weights.end()), batch, m](Tape<T>& tp, std::size_t self) {
                            const T g = tp.grad(self)[0] / static_cast<T>(batch);
                            auto& gl = tp.grad_buffer(il);
                            for (std::size_t b = 0; b < batch; ++b) {
                              const T f = g * w[b];
                              for (std::size_t j = 0; j < m; ++j) {
                                const T onehot = static_cast<std::size_t>(lab[b]) == j ? T{1} : T{0};
                                gl[b * m + j] += f * (probs[b * m + j] - onehot);
                              }
                            }
                          });
}

}  // namespace diffult::ops
