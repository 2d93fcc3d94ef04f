#include <gtest/gtest.h>

#include "diffult/nn.hpp"
#include "diffult/ops.hpp"
#include "gradcheck.hpp"

using namespace diffult;
using diffult::testing::max_rel_grad_error;
using diffult::testing::random_projection;
using diffult::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

TEST(Ops, ElementwiseGradients) {
  Rng rng(1);
  ParameterSet<double> ps;
  auto& a = ps.add("a", random_tensor({2, 3, 2, 2}, rng));
  auto& b = ps.add("b", random_tensor({2, 3, 2, 2}, rng));
  auto& v = ps.add("v", random_tensor({2, 3}, rng));
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    auto x = ops::add(tp.leaf(a), ops::scale(tp.leaf(b), 0.7));
    x = ops::mul(ops::silu(x), ops::sub(tp.leaf(a), tp.leaf(b)));
    x = ops::add_channel(ops::relu(x), tp.leaf(v));
    return random_projection(x, 11);
  };
  EXPECT_LT(max_rel_grad_error(f, ps), kTol);
}

TEST(Ops, LinearGradients) {
  Rng rng(2);
  ParameterSet<double> ps;
  auto& x = ps.add("x", random_tensor({4, 5}, rng));
  auto& w = ps.add("w", random_tensor({3, 5}, rng));
  auto& b = ps.add("b", random_tensor({3}, rng));
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    return random_projection(ops::linear(tp.leaf(x), tp.leaf(w), tp.leaf(b)), 12);
  };
  EXPECT_LT(max_rel_grad_error(f, ps), kTol);
}

struct ConvCase {
  std::size_t cin, cout, h, k, stride, pad;
};

void PrintTo(const ConvCase& c, std::ostream* os) {
  *os << "cin" << c.cin << "_cout" << c.cout << "_k" << c.k << "_s" << c.stride << "_p" << c.pad;
}

class ConvGrad : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvGrad, MatchesFiniteDifferences) {
  const auto c = GetParam();
  Rng rng(3);
  ParameterSet<double> ps;
  auto& x = ps.add("x", random_tensor({2, c.cin, c.h, c.h + 1}, rng));
  auto& w = ps.add("w", random_tensor({c.cout, c.cin, c.k, c.k}, rng));
  auto& b = ps.add("b", random_tensor({c.cout}, rng));
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    return random_projection(ops::conv2d(tp.leaf(x), tp.leaf(w), tp.leaf(b), c.stride, c.pad), 13);
  };
  EXPECT_LT(max_rel_grad_error(f, ps), kTol);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvGrad,
                         ::testing::Values(ConvCase{2, 3, 5, 3, 1, 1}, ConvCase{3, 2, 6, 3, 2, 1},
                                           ConvCase{2, 4, 4, 1, 1, 0}, ConvCase{1, 2, 5, 3, 1, 0}));

TEST(Ops, ConvMatchesDirectLoop) {
  Rng rng(4);
  Tape<double> tp(false);
  auto xt = random_tensor({2, 3, 5, 4}, rng);
  auto wt = random_tensor({2, 3, 3, 3}, rng);
  auto bt = random_tensor({2}, rng);
  auto y = ops::conv2d(tp.constant(xt), tp.constant(wt), tp.constant(bt), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 3, 2}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 2; ++co)
      for (std::size_t oh = 0; oh < 3; ++oh)
        for (std::size_t ow = 0; ow < 2; ++ow) {
          double s = bt[co];
          for (std::size_t ci = 0; ci < 3; ++ci)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 3; ++kj) {
                const long ih = static_cast<long>(oh * 2 + ki) - 1, iw = static_cast<long>(ow * 2 + kj) - 1;
                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 4) continue;
                s += wt[((co * 3 + ci) * 3 + ki) * 3 + kj] * xt[((n * 3 + ci) * 5 + ih) * 4 + iw];
              }
          EXPECT_NEAR(y.value()[((n * 2 + co) * 3 + oh) * 2 + ow], s, 1e-12);
        }
}

// <conv(x, w), y> is bilinear in (x, w), so backward seeded with y must give
// gradients whose inner products with x and w both reproduce it.
TEST(Ops, ConvAdjointAcrossBufferPaths) {
  const ConvCase cases[] = {{32, 8, 16, 3, 1, 1}, {16, 32, 16, 3, 2, 1}, {4, 4, 8, 3, 1, 1}, {32, 16, 16, 1, 1, 0}};
  for (const auto& c : cases) {
    Rng rng(40);
    ParameterSet<double> ps;
    auto& x = ps.add("x", random_tensor({3, c.cin, c.h, c.h}, rng));
    auto& w = ps.add("w", random_tensor({c.cout, c.cin, c.k, c.k}, rng));
    auto& b = ps.add("b", Tensor<double>({c.cout}));
    Tape<double> tp;
    auto out = ops::conv2d(tp.leaf(x), tp.leaf(w), tp.leaf(b), c.stride, c.pad);
    const std::size_t ho = out.dim(2);
    for (int probe = 0; probe < 20; ++probe) {
      const auto n = static_cast<std::size_t>(rng.uniform_int(0, 2));
      const auto co = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c.cout) - 1));
      const auto oh = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ho) - 1));
      const auto ow = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ho) - 1));
      double s = 0;
      for (std::size_t ci = 0; ci < c.cin; ++ci)
        for (std::size_t ki = 0; ki < c.k; ++ki)
          for (std::size_t kj = 0; kj < c.k; ++kj) {
            const long ih = static_cast<long>(oh * c.stride + ki) - static_cast<long>(c.pad);
            const long iw = static_cast<long>(ow * c.stride + kj) - static_cast<long>(c.pad);
            if (ih < 0 || iw < 0 || ih >= static_cast<long>(c.h) || iw >= static_cast<long>(c.h)) continue;
            s += w.value[((co * c.cin + ci) * c.k + ki) * c.k + kj] *
                 x.value[((n * c.cin + ci) * c.h + static_cast<std::size_t>(ih)) * c.h + static_cast<std::size_t>(iw)];
          }
      EXPECT_NEAR(out.value()[((n * c.cout + co) * ho + oh) * ho + ow], s, 1e-10);
    }
    auto seed = random_tensor(out.shape(), rng);
    double lhs = 0;
    for (std::size_t i = 0; i < seed.size(); ++i) lhs += seed[i] * out.value()[i];
    tp.backward(out, seed);
    double via_x = 0, via_w = 0;
    for (std::size_t i = 0; i < x.value.size(); ++i) via_x += x.grad[i] * x.value[i];
    for (std::size_t i = 0; i < w.value.size(); ++i) via_w += w.grad[i] * w.value[i];
    EXPECT_NEAR(via_x, lhs, 1e-9 * std::abs(lhs) + 1e-9);
    EXPECT_NEAR(via_w, lhs, 1e-9 * std::abs(lhs) + 1e-9);
  }
}

TEST(Ops, NormalizationGradients) {
  Rng rng(5);
  ParameterSet<double> ps;
  auto& x = ps.add("x", random_tensor({3, 4, 3, 3}, rng));
  auto& g = ps.add("g", random_tensor({4}, rng));
  auto& b = ps.add("b", random_tensor({4}, rng));
  auto gn = [&](Tape<double>& tp, ParameterSet<double>&) {
    return random_projection(ops::group_norm(tp.leaf(x), tp.leaf(g), tp.leaf(b), 2), 14);
  };
  EXPECT_LT(max_rel_grad_error(gn, ps), 1e-4);

  ops::BatchNormStats<double> stats(4);
  auto bn = [&](Tape<double>& tp, ParameterSet<double>&) {
    return random_projection(ops::batch_norm(tp.leaf(x), tp.leaf(g), tp.leaf(b), stats, true), 15);
  };
  EXPECT_LT(max_rel_grad_error(bn, ps, 1e-6, 1e-3), 1e-4);
  auto bn_eval = [&](Tape<double>& tp, ParameterSet<double>&) {
    return random_projection(ops::batch_norm(tp.leaf(x), tp.leaf(g), tp.leaf(b), stats, false), 16);
  };
  EXPECT_LT(max_rel_grad_error(bn_eval, ps), kTol);
}

TEST(Ops, ShapeOpsGradients) {
  Rng rng(6);
  ParameterSet<double> ps;
  auto& a = ps.add("a", random_tensor({2, 2, 3, 3}, rng));
  auto& b = ps.add("b", random_tensor({2, 3, 3, 3}, rng));
  auto& table = ps.add("table", random_tensor({4, 5}, rng));
  const std::vector<int> labels{3, 0, 3};
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    auto cat = ops::concat_channels(tp.leaf(a), tp.leaf(b));
    auto up = ops::upsample_nearest2x(cat);
    auto pooled = ops::global_avg_pool(ops::silu(up));
    auto e = ops::embedding(tp.leaf(table), labels);
    return ops::add(random_projection(pooled, 17), random_projection(e, 18));
  };
  EXPECT_LT(max_rel_grad_error(f, ps), kTol);
}

TEST(Ops, LossGradients) {
  Rng rng(7);
  ParameterSet<double> ps;
  auto& logits = ps.add("logits", random_tensor({4, 5}, rng, 2.0));
  auto& x = ps.add("x", random_tensor({3, 2, 2}, rng));
  const std::vector<int> labels{1, 4, 0, 1};
  const std::vector<double> w{1.0, 0.3, 0.3, 1.0};
  const std::vector<double> wx{0.5, 2.0, 0.1};
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    return ops::add(ops::weighted_cross_entropy(tp.leaf(logits), labels, std::span<const double>(w)),
                    ops::weighted_sse(tp.leaf(x), std::span<const double>(wx)));
  };
  EXPECT_LT(max_rel_grad_error(f, ps), kTol);
}

TEST(Ops, DetachBlocksGradient) {
  ParameterSet<double> ps;
  auto& a = ps.add("a", Tensor<double>({2}, 3.0));
  Tape<double> tp;
  auto la = tp.leaf(a);
  auto loss = ops::sum(ops::mul(la, ops::detach(la)));
  tp.backward(loss);
  // d/da (a * sg(a)) = sg(a) = 3, not 2a = 6
  EXPECT_DOUBLE_EQ(a.grad[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad[1], 3.0);
}

TEST(Ops, SoftmaxIsNormalizedAndPositive) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> l(7);
    for (auto& v : l) v = 30.0 * rng.normal();
    const auto p = ops::softmax_row<double>(l);
    double s = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Ops, ErrorsOnShapeMismatch) {
  Tape<double> tp;
  auto a = tp.constant(Tensor<double>({2, 3}));
  auto b = tp.constant(Tensor<double>({3, 2}));
  EXPECT_THROW(ops::add(a, b), std::invalid_argument);
  auto table = tp.constant(Tensor<double>({2, 2}));
  const std::vector<int> bad{2};
  EXPECT_THROW(ops::embedding(table, bad), std::out_of_range);
}

}  // namespace
