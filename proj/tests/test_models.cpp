#include <gtest/gtest.h>

#include <cmath>

#include "diffult/models.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace diffult;
using diffult::testing::max_rel_grad_error;
using diffult::testing::random_tensor;
using diffult::testing::sampled_rel_grad_error;

namespace {

DenoiserArch tiny_denoiser_arch() {
  DenoiserArch a;
  a.channels = 1;
  a.num_classes = 3;
  a.steps = 20;
  a.base_width = 8;
  a.emb_dim = 8;
  a.groups = 2;
  return a;
}

ClassifierArch tiny_classifier_arch() {
  ClassifierArch a;
  a.num_classes = 4;
  a.widths = {4, 8};
  a.blocks_per_stage = 1;
  return a;
}

LongTailDataset small_shapes(std::size_t per_class, int classes, std::uint64_t seed) {
  ShapesSpec spec;
  spec.num_classes = classes;
  spec.per_class = per_class;
  spec.seed = seed;
  return generate_shapes_dataset(spec);
}

TEST(Denoiser, ShapeConditioningAndPurity) {
  DenoiserNet<float> net(DenoiserArch{}, 3);
  EXPECT_EQ(net.parameters().find("class_emb")->value.shape(), (Shape{10, 128}));
  Rng rng(1);
  Tensor<float> x({2, 1, 16, 16});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  const std::vector<int> t{5, 150}, y0{0, 0}, y1{7, 7};
  Tape<float> tp(false);
  auto a = net.forward(tp, tp.constant(x), t, y0).value();
  auto b = net.forward(tp, tp.constant(x), t, y0).value();
  auto c = net.forward(tp, tp.constant(x), t, y1).value();
  EXPECT_EQ(a.shape(), x.shape());
  EXPECT_EQ(a, b);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - c[i]);
  EXPECT_GT(diff, 1e-3);
}

TEST(Denoiser, RejectsOutOfRangeInputs) {
  DenoiserNet<float> net(tiny_denoiser_arch(), 1);
  Tape<float> tp(false);
  auto x = tp.constant(Tensor<float>({1, 1, 8, 8}));
  const std::vector<int> ok_t{1}, ok_y{2};
  EXPECT_NO_THROW(net.forward(tp, x, ok_t, ok_y));
  EXPECT_THROW(net.forward(tp, x, std::vector<int>{0}, ok_y), std::out_of_range);
  EXPECT_THROW(net.forward(tp, x, std::vector<int>{21}, ok_y), std::out_of_range);
  EXPECT_THROW(net.forward(tp, x, ok_t, std::vector<int>{3}), std::out_of_range);
  EXPECT_THROW(net.forward(tp, x, ok_t, std::vector<int>{-1}), std::out_of_range);
  EXPECT_THROW(net.forward(tp, tp.constant(Tensor<float>({1, 2, 8, 8})), ok_t, ok_y), std::invalid_argument);
}

TEST(Denoiser, GradientSpotCheck) {
  DenoiserNet<double> net(tiny_denoiser_arch(), 4);
  Rng rng(5);
  const auto x = random_tensor({2, 1, 4, 4}, rng);
  const std::vector<int> t{3, 17}, y{0, 2};
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    return diffult::testing::random_projection(net.forward(tp, tp.constant(x), t, y), 6);
  };
  EXPECT_LT(sampled_rel_grad_error(f, net.parameters(), 150, 7), 1e-3);
}

TEST(Denoiser, CheckpointRoundTrip) {
  DenoiserNet<float> net(tiny_denoiser_arch(), 8);
  const auto path = diffult::testing::scratch_dir() / "d.ckpt";
  net.save(path.string());
  auto back = DenoiserNet<float>::load(path.string());
  EXPECT_EQ(back.arch(), net.arch());
  Rng rng(9);
  Tensor<float> x({3, 1, 8, 8});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  const std::vector<int> t{1, 10, 20}, y{0, 1, 2};
  Tape<float> tp(false);
  EXPECT_EQ(net.forward(tp, tp.constant(x), t, y).value(), back.forward(tp, tp.constant(x), t, y).value());
  EXPECT_THROW(ClassifierNet<float>::load(path.string()), std::runtime_error);
}

TEST(WceLoss, IdentitiesAndValues) {
  Rng rng(10);
  const auto logits = random_tensor({5, 4}, rng);
  const std::vector<int> y{0, 3, 1, 1, 2};
  const std::vector<Origin> mixed{Origin::real, Origin::generated, Origin::real, Origin::generated, Origin::real};
  const std::vector<Origin> real(5, Origin::real);
  const std::vector<double> ones(5, 1.0);
  Tape<double> tp(false);
  auto l = tp.constant(logits);
  const double ce = ops::weighted_cross_entropy(l, y, std::span<const double>(ones)).value()[0];
  EXPECT_NEAR(wce_loss(l, y, mixed, 1.0).value()[0], ce, 1e-9);
  for (double w : {0.0, 0.3, 0.7})
    EXPECT_NEAR(wce_loss(l, y, real, w).value()[0], ce, 1e-12);

  auto uniform = tp.constant(Tensor<double>({1, 10}));
  const std::vector<int> y1{4};
  const std::vector<Origin> gen1{Origin::generated};
  EXPECT_NEAR(wce_loss(uniform, y1, gen1, 0.3).value()[0], 0.3 * std::log(10.0), 1e-12);

  double prev = -1;
  for (double w : {0.0, 0.2, 0.5, 0.9, 1.0}) {
    const double v = wce_loss(l, y, mixed, w).value()[0];
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_THROW(wce_loss(l, y, mixed, 1.5), std::invalid_argument);
  EXPECT_THROW(wce_loss(l, y, mixed, -0.1), std::invalid_argument);
}

TEST(WceLoss, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  ParameterSet<double> ps;
  auto& logits = ps.add("logits", random_tensor({6, 5}, rng));
  const std::vector<int> y{0, 4, 2, 2, 1, 3};
  const std::vector<Origin> g{Origin::real, Origin::generated, Origin::generated, Origin::real, Origin::real,
                              Origin::generated};
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) { return wce_loss(tp.leaf(logits), y, g, 0.3); };
  EXPECT_LT(max_rel_grad_error(f, ps), 1e-6);
}

TEST(WceLoss, GeneratedGradientIsOmegaTimesReal) {
  Rng rng(12);
  ParameterSet<double> ps;
  auto& logits = ps.add("logits", random_tensor({1, 6}, rng));
  const std::vector<int> y{2};
  auto grad_for = [&](Origin o) {
    const std::vector<Origin> g{o};
    ps.zero_grad();
    Tape<double> tp;
    auto l = wce_loss(tp.leaf(logits), y, g, 0.3);
    tp.backward(l);
    return logits.grad;
  };
  const auto gen = grad_for(Origin::generated), real = grad_for(Origin::real);
  for (std::size_t i = 0; i < gen.size(); ++i) EXPECT_NEAR(gen[i], 0.3 * real[i], 1e-12);
}

TEST(Softmax, PositiveAndNormalized) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(7);
    for (auto& v : logits) v = 30 * rng.normal();
    const auto p = ops::softmax_row<double>(logits);
    double s = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Classifier, StripHeadFactorizesLogits) {
  ClassifierNet<float> net(ClassifierArch{}, 14);
  auto fx = strip_head(net);
  EXPECT_EQ(fx.dim(), 64u);
  Rng rng(15);
  Tensor<float> x({4, 1, 16, 16});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
  auto dup = x;
  std::copy_n(x.raw(), 256, dup.raw() + 256);  // image 1 := image 0
  const auto feats = fx.extract(dup);
  const auto logits = predict_logits(net, dup);
  const auto& w = net.head_weight().value;
  const auto& b = net.head_bias().value;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t j = 0; j < 10; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < 64; ++k) s += static_cast<double>(w[j * 64 + k]) * feats[n * 64 + k];
      EXPECT_NEAR(logits[n * 10 + j], s, 1e-5);
    }
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(feats[k], feats[64 + k]);
}

TEST(Classifier, GradientSpotCheck) {
  ClassifierNet<double> net(tiny_classifier_arch(), 16);
  Rng rng(17);
  const auto x = random_tensor({3, 1, 8, 8}, rng);
  const std::vector<int> y{0, 3, 1};
  const std::vector<Origin> g{Origin::real, Origin::generated, Origin::real};
  auto f = [&](Tape<double>& tp, ParameterSet<double>&) {
    return wce_loss(net.forward(tp, tp.constant(x), false), y, g, 0.3);
  };
  EXPECT_LT(sampled_rel_grad_error(f, net.parameters(), 150, 18), 1e-3);
}

TEST(Classifier, CheckpointRoundTripIncludesStatistics) {
  auto data = small_shapes(6, 4, 19);
  ClassifierTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 20;
  auto res = train_classifier<float>(data, cfg, tiny_classifier_arch());
  const auto path = diffult::testing::scratch_dir() / "c.ckpt";
  res.model.save(path.string());
  auto back = ClassifierNet<float>::load(path.string());
  EXPECT_EQ(back.arch(), res.model.arch());
  const auto x = to_tensor<float>(data);
  EXPECT_EQ(predict_logits(back, x), predict_logits(res.model, x));
}

TEST(Validation, SplitIsPerClassRealOnlyAndDeterministic) {
  auto data = small_shapes(30, 3, 21);
  for (std::size_t i = 0; i < 9; ++i) data.samples[i].origin = Origin::generated;  // class 0
  data.samples.resize(30 + 30 + 5);                                              // class 2 keeps 5
  const auto a = split_validation(data, 0.1, 22), b = split_validation(data, 0.1, 22);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.train.size() + a.val.size(), data.size());
  std::vector<std::size_t> per(3);
  for (auto i : a.val) {
    EXPECT_EQ(data.samples[i].origin, Origin::real);
    ++per[static_cast<std::size_t>(data.samples[i].label)];
  }
  EXPECT_EQ(per, (std::vector<std::size_t>{2, 3, 1}));  // round(2.1), round(3), max(1, round(0.5))
  EXPECT_NE(split_validation(data, 0.1, 23).val, a.val);
}

TEST(Augment, DeterministicAndShapePreserving) {
  Rng rng(24);
  Tensor<float> x({3, 1, 6, 6});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  auto a = x, b = x;
  Rng r1(25), r2(25);
  augment_batch(a, r1);
  augment_batch(b, r2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), x.shape());
  auto c = x;
  Rng r3(26);
  augment_batch(c, r3, 0);  // only flips remain: each row is the original or its mirror
  for (std::size_t n = 0; n < 3; ++n) {
    const float* src = x.raw() + n * 36;
    const float* dst = c.raw() + n * 36;
    const bool same = std::equal(src, src + 36, dst);
    bool mirrored = true;
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t q = 0; q < 6; ++q) mirrored = mirrored && dst[r * 6 + q] == src[r * 6 + 5 - q];
    EXPECT_TRUE(same || mirrored);
  }
}

TEST(TrainClassifier, DeterministicAndOmegaInertWithoutGenerated) {
  auto data = small_shapes(12, 4, 27);
  ClassifierTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 28;
  cfg.omega = 0.3;
  auto a = train_classifier<float>(data, cfg, tiny_classifier_arch());
  auto b = train_classifier<float>(data, cfg, tiny_classifier_arch());
  cfg.omega = 1.0;
  auto c = train_classifier<float>(data, cfg, tiny_classifier_arch());
  EXPECT_EQ(a.model.snapshot(), b.model.snapshot());
  EXPECT_EQ(a.model.snapshot(), c.model.snapshot());
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_GE(a.best_epoch, 1u);
}

TEST(TrainClassifier, RejectsMissingClassAndBadOmega) {
  auto data = small_shapes(4, 3, 29);
  ClassifierTrainConfig cfg;
  cfg.epochs = 1;
  cfg.omega = 2.0;
  EXPECT_THROW(train_classifier<float>(data, cfg, tiny_classifier_arch()), std::invalid_argument);
  cfg.omega = 0.3;
  data.samples.resize(8);  // class 2 now empty
  EXPECT_THROW(train_classifier<float>(data, cfg, tiny_classifier_arch()), TrainingError);
}

TEST(TrainClassifier, BalancedShapesSanity) {
  auto train = small_shapes(500, 10, 30);
  auto test = small_shapes(50, 10, 31);
  ClassifierTrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 32;
  auto res = train_classifier<float>(train, cfg);
  const auto pred = predict(res.model, test);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.samples[i].label;
  EXPECT_GT(static_cast<double>(hit) / static_cast<double>(pred.size()), 0.90);
}

TEST(TrainDenoiser, LossDecreasesAndZeroTauMatchesDdpm) {
  auto data = small_shapes(10, 3, 33);
  auto sched = make_schedule(20, 1e-3, 0.2);
  DenoiserTrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.seed = 34;
  auto arch = tiny_denoiser_arch();
  auto plain = train_denoiser<float>(data, sched, std::nullopt, cfg, arch);
  auto zero_tau = train_denoiser<float>(data, sched, CbdmConfig{0.0, 0.25, 1}, cfg, arch);
  ASSERT_EQ(plain.log.size(), 60u);
  for (std::size_t i = 0; i < plain.log.size(); ++i) EXPECT_EQ(plain.log[i].loss, zero_tau.log[i].loss);
  for (std::size_t k = 0; k < plain.model.parameters().size(); ++k)
    EXPECT_EQ(plain.model.parameters()[k].value, zero_tau.model.parameters()[k].value);

  double first = 0, last = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    first += plain.log[i].loss;
    last += plain.log[plain.log.size() - 1 - i].loss;
  }
  EXPECT_LT(last, first);

  auto cb = train_denoiser<float>(data, sched, CbdmConfig{1.0, 0.25, 1}, cfg, arch);
  EXPECT_NE(cb.model.parameters()[0].value, plain.model.parameters()[0].value);
}

TEST(TrainDenoiser, UsesRealSamplesOnly) {
  auto data = small_shapes(4, 3, 35);
  for (auto& s : data.samples) s.origin = Origin::generated;
  DenoiserTrainConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(train_denoiser<float>(data, make_schedule(10, 1e-3, 0.02), std::nullopt, cfg, tiny_denoiser_arch()),
               TrainingError);
}

}  // namespace
