#include "mixunlearn/errors.hpp"
#include "mixunlearn/losses.hpp"
#include "mixunlearn/models.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace mixunlearn;
using testsupport::check_gradients;
using testsupport::random_distribution;
using testsupport::random_tensor;

namespace {

double sim(std::span<const double> p, std::span<const double> q) {
  double dot = 0.0, np = 0.0, nq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * q[i];
    np += p[i] * p[i];
    nq += q[i] * q[i];
  }
  return 1.0 - dot / ((std::sqrt(np) + 1e-12) * (std::sqrt(nq) + 1e-12));
}

std::vector<double> lambdas_for(std::size_t n, Rng& rng) {
  std::vector<double> l(n);
  for (double& v : l) v = 0.02 + 0.96 * uniform01(rng);
  return l;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace

TEST(Sharpen, UniformIsFixedPoint) {
  const std::vector<double> u(5, 0.2);
  for (double t : {0.1, 0.3, 0.5, 1.0, 2.0})
    for (double v : sharpen(u, t)) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Sharpen, OneHotIsFixedPoint) {
  const std::vector<double> q{0.0, 1.0, 0.0, 0.0};
  for (double t : {0.1, 0.3, 1.0}) EXPECT_EQ(sharpen(q, t), q);
}

TEST(Sharpen, HandValues) {
  const auto a = sharpen(std::vector<double>{0.8, 0.2}, 0.5);
  EXPECT_NEAR(a[0], 0.64 / 0.68, 1e-12);
  EXPECT_NEAR(a[0], 0.941176, 1e-6);
  EXPECT_NEAR(a[1], 0.058823, 1e-6);
  // Odds 4^(1/0.3) = 101.59...
  const auto b = sharpen(std::vector<double>{0.8, 0.2}, 0.3);
  const double odds = std::pow(4.0, 1.0 / 0.3);
  EXPECT_NEAR(b[0], odds / (odds + 1.0), 1e-12);
  EXPECT_NEAR(b[0], 0.990253, 1e-6);
  EXPECT_NEAR(b[1], 0.009747, 1e-6);
}

TEST(Sharpen, PreservesArgmaxAndNormalization) {
  Rng rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor q = random_distribution(1, 2 + trial % 9, rng);
    const double t = 0.05 + 1.5 * uniform01(rng);
    const auto s = sharpen(q.values(), t);
    EXPECT_EQ(argmax(s), argmax(q.values()));
    double z = 0.0;
    for (double v : s) {
      EXPECT_GE(v, 0.0);
      z += v;
    }
    EXPECT_NEAR(z, 1.0, 1e-12);
  }
}

TEST(Sharpen, ZerosStayZeroAndAllZeroRejected) {
  const auto s = sharpen(std::vector<double>{0.0, 0.7, 0.3}, 0.5);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_THROW(sharpen(std::vector<double>{0.0, 0.0}, 0.5), InputError);
}

TEST(Targets, AwareIsOneHot) {
  LossConfig cfg;
  cfg.label_mode = LabelMode::aware;
  const Tensor t = target_distribution(Tensor::full({1, 4}, 0.25), std::vector<int>{2}, cfg);
  EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()), (std::vector<double>{0, 0, 1, 0}));
}

TEST(Targets, AgnosticSharpensModelOutput) {
  LossConfig cfg;
  const Tensor u = target_distribution(Tensor::full({1, 4}, 0.25), std::nullopt, cfg);
  for (double v : u.values()) EXPECT_NEAR(v, 0.25, 1e-15);
  const Tensor s = target_distribution(Tensor({1, 2}, {0.8, 0.2}), std::nullopt, cfg);
  EXPECT_NEAR(s[0], 0.990253, 1e-6);
  EXPECT_NEAR(s[1], 0.009747, 1e-6);
}

TEST(Targets, LabelModeMismatchIsConfigError) {
  LossConfig aware;
  aware.label_mode = LabelMode::aware;
  EXPECT_THROW(target_distribution(Tensor::full({1, 4}, 0.25), std::nullopt, aware), ConfigError);
  EXPECT_THROW(target_distribution(Tensor::full({1, 4}, 0.25), std::vector<int>{1}, LossConfig{}), ConfigError);
}

TEST(Targets, FromClassifierMatchesFromProbabilities) {
  const Classifier f(Architecture::mlp(3, {8}, 4), 1);
  Rng rng(2);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor a = target_distribution(x, std::nullopt, f, LossConfig{});
  const Tensor b = sharpen_rows(f.forward(x), 0.3);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_FALSE(a.requires_grad());
}

TEST(SimLoss, Endpoints) {
  EXPECT_NEAR(sim_loss(Tensor::vector({0.3, 0.7}), Tensor::vector({0.3, 0.7})).item(), 0.0, 1e-10);
  EXPECT_NEAR(sim_loss(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 1.0, 1e-12);
  EXPECT_NEAR(sim_loss(Tensor::vector({1, 2}), Tensor::vector({-1, -2})).item(), 2.0, 1e-12);
}

TEST(SimLoss, MatrixMatchesPairwise) {
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
  const Tensor m = sim_loss_matrix(a, b);
  ASSERT_EQ(m.shape(), (Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 5; ++k)
      EXPECT_NEAR(m[i * 5 + k], sim(a.values().subspan(i * 4, 4), b.values().subspan(k * 4, 4)), 1e-12);
}

TEST(MixLosses, BatchOfOneClosedForm) {
  Rng rng(4);
  LossConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    cfg.tau_gen = 0.05 + uniform01(rng);
    cfg.tau_mix = 0.5 + 10.0 * uniform01(rng);
    const std::size_t l = 2 + trial % 5;
    const Tensor out = random_distribution(1, l, rng);
    const Tensor pf = random_distribution(1, l, rng), pr = random_distribution(1, l, rng);
    const std::vector<double> lam = lambdas_for(1, rng);
    const double si = sim(out.values(), pf.values()), sj = sim(out.values(), pr.values());
    EXPECT_NEAR(loss_gen(out, pf, pr, lam, cfg).item(), -((1 - lam[0]) * sj - lam[0] * si / cfg.tau_gen), 1e-10);
    EXPECT_NEAR(loss_mix(out, pf, pr, lam, cfg).item(), (1 - lam[0]) * sj - lam[0] * si / cfg.tau_mix, 1e-10);
  }
}

TEST(MixLosses, ReferenceSumOverPairs) {
  Rng rng(5);
  const LossConfig cfg;
  const std::size_t b = 4, l = 3;
  const Tensor out = random_distribution(b, l, rng);
  const Tensor pf = random_distribution(b, l, rng), pr = random_distribution(b, l, rng);
  const auto lam = lambdas_for(b, rng);
  double expect = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    const auto oj = out.values().subspan(j * l, l);
    double lse = 0.0;
    for (std::size_t i = 0; i < b; ++i) lse += std::exp(lam[j] * sim(oj, pf.values().subspan(i * l, l)) / cfg.tau_mix);
    expect += (1 - lam[j]) * sim(oj, pr.values().subspan(j * l, l)) - std::log(lse);
  }
  EXPECT_NEAR(loss_mix(out, pf, pr, lam, cfg).item(), expect, 1e-12);
}

TEST(MixLosses, ZeroLambdaLeavesLogBatchOffset) {
  const Tensor out = Tensor({1, 2}, {0.6, 0.4});
  const Tensor pr = out.clone();
  Rng rng(6);
  const Tensor pf = random_distribution(3, 2, rng);
  // One mixed output scored against three forget targets.
  const std::vector<double> lam{0.0};
  EXPECT_NEAR(loss_mix(out, pf, pr, lam, LossConfig{}).item(), -std::log(3.0), 1e-10);
  EXPECT_NEAR(loss_gen(out, pf, pr, lam, LossConfig{}).item(), std::log(3.0), 1e-10);
}

TEST(MixLosses, SignDuality) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    LossConfig cfg;
    cfg.tau_gen = cfg.tau_mix = 0.05 + 10.0 * uniform01(rng);
    const std::size_t b = 1 + trial % 6, l = 2 + trial % 4;
    const Tensor out = random_distribution(b, l, rng);
    const Tensor pf = random_distribution(b, l, rng), pr = random_distribution(b, l, rng);
    const auto lam = lambdas_for(b, rng);
    EXPECT_NEAR(loss_gen(out, pf, pr, lam, cfg).item(), -loss_mix(out, pf, pr, lam, cfg).item(), 1e-12);
  }
}

TEST(MixLosses, EmptyAndMismatchedBatches) {
  const Tensor empty({0, 3}, {});
  const Tensor row = Tensor::full({1, 3}, 1.0 / 3);
  EXPECT_THROW(loss_mix(empty, row, empty, std::vector<double>{}, LossConfig{}), InputError);
  EXPECT_THROW(loss_gen(row, row, row, std::vector<double>{0.1, 0.2}, LossConfig{}), DimensionError);
  EXPECT_THROW(loss_real(empty, empty, row, row, LossConfig{}), InputError);
}

TEST(RealLoss, BatchOfOneClosedForm) {
  Rng rng(8);
  LossConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    cfg.tau_real = 0.1 + 10.0 * uniform01(rng);
    const Tensor of = random_distribution(1, 4, rng), pf = random_distribution(1, 4, rng);
    const Tensor orr = random_distribution(1, 4, rng), pr = random_distribution(1, 4, rng);
    const double expect = sim(orr.values(), pr.values()) - sim(of.values(), pf.values()) / cfg.tau_real;
    EXPECT_NEAR(loss_real(of, pf, orr, pr, cfg).item(), expect, 1e-10);
  }
}

TEST(RealLoss, SimLossEndpoints) {
  LossConfig cfg;
  const Tensor p = Tensor({1, 2}, {0.7, 0.3});
  const Tensor anti = Tensor({1, 2}, {-0.7, -0.3});
  EXPECT_NEAR(loss_real(anti, p, p, p, cfg).item(), 0.0 - 2.0 / cfg.tau_real, 1e-10);
}

TEST(RealLoss, FiniteForExtremeInputs) {
  Rng rng(9);
  LossConfig cfg;
  cfg.tau_real = 1e-3;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({6, 3}, rng, -1e6, 1e6), b = random_tensor({6, 3}, rng, -1e6, 1e6);
    EXPECT_TRUE(std::isfinite(loss_real(a, b, b, a, cfg).item()));
    cfg.tau_gen = 1e-3;
    EXPECT_TRUE(std::isfinite(loss_gen(a, b, a, lambdas_for(6, rng), cfg).item()));
  }
}

TEST(Unlearn, WeightedSum) {
  EXPECT_DOUBLE_EQ(loss_unlearn(Tensor::scalar(2.0), Tensor::scalar(3.0), 1.0).item(), 5.0);
  EXPECT_DOUBLE_EQ(loss_unlearn(Tensor::scalar(2.0), Tensor::scalar(3.0), 0.0).item(), 2.0);
  EXPECT_THROW(loss_unlearn(Tensor::scalar(2.0), Tensor::scalar(3.0), -1.0), InputError);
}

// Outputs are softmax(z) so the checks see the same chain the engine does.
TEST(LossGradients, MatchFiniteDifferences) {
  Rng rng(10);
  const std::size_t b = 4, l = 5;
  for (int trial = 0; trial < 10; ++trial) {
    LossConfig cfg;
    cfg.omega = 0.5 + uniform01(rng);
    const Tensor pf = random_distribution(b, l, rng), pr = random_distribution(b, l, rng);
    const auto lam = lambdas_for(b, rng);
    const std::vector<Tensor> z{random_tensor({b, l}, rng, -2, 2), random_tensor({b, l}, rng, -2, 2),
                                random_tensor({b, l}, rng, -2, 2)};

    const auto gen = [&](const std::vector<Tensor>& p) { return loss_gen(softmax(p[0]), pf, pr, lam, cfg); };
    const auto mix = [&](const std::vector<Tensor>& p) { return loss_mix(softmax(p[0]), pf, pr, lam, cfg); };
    const auto real = [&](const std::vector<Tensor>& p) {
      return loss_real(softmax(p[1]), pf, softmax(p[2]), pr, cfg);
    };
    const auto unl = [&](const std::vector<Tensor>& p) { return loss_unlearn(mix(p), real(p), cfg.omega); };

    EXPECT_LT(check_gradients(gen, {z[0]}).rel_error(), 1e-4);
    EXPECT_LT(check_gradients(mix, {z[0]}).rel_error(), 1e-4);
    EXPECT_LT(check_gradients(real, z).rel_error(), 1e-4);
    EXPECT_LT(check_gradients(unl, z).rel_error(), 1e-4);
  }
}

TEST(LossGradients, UnlearnGradientIsWeightedSum) {
  Rng rng(11);
  const LossConfig cfg;
  const double omega = 0.7;
  const Tensor pf = random_distribution(3, 4, rng), pr = random_distribution(3, 4, rng);
  const auto lam = lambdas_for(3, rng);
  const Tensor z0 = random_tensor({3, 4}, rng);
  auto grad_of = [&](auto&& build) {
    Tensor z = z0.clone(true);
    build(z).backward();
    return std::vector<double>(z.grad().begin(), z.grad().end());
  };
  const auto gm = grad_of([&](const Tensor& z) { return loss_mix(softmax(z), pf, pr, lam, cfg); });
  const auto gr = grad_of([&](const Tensor& z) { return loss_real(softmax(z), pf, softmax(z), pr, cfg); });
  const auto gu = grad_of([&](const Tensor& z) {
    return loss_unlearn(loss_mix(softmax(z), pf, pr, lam, cfg), loss_real(softmax(z), pf, softmax(z), pr, cfg), omega);
  });
  for (std::size_t i = 0; i < gu.size(); ++i) EXPECT_NEAR(gu[i], gm[i] + omega * gr[i], 1e-12);
}

TEST(Config, Validation) {
  LossConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.tau_gen = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.sharpen_t = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.omega = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(label_mode_from_string(to_string(LabelMode::aware)), LabelMode::aware);
  EXPECT_THROW(label_mode_from_string("bogus"), ConfigError);
}
