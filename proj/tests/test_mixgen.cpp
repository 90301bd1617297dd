#include "mixunlearn/errors.hpp"
#include "mixunlearn/losses.hpp"
#include "mixunlearn/mixgen.hpp"
#include "mixunlearn/models.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

using namespace mixunlearn;
using testsupport::check_gradients;
using testsupport::random_distribution;
using testsupport::random_tensor;

namespace {

struct Toy {
  Classifier f_u;
  MixGenerator g;
  PairedBatch batch;
};

Toy make_toy(std::uint64_t seed, Shape sample_shape = {6}) {
  Architecture arch = sample_shape.size() == 1 ? Architecture::mlp(sample_shape[0], {16, 8}, 4)
                                               : Architecture::cnn(sample_shape, 4);
  Classifier f(arch, seed);
  GeneratorConfig gc{.input_shape = sample_shape, .feature_width = f.feature_width(), .hidden = 16};
  MixGenerator g(gc, seed + 1);
  Rng rng(seed + 2);
  const std::size_t n = 5;
  Shape batch_shape{n};
  batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
  PairedBatch b;
  b.x_f = random_tensor(batch_shape, rng, -1.5, 1.5);
  b.x_r = random_tensor(batch_shape, rng, -1.5, 1.5);
  b.h_f = f.features(b.x_f).detach();
  b.h_r = f.features(b.x_r).detach();
  b.target_f = random_distribution(n, 4, rng);
  b.target_r = random_distribution(n, 4, rng);
  LambdaSampler s(0.75, seed + 3);
  b.lambdas = s.sample(n);
  return {std::move(f), std::move(g), std::move(b)};
}

} // namespace

TEST(VanillaMix, Endpoints) {
  const Tensor a = Tensor::vector({0.1, 0.7}), b = Tensor::vector({-3.0, 1.0 / 3.0});
  const Tensor one = vanilla_mix(a, b, 1.0), zero = vanilla_mix(a, b, 0.0);
  EXPECT_TRUE(std::equal(one.values().begin(), one.values().end(), a.values().begin()));
  EXPECT_TRUE(std::equal(zero.values().begin(), zero.values().end(), b.values().begin()));
}

TEST(VanillaMix, Midpoint) {
  const Tensor m = vanilla_mix(Tensor::vector({2, 4}), Tensor::vector({0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(m[0], 1.0);
  EXPECT_DOUBLE_EQ(m[1], 2.0);
}

TEST(VanillaMix, Errors) {
  EXPECT_THROW(vanilla_mix(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3}), 0.5), DimensionError);
  EXPECT_THROW(vanilla_mix(Tensor::vector({1, 2}), Tensor::vector({1, 2}), 1.5), InputError);
}

TEST(VanillaMix, RowsUsePerPairLambda) {
  const Tensor a({2, 2}, {1, 1, 1, 1}), b({2, 2}, {0, 0, 0, 0});
  const Tensor m = vanilla_mix_rows(a, b, std::vector<double>{0.25, 0.75});
  EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), (std::vector<double>{0.25, 0.25, 0.75, 0.75}));
}

TEST(Mask, ForcedEndpointsReturnInputs) {
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const Tensor ones = apply_mask(a, b, Tensor::full({3, 4}, 1.0));
  const Tensor zeros = apply_mask(a, b, Tensor::full({3, 4}, 0.0));
  EXPECT_TRUE(std::equal(ones.values().begin(), ones.values().end(), a.values().begin()));
  EXPECT_TRUE(std::equal(zeros.values().begin(), zeros.values().end(), b.values().begin()));
}

TEST(MixBlock, MaskRangeAndConvexity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const Shape& shape : {Shape{6}, Shape{1, 16, 16}}) {
      Toy t = make_toy(seed, shape);
      const MixOutput out = mixblock_forward(t.g, t.batch.x_f, t.batch.x_r, t.batch.h_f, t.batch.h_r, t.batch.lambdas);
      ASSERT_EQ(out.mask.shape(), t.batch.x_f.shape());
      ASSERT_EQ(out.mix.shape(), t.batch.x_f.shape());
      for (std::size_t k = 0; k < out.mix.numel(); ++k) {
        EXPECT_GE(out.mask[k], 0.0);
        EXPECT_LE(out.mask[k], 1.0);
        const double lo = std::min(t.batch.x_f[k], t.batch.x_r[k]), hi = std::max(t.batch.x_f[k], t.batch.x_r[k]);
        EXPECT_GE(out.mix[k], lo - 1e-15);
        EXPECT_LE(out.mix[k], hi + 1e-15);
      }
    }
  }
}

TEST(MixBlock, FreshGeneratorTracksLambda) {
  // With a small output layer the mask starts near lambda for every element.
  Toy t = make_toy(3);
  const std::vector<double> lam{0.1, 0.3, 0.5, 0.7, 0.9};
  const MixOutput out = mixblock_forward(t.g, t.batch.x_f, t.batch.x_r, t.batch.h_f, t.batch.h_r, lam);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += out.mask[r * 6 + c] / 6.0;
    EXPECT_NEAR(m, lam[r], 0.1);
  }
}

TEST(MixBlock, ShapeErrors) {
  Toy t = make_toy(4);
  const auto& b = t.batch;
  EXPECT_THROW(mixblock_forward(t.g, b.x_f, b.x_r, Tensor::zeros({5, 3}), b.h_r, b.lambdas), DimensionError);
  EXPECT_THROW(mixblock_forward(t.g, b.x_f, Tensor::zeros({5, 7}), b.h_f, b.h_r, b.lambdas), DimensionError);
  EXPECT_THROW(mixblock_forward(t.g, b.x_f, b.x_r, b.h_f, b.h_r, std::vector<double>{0.5}), DimensionError);
}

TEST(MixBlock, GradientsWrtGeneratorMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    for (const Shape& shape : {Shape{6}, Shape{1, 16, 16}}) {
      Toy t = make_toy(10 + seed, shape);
      const LossConfig cfg;
      FreezeGuard frozen(t.f_u);
      const auto f = [&](const std::vector<Tensor>&) {
        const MixOutput m = mixblock_forward(t.g, t.batch.x_f, t.batch.x_r, t.batch.h_f, t.batch.h_r, t.batch.lambdas);
        return loss_gen(t.f_u.forward(m.mix), t.batch.target_f, t.batch.target_r, t.batch.lambdas, cfg);
      };
      EXPECT_LT(check_gradients(f, t.g.parameters()).rel_error(), 1e-4);
    }
  }
}

TEST(Lambda, UniformMeanAndSupport) {
  LambdaSampler s(1.0, 5);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double l = sample_lambda(s);
    ASSERT_GT(l, 0.0);
    ASSERT_LT(l, 1.0);
    sum += l;
  }
  EXPECT_NEAR(sum / 10000.0, 0.5, 0.02);
}

TEST(Lambda, SymmetricHistogram) {
  LambdaSampler s(0.75, 6);
  const auto draws = s.sample(20000);
  std::vector<int> lo(10, 0), hi(10, 0);
  for (double l : draws) {
    ++lo[std::min<std::size_t>(9, static_cast<std::size_t>(l * 10))];
    ++hi[std::min<std::size_t>(9, static_cast<std::size_t>((1 - l) * 10))];
  }
  // Bin counts near 2000; a 5 sigma band for the difference of two such counts is about 320.
  for (int b = 0; b < 10; ++b) EXPECT_LT(std::abs(lo[b] - hi[b]), 320) << "bin " << b;
}

TEST(Lambda, SmallAlphaStaysInsideOpenInterval) {
  LambdaSampler s(0.05, 7);
  for (double l : s.sample(5000)) {
    ASSERT_GT(l, 0.0);
    ASSERT_LT(l, 1.0);
  }
}

TEST(Lambda, DeterministicAndValidated) {
  LambdaSampler a(0.75, 9), b(0.75, 9);
  EXPECT_EQ(a.sample(50), b.sample(50));
  EXPECT_THROW(LambdaSampler(0.0, 1), InputError);
  EXPECT_THROW(LambdaSampler(-2.0, 1), InputError);
}

TEST(GeneratorStep, LeavesUnlearnerUntouched) {
  Toy t = make_toy(20);
  const std::uint64_t before = t.f_u.parameter_hash();
  const std::uint64_t g_before = t.g.parameter_hash();
  const double l = train_generator_step(t.g, t.f_u, t.batch, LossConfig{}, GeneratorStepConfig{.lr = 0.01});
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(t.f_u.parameter_hash(), before);
  EXPECT_NE(t.g.parameter_hash(), g_before);
  for (const auto& p : t.f_u.parameters()) {
    EXPECT_TRUE(p.requires_grad());
    EXPECT_FALSE(p.has_grad() && std::any_of(p.grad().begin(), p.grad().end(), [](double v) { return v != 0.0; }));
  }
}

TEST(GeneratorStep, DecreasesGeneratorLossOnToyInstance) {
  for (const Shape& shape : {Shape{6}, Shape{1, 16, 16}}) {
    Toy t = make_toy(21, shape);
    std::vector<double> trace;
    for (int step = 0; step < 50; ++step)
      trace.push_back(train_generator_step(t.g, t.f_u, t.batch, LossConfig{}, GeneratorStepConfig{.lr = 0.05}));
    EXPECT_LT(trace.back(), trace.front());
  }
}

TEST(GeneratorStep, Deterministic) {
  Toy a = make_toy(22), b = make_toy(22);
  for (int step = 0; step < 5; ++step)
    EXPECT_EQ(train_generator_step(a.g, a.f_u, a.batch, LossConfig{}, {}),
              train_generator_step(b.g, b.f_u, b.batch, LossConfig{}, {}));
  EXPECT_EQ(a.g.parameter_hash(), b.g.parameter_hash());
}

TEST(GeneratorStep, EmptyBatchIsInputError) {
  Toy t = make_toy(23);
  PairedBatch empty = t.batch;
  empty.x_f = Tensor({0, 6}, {});
  EXPECT_THROW(train_generator_step(t.g, t.f_u, empty, LossConfig{}, {}), InputError);
}

TEST(Generator, ParameterCountAndCheckpoint) {
  const GeneratorConfig vec{.input_shape = {8}, .feature_width = 32, .hidden = 64};
  const MixGenerator g(vec, 1);
  EXPECT_EQ(g.parameter_count(), 64u * 64 + 64 + 64 + 64 + 64 * 8 + 8);
  const GeneratorConfig img{.input_shape = {1, 28, 28}, .feature_width = 128, .hidden = 64};
  const MixGenerator gi(img, 1);
  EXPECT_EQ(gi.parameter_count(), 256u * 64 + 64 + 64 + 64 + 64 * 784 + 784 + 27 + 1);

  const auto path = std::filesystem::temp_directory_path() / "mixunlearn_gen.ckpt";
  gi.save(path);
  const MixGenerator back = MixGenerator::load(path);
  EXPECT_EQ(back.config(), img);
  EXPECT_EQ(back.parameter_hash(), gi.parameter_hash());
  std::filesystem::remove(path);
  const GeneratorConfig bad{.input_shape = {2, 3}, .feature_width = 4};
  EXPECT_THROW(bad.validate(), InputError);
}
