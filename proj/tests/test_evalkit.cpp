#include "mixunlearn/errors.hpp"
#include "mixunlearn/evalkit.hpp"
#include "mixunlearn/models.hpp"
#include "mixunlearn/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

using namespace mixunlearn;

namespace {

std::vector<double> normal_draws(std::size_t n, double mean, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = std::abs(mean + sd * normal01(rng));
  return v;
}

Classifier fitted(const Dataset& d, std::uint64_t seed, int epochs = 20) {
  TrainConfig tc;
  tc.lr = 0.05;
  tc.epochs = epochs;
  tc.seed = seed;
  return train_classifier(d, Architecture::mlp(d.sample_size(), {32, 16}, d.num_classes), tc);
}

} // namespace

TEST(Accuracy, MemorizerScoresHundred) {
  const Dataset d = make_blobs(3, 20, 2, 10.0, 1);
  EXPECT_DOUBLE_EQ(accuracy(fitted(d, 1), d), 100.0);
}

TEST(Accuracy, ConstantModelScoresChance) {
  const Dataset d = make_blobs(10, 30, 3, 3.0, 2);
  const Classifier m(Architecture::mlp(3, {8}, 10), 1, InitOptions{.zero_final_layer = true});
  // Ties resolve to the first class, so exactly one class in ten is right.
  EXPECT_NEAR(accuracy(m, d), 10.0, 1e-12);
}

TEST(Accuracy, EmptyIsError) {
  Dataset d = make_blobs(3, 2, 2, 3.0, 1);
  const Classifier m(Architecture::mlp(2, {4}, 3), 1);
  EXPECT_THROW(accuracy(m, d.subset(std::vector<std::size_t>{}, "none")), InputError);
}

TEST(Accuracy, EvaluationDoesNotMutateModel) {
  const Dataset d = make_blobs(3, 20, 2, 3.0, 1);
  const Classifier m = fitted(d, 2, 2);
  const std::uint64_t h = m.parameter_hash();
  accuracy(m, d);
  sample_losses(m, d);
  membership_inference_asr(m, d, d);
  loss_kde(m, d, d);
  EXPECT_EQ(m.parameter_hash(), h);
}

TEST(SliceMetrics, ClassLevelPartitionsTestSet) {
  const Dataset train = make_blobs(4, 50, 3, 8.0, 3), test = make_blobs(4, 25, 3, 8.0, 4);
  const Classifier m = fitted(train, 3);
  const auto c = class_level_metrics(m, test, 2);
  // Recombine the two slice accuracies weighted by slice size.
  const double total = (c.test_r * 75 + c.test_f * 25) / 100.0;
  EXPECT_NEAR(total, accuracy(m, test), 1e-9);
  EXPECT_THROW(class_level_metrics(m, test, 7), InputError);
}

TEST(SliceMetrics, DataLevelForInitialModelIsBalanced) {
  const Dataset train = make_blobs(4, 60, 3, 8.0, 5), test = make_blobs(4, 25, 3, 8.0, 6);
  const ForgetSplit s = split_data_level(train, std::vector<int>{2, 3}, 0.4, 1);
  const Classifier m = fitted(train, 5);
  const auto d = data_level_metrics(m, s, test);
  EXPECT_GT(d.train_r, 95.0);
  EXPECT_GT(d.train_f, 95.0);
  EXPECT_NEAR(d.train_f, d.train_r, 5.0);

  std::vector<std::size_t> rev(test.size());
  std::iota(rev.rbegin(), rev.rend(), 0);
  EXPECT_DOUBLE_EQ(data_level_metrics(m, s, test.subset(rev, "rev")).test, d.test);
}

TEST(Mia, IdenticalDistributionsNearFifty) {
  double sum = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = normal_draws(1000, 1.0, 0.5, 100 + s), b = normal_draws(1000, 1.0, 0.5, 200 + s);
    const double asr = threshold_attack_asr(a, b, AttackConfig{.seed = s});
    EXPECT_GE(asr, 45.0);
    EXPECT_LE(asr, 55.0);
    sum += asr;
  }
  EXPECT_NEAR(sum / 10.0, 50.0, 3.0);
}

TEST(Mia, SeparatedLossesGiveHundred) {
  const std::vector<double> members(100, 0.0), nonmembers(100, 10.0);
  EXPECT_DOUBLE_EQ(threshold_attack_asr(members, nonmembers), 100.0);
}

TEST(Mia, SwappingSidesReflectsAboutFifty) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = normal_draws(300, 0.5, 0.3, s), b = normal_draws(300, 1.0, 0.5, s + 50);
    const AttackConfig cfg{.seed = s};
    EXPECT_NEAR(threshold_attack_asr(a, b, cfg) + threshold_attack_asr(b, a, cfg), 100.0, 1e-9);
  }
}

TEST(Mia, RangeAndCalibrationSize) {
  const auto a = normal_draws(200, 0.5, 0.3, 1), b = normal_draws(200, 1.0, 0.5, 2);
  const double asr = threshold_attack_asr(a, b);
  EXPECT_GE(asr, 0.0);
  EXPECT_LE(asr, 100.0);
  const auto tiny = normal_draws(30, 0.5, 0.3, 3);
  EXPECT_THROW(threshold_attack_asr(tiny, b), InputError);
  EXPECT_THROW(threshold_attack_asr(std::vector<double>{}, b), InputError);
}

TEST(Mia, OverfitModelLeaks) {
  // Heavily overlapping classes: a wide MLP memorizes noise on 200 samples.
  const Dataset members = make_blobs(10, 20, 8, 0.5, 7), fresh = make_blobs(10, 20, 8, 0.5, 8);
  TrainConfig tc;
  tc.lr = 0.05;
  tc.epochs = 300;
  tc.batch_size = 20;
  const Classifier m = train_classifier(members, Architecture::mlp(8, {256, 128}, 10), tc);
  EXPECT_GE(membership_inference_asr(m, members, fresh), 70.0);
}

TEST(Kde, CurvesIntegrateToOne) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto v = normal_draws(500, 0.3 + s, 0.2 + 0.3 * s, s);
    const auto grid = loss_grid(v);
    ASSERT_EQ(grid.size(), kKdeGridPoints);
    EXPECT_EQ(grid.front(), 0.0);
    EXPECT_NEAR(grid.back(), 1.1 * *std::max_element(v.begin(), v.end()), 1e-12);
    const KdeCurve c = kde_curve(v, grid, "forgetting");
    for (double d : c.density) EXPECT_GE(d, 0.0);
    EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 0.05);
  }
}

TEST(Kde, PointMassIsNarrowPeak) {
  const std::vector<double> v(50, 0.7);
  const KdeCurve c = kde_curve(v, loss_grid(v), "unseen");
  EXPECT_GE(c.bandwidth, kKdeBandwidthFloor);
  EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 0.05);
  const auto peak = std::max_element(c.density.begin(), c.density.end()) - c.density.begin();
  EXPECT_NEAR(c.grid[static_cast<std::size_t>(peak)], 0.7, 0.01);
}

TEST(Kde, SingletonAndZeroLossesAreFinite) {
  const std::vector<double> one{0.0};
  const KdeCurve c = kde_curve(one, loss_grid(one), "forgetting");
  EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 0.05);
  EXPECT_THROW(kde_curve(std::vector<double>{}, loss_grid(one), "x"), InputError);
}

TEST(Kde, SilvermanBandwidth) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  // sd = sqrt(2.5), IQR = 2, and IQR / 1.34 is the smaller spread.
  EXPECT_NEAR(silverman_bandwidth(v), 0.9 * (2.0 / 1.34) * std::pow(5.0, -0.2), 1e-12);
  EXPECT_EQ(silverman_bandwidth(std::vector<double>{2.0, 2.0}), kKdeBandwidthFloor);
}

TEST(Kde, GridKlOrdersCloseness) {
  const auto base = normal_draws(800, 1.0, 0.3, 1);
  const auto near = normal_draws(800, 1.05, 0.3, 2);
  const auto far = normal_draws(800, 2.5, 0.3, 3);
  std::vector<double> all = base;
  all.insert(all.end(), near.begin(), near.end());
  all.insert(all.end(), far.begin(), far.end());
  const auto grid = loss_grid(all);
  const KdeCurve b = kde_curve(base, grid, "b"), n = kde_curve(near, grid, "n"), f = kde_curve(far, grid, "f");
  EXPECT_NEAR(grid_kl(b, b), 0.0, 1e-12);
  EXPECT_GT(grid_kl(n, b), 0.0);
  EXPECT_LT(grid_kl(n, b), grid_kl(f, b));
}

TEST(Kde, CsvRoundTrip) {
  const auto v = normal_draws(100, 1.0, 0.3, 4);
  const KdeCurve c = kde_curve(v, loss_grid(v), "forgetting");
  const auto path = std::filesystem::temp_directory_path() / "mixunlearn_kde.csv";
  write_kde_csv(path, c);
  const KdeCurve back = read_kde_csv(path);
  EXPECT_EQ(back.grid, c.grid);
  EXPECT_EQ(back.density, c.density);
  std::filesystem::remove(path);
}

TEST(Kde, ModelCurvesShareGrid) {
  const Dataset d = make_blobs(3, 30, 2, 3.0, 1), u = make_blobs(3, 30, 2, 3.0, 2);
  const Classifier m = fitted(d, 1, 3);
  const auto [f, un] = loss_kde(m, d, u);
  EXPECT_EQ(f.grid, un.grid);
  EXPECT_EQ(f.label, "forgetting");
  EXPECT_EQ(un.label, "unseen");
  EXPECT_NEAR(trapezoid(f.grid, f.density), 1.0, 0.05);
  EXPECT_NEAR(trapezoid(un.grid, un.density), 1.0, 0.05);
}

TEST(Report, ColumnsFollowSetup) {
  EXPECT_EQ(MetricReport::columns(SetupTag::class_level), (std::vector<std::string>{"test_r", "test_f", "asr"}));
  EXPECT_EQ(MetricReport::columns(SetupTag::data_level),
            (std::vector<std::string>{"train_r", "train_f", "test", "asr"}));
  MetricReport r;
  r.test_r = 90;
  r.test_f = 0;
  r.asr = 51;
  EXPECT_EQ(r.values(), (std::vector<double>{90, 0, 51}));
}

TEST(Report, MeanStd) {
  const MeanStd one = mean_std(std::vector<double>{4.0});
  EXPECT_EQ(one.mean, 4.0);
  EXPECT_FALSE(one.std.has_value());
  const MeanStd two = mean_std(std::vector<double>{1.0, 3.0});
  EXPECT_EQ(two.mean, 2.0);
  EXPECT_NEAR(*two.std, std::sqrt(2.0), 1e-15);
}
