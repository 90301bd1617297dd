#include "mixunlearn/data.hpp"
#include "mixunlearn/errors.hpp"
#include "mixunlearn/models.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace mixunlearn;
using testsupport::check_gradients;
using testsupport::random_tensor;

namespace {

double train_accuracy(const Classifier& m, const Dataset& d) {
  const Tensor p = predict(m, d);
  const std::size_t l = d.num_classes;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    const auto row = p.values().subspan(r * l, l);
    hit += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == d.labels[r];
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mixunlearn_models_" + name);
}

} // namespace

TEST(Forward, ZeroFinalLayerGivesUniform) {
  const Classifier m(Architecture::mlp(4, {8, 6}, 5), 3, InitOptions{.zero_final_layer = true});
  Rng rng(1);
  const Tensor p = m.forward(random_tensor({4, 4}, rng));
  ASSERT_EQ(p.shape(), (Shape{4, 5}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Forward, RowsAreDistributions) {
  const Classifier m(Architecture::mlp(4, {8}, 3), 2);
  Rng rng(2);
  const Tensor p = m.forward(random_tensor({7, 4}, rng, -5, 5));
  for (std::size_t r = 0; r < 7; ++r) EXPECT_NEAR(p[3 * r] + p[3 * r + 1] + p[3 * r + 2], 1.0, 1e-12);
}

TEST(Forward, CnnShapesAndFeatureWidth) {
  const Classifier m(Architecture::cnn({1, 28, 28}, 10), 4);
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 28, 28}, rng, 0, 1);
  EXPECT_EQ(m.forward(x).shape(), (Shape{2, 10}));
  EXPECT_EQ(m.features(x).shape(), (Shape{2, m.feature_width()}));
  EXPECT_EQ(m.feature_width(), 128u);
}

TEST(Forward, ForwardEqualsSoftmaxOfHeadOfFeatures) {
  const Classifier m(Architecture::mlp(3, {8, 6}, 4), 5);
  Rng rng(4);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor a = m.forward(x), b = softmax(m.head(m.features(x)));
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_EQ(m.features(x).dim(1), 6u);
}

TEST(Forward, IdenticalInputsGiveIdenticalFeatures) {
  const Classifier m(Architecture::mlp(3, {8}, 2), 6);
  const Tensor x({2, 3}, {0.1, -0.4, 2.0, 0.1, -0.4, 2.0});
  const Tensor h = m.features(x);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(h[i], h[8 + i]);
}

TEST(Forward, FeaturesIgnoreLabels) {
  Dataset d = make_blobs(3, 10, 4, 3.0, 7);
  const Classifier m(Architecture::mlp(4, {8}, 3), 1);
  const Tensor before = extract_features(m, d);
  for (int& y : d.labels) y = (y + 1) % 3;
  const Tensor after = extract_features(m, d);
  EXPECT_TRUE(std::equal(before.values().begin(), before.values().end(), after.values().begin()));
}

TEST(Forward, ShapeMismatchIsDimensionError) {
  const Classifier m(Architecture::mlp(4, {8}, 3), 1);
  EXPECT_THROW(m.forward(Tensor::zeros({2, 5})), DimensionError);
  const Classifier c(Architecture::cnn({1, 28, 28}, 10), 1);
  EXPECT_THROW(c.forward(Tensor::zeros({2, 1, 20, 28})), DimensionError);
}

TEST(Gradients, CrossEntropyWrtParametersMatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Classifier m(Architecture::mlp(3, {6, 5}, 4), 100 + trial);
    const Tensor x = random_tensor({5, 3}, rng, -2, 2);
    std::vector<int> y(5);
    for (int& v : y) v = static_cast<int>(uniform_index(rng, 4));
    const auto f = [&](const std::vector<Tensor>&) { return cross_entropy(m.logits(x), y); };
    EXPECT_LT(check_gradients(f, m.parameters()).rel_error(), 1e-4) << "trial " << trial;
  }
}

TEST(Gradients, CnnCrossEntropyMatchesFiniteDifferences) {
  Architecture arch = Architecture::cnn({1, 16, 16}, 3);
  arch.conv_channels = {2, 3};
  arch.kernel = 3;
  arch.dense = {6, 5};
  Classifier m(arch, 9);
  Rng rng(9);
  const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  const std::vector<int> y{0, 2};
  const auto f = [&](const std::vector<Tensor>&) { return cross_entropy(m.logits(x), y); };
  EXPECT_LT(check_gradients(f, m.parameters()).rel_error(), 1e-4);
}

TEST(Training, LinearlySeparableBlobsAreFitExactly) {
  const Dataset d = make_blobs(2, 50, 2, 12.0, 3);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 20;
  const Classifier m = train_classifier(d, Architecture::mlp(2, {16, 8}, 2), cfg);
  EXPECT_EQ(train_accuracy(m, d), 1.0);
}

TEST(Training, MemorizesTenSamples) {
  Dataset d = make_blobs(5, 2, 6, 0.5, 4);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 200;
  cfg.batch_size = 10;
  TrainHistory hist;
  const Classifier m = train_classifier(d, Architecture::mlp(6, {64, 32}, 5), cfg, &hist);
  EXPECT_EQ(train_accuracy(m, d), 1.0);
  ASSERT_EQ(hist.epoch_loss.size(), 200u);
}

TEST(Training, FullBatchLossIsNonIncreasing) {
  const Dataset d = make_blobs(4, 3, 5, 1.0, 5);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 50;
  cfg.batch_size = d.size();
  TrainHistory hist;
  train_classifier(d, Architecture::mlp(5, {32}, 4), cfg, &hist);
  for (std::size_t e = 1; e < hist.epoch_loss.size(); ++e) EXPECT_LE(hist.epoch_loss[e], hist.epoch_loss[e - 1] + 1e-12);
}

TEST(Training, SameSeedIsBitIdentical) {
  const Dataset d = make_blobs(3, 20, 4, 3.0, 6);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 3;
  cfg.seed = 77;
  const auto arch = Architecture::mlp(4, {8}, 3);
  EXPECT_EQ(train_classifier(d, arch, cfg).parameter_hash(), train_classifier(d, arch, cfg).parameter_hash());
  cfg.seed = 78;
  const Classifier other = train_classifier(d, arch, cfg);
  cfg.seed = 77;
  EXPECT_NE(train_classifier(d, arch, cfg).parameter_hash(), other.parameter_hash());
}

TEST(Training, ErrorContracts) {
  Dataset empty;
  empty.sample_shape = {4};
  empty.num_classes = 3;
  EXPECT_THROW(train_classifier(empty, Architecture::mlp(4, {8}, 3), TrainConfig{}), InputError);
  TrainConfig bad;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Training, DivergenceIsNumericError) {
  const Dataset d = make_blobs(3, 20, 4, 3.0, 6);
  TrainConfig cfg;
  cfg.lr = 1e200;
  cfg.epochs = 2;
  EXPECT_THROW(train_classifier(d, Architecture::mlp(4, {8}, 3), cfg), NumericError);
}

TEST(Optimizer, FreezeGuardBlocksGradients) {
  Classifier m(Architecture::mlp(2, {4}, 2), 1);
  const Tensor x = Tensor::full({1, 2}, 0.5);
  {
    FreezeGuard freeze(m);
    const Tensor loss = cross_entropy(m.logits(x), std::vector<int>{1});
    EXPECT_FALSE(loss.requires_grad());
  }
  cross_entropy(m.logits(x), std::vector<int>{1}).backward();
  EXPECT_TRUE(m.parameters()[0].has_grad());
}

TEST(Optimizer, ClipGradNormRescales) {
  Tensor a = Tensor::scalar(0.0, true), b = Tensor::scalar(0.0, true);
  add(scale(a, 3.0), scale(b, 4.0)).backward();
  std::vector<Tensor> ps{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (const auto& arch : {Architecture::mlp(4, {8, 6}, 3), Architecture::cnn({1, 16, 16}, 4)}) {
    const Classifier m(arch, 21);
    const auto path = temp_file("ckpt.bin");
    m.save(path);
    const Classifier back = Classifier::load(path);
    EXPECT_EQ(back.architecture(), arch);
    EXPECT_EQ(back.parameter_hash(), m.parameter_hash());
    ASSERT_EQ(back.parameters().size(), m.parameters().size());
    for (std::size_t k = 0; k < m.parameters().size(); ++k)
      EXPECT_TRUE(std::equal(m.parameters()[k].values().begin(), m.parameters()[k].values().end(),
                             back.parameters()[k].values().begin()));
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, CloneIsIndependent) {
  Classifier m(Architecture::mlp(2, {4}, 2), 1);
  Classifier c = m.clone();
  EXPECT_EQ(c.parameter_hash(), m.parameter_hash());
  c.parameters()[0].mutable_values()[0] += 1.0;
  EXPECT_NE(c.parameter_hash(), m.parameter_hash());
}

TEST(Architecture, ParameterCountMatchesLayout) {
  const Classifier m(Architecture::mlp(8, {64, 32}, 10), 1);
  EXPECT_EQ(m.parameter_count(), 8u * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10);
  EXPECT_EQ(Architecture::from_json(Architecture::cnn({1, 28, 28}, 10).to_json()), Architecture::cnn({1, 28, 28}, 10));
}
