#pragma once

#include "mixunlearn/data.hpp"
#include "mixunlearn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mixunlearn {

enum class ArchKind { mlp, cnn };

/// Layer layout of a classifier. For an MLP, `dense` lists the hidden widths;
/// for a CNN, `conv_channels` are the convolution widths (each conv is
/// followed by ReLU and a 2x2 max-pool) and `dense` the fully connected widths
/// after flattening. The last entry of `dense` is the penultimate (feature)
/// width in both cases.
struct Architecture {
  ArchKind kind = ArchKind::mlp;
  Shape input_shape;
  std::vector<std::size_t> dense;
  std::vector<std::size_t> conv_channels;
  std::size_t kernel = 5;
  std::size_t pool = 2;
  std::size_t classes = 0;

  static Architecture mlp(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes);
  /// Two conv layers (16, 32 channels) then dense 256 -> 128 -> classes.
  static Architecture cnn(Shape input_shape, std::size_t classes);

  std::size_t feature_width() const { return dense.back(); }
  void validate() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);
  bool operator==(const Architecture&) const = default;
};

struct InitOptions {
  /// Start the output layer at zero so every prediction is uniform.
  bool zero_final_layer = false;
};

/// Feed-forward classifier with a feature extractor h(x) and a linear head;
/// forward(x) = softmax(head(h(x))).
class Classifier {
public:
  Classifier(Architecture arch, std::uint64_t seed, InitOptions init = {});
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;
  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;

  /// Deep copy of the parameters.
  Classifier clone() const;

  const Architecture& architecture() const { return arch_; }
  std::size_t num_classes() const { return arch_.classes; }
  std::size_t feature_width() const { return arch_.feature_width(); }

  Tensor features(const Tensor& x) const;
  Tensor head(const Tensor& features) const;
  Tensor logits(const Tensor& x) const { return head(features(x)); }
  Tensor forward(const Tensor& x) const { return softmax(logits(x)); }

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::uint64_t parameter_hash() const;

  void set_trainable(bool on);
  void zero_grad();

  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);

private:
  Classifier(Architecture arch, std::vector<Tensor> params);
  void check_input(const Tensor& x) const;

  Architecture arch_;
  std::vector<Tensor> params_;
};

/// Temporarily turns off gradient tracking on a model's parameters.
class FreezeGuard {
public:
  explicit FreezeGuard(Classifier& model) : model_(model) { model_.set_trainable(false); }
  ~FreezeGuard() { model_.set_trainable(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
  Classifier& model_;
};

/// In-place p -= lr * grad for every parameter holding a gradient, then clears
/// the gradients. Throws NumericError if a parameter turns non-finite.
void sgd_step(std::span<Tensor> params, double lr);

/// Rescales the accumulated gradients so their global L2 norm is at most
/// max_norm. Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool augment = false;

  void validate() const;
};

/// Mean cross-entropy per epoch, recorded by train_classifier.
struct TrainHistory {
  std::vector<double> epoch_loss;
};

/// Mini-batch SGD on cross-entropy from a seeded initialization. Deterministic
/// given (dataset, arch, cfg).
Classifier train_classifier(const Dataset& data, const Architecture& arch, const TrainConfig& cfg,
                            TrainHistory* history = nullptr);

/// Continues training an existing model in place.
void fit(Classifier& model, const Dataset& data, const TrainConfig& cfg, TrainHistory* history = nullptr);

/// Batched inference without graph recording; returns [N, L] probabilities.
Tensor predict(const Classifier& model, const Dataset& data, std::size_t batch_size = 256);
/// Penultimate features for every sample, [N, feature_width].
Tensor extract_features(const Classifier& model, const Dataset& data, std::size_t batch_size = 256);

} // namespace mixunlearn
