#pragma once

#include "mixunlearn/losses.hpp"
#include "mixunlearn/rng.hpp"
#include "mixunlearn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mixunlearn {

class Classifier;

/// lam * x_i + (1 - lam) * x_j.
Tensor vanilla_mix(const Tensor& x_i, const Tensor& x_j, double lam);
/// Per-pair version: row n uses lambdas[n].
Tensor vanilla_mix_rows(const Tensor& x_i, const Tensor& x_j, std::span<const double> lambdas);
/// x_i * mask + x_j * (1 - mask).
Tensor apply_mask(const Tensor& x_i, const Tensor& x_j, const Tensor& mask);

/// Beta(alpha, alpha) draws, strictly inside (0, 1).
class LambdaSampler {
public:
  LambdaSampler(double alpha, std::uint64_t seed);
  double alpha() const { return alpha_; }
  double sample();
  std::vector<double> sample(std::size_t n);

private:
  double alpha_;
  Rng rng_;
};

double sample_lambda(LambdaSampler& s);

struct GeneratorConfig {
  Shape input_shape;          // per-sample shape, {D} or {C, H, W}
  std::size_t feature_width = 0;
  std::size_t hidden = 64;
  /// Scale applied to the He bound of the mask-producing layers, so an
  /// untrained generator emits masks close to lambda.
  double output_init_scale = 0.1;

  bool is_image() const { return input_shape.size() == 3; }
  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
  bool operator==(const GeneratorConfig&) const = default;
};

/// Learnable mixing function. The pair's features and lambda drive a small
/// dense network producing one logit per input element; for images a 3x3
/// convolution over [logits, x_i, x_j] refines them. The mask is
/// sigmoid(refined + logit(lambda)).
class MixGenerator {
public:
  MixGenerator(GeneratorConfig cfg, std::uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::uint64_t parameter_hash() const;

  void save(const std::filesystem::path& path) const;
  static MixGenerator load(const std::filesystem::path& path);

private:
  MixGenerator(GeneratorConfig cfg, std::vector<Tensor> params);
  GeneratorConfig cfg_;
  std::vector<Tensor> params_;
};

struct MixOutput {
  Tensor mix;
  Tensor mask;
};

/// Mixed batch and mask for pairs (x_i[n], x_j[n]) with features h_i, h_j
/// from the initial model and per-pair lambdas in (0, 1).
MixOutput mixblock_forward(const MixGenerator& g, const Tensor& x_i, const Tensor& x_j, const Tensor& h_i,
                           const Tensor& h_j, std::span<const double> lambdas);

/// Everything a generator or unlearner step needs about one paired batch.
/// Index n pairs forget sample x_f[n] with retain sample x_r[n].
struct PairedBatch {
  Tensor x_f, x_r;           // inputs
  Tensor h_f, h_r;           // f_D features
  Tensor target_f, target_r; // p(x)
  std::vector<double> lambdas;
};

struct GeneratorStepConfig {
  double lr = 1e-3;
  /// Weight of mean((mask - lambda)^2); off by default.
  double mask_reg = 0.0;
};

/// One SGD step on the generator minimizing loss_gen with f_U held fixed.
/// Returns the loss before the step.
double train_generator_step(MixGenerator& g, Classifier& f_u, const PairedBatch& batch, const LossConfig& loss_cfg,
                            const GeneratorStepConfig& step_cfg);

} // namespace mixunlearn
