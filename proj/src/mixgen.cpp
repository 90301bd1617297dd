#include "mixunlearn/mixgen.hpp"

#include "mixunlearn/checkpoint.hpp"
#include "mixunlearn/errors.hpp"
#include "mixunlearn/models.hpp"

#include <algorithm>
#include <cmath>

namespace mixunlearn {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Constant [N, ...] tensor whose row n is filled with v[n].
Tensor row_constant(const Shape& shape, std::span<const double> v) {
  const std::size_t row = shape_numel(shape) / shape[0];
  std::vector<double> out(shape_numel(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i / row];
  return Tensor(shape, std::move(out));
}

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (2.0 * uniform01(rng) - 1.0) * bound;
  return Tensor(std::move(shape), std::move(v), true);
}

constexpr double kLambdaClamp = 1e-6;

} // namespace

Tensor vanilla_mix(const Tensor& x_i, const Tensor& x_j, double lam) {
  require_same(x_i, x_j, "vanilla_mix");
  if (!(lam >= 0.0 && lam <= 1.0)) throw InputError("vanilla_mix: lambda must lie in [0, 1]");
  if (lam == 1.0) return x_i;
  if (lam == 0.0) return x_j;
  return add(scale(x_i, lam), scale(x_j, 1.0 - lam));
}

Tensor vanilla_mix_rows(const Tensor& x_i, const Tensor& x_j, std::span<const double> lambdas) {
  require_same(x_i, x_j, "vanilla_mix_rows");
  std::vector<double> rest(lambdas.size());
  for (std::size_t n = 0; n < lambdas.size(); ++n) {
    if (!(lambdas[n] >= 0.0 && lambdas[n] <= 1.0)) throw InputError("vanilla_mix_rows: lambda must lie in [0, 1]");
    rest[n] = 1.0 - lambdas[n];
  }
  return add(scale_rows(x_i, lambdas), scale_rows(x_j, rest));
}

Tensor apply_mask(const Tensor& x_i, const Tensor& x_j, const Tensor& mask) {
  require_same(x_i, x_j, "apply_mask");
  require_same(x_i, mask, "apply_mask");
  // m * x_i + (1 - m) * x_j, exact at both mask endpoints.
  return add(mul(mask, x_i), mul(add_scalar(neg(mask), 1.0), x_j));
}

// ---------------------------------------------------------------------------

LambdaSampler::LambdaSampler(double alpha, std::uint64_t seed) : alpha_(alpha), rng_(seed) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InputError("LambdaSampler: alpha must be > 0");
}

double LambdaSampler::sample() {
  for (;;) {
    const double a = gamma_draw(rng_, alpha_);
    const double b = gamma_draw(rng_, alpha_);
    const double lam = a / (a + b);
    if (lam > 0.0 && lam < 1.0) return lam;
  }
}

std::vector<double> LambdaSampler::sample(std::size_t n) {
  std::vector<double> out(n);
  for (double& v : out) v = sample();
  return out;
}

double sample_lambda(LambdaSampler& s) { return s.sample(); }

// ---------------------------------------------------------------------------

void GeneratorConfig::validate() const {
  if (input_shape.empty() || shape_numel(input_shape) == 0 || (input_shape.size() != 1 && input_shape.size() != 3))
    throw InputError("generator: input shape must be {D} or {C, H, W}, got " + shape_str(input_shape));
  if (feature_width == 0) throw InputError("generator: feature width must be > 0");
  if (hidden == 0) throw InputError("generator: hidden width must be > 0");
  if (!(output_init_scale >= 0.0)) throw InputError("generator: output_init_scale must be >= 0");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"input_shape", input_shape},
          {"feature_width", feature_width},
          {"hidden", hidden},
          {"output_init_scale", output_init_scale}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  try {
    GeneratorConfig c;
    c.input_shape = j.at("input_shape").get<Shape>();
    c.feature_width = j.at("feature_width").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.output_init_scale = j.at("output_init_scale").get<double>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("generator descriptor: ") + e.what());
  }
}

// Parameter layout:
//   0 W1 [2F, H]   1 b1 [H]   2 We [1, H]   3 be [H]
//   4 W2 [H, D]    5 b2 [D]
//   images only: 6 Wc [C, 3C, 3, 3]   7 bc [C]
MixGenerator::MixGenerator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t f = cfg_.feature_width, h = cfg_.hidden, d = shape_numel(cfg_.input_shape);
  params_.push_back(uniform_init({2 * f, h}, std::sqrt(6.0 / static_cast<double>(2 * f)), rng));
  params_.push_back(Tensor::zeros({h}, true));
  params_.push_back(uniform_init({1, h}, std::sqrt(6.0), rng));
  params_.push_back(Tensor::zeros({h}, true));
  params_.push_back(uniform_init({h, d}, cfg_.output_init_scale * std::sqrt(6.0 / static_cast<double>(h)), rng));
  params_.push_back(Tensor::zeros({d}, true));
  if (cfg_.is_image()) {
    const std::size_t c = cfg_.input_shape[0];
    params_.push_back(
        uniform_init({c, 3 * c, 3, 3}, cfg_.output_init_scale * std::sqrt(6.0 / static_cast<double>(27 * c)), rng));
    params_.push_back(Tensor::zeros({c}, true));
  }
}

MixGenerator::MixGenerator(GeneratorConfig cfg, std::vector<Tensor> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {}

std::size_t MixGenerator::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::uint64_t MixGenerator::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = hash_values(p.values(), h);
  return h;
}

void MixGenerator::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "mixgen"}, {"config", cfg_.to_json()}};
  for (const auto& p : params_) ckpt.tensors.push_back(p.detach());
  save_checkpoint(path, ckpt);
}

MixGenerator MixGenerator::load(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "mixgen") throw ParseError(path.string() + ": not a generator checkpoint");
  GeneratorConfig cfg = GeneratorConfig::from_json(ckpt.meta.at("config"));
  MixGenerator reference(cfg, 0);
  if (reference.params_.size() != ckpt.tensors.size()) throw ParseError(path.string() + ": parameter count mismatch");
  for (std::size_t k = 0; k < ckpt.tensors.size(); ++k) {
    if (reference.params_[k].shape() != ckpt.tensors[k].shape())
      throw ParseError(path.string() + ": parameter " + std::to_string(k) + " has shape " +
                       shape_str(ckpt.tensors[k].shape()));
    ckpt.tensors[k].set_requires_grad(true);
  }
  return MixGenerator(std::move(cfg), std::move(ckpt.tensors));
}

MixOutput mixblock_forward(const MixGenerator& g, const Tensor& x_i, const Tensor& x_j, const Tensor& h_i,
                           const Tensor& h_j, std::span<const double> lambdas) {
  const GeneratorConfig& cfg = g.config();
  require_same(x_i, x_j, "mixblock_forward");
  Shape expected{x_i.rank() ? x_i.dim(0) : 0};
  expected.insert(expected.end(), cfg.input_shape.begin(), cfg.input_shape.end());
  if (x_i.shape() != expected)
    throw DimensionError("mixblock_forward: inputs " + shape_str(x_i.shape()) + " vs generator input " +
                         shape_str(cfg.input_shape));
  const std::size_t n = x_i.dim(0);
  if (n == 0) throw InputError("mixblock_forward: empty batch");
  const Shape feat{n, cfg.feature_width};
  if (h_i.shape() != feat || h_j.shape() != feat)
    throw DimensionError("mixblock_forward: features " + shape_str(h_i.shape()) + ", " + shape_str(h_j.shape()) +
                         " vs expected " + shape_str(feat));
  if (lambdas.size() != n)
    throw DimensionError("mixblock_forward: " + std::to_string(lambdas.size()) + " lambdas for batch of " +
                         std::to_string(n));

  std::vector<double> lam(n), offset(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!(lambdas[k] >= 0.0 && lambdas[k] <= 1.0)) throw InputError("mixblock_forward: lambda outside [0, 1]");
    lam[k] = std::clamp(lambdas[k], kLambdaClamp, 1.0 - kLambdaClamp);
    offset[k] = std::log(lam[k] / (1.0 - lam[k]));
  }
  const auto& p = g.parameters();
  const Tensor lam_col({n, 1}, lam);
  const Tensor pre = add(add_bias(matmul(concat({h_i, h_j}, 1), p[0]), p[1]), add_bias(matmul(lam_col, p[2]), p[3]));
  Tensor logits = add_bias(matmul(relu(pre), p[4]), p[5]);
  logits = reshape(logits, x_i.shape());
  if (cfg.is_image()) logits = conv2d(concat({logits, x_i, x_j}, 1), p[6], p[7], Padding::same);
  const Tensor mask = sigmoid(add(logits, row_constant(x_i.shape(), offset)));
  return {apply_mask(x_i, x_j, mask), mask};
}

double train_generator_step(MixGenerator& g, Classifier& f_u, const PairedBatch& batch, const LossConfig& loss_cfg,
                            const GeneratorStepConfig& step_cfg) {
  if (batch.x_f.rank() == 0 || batch.x_f.dim(0) == 0 || batch.x_r.rank() == 0 || batch.x_r.dim(0) == 0)
    throw InputError("train_generator_step: empty batch");
  if (!(step_cfg.lr >= 0.0)) throw ConfigError("generator learning rate must be >= 0");
  FreezeGuard frozen(f_u);
  const MixOutput m = mixblock_forward(g, batch.x_f, batch.x_r, batch.h_f, batch.h_r, batch.lambdas);
  const Tensor out = f_u.forward(m.mix);
  const Tensor l_gen = loss_gen(out, batch.target_f, batch.target_r, batch.lambdas, loss_cfg);
  const double value = l_gen.item();
  if (!std::isfinite(value)) throw NumericError("train_generator_step: non-finite generator loss");
  Tensor total = l_gen;
  if (step_cfg.mask_reg > 0.0) {
    const Tensor target = row_constant(m.mask.shape(), batch.lambdas);
    total = add(total, scale(mean(square(sub(m.mask, target))), step_cfg.mask_reg));
  }
  total.backward();
  sgd_step(g.parameters(), step_cfg.lr);
  return value;
}

} // namespace mixunlearn
