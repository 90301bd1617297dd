#include "mixunlearn/losses.hpp"

#include "mixunlearn/errors.hpp"
#include "mixunlearn/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mixunlearn {

std::string to_string(LabelMode mode) { return mode == LabelMode::aware ? "aware" : "agnostic"; }

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "aware") return LabelMode::aware;
  if (s == "agnostic") return LabelMode::agnostic;
  throw ConfigError("unknown label mode '" + s + "' (expected aware or agnostic)");
}

void LossConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be > 0");
  };
  positive(tau_gen, "tau_gen");
  positive(tau_mix, "tau_mix");
  positive(tau_real, "tau_real");
  if (!(omega >= 0.0) || !std::isfinite(omega)) throw ConfigError("omega must be >= 0");
  if (!(sharpen_t > 0.0 && sharpen_t <= 1.0)) throw ConfigError("sharpen_t must be in (0, 1]");
}

std::vector<double> sharpen(std::span<const double> q, double t) {
  if (!(t > 0.0)) throw InputError("sharpen: temperature must be > 0");
  if (q.empty()) throw InputError("sharpen: empty distribution");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : q) {
    if (v < 0.0 || !std::isfinite(v)) throw InputError("sharpen: entries must be finite and non-negative");
    if (v > 0.0) mx = std::max(mx, std::log(v) / t);
  }
  if (!std::isfinite(mx)) throw InputError("sharpen: all-zero distribution");
  std::vector<double> out(q.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > 0.0) out[i] = std::exp(std::log(q[i]) / t - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

Tensor sharpen_rows(const Tensor& q, double t) {
  if (q.rank() != 2) throw DimensionError("sharpen_rows: expected [N, L], got " + shape_str(q.shape()));
  const std::size_t rows = q.dim(0), len = q.dim(1);
  std::vector<double> out;
  out.reserve(q.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto s = sharpen(q.values().subspan(r * len, len), t);
    out.insert(out.end(), s.begin(), s.end());
  }
  return Tensor(q.shape(), std::move(out));
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<double> out(labels.size() * classes, 0.0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes)
      throw InputError("one_hot: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(classes) + ")");
    out[r * classes + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  return Tensor({labels.size(), classes}, std::move(out));
}

Tensor target_distribution(const Tensor& f_d_probs, const std::optional<std::vector<int>>& labels,
                           const LossConfig& cfg) {
  if (cfg.label_mode == LabelMode::aware) {
    if (!labels) throw ConfigError("target_distribution: label-aware mode needs labels");
    if (labels->size() != f_d_probs.dim(0))
      throw DimensionError("target_distribution: " + std::to_string(labels->size()) + " labels for outputs " +
                           shape_str(f_d_probs.shape()));
    return one_hot(*labels, f_d_probs.dim(1));
  }
  if (labels) throw ConfigError("target_distribution: labels given in label-agnostic mode");
  return sharpen_rows(f_d_probs.detach(), cfg.sharpen_t);
}

Tensor target_distribution(const Tensor& x, const std::optional<std::vector<int>>& labels, const Classifier& f_d,
                           const LossConfig& cfg) {
  NoGradGuard no_grad;
  return target_distribution(f_d.forward(x), labels, cfg);
}

Tensor sim_loss(const Tensor& p, const Tensor& q) { return add_scalar(neg(cosine_similarity(p, q)), 1.0); }

Tensor sim_loss_rows(const Tensor& p, const Tensor& q) { return add_scalar(neg(cosine_rows(p, q)), 1.0); }

Tensor sim_loss_matrix(const Tensor& out, const Tensor& targets) {
  if (out.rank() != 2 || targets.rank() != 2 || out.dim(1) != targets.dim(1))
    throw DimensionError("sim_loss_matrix: outputs " + shape_str(out.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  const std::size_t b = out.dim(0), m = targets.dim(0);
  const Tensor dots = matmul(out, transpose(targets));
  const Tensor n_out = reshape(add_scalar(norm_rows(out), kNormEpsilon), {b, 1});
  const Tensor n_tgt = reshape(add_scalar(norm_rows(targets), kNormEpsilon), {1, m});
  return add_scalar(neg(div(dots, matmul(n_out, n_tgt))), 1.0);
}

Tensor mix_objective(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                     std::span<const double> lambdas, double tau) {
  if (mix_out.rank() != 2 || mix_out.dim(0) == 0) throw InputError("mix loss: empty batch");
  const std::size_t b = mix_out.dim(0);
  if (target_r.shape() != mix_out.shape())
    throw DimensionError("mix loss: outputs " + shape_str(mix_out.shape()) + " vs retain targets " +
                         shape_str(target_r.shape()));
  if (target_f.rank() != 2 || target_f.dim(0) == 0) throw InputError("mix loss: empty forget batch");
  if (lambdas.size() != b)
    throw DimensionError("mix loss: " + std::to_string(lambdas.size()) + " lambdas for batch of " + std::to_string(b));
  if (!(tau > 0.0)) throw InputError("mix loss: temperature must be > 0");

  std::vector<double> keep(b), spread(b);
  for (std::size_t j = 0; j < b; ++j) {
    keep[j] = 1.0 - lambdas[j];
    spread[j] = lambdas[j] / tau;
  }
  const Tensor numer = sum(scale_rows(sim_loss_rows(mix_out, target_r), keep));
  const Tensor denom = sum(logsumexp_rows(scale_rows(sim_loss_matrix(mix_out, target_f), spread)));
  return sub(numer, denom);
}

Tensor loss_gen(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                std::span<const double> lambdas, const LossConfig& cfg) {
  return neg(mix_objective(mix_out, target_f, target_r, lambdas, cfg.tau_gen));
}

Tensor loss_mix(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                std::span<const double> lambdas, const LossConfig& cfg) {
  return mix_objective(mix_out, target_f, target_r, lambdas, cfg.tau_mix);
}

Tensor loss_real(const Tensor& out_f, const Tensor& target_f, const Tensor& out_r, const Tensor& target_r,
                 const LossConfig& cfg) {
  if (out_f.rank() != 2 || out_r.rank() != 2 || out_f.dim(0) == 0 || out_r.dim(0) == 0)
    throw InputError("loss_real: empty batch");
  if (!(cfg.tau_real > 0.0)) throw InputError("loss_real: temperature must be > 0");
  const Tensor keep = sum(sim_loss_rows(out_r, target_r));
  const Tensor push = logsumexp_rows(reshape(scale(sim_loss_rows(out_f, target_f), 1.0 / cfg.tau_real), {1, out_f.dim(0)}));
  return sub(keep, scale(sum(push), static_cast<double>(out_r.dim(0))));
}

Tensor loss_unlearn(const Tensor& l_mix, const Tensor& l_real, double omega) {
  if (!(omega >= 0.0)) throw InputError("loss_unlearn: omega must be >= 0");
  return add(l_mix, scale(l_real, omega));
}

} // namespace mixunlearn
