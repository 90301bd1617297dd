#pragma once

#include "mixunlearn/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mixunlearn {

class Classifier;

enum class LabelMode { aware, agnostic };

std::string to_string(LabelMode mode);
LabelMode label_mode_from_string(const std::string& s);

struct LossConfig {
  double tau_gen = 0.1;
  double tau_mix = 10.0;
  double tau_real = 5.0;
  double omega = 1.0;
  double sharpen_t = 0.3;
  LabelMode label_mode = LabelMode::agnostic;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// q_i^(1/T) / sum_j q_j^(1/T), computed in log space so tiny entries do not
/// underflow before normalization. Exact zeros stay zero.
std::vector<double> sharpen(std::span<const double> q, double t);
/// Row-wise sharpen of an [N, L] probability tensor (constant result).
Tensor sharpen_rows(const Tensor& q, double t);

/// Targets p(x) for a batch: one-hot labels in aware mode, sharpened f_D
/// outputs in agnostic mode. `labels` must be given iff the mode is aware.
Tensor target_distribution(const Tensor& x, const std::optional<std::vector<int>>& labels, const Classifier& f_d,
                           const LossConfig& cfg);
/// Same, from precomputed f_D probabilities.
Tensor target_distribution(const Tensor& f_d_probs, const std::optional<std::vector<int>>& labels,
                           const LossConfig& cfg);
Tensor one_hot(std::span<const int> labels, std::size_t classes);

/// 1 - cos(p, q) for two vectors; in [0, 2].
Tensor sim_loss(const Tensor& p, const Tensor& q);
/// Row-wise 1 - cos over [N, L] inputs, result [N].
Tensor sim_loss_rows(const Tensor& p, const Tensor& q);
/// S[j, i] = 1 - cos(out_j, target_i) for out [B, L], targets [M, L]; result [B, M].
Tensor sim_loss_matrix(const Tensor& out, const Tensor& targets);

/// Contrastive mix objective shared by the generator and unlearner:
///   sum_j [ (1 - lam_j) S[j, j] - logsumexp_i( lam_j S[j, i] / tau ) ]
/// where row j of `mix_out` is f_U on the j-th mixed pair, `target_f` holds
/// p(x_i) for the forget-side samples (i ranges over all of them) and
/// `target_r` holds p(x_j) for the retain-side samples.
Tensor mix_objective(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                     std::span<const double> lambdas, double tau);

/// Generator loss: -mix_objective with tau_gen.
Tensor loss_gen(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                std::span<const double> lambdas, const LossConfig& cfg);
/// Unlearner mix loss: mix_objective with tau_mix.
Tensor loss_mix(const Tensor& mix_out, const Tensor& target_f, const Tensor& target_r,
                std::span<const double> lambdas, const LossConfig& cfg);
/// sum_j Sim(out_r_j, p_j) - |B_r| logsumexp_i( Sim(out_f_i, p_i) / tau_real ).
Tensor loss_real(const Tensor& out_f, const Tensor& target_f, const Tensor& out_r, const Tensor& target_r,
                 const LossConfig& cfg);
/// l_mix + omega * l_real.
Tensor loss_unlearn(const Tensor& l_mix, const Tensor& l_real, double omega);

} // namespace mixunlearn
