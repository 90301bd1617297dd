#pragma once

#include "mixunlearn/data.hpp"
#include "mixunlearn/losses.hpp"
#include "mixunlearn/mixgen.hpp"
#include "mixunlearn/models.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mixunlearn {

enum class Algorithm { mixunlearn, retrain, neggrad, randlabel, lmix };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct Ablation {
  bool no_mixblock = false; // vanilla Beta(alpha) mixup instead of the generator
  bool no_l_real = false;
  bool no_l_mix = false;
  bool no_sharpen = false; // raw f_D outputs as agnostic targets

  bool any() const { return no_mixblock || no_l_real || no_l_mix || no_sharpen; }
  bool operator==(const Ablation&) const = default;
};

struct UnlearnConfig {
  LossConfig loss;
  int generator_interval = 4;
  double lr = 1e-3;
  double generator_lr = 1e-3;
  int epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double alpha = 0.75;
  double mask_reg = 0.0;
  std::size_t generator_hidden = 64;
  Ablation ablation;

  // Baselines.
  double neggrad_retain_weight = 1.0;
  /// Global gradient-norm cap for NegGrad steps; plain gradient ascent on
  /// cross-entropy diverges without it. 0 disables clipping.
  double neggrad_max_grad_norm = 1.0;
  double randlabel_forget_weight = 1.0;
  double randlabel_retain_weight = 1.0;
  double lmix_weight = 1.0;
  double retrain_lr = 0.05;
  int retrain_epochs = 20;

  /// When set, a failing run writes the trace recorded so far here.
  std::optional<std::filesystem::path> failure_trace;

  void validate() const;
};

/// One row per unlearner iteration. Absent terms (ablated, or no generator
/// step on that iteration) are empty.
struct TraceRow {
  int epoch = 0;
  std::size_t iteration = 0;
  std::optional<double> l_gen;
  std::optional<double> l_mix;
  std::optional<double> l_real;
  double l_unlearn = 0.0;
};

void write_trace(std::ostream& os, const std::vector<TraceRow>& trace);
void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

struct UnlearnRun {
  Classifier model;
  std::vector<TraceRow> trace;
  std::size_t iterations_per_epoch = 0;
  std::size_t generator_steps = 0;
  std::optional<MixGenerator> generator;
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

/// Iterations per epoch: the longer of the two sets is covered once, the
/// shorter one cycles.
std::size_t iterations_per_epoch(const ForgetSplit& split, std::size_t batch_size);

UnlearnRun unlearn_mixunlearn(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg);
/// Fresh model trained on D_r only.
Classifier unlearn_retrain(const ForgetSplit& split, const Architecture& arch, const UnlearnConfig& cfg,
                           TrainHistory* history = nullptr);
UnlearnRun unlearn_neggrad(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg);
UnlearnRun unlearn_randlabel(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg);
UnlearnRun unlearn_lmix(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg);

/// Dispatches on the algorithm; retrain runs are wrapped with an epoch-level trace.
UnlearnRun run_algorithm(Algorithm algo, const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg);

/// lam * forget_label + (1 - lam) * retain_label, the L-Mix target.
Tensor lmix_target(const Tensor& forget_label, const Tensor& retain_label, std::span<const double> lambdas);

} // namespace mixunlearn
