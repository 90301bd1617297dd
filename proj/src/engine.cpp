#include "mixunlearn/engine.hpp"

#include "mixunlearn/errors.hpp"
#include "mixunlearn/rng.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace mixunlearn {

std::string to_string(Algorithm a) {
  switch (a) {
  case Algorithm::mixunlearn: return "mixunlearn";
  case Algorithm::retrain: return "retrain";
  case Algorithm::neggrad: return "neggrad";
  case Algorithm::randlabel: return "randlabel";
  case Algorithm::lmix: return "lmix";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  for (auto a : {Algorithm::mixunlearn, Algorithm::retrain, Algorithm::neggrad, Algorithm::randlabel, Algorithm::lmix})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown algorithm '" + s + "' (expected mixunlearn, retrain, neggrad, randlabel or lmix)");
}

void UnlearnConfig::validate() const {
  loss.validate();
  if (generator_interval < 1) throw ConfigError("generator_interval must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(generator_lr >= 0.0)) throw ConfigError("generator_lr must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (!(mask_reg >= 0.0)) throw ConfigError("mask_reg must be >= 0");
  if (generator_hidden < 1) throw ConfigError("generator_hidden must be >= 1");
  if (ablation.no_l_mix && ablation.no_l_real) throw ConfigError("ablation removes both unlearning losses");
  if (!(neggrad_retain_weight >= 0.0)) throw ConfigError("neggrad_retain_weight must be >= 0");
  if (!(neggrad_max_grad_norm >= 0.0)) throw ConfigError("neggrad_max_grad_norm must be >= 0");
  if (!(randlabel_forget_weight >= 0.0) || !(randlabel_retain_weight >= 0.0))
    throw ConfigError("randlabel weights must be >= 0");
  if (!(lmix_weight >= 0.0)) throw ConfigError("lmix_weight must be >= 0");
  if (!(retrain_lr > 0.0)) throw ConfigError("retrain_lr must be > 0");
  if (retrain_epochs < 1) throw ConfigError("retrain_epochs must be >= 1");
}

// ---------------------------------------------------------------------------
// Traces

namespace {

void put_opt(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}

} // namespace

void write_trace(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "epoch,iteration,l_gen,l_mix,l_real,l_unlearn\n";
  os << std::setprecision(17);
  for (const auto& r : trace) {
    os << r.epoch << ',' << r.iteration << ',';
    put_opt(os, r.l_gen);
    os << ',';
    put_opt(os, r.l_mix);
    os << ',';
    put_opt(os, r.l_real);
    os << ',' << r.l_unlearn << '\n';
  }
}

void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write trace " + path.string());
  write_trace(os, trace);
}

// ---------------------------------------------------------------------------
// Shared loop machinery

namespace {

using Clock = std::chrono::steady_clock;

void require_split(const ForgetSplit& split) {
  if (split.forget.empty()) throw InputError("unlearning: forget set D_f is empty");
  if (split.retain.empty()) throw InputError("unlearning: retain set D_r is empty");
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t row = t.numel() / t.dim(0);
  std::vector<double> out(idx.size() * row);
  const auto v = t.values();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(idx[k] * row), row, out.begin() + static_cast<std::ptrdiff_t>(k * row));
  Shape shape = t.shape();
  shape[0] = idx.size();
  return Tensor(std::move(shape), std::move(out));
}

/// Per epoch: independent shuffles of D_f and D_r, zipped index-wise into
/// equal-size batches; the shorter set wraps around.
class PairSchedule {
public:
  PairSchedule(const ForgetSplit& split, std::size_t batch, std::uint64_t seed)
      : nf_(split.forget.size()), nr_(split.retain.size()), batch_(batch), n_iter_(iterations_per_epoch(split, batch)),
        rng_(derive_seed(seed, 0x7061697273)) {} // "pairs"

  std::size_t iterations() const { return n_iter_; }

  void new_epoch() {
    perm_f_ = permutation(nf_, rng_);
    perm_r_ = permutation(nr_, rng_);
  }

  void batch(std::size_t t, std::vector<std::size_t>& f, std::vector<std::size_t>& r) const {
    f.resize(batch_);
    r.resize(batch_);
    for (std::size_t k = 0; k < batch_; ++k) {
      f[k] = perm_f_[(t * batch_ + k) % nf_];
      r[k] = perm_r_[(t * batch_ + k) % nr_];
    }
  }

private:
  std::size_t nf_, nr_, batch_, n_iter_;
  Rng rng_;
  std::vector<std::size_t> perm_f_, perm_r_;
};

[[noreturn]] void fail_numeric(const UnlearnConfig& cfg, const std::vector<TraceRow>& trace, const std::string& what,
                               int epoch, std::size_t t) {
  if (cfg.failure_trace) write_trace(*cfg.failure_trace, trace);
  throw NumericError(what + ": non-finite loss at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(t));
}

void check_unchanged(const Classifier& f_d, std::uint64_t hash) {
  if (f_d.parameter_hash() != hash) throw ContractError("unlearning modified the initial model");
}

Tensor cached_targets(const Classifier& f_d, const Dataset& d, const UnlearnConfig& cfg, const Tensor& probs) {
  if (cfg.loss.label_mode == LabelMode::aware) return one_hot(d.labels, f_d.num_classes());
  if (cfg.ablation.no_sharpen) return probs;
  return sharpen_rows(probs, cfg.loss.sharpen_t);
}

using StepFn = std::function<TraceRow(std::span<const std::size_t>, std::span<const std::size_t>, std::size_t)>;

// Runs the epoch/iteration loop, calling step for every paired batch and
// collecting the trace.
void run_loop(UnlearnRun& run, const ForgetSplit& split, const UnlearnConfig& cfg, const std::string& name,
              const std::function<void(int)>& on_epoch, const StepFn& step) {
  PairSchedule schedule(split, cfg.batch_size, cfg.seed);
  run.iterations_per_epoch = schedule.iterations();
  run.trace.reserve(static_cast<std::size_t>(cfg.epochs) * schedule.iterations());
  std::vector<std::size_t> bf, br;
  std::size_t global = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    schedule.new_epoch();
    if (on_epoch) on_epoch(epoch);
    for (std::size_t t = 0; t < schedule.iterations(); ++t, ++global) {
      schedule.batch(t, bf, br);
      TraceRow row;
      try {
        row = step(bf, br, global);
      } catch (const NumericError&) {
        // Parameters overflowed inside the optimizer step.
        fail_numeric(cfg, run.trace, name, epoch, t);
      }
      row.epoch = epoch;
      row.iteration = t;
      const bool finite = std::isfinite(row.l_unlearn) && (!row.l_gen || std::isfinite(*row.l_gen));
      run.trace.push_back(row);
      if (!finite) fail_numeric(cfg, run.trace, name, epoch, t);
    }
  }
}

UnlearnRun start_run(const Classifier& f_d, const UnlearnConfig& cfg) {
  return UnlearnRun{f_d.clone(), {}, 0, 0, std::nullopt, 0.0, cfg.seed};
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

} // namespace

std::size_t iterations_per_epoch(const ForgetSplit& split, std::size_t batch_size) {
  const std::size_t n = std::max(split.forget.size(), split.retain.size());
  return (n + batch_size - 1) / batch_size;
}

// ---------------------------------------------------------------------------
// MixUnlearn

UnlearnRun unlearn_mixunlearn(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg) {
  cfg.validate();
  require_split(split);
  const auto t0 = Clock::now();
  const std::uint64_t f_d_hash = f_d.parameter_hash();

  // f_D is frozen for the whole run, so its outputs and features are computed once.
  const Tensor x_f_all = split.forget.all();
  const Tensor x_r_all = split.retain.all();
  const Tensor tgt_f_all = cached_targets(f_d, split.forget, cfg, predict(f_d, split.forget));
  const Tensor tgt_r_all = cached_targets(f_d, split.retain, cfg, predict(f_d, split.retain));
  Tensor h_f_all, h_r_all;

  UnlearnRun run = start_run(f_d, cfg);
  const bool use_generator = !cfg.ablation.no_mixblock;
  if (use_generator) {
    h_f_all = extract_features(f_d, split.forget);
    h_r_all = extract_features(f_d, split.retain);
    GeneratorConfig gcfg;
    gcfg.input_shape = split.forget.sample_shape;
    gcfg.feature_width = f_d.feature_width();
    gcfg.hidden = cfg.generator_hidden;
    run.generator.emplace(gcfg, derive_seed(cfg.seed, 0x67656e)); // "gen"
  }
  LambdaSampler sampler(cfg.alpha, derive_seed(cfg.seed, 0x6c616d)); // "lam"
  const GeneratorStepConfig gstep{cfg.generator_lr, cfg.mask_reg};
  Classifier& f_u = run.model;

  run_loop(run, split, cfg, "mixunlearn", nullptr,
           [&](std::span<const std::size_t> bf, std::span<const std::size_t> br, std::size_t global) {
             TraceRow row;
             PairedBatch b;
             b.x_f = gather_rows(x_f_all, bf);
             b.x_r = gather_rows(x_r_all, br);
             b.target_f = gather_rows(tgt_f_all, bf);
             b.target_r = gather_rows(tgt_r_all, br);
             b.lambdas = sampler.sample(bf.size());
             Tensor mix;
             if (use_generator) {
               b.h_f = gather_rows(h_f_all, bf);
               b.h_r = gather_rows(h_r_all, br);
               if ((global + 1) % static_cast<std::size_t>(cfg.generator_interval) == 0) {
                 row.l_gen = train_generator_step(*run.generator, f_u, b, cfg.loss, gstep);
                 ++run.generator_steps;
               }
               NoGradGuard no_grad;
               mix = mixblock_forward(*run.generator, b.x_f, b.x_r, b.h_f, b.h_r, b.lambdas).mix;
             } else {
               mix = vanilla_mix_rows(b.x_f, b.x_r, b.lambdas);
             }

             Tensor total;
             if (!cfg.ablation.no_l_mix) {
               const Tensor l_mix = loss_mix(f_u.forward(mix), b.target_f, b.target_r, b.lambdas, cfg.loss);
               row.l_mix = l_mix.item();
               total = l_mix;
             }
             if (!cfg.ablation.no_l_real) {
               const Tensor l_real = loss_real(f_u.forward(b.x_f), b.target_f, f_u.forward(b.x_r), b.target_r, cfg.loss);
               row.l_real = l_real.item();
               total = total.defined() ? loss_unlearn(total, l_real, cfg.loss.omega) : scale(l_real, cfg.loss.omega);
             }
             row.l_unlearn = total.item();
             if (std::isfinite(row.l_unlearn)) {
               total.backward();
               sgd_step(f_u.parameters(), cfg.lr);
             }
             return row;
           });

  check_unchanged(f_d, f_d_hash);
  run.seconds = seconds_since(t0);
  return run;
}

// ---------------------------------------------------------------------------
// Baselines

Classifier unlearn_retrain(const ForgetSplit& split, const Architecture& arch, const UnlearnConfig& cfg,
                           TrainHistory* history) {
  cfg.validate();
  if (split.retain.empty()) throw InputError("retrain: retain set D_r is empty");
  TrainConfig tc;
  tc.lr = cfg.retrain_lr;
  tc.epochs = cfg.retrain_epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = derive_seed(cfg.seed, 0x726574); // "ret"
  return train_classifier(split.retain, arch, tc, history);
}

UnlearnRun unlearn_neggrad(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg) {
  cfg.validate();
  require_split(split);
  const auto t0 = Clock::now();
  const std::uint64_t f_d_hash = f_d.parameter_hash();
  UnlearnRun run = start_run(f_d, cfg);
  Classifier& f_u = run.model;
  const Dataset& df = split.forget;
  const Dataset& dr = split.retain;

  run_loop(run, split, cfg, "neggrad", nullptr,
           [&](std::span<const std::size_t> bf, std::span<const std::size_t> br, std::size_t) {
             TraceRow row;
             const Tensor ascend = neg(cross_entropy(f_u.logits(df.batch(bf)), df.batch_labels(bf)));
             Tensor total = ascend;
             if (cfg.neggrad_retain_weight > 0.0)
               total = add(ascend, scale(cross_entropy(f_u.logits(dr.batch(br)), dr.batch_labels(br)),
                                         cfg.neggrad_retain_weight));
             row.l_unlearn = total.item();
             if (std::isfinite(row.l_unlearn)) {
               total.backward();
               if (cfg.neggrad_max_grad_norm > 0.0) clip_grad_norm(f_u.parameters(), cfg.neggrad_max_grad_norm);
               sgd_step(f_u.parameters(), cfg.lr);
             }
             return row;
           });

  check_unchanged(f_d, f_d_hash);
  run.seconds = seconds_since(t0);
  return run;
}

namespace {

// Shared by RandLabel and L-Mix: random one-hot labels for D_f redrawn every
// epoch, f_D outputs on D_r as retain targets.
UnlearnRun random_label_run(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg, bool with_mix) {
  cfg.validate();
  require_split(split);
  const auto t0 = Clock::now();
  const std::uint64_t f_d_hash = f_d.parameter_hash();
  UnlearnRun run = start_run(f_d, cfg);
  Classifier& f_u = run.model;
  const std::size_t classes = f_d.num_classes();
  const Tensor x_f_all = split.forget.all();
  const Tensor x_r_all = split.retain.all();
  const Tensor self_r_all = predict(f_d, split.retain);
  Rng label_rng(derive_seed(cfg.seed, 0x726e646c)); // "rndl"
  LambdaSampler sampler(cfg.alpha, derive_seed(cfg.seed, 0x6c616d));
  std::vector<int> random_labels(split.forget.size());
  Tensor rand_all;

  run_loop(
      run, split, cfg, with_mix ? "lmix" : "randlabel",
      [&](int) {
        for (int& l : random_labels) l = static_cast<int>(uniform_index(label_rng, classes));
        rand_all = one_hot(random_labels, classes);
      },
      [&](std::span<const std::size_t> bf, std::span<const std::size_t> br, std::size_t) {
        TraceRow row;
        const Tensor x_f = gather_rows(x_f_all, bf);
        const Tensor x_r = gather_rows(x_r_all, br);
        const Tensor rand_f = gather_rows(rand_all, bf);
        const Tensor self_r = gather_rows(self_r_all, br);
        Tensor total = add(scale(mse(f_u.forward(x_f), rand_f), cfg.randlabel_forget_weight),
                           scale(mse(f_u.forward(x_r), self_r), cfg.randlabel_retain_weight));
        if (with_mix) {
          const auto lambdas = sampler.sample(bf.size());
          const Tensor mixed = vanilla_mix_rows(x_f, x_r, lambdas);
          const Tensor l_mix = mse(f_u.forward(mixed), lmix_target(rand_f, self_r, lambdas));
          row.l_mix = l_mix.item();
          total = add(total, scale(l_mix, cfg.lmix_weight));
        }
        row.l_unlearn = total.item();
        if (std::isfinite(row.l_unlearn)) {
          total.backward();
          sgd_step(f_u.parameters(), cfg.lr);
        }
        return row;
      });

  check_unchanged(f_d, f_d_hash);
  run.seconds = seconds_since(t0);
  return run;
}

} // namespace

Tensor lmix_target(const Tensor& forget_label, const Tensor& retain_label, std::span<const double> lambdas) {
  return vanilla_mix_rows(forget_label.detach(), retain_label.detach(), lambdas);
}

UnlearnRun unlearn_randlabel(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg) {
  return random_label_run(f_d, split, cfg, false);
}

UnlearnRun unlearn_lmix(const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg) {
  return random_label_run(f_d, split, cfg, true);
}

UnlearnRun run_algorithm(Algorithm algo, const Classifier& f_d, const ForgetSplit& split, const UnlearnConfig& cfg) {
  switch (algo) {
  case Algorithm::mixunlearn: return unlearn_mixunlearn(f_d, split, cfg);
  case Algorithm::neggrad: return unlearn_neggrad(f_d, split, cfg);
  case Algorithm::randlabel: return unlearn_randlabel(f_d, split, cfg);
  case Algorithm::lmix: return unlearn_lmix(f_d, split, cfg);
  case Algorithm::retrain: {
    const auto t0 = Clock::now();
    TrainHistory history;
    Classifier model = unlearn_retrain(split, f_d.architecture(), cfg, &history);
    UnlearnRun run{std::move(model), {}, 0, 0, std::nullopt, 0.0, cfg.seed};
    for (std::size_t e = 0; e < history.epoch_loss.size(); ++e)
      run.trace.push_back(TraceRow{static_cast<int>(e), 0, std::nullopt, std::nullopt, std::nullopt, history.epoch_loss[e]});
    run.iterations_per_epoch = 1;
    run.seconds = seconds_since(t0);
    return run;
  }
  }
  throw ConfigError("unknown algorithm");
}

} // namespace mixunlearn
