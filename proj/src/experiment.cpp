#include "mixunlearn/experiment.hpp"

#include "mixunlearn/errors.hpp"
#include "mixunlearn/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace mixunlearn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Ctx {
  std::string key; // section.key
  int line = 0;

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError("line " + std::to_string(line) + ": " + key + ": " + why);
  }
};

double parse_double(const std::string& v, const Ctx& c) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) c.fail("expected a number, got '" + v + "'");
  return d;
}

long long parse_int(const std::string& v, const Ctx& c) {
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size()) c.fail("expected an integer, got '" + v + "'");
  return i;
}

std::uint64_t parse_u64(const std::string& v, const Ctx& c) {
  char* end = nullptr;
  if (v.empty() || v[0] == '-') c.fail("expected a non-negative integer, got '" + v + "'");
  const unsigned long long i = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size()) c.fail("expected a non-negative integer, got '" + v + "'");
  return i;
}

bool parse_bool(const std::string& v, const Ctx& c) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  c.fail("expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "," : "") << v[k];
  return os.str();
}

std::string ablation_str(const Ablation& a) {
  std::vector<std::string> parts;
  if (a.no_mixblock) parts.push_back("no_mixblock");
  if (a.no_l_real) parts.push_back("no_l_real");
  if (a.no_l_mix) parts.push_back("no_l_mix");
  if (a.no_sharpen) parts.push_back("no_sharpen");
  return parts.empty() ? "none" : join(parts);
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&, const Ctx&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename Get>
Field positive_double(Get member, bool allow_zero = false) {
  return {[member, allow_zero](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
            const double d = parse_double(v, ctx);
            if (allow_zero ? d < 0.0 : d <= 0.0) ctx.fail(allow_zero ? "must be >= 0" : "must be > 0");
            member(c) = d;
          },
          [member](const ExperimentConfig& c) { return fmt_double(member(const_cast<ExperimentConfig&>(c))); }};
}

template <typename T, typename Get>
Field bounded_int(Get member, long long lo) {
  return {[member, lo](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
            const long long i = parse_int(v, ctx);
            if (i < lo) ctx.fail("must be >= " + std::to_string(lo));
            member(c) = static_cast<T>(i);
          },
          [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }};
}

#define MEMBER(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<std::pair<std::string, Field>>& schema() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"dataset.source",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          if (v == "blobs") c.dataset.source = DataSource::blobs;
          else if (v == "idx") c.dataset.source = DataSource::idx;
          else ctx.fail("expected blobs or idx, got '" + v + "'");
        },
        [](const ExperimentConfig& c) { return std::string(c.dataset.source == DataSource::blobs ? "blobs" : "idx"); }}},
      {"dataset.classes", bounded_int<int>(MEMBER(dataset.classes), 2)},
      {"dataset.per_class", bounded_int<int>(MEMBER(dataset.per_class), 1)},
      {"dataset.test_per_class", bounded_int<int>(MEMBER(dataset.test_per_class), 1)},
      {"dataset.dim", bounded_int<int>(MEMBER(dataset.dim), 1)},
      {"dataset.separation", positive_double(MEMBER(dataset.separation))},
      {"dataset.path",
       {[](ExperimentConfig& c, const std::string& v, const Ctx&) { c.dataset.path = v; },
        [](const ExperimentConfig& c) { return c.dataset.path.string(); }}},
      {"dataset.subset", bounded_int<std::size_t>(MEMBER(dataset.subset), 0)},
      {"dataset.test_subset", bounded_int<std::size_t>(MEMBER(dataset.test_subset), 0)},

      {"setup.kind",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          try {
            c.setup.kind = setup_from_string(v);
          } catch (const ConfigError& e) {
            ctx.fail(e.what());
          }
        },
        [](const ExperimentConfig& c) { return to_string(c.setup.kind); }}},
      {"setup.forget_class", bounded_int<int>(MEMBER(setup.forget_class), 0)},
      {"setup.classes",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          c.setup.classes.clear();
          for (const auto& s : split_list(v)) {
            const long long i = parse_int(s, ctx);
            if (i < 0) ctx.fail("class ids must be >= 0");
            c.setup.classes.push_back(static_cast<int>(i));
          }
          if (c.setup.classes.empty()) ctx.fail("must list at least one class");
        },
        [](const ExperimentConfig& c) { return join(c.setup.classes); }}},
      {"setup.fraction",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          const double d = parse_double(v, ctx);
          if (!(d > 0.0 && d < 1.0)) ctx.fail("must be in (0, 1)");
          c.setup.fraction = d;
        },
        [](const ExperimentConfig& c) { return fmt_double(c.setup.fraction); }}},

      {"model.arch",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          if (v == "mlp") c.model.arch = ArchKind::mlp;
          else if (v == "cnn") c.model.arch = ArchKind::cnn;
          else ctx.fail("expected mlp or cnn, got '" + v + "'");
        },
        [](const ExperimentConfig& c) { return std::string(c.model.arch == ArchKind::mlp ? "mlp" : "cnn"); }}},
      {"model.hidden",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          c.model.hidden.clear();
          for (const auto& s : split_list(v)) {
            const long long i = parse_int(s, ctx);
            if (i < 1) ctx.fail("widths must be >= 1");
            c.model.hidden.push_back(static_cast<std::size_t>(i));
          }
          if (c.model.hidden.empty()) ctx.fail("must list at least one width");
        },
        [](const ExperimentConfig& c) { return join(c.model.hidden); }}},
      {"model.lr", positive_double(MEMBER(model.lr))},
      {"model.epochs", bounded_int<int>(MEMBER(model.epochs), 1)},
      {"model.batch_size", bounded_int<std::size_t>(MEMBER(model.batch_size), 1)},

      {"unlearn.algorithm",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          try {
            c.algorithm = algorithm_from_string(v);
          } catch (const ConfigError& e) {
            ctx.fail(e.what());
          }
        },
        [](const ExperimentConfig& c) { return to_string(c.algorithm); }}},
      {"unlearn.lr", positive_double(MEMBER(unlearn.lr), true)},
      {"unlearn.generator_lr", positive_double(MEMBER(unlearn.generator_lr), true)},
      {"unlearn.epochs", bounded_int<int>(MEMBER(unlearn.epochs), 1)},
      {"unlearn.batch_size", bounded_int<std::size_t>(MEMBER(unlearn.batch_size), 1)},
      {"unlearn.generator_interval", bounded_int<int>(MEMBER(unlearn.generator_interval), 1)},
      {"unlearn.generator_hidden", bounded_int<std::size_t>(MEMBER(unlearn.generator_hidden), 1)},
      {"unlearn.tau_gen", positive_double(MEMBER(unlearn.loss.tau_gen))},
      {"unlearn.tau_mix", positive_double(MEMBER(unlearn.loss.tau_mix))},
      {"unlearn.tau_real", positive_double(MEMBER(unlearn.loss.tau_real))},
      {"unlearn.omega", positive_double(MEMBER(unlearn.loss.omega), true)},
      {"unlearn.sharpen_t",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          const double d = parse_double(v, ctx);
          if (!(d > 0.0 && d <= 1.0)) ctx.fail("must be in (0, 1]");
          c.unlearn.loss.sharpen_t = d;
        },
        [](const ExperimentConfig& c) { return fmt_double(c.unlearn.loss.sharpen_t); }}},
      {"unlearn.label_mode",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          try {
            c.unlearn.loss.label_mode = label_mode_from_string(v);
          } catch (const ConfigError& e) {
            ctx.fail(e.what());
          }
        },
        [](const ExperimentConfig& c) { return to_string(c.unlearn.loss.label_mode); }}},
      {"unlearn.alpha", positive_double(MEMBER(unlearn.alpha))},
      {"unlearn.mask_reg", positive_double(MEMBER(unlearn.mask_reg), true)},
      {"unlearn.ablation",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          Ablation a;
          for (const auto& s : split_list(v)) {
            if (s == "none") continue;
            if (s == "no_mixblock") a.no_mixblock = true;
            else if (s == "no_l_real") a.no_l_real = true;
            else if (s == "no_l_mix") a.no_l_mix = true;
            else if (s == "no_sharpen") a.no_sharpen = true;
            else ctx.fail("unknown ablation '" + s + "'");
          }
          if (a.no_l_mix && a.no_l_real) ctx.fail("cannot remove both L_mix and L_real");
          c.unlearn.ablation = a;
        },
        [](const ExperimentConfig& c) { return ablation_str(c.unlearn.ablation); }}},
      {"unlearn.neggrad_retain_weight", positive_double(MEMBER(unlearn.neggrad_retain_weight), true)},
      {"unlearn.neggrad_max_grad_norm", positive_double(MEMBER(unlearn.neggrad_max_grad_norm), true)},
      {"unlearn.randlabel_forget_weight", positive_double(MEMBER(unlearn.randlabel_forget_weight), true)},
      {"unlearn.randlabel_retain_weight", positive_double(MEMBER(unlearn.randlabel_retain_weight), true)},
      {"unlearn.lmix_weight", positive_double(MEMBER(unlearn.lmix_weight), true)},
      {"unlearn.retrain_lr", positive_double(MEMBER(unlearn.retrain_lr))},
      {"unlearn.retrain_epochs", bounded_int<int>(MEMBER(unlearn.retrain_epochs), 1)},

      {"run.seed",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) { c.seed = parse_u64(v, ctx); },
        [](const ExperimentConfig& c) { return std::to_string(c.seed); }}},
      {"run.repeats", bounded_int<int>(MEMBER(repeats), 1)},
      {"run.output",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          if (v.empty()) ctx.fail("must not be empty");
          c.output = v;
        },
        [](const ExperimentConfig& c) { return c.output.string(); }}},

      {"eval.calibration_fraction",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) {
          const double d = parse_double(v, ctx);
          if (!(d > 0.0 && d < 1.0)) ctx.fail("must be in (0, 1)");
          c.eval.calibration_fraction = d;
        },
        [](const ExperimentConfig& c) { return fmt_double(c.eval.calibration_fraction); }}},
      {"eval.export_features",
       {[](ExperimentConfig& c, const std::string& v, const Ctx& ctx) { c.eval.export_features = parse_bool(v, ctx); },
        [](const ExperimentConfig& c) { return std::string(c.eval.export_features ? "true" : "false"); }}},
  };
  return fields;
}

#undef MEMBER

const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : schema())
    if (name == key) return &f;
  return nullptr;
}

} // namespace

void ExperimentConfig::validate() const {
  if (repeats < 1) throw ConfigError("run.repeats must be >= 1");
  if (dataset.source == DataSource::idx && dataset.path.empty()) throw ConfigError("dataset.path is required for idx data");
  if (dataset.source == DataSource::blobs && model.arch == ArchKind::cnn)
    throw ConfigError("model.arch = cnn needs image data");
  if (setup.kind == SetupTag::class_level && dataset.source == DataSource::blobs && setup.forget_class >= dataset.classes)
    throw ConfigError("setup.forget_class " + std::to_string(setup.forget_class) + " is not a dataset class");
  unlearn.validate();
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string raw, section;
  int lineno = 0;
  std::set<std::string> seen;
  static const std::set<std::string> sections{"dataset", "setup", "model", "unlearn", "run", "eval"};
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section))
        throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Ctx ctx{key, lineno};
    const Field* f = find_field(key);
    if (!f) ctx.fail("unknown key");
    if (!seen.insert(key).second) ctx.fail("duplicate key");
    f->set(cfg, value, ctx);
  }
  for (const char* required : {"dataset.source", "unlearn.algorithm"})
    if (!seen.count(required)) throw ConfigError(std::string("missing required key ") + required);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string emit_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string current;
  for (const auto& [name, f] : schema()) {
    const auto dot = name.find('.');
    const std::string section = name.substr(0, dot);
    if (section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << section << "]\n";
      current = section;
    }
    os << name.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline pieces

std::pair<Dataset, Dataset> build_datasets(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.source == DataSource::blobs) {
    return {make_blobs(spec.classes, spec.per_class, spec.dim, spec.separation, derive_seed(seed, 0x74726e)),  // "trn"
            make_blobs(spec.classes, spec.test_per_class, spec.dim, spec.separation, derive_seed(seed, 0x747374))}; // "tst"
  }
  Dataset train = load_idx(spec.path / "train-images-idx3-ubyte", spec.path / "train-labels-idx1-ubyte");
  Dataset test = load_idx(spec.path / "t10k-images-idx3-ubyte", spec.path / "t10k-labels-idx1-ubyte");
  if (spec.subset > 0 && spec.subset < train.size()) train = random_subset(train, spec.subset, derive_seed(seed, 0x737562)); // "sub"
  if (spec.test_subset > 0 && spec.test_subset < test.size())
    test = random_subset(test, spec.test_subset, derive_seed(seed, 0x747362));
  return {std::move(train), std::move(test)};
}

ForgetSplit build_split(const SetupSpec& spec, const Dataset& train, std::uint64_t seed) {
  switch (spec.kind) {
  case SetupTag::class_level: return split_class_level(train, spec.forget_class);
  case SetupTag::data_level: return split_data_level(train, spec.classes, spec.fraction, derive_seed(seed, 0x73706c)); // "spl"
  case SetupTag::noisy: return split_noisy(train, spec.classes, spec.fraction, derive_seed(seed, 0x73706c));
  }
  throw ConfigError("unknown setup");
}

Architecture build_architecture(const ModelSpec& spec, const Dataset& train) {
  if (spec.arch == ArchKind::cnn) return Architecture::cnn(train.sample_shape, train.num_classes);
  return Architecture::mlp(train.sample_size(), spec.hidden, train.num_classes);
}

Dataset unseen_set(const SetupSpec& spec, const Dataset& test) {
  if (spec.kind != SetupTag::class_level) return test;
  std::vector<std::size_t> idx;
  for (std::size_t n = 0; n < test.size(); ++n)
    if (test.labels[n] == spec.forget_class) idx.push_back(n);
  return test.subset(idx, "unseen");
}

// ---------------------------------------------------------------------------
// run_experiment

namespace {

using Clock = std::chrono::steady_clock;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << text;
}

std::string metric_row(const std::string& kind, const std::string& seed, const std::vector<double>& v,
                       const std::vector<std::string>& stds) {
  std::ostringstream os;
  os << kind << ',' << seed;
  for (double x : v) os << ',' << fmt_double(x);
  for (const auto& s : stds) os << ',' << s;
  return os.str();
}

std::string metric_header(SetupTag setup) {
  std::ostringstream os;
  os << "kind,seed";
  const auto cols = MetricReport::columns(setup);
  for (const auto& c : cols) os << ',' << c;
  for (const auto& c : cols) os << ',' << c << "_std";
  return os.str();
}

void write_features(const fs::path& path, const Classifier& model, const Dataset& data) {
  const Tensor feats = extract_features(model, data);
  const std::size_t w = feats.dim(1);
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "label";
  for (std::size_t k = 0; k < w; ++k) os << ",h" << k;
  os << '\n' << std::setprecision(17);
  for (std::size_t n = 0; n < data.size(); ++n) {
    os << data.labels[n];
    for (std::size_t k = 0; k < w; ++k) os << ',' << feats[n * w + k];
    os << '\n';
  }
}

MetricReport evaluate(const Classifier& model, const ExperimentConfig& cfg, const ForgetSplit& split,
                      const Dataset& test, std::uint64_t seed) {
  MetricReport r;
  r.setup = cfg.setup.kind;
  if (cfg.setup.kind == SetupTag::class_level) {
    const auto m = class_level_metrics(model, test, cfg.setup.forget_class);
    r.test_r = m.test_r;
    r.test_f = m.test_f;
  } else {
    const auto m = data_level_metrics(model, split, test);
    r.train_r = m.train_r;
    r.train_f = m.train_f;
    r.test = m.test;
  }
  AttackConfig attack;
  attack.calibration_fraction = cfg.eval.calibration_fraction;
  attack.seed = derive_seed(seed, 0x6d6961); // "mia"
  r.asr = membership_inference_asr(model, split.forget, unseen_set(cfg.setup, test), attack);
  return r;
}

SeedOutcome run_one_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, std::ostream* log) {
  SeedOutcome out;
  out.seed = seed;
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
  ExperimentConfig echo = cfg;
  echo.seed = seed;
  echo.repeats = 1;
  write_text(dir / "config.ini", emit_config(echo));

  std::vector<std::pair<std::string, double>> timing;
  auto stage = [&](const std::string& name, Clock::time_point t0) {
    timing.emplace_back(name, std::chrono::duration<double>(Clock::now() - t0).count());
    if (log) *log << "  seed " << seed << ": " << name << " done (" << std::fixed << std::setprecision(1)
                  << timing.back().second << " s)" << std::defaultfloat << '\n';
  };
  auto flush_timing = [&] {
    std::ostringstream os;
    os << "stage,seconds\n";
    for (const auto& [name, s] : timing) os << name << ',' << fmt_double(s) << '\n';
    write_text(dir / "timing.csv", os.str());
  };

  try {
    auto t0 = Clock::now();
    auto [train, test] = build_datasets(cfg.dataset, seed);
    const ForgetSplit split = build_split(cfg.setup, train, seed);
    split.write_manifest(dir / "split_manifest.csv");
    stage("data", t0);

    t0 = Clock::now();
    const Architecture arch = build_architecture(cfg.model, train);
    TrainConfig tc;
    tc.lr = cfg.model.lr;
    tc.epochs = cfg.model.epochs;
    tc.batch_size = cfg.model.batch_size;
    tc.seed = derive_seed(seed, 0x6644); // "fD"
    // f_D sees the full training set as labeled (noisy labels included).
    const Classifier f_d = train_classifier(split.full(), arch, tc);
    f_d.save(dir / "f_D.ckpt");
    stage("train_initial", t0);

    t0 = Clock::now();
    UnlearnConfig ucfg = cfg.unlearn;
    ucfg.seed = seed;
    ucfg.failure_trace = dir / "trace.csv";
    UnlearnRun run = run_algorithm(cfg.algorithm, f_d, split, ucfg);
    write_trace(dir / "trace.csv", run.trace);
    run.model.save(dir / "f_U.ckpt");
    if (run.generator) run.generator->save(dir / "generator.ckpt");
    stage("unlearn", t0);

    t0 = Clock::now();
    out.report = evaluate(run.model, cfg, split, test, seed);
    const Dataset unseen = unseen_set(cfg.setup, test);
    const auto [kf, ku] = loss_kde(run.model, split.forget, unseen);
    write_kde_csv(dir / "kde_forgetting.csv", kf);
    write_kde_csv(dir / "kde_unseen.csv", ku);
    if (cfg.eval.export_features) write_features(dir / "features.csv", run.model, test);
    stage("evaluate", t0);

    const auto cols = MetricReport::columns(cfg.setup.kind);
    const auto vals = out.report.values();
    {
      std::ostringstream os;
      os << metric_header(cfg.setup.kind) << '\n'
         << metric_row("seed", std::to_string(seed), vals, std::vector<std::string>(cols.size())) << '\n';
      write_text(dir / "metrics.csv", os.str());
    }
    {
      std::ostringstream os;
      os << "algorithm: " << to_string(cfg.algorithm) << '\n'
         << "setup: " << to_string(cfg.setup.kind) << '\n'
         << "ablation: " << ablation_str(cfg.unlearn.ablation) << '\n'
         << "seed: " << seed << '\n'
         << "train_size: " << train.size() << '\n'
         << "forget_size: " << split.forget.size() << '\n'
         << "retain_size: " << split.retain.size() << '\n'
         << "iterations_per_epoch: " << run.iterations_per_epoch << '\n'
         << "trace_rows: " << run.trace.size() << '\n'
         << "generator_steps: " << run.generator_steps << '\n'
         << "f_D_parameters: " << f_d.parameter_count() << '\n'
         << "generator_parameters: " << (run.generator ? run.generator->parameter_count() : 0) << '\n'
         << "metrics:\n";
      for (std::size_t k = 0; k < cols.size(); ++k) os << "  " << cols[k] << ": " << fmt_double(vals[k]) << '\n';
      write_text(dir / "run.txt", os.str());
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
    write_text(dir / "FAILED", out.error + "\n");
    if (log) *log << "  seed " << seed << ": FAILED: " << out.error << '\n';
  }
  flush_timing();
  return out;
}

} // namespace

std::size_t ExperimentResult::failures() const {
  return static_cast<std::size_t>(std::count_if(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return !s.ok; }));
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  ExperimentResult result;
  result.directory = cfg.output;
  fs::create_directories(cfg.output);
  write_text(cfg.output / "config.ini", emit_config(cfg));
  for (int r = 0; r < cfg.repeats; ++r) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(r);
    if (log) *log << to_string(cfg.algorithm) << ": repeat " << (r + 1) << '/' << cfg.repeats << " (seed " << seed << ")\n";
    result.seeds.push_back(run_one_seed(cfg, seed, cfg.output / ("seed_" + std::to_string(seed)), log));
  }

  const auto cols = MetricReport::columns(cfg.setup.kind);
  std::ostringstream os;
  os << metric_header(cfg.setup.kind) << '\n';
  std::vector<std::vector<double>> per_column(cols.size());
  for (const auto& s : result.seeds) {
    if (!s.ok) continue;
    const auto vals = s.report.values();
    os << metric_row("seed", std::to_string(s.seed), vals, std::vector<std::string>(cols.size())) << '\n';
    for (std::size_t k = 0; k < cols.size(); ++k) per_column[k].push_back(vals[k]);
  }
  if (!per_column.front().empty()) {
    std::vector<double> means;
    std::vector<std::string> stds;
    for (const auto& c : per_column) {
      const auto ms = mean_std(c);
      means.push_back(ms.mean);
      stds.push_back(ms.std ? fmt_double(*ms.std) : "");
    }
    os << metric_row("aggregate", "", means, stds) << '\n';
  }
  write_text(cfg.output / "metrics.csv", os.str());
  return result;
}

// ---------------------------------------------------------------------------
// compare / kde

namespace {

struct LoadedRun {
  fs::path dir;
  ExperimentConfig cfg;
  std::vector<MeanStd> aggregate;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

LoadedRun load_run(const fs::path& dir) {
  LoadedRun run;
  run.dir = dir;
  run.cfg = load_config(dir / "config.ini");
  std::ifstream is(dir / "metrics.csv");
  if (!is) throw InputError(dir.string() + ": no metrics.csv");
  std::string line;
  std::getline(is, line);
  const auto header = split_csv(line);
  const auto cols = MetricReport::columns(run.cfg.setup.kind);
  if (header.size() != 2 + 2 * cols.size()) throw ParseError(dir.string() + "/metrics.csv: unexpected header");
  while (std::getline(is, line)) {
    const auto cells = split_csv(line);
    if (cells.empty() || cells[0] != "aggregate") continue;
    if (cells.size() != header.size()) throw ParseError(dir.string() + "/metrics.csv: malformed aggregate row");
    for (std::size_t k = 0; k < cols.size(); ++k) {
      MeanStd ms;
      ms.mean = std::stod(cells[2 + k]);
      if (!cells[2 + cols.size() + k].empty()) ms.std = std::stod(cells[2 + cols.size() + k]);
      run.aggregate.push_back(ms);
    }
  }
  if (run.aggregate.empty()) throw InputError(dir.string() + ": metrics.csv has no aggregate row (all repeats failed?)");
  return run;
}

bool same_setup(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.setup == b.setup && a.dataset == b.dataset;
}

} // namespace

Comparison compare_runs(const std::vector<fs::path>& dirs, const std::optional<fs::path>& oracle) {
  std::vector<fs::path> all = dirs;
  if (oracle && std::find(all.begin(), all.end(), *oracle) == all.end()) all.insert(all.begin(), *oracle);
  if (all.size() < 2) throw ConfigError("compare: need at least two run directories");
  std::vector<LoadedRun> runs;
  for (const auto& d : all) runs.push_back(load_run(d));

  std::size_t oracle_idx = runs.size();
  if (oracle) {
    oracle_idx = static_cast<std::size_t>(std::find(all.begin(), all.end(), *oracle) - all.begin());
  } else {
    for (std::size_t k = 0; k < runs.size(); ++k) {
      if (runs[k].cfg.algorithm != Algorithm::retrain) continue;
      if (oracle_idx != runs.size()) throw ConfigError("compare: several retrain runs; pick one with --oracle");
      oracle_idx = k;
    }
    if (oracle_idx == runs.size()) throw ConfigError("compare: no oracle (retrain) run among the inputs; pass --oracle");
  }
  for (const auto& r : runs)
    if (!same_setup(r.cfg, runs[oracle_idx].cfg))
      throw ConfigError("compare: " + r.dir.string() + " uses a different dataset or setup than the oracle " +
                        runs[oracle_idx].dir.string());

  Comparison c;
  c.setup = runs[oracle_idx].cfg.setup.kind;
  c.columns = MetricReport::columns(c.setup);
  c.oracle = runs[oracle_idx].dir.string();
  for (const auto& r : runs) {
    ComparisonRow row;
    row.name = r.dir.string();
    row.algorithm = r.cfg.algorithm;
    row.values = r.aggregate;
    for (std::size_t k = 0; k < r.aggregate.size(); ++k)
      row.deltas.push_back(r.aggregate[k].mean - runs[oracle_idx].aggregate[k].mean);
    c.rows.push_back(std::move(row));
  }
  return c;
}

void Comparison::print(std::ostream& os) const {
  static const std::map<std::string, std::string> pretty{{"test_r", "Test_r"}, {"test_f", "Test_f"},
                                                         {"train_r", "Train_r"}, {"train_f", "Train_f"},
                                                         {"test", "Test"}, {"asr", "ASR"}};
  os << "setup: " << to_string(setup) << "   oracle: " << oracle << '\n';
  os << std::left << std::setw(12) << "algorithm";
  for (const auto& col : columns) os << std::setw(26) << pretty.at(col);
  os << "run\n";
  for (const auto& r : rows) {
    os << std::setw(12) << to_string(r.algorithm);
    for (std::size_t k = 0; k < r.values.size(); ++k) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2) << r.values[k].mean;
      if (r.values[k].std) cell << "±" << *r.values[k].std;
      cell << " (" << std::showpos << r.deltas[k] << std::noshowpos << ")";
      os << std::setw(26) << cell.str();
    }
    os << r.name << '\n';
  }
}

void summarize_kde(const fs::path& run_dir, std::ostream& os) {
  std::vector<fs::path> seeds;
  for (const auto& e : fs::directory_iterator(run_dir))
    if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) seeds.push_back(e.path());
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw InputError(run_dir.string() + ": no seed_* directories");
  os << "seed,integral_forgetting,integral_unseen,bandwidth_forgetting,bandwidth_unseen,kl_forgetting_unseen\n";
  for (const auto& s : seeds) {
    if (!fs::exists(s / "kde_forgetting.csv")) continue;
    const KdeCurve f = read_kde_csv(s / "kde_forgetting.csv");
    const KdeCurve u = read_kde_csv(s / "kde_unseen.csv");
    os << s.filename().string().substr(5) << ',' << fmt_double(trapezoid(f.grid, f.density)) << ','
       << fmt_double(trapezoid(u.grid, u.density)) << ',' << fmt_double(f.bandwidth) << ',' << fmt_double(u.bandwidth)
       << ',' << fmt_double(grid_kl(f, u)) << '\n';
  }
}

} // namespace mixunlearn
