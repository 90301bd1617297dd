#include "mixunlearn/evalkit.hpp"

#include "mixunlearn/errors.hpp"
#include "mixunlearn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mixunlearn {

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace

double accuracy(const Classifier& model, const Dataset& data) {
  if (data.empty()) throw InputError("accuracy: empty dataset");
  const Tensor probs = predict(model, data);
  const std::size_t l = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < data.size(); ++n)
    if (argmax_row(probs.values().subspan(n * l, l)) == static_cast<std::size_t>(data.labels[n])) ++correct;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> sample_losses(const Classifier& model, const Dataset& data) {
  if (data.empty()) throw InputError("sample_losses: empty dataset");
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(data.size());
  constexpr std::size_t kBatch = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kBatch) {
    const std::size_t end = std::min(data.size(), start + kBatch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto l = cross_entropy_per_sample(model.logits(data.batch(idx)), data.batch_labels(idx));
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

ClassLevelMetrics class_level_metrics(const Classifier& model, const Dataset& test, int forgotten_class) {
  std::vector<std::size_t> rest, forgotten;
  for (std::size_t n = 0; n < test.size(); ++n)
    (test.labels[n] == forgotten_class ? forgotten : rest).push_back(n);
  if (forgotten.empty())
    throw InputError("class_level_metrics: class " + std::to_string(forgotten_class) + " absent from the test set");
  if (rest.empty()) throw InputError("class_level_metrics: test set holds only the forgotten class");
  return {accuracy(model, test.subset(rest, "test_r")), accuracy(model, test.subset(forgotten, "test_f"))};
}

DataLevelMetrics data_level_metrics(const Classifier& model, const ForgetSplit& split, const Dataset& test) {
  if (split.retain.empty() || split.forget.empty() || test.empty())
    throw InputError("data_level_metrics: empty evaluation slice");
  return {accuracy(model, split.retain), accuracy(model, split.forget), accuracy(model, test)};
}

// ---------------------------------------------------------------------------
// Membership inference

namespace {

struct Halves {
  std::vector<double> calib, eval;
};

// The partition is keyed on the values themselves, so it does not depend on
// which side a set is passed as.
Halves split_halves(std::span<const double> losses, const AttackConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, hash_values(losses)));
  const auto order = permutation(losses.size(), rng);
  const auto n_cal = static_cast<std::size_t>(std::floor(cfg.calibration_fraction * static_cast<double>(losses.size())));
  Halves h;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_cal ? h.calib : h.eval).push_back(losses[order[k]]);
  return h;
}

double balanced_accuracy(const std::vector<double>& members, const std::vector<double>& nonmembers, double t) {
  const auto below = [t](const std::vector<double>& v) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [t](double x) { return x < t; })) /
           static_cast<double>(v.size());
  };
  const double tpr = below(members);
  const double tnr = 1.0 - below(nonmembers);
  return 50.0 * (tpr + tnr);
}

} // namespace

double threshold_attack_asr(std::span<const double> member_losses, std::span<const double> nonmember_losses,
                            const AttackConfig& cfg) {
  if (member_losses.empty() || nonmember_losses.empty()) throw InputError("membership inference: empty set");
  if (!(cfg.calibration_fraction > 0.0 && cfg.calibration_fraction < 1.0))
    throw ConfigError("membership inference: calibration_fraction must be in (0, 1)");
  const Halves m = split_halves(member_losses, cfg);
  const Halves nm = split_halves(nonmember_losses, cfg);
  if (m.calib.size() < cfg.min_calibration || nm.calib.size() < cfg.min_calibration)
    throw InputError("membership inference: calibration split has " + std::to_string(m.calib.size()) + " members and " +
                     std::to_string(nm.calib.size()) + " nonmembers, need >= " + std::to_string(cfg.min_calibration) +
                     " each");
  if (m.eval.empty() || nm.eval.empty()) throw InputError("membership inference: evaluation split is empty");

  std::vector<double> pooled(m.calib);
  pooled.insert(pooled.end(), nm.calib.begin(), nm.calib.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  std::vector<double> candidates{pooled.front() - 1.0};
  for (std::size_t k = 0; k + 1 < pooled.size(); ++k) candidates.push_back(0.5 * (pooled[k] + pooled[k + 1]));
  candidates.push_back(pooled.back() + 1.0);

  double best_t = candidates.front();
  double best_gap = -1.0;
  for (double t : candidates) {
    const double gap = std::abs(balanced_accuracy(m.calib, nm.calib, t) - 50.0);
    if (gap > best_gap + 1e-12) {
      best_gap = gap;
      best_t = t;
    }
  }
  return balanced_accuracy(m.eval, nm.eval, best_t);
}

double membership_inference_asr(const Classifier& model, const Dataset& members, const Dataset& nonmembers,
                                const AttackConfig& cfg) {
  if (members.empty() || nonmembers.empty()) throw InputError("membership inference: empty set");
  const auto lm = sample_losses(model, members);
  const auto ln = sample_losses(model, nonmembers);
  return threshold_attack_asr(lm, ln, cfg);
}

// ---------------------------------------------------------------------------
// KDE

double silverman_bandwidth(std::span<const double> values, double floor) {
  const std::size_t n = values.size();
  if (n < 2) return floor;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  return std::max(h, floor);
}

std::vector<double> loss_grid(std::span<const double> values, std::size_t points) {
  if (values.empty()) throw InputError("loss_grid: no values");
  if (points < 2) throw InputError("loss_grid: need at least 2 points");
  const double mx = *std::max_element(values.begin(), values.end());
  const double upper = std::max(1.1 * mx, 10.0 * kKdeBandwidthFloor);
  std::vector<double> grid(points);
  for (std::size_t k = 0; k < points; ++k) grid[k] = upper * static_cast<double>(k) / static_cast<double>(points - 1);
  return grid;
}

KdeCurve kde_curve(std::span<const double> values, const std::vector<double>& grid, std::string label) {
  if (values.empty()) throw InputError("kde_curve: no values");
  if (grid.size() < 2) throw InputError("kde_curve: grid too small");
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("kde_curve: values must be finite and non-negative");
  const double spacing = grid[1] - grid[0];
  KdeCurve c;
  c.grid = grid;
  c.label = std::move(label);
  c.bandwidth = silverman_bandwidth(values, std::max(kKdeBandwidthFloor, spacing));
  const double norm = 1.0 / (static_cast<double>(values.size()) * c.bandwidth * std::sqrt(2.0 * 3.14159265358979323846));
  c.density.assign(grid.size(), 0.0);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    double s = 0.0;
    for (double v : values) {
      const double a = (grid[k] - v) / c.bandwidth;
      const double b = (grid[k] + v) / c.bandwidth;
      s += std::exp(-0.5 * a * a) + std::exp(-0.5 * b * b);
    }
    c.density[k] = s * norm;
  }
  return c;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("trapezoid: grid and values differ in length");
  double s = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) s += 0.5 * (y[k] + y[k - 1]) * (x[k] - x[k - 1]);
  return s;
}

double grid_kl(const KdeCurve& p, const KdeCurve& q) {
  if (p.grid != q.grid) throw DimensionError("grid_kl: curves are on different grids");
  constexpr double kFloor = 1e-10;
  std::vector<double> pp(p.density), qq(q.density);
  for (double& v : pp) v = std::max(v, kFloor);
  for (double& v : qq) v = std::max(v, kFloor);
  const double zp = trapezoid(p.grid, pp), zq = trapezoid(q.grid, qq);
  std::vector<double> f(pp.size());
  for (std::size_t k = 0; k < f.size(); ++k) {
    const double a = pp[k] / zp, b = qq[k] / zq;
    f[k] = a * std::log(a / b);
  }
  return trapezoid(p.grid, f);
}

std::pair<KdeCurve, KdeCurve> loss_kde(const Classifier& model, const Dataset& forgetting, const Dataset& unseen) {
  if (forgetting.empty() || unseen.empty()) throw InputError("loss_kde: empty set");
  const auto lf = sample_losses(model, forgetting);
  const auto lu = sample_losses(model, unseen);
  std::vector<double> all(lf);
  all.insert(all.end(), lu.begin(), lu.end());
  const auto grid = loss_grid(all);
  return {kde_curve(lf, grid, "forgetting"), kde_curve(lu, grid, "unseen")};
}

void write_kde_csv(const std::filesystem::path& path, const KdeCurve& curve) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "# set=" << curve.label << " bandwidth=" << std::setprecision(17) << curve.bandwidth << '\n';
  os << "loss,density\n";
  for (std::size_t k = 0; k < curve.grid.size(); ++k) os << curve.grid[k] << ',' << curve.density[k] << '\n';
}

KdeCurve read_kde_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError(path.string() + ": cannot open");
  KdeCurve c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string tok;
      while (ss >> tok) {
        if (tok.rfind("set=", 0) == 0) c.label = tok.substr(4);
        if (tok.rfind("bandwidth=", 0) == 0) c.bandwidth = std::stod(tok.substr(10));
      }
      continue;
    }
    if (line == "loss,density") continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("no comma");
      c.grid.push_back(std::stod(line.substr(0, comma)));
      c.density.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed row '" + line + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<std::string> MetricReport::columns(SetupTag setup) {
  if (setup == SetupTag::class_level) return {"test_r", "test_f", "asr"};
  return {"train_r", "train_f", "test", "asr"};
}

std::vector<double> MetricReport::values() const {
  const auto get = [](const std::optional<double>& v, const char* name) {
    if (!v) throw ContractError(std::string("metric report is missing ") + name);
    return *v;
  };
  if (setup == SetupTag::class_level) return {get(test_r, "test_r"), get(test_f, "test_f"), get(asr, "asr")};
  return {get(train_r, "train_r"), get(train_f, "train_f"), get(test, "test"), get(asr, "asr")};
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw InputError("mean_std: no values");
  MeanStd r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

} // namespace mixunlearn
