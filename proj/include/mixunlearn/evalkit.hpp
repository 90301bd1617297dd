#pragma once

#include "mixunlearn/data.hpp"
#include "mixunlearn/models.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mixunlearn {

/// Percentage of argmax-correct predictions. Empty data is an error.
double accuracy(const Classifier& model, const Dataset& data);
/// Per-sample cross-entropy of the model on its labels.
std::vector<double> sample_losses(const Classifier& model, const Dataset& data);

struct ClassLevelMetrics {
  double test_r = 0.0;
  double test_f = 0.0;
};
ClassLevelMetrics class_level_metrics(const Classifier& model, const Dataset& test, int forgotten_class);

struct DataLevelMetrics {
  double train_r = 0.0;
  double train_f = 0.0;
  double test = 0.0;
};
DataLevelMetrics data_level_metrics(const Classifier& model, const ForgetSplit& split, const Dataset& test);

// --- membership inference ----------------------------------------------------

struct AttackConfig {
  /// Fraction of each side used to pick the threshold; the rest is scored.
  double calibration_fraction = 0.5;
  std::size_t min_calibration = 20;
  std::uint64_t seed = 0;
};

/// Loss-threshold attack: "member" iff loss < t. t is chosen on the
/// calibration halves to make the balanced accuracy as far from 50 as
/// possible, then the balanced accuracy on the held-out halves is returned
/// (percent). Swapping the two sides reflects the result about 50.
double threshold_attack_asr(std::span<const double> member_losses, std::span<const double> nonmember_losses,
                            const AttackConfig& cfg = {});
double membership_inference_asr(const Classifier& model, const Dataset& members, const Dataset& nonmembers,
                                 const AttackConfig& cfg = {});

// --- loss densities --------------------------------------------------------------

inline constexpr std::size_t kKdeGridPoints = 256;
inline constexpr double kKdeBandwidthFloor = 1e-3;

struct KdeCurve {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
  std::string label;
};

/// Silverman's rule 0.9 min(sd, IQR/1.34) n^(-1/5), floored.
double silverman_bandwidth(std::span<const double> values, double floor = kKdeBandwidthFloor);
/// Evenly spaced grid on [0, 1.1 max(values)] (a small positive range when all values are ~0).
std::vector<double> loss_grid(std::span<const double> values, std::size_t points = kKdeGridPoints);
/// Gaussian KDE of non-negative values, reflected at 0 so no mass leaks below the grid.
KdeCurve kde_curve(std::span<const double> values, const std::vector<double>& grid, std::string label);

double trapezoid(std::span<const double> x, std::span<const double> y);
/// KL(p || q) of two curves on the same grid, each renormalized, with a small floor.
double grid_kl(const KdeCurve& p, const KdeCurve& q);

/// Densities of the model's losses on the forgetting and unseen sets on a shared grid.
std::pair<KdeCurve, KdeCurve> loss_kde(const Classifier& model, const Dataset& forgetting, const Dataset& unseen);

void write_kde_csv(const std::filesystem::path& path, const KdeCurve& curve);
KdeCurve read_kde_csv(const std::filesystem::path& path);

// --- reports ----------------------------------------------------------------------

/// Metrics of one run; which fields are set depends on the setup.
struct MetricReport {
  SetupTag setup = SetupTag::class_level;
  std::optional<double> test_r, test_f, train_r, train_f, test, asr;

  /// Column names for a setup, in report order.
  static std::vector<std::string> columns(SetupTag setup);
  std::vector<double> values() const;
};

struct MeanStd {
  double mean = 0.0;
  std::optional<double> std; // sample std, absent below two values
};
MeanStd mean_std(std::span<const double> values);

} // namespace mixunlearn
