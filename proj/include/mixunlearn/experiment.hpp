#pragma once

#include "mixunlearn/data.hpp"
#include "mixunlearn/engine.hpp"
#include "mixunlearn/evalkit.hpp"
#include "mixunlearn/models.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mixunlearn {

enum class DataSource { blobs, idx };

struct DatasetSpec {
  DataSource source = DataSource::blobs;
  // blobs
  int classes = 10;
  int per_class = 500;
  int test_per_class = 200;
  int dim = 8;
  double separation = 3.0;
  // idx: directory holding the four MNIST-named files
  std::filesystem::path path;
  std::size_t subset = 0;      // random training subset, 0 = all
  std::size_t test_subset = 0; // random test subset, 0 = all

  bool operator==(const DatasetSpec&) const = default;
};

struct SetupSpec {
  SetupTag kind = SetupTag::class_level;
  int forget_class = 0;
  std::vector<int> classes{5, 6, 7, 8, 9};
  double fraction = 0.4;

  bool operator==(const SetupSpec&) const = default;
};

struct ModelSpec {
  ArchKind arch = ArchKind::mlp;
  std::vector<std::size_t> hidden{64, 32}; // MLP only
  double lr = 0.05;
  int epochs = 20;
  std::size_t batch_size = 32;

  bool operator==(const ModelSpec&) const = default;
};

struct EvalSpec {
  double calibration_fraction = 0.5;
  bool export_features = true;

  bool operator==(const EvalSpec&) const = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  SetupSpec setup;
  ModelSpec model;
  Algorithm algorithm = Algorithm::mixunlearn;
  UnlearnConfig unlearn;
  EvalSpec eval;
  std::uint64_t seed = 0;
  int repeats = 1;
  std::filesystem::path output = "runs/experiment";

  void validate() const;
};

/// Sectioned key = value text ([dataset], [setup], [model], [unlearn], [run],
/// [eval]; '#' comments). Unknown keys, missing required keys
/// (dataset.source, unlearn.algorithm) and out-of-range values raise
/// ConfigError naming the key and line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Emits every field; parse_config(emit_config(c)) reproduces c exactly.
std::string emit_config(const ExperimentConfig& cfg);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricReport report;
};

struct ExperimentResult {
  std::filesystem::path directory;
  std::vector<SeedOutcome> seeds;
  std::size_t failures() const;
};

/// Trains f_D, splits, unlearns and evaluates once per repeat
/// (seed, seed + 1, ...). Writes per-seed artifacts under seed_<s>/ and an
/// aggregated metrics.csv. A failing repeat leaves a FAILED marker and its
/// partial artifacts; the others still run.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Loads or builds the (train, test) datasets for one repeat seed.
std::pair<Dataset, Dataset> build_datasets(const DatasetSpec& spec, std::uint64_t seed);
ForgetSplit build_split(const SetupSpec& spec, const Dataset& train, std::uint64_t seed);
Architecture build_architecture(const ModelSpec& spec, const Dataset& train);
/// Test samples the unlearned model never saw and that play the nonmember role.
Dataset unseen_set(const SetupSpec& spec, const Dataset& test);

struct ComparisonRow {
  std::string name;
  Algorithm algorithm = Algorithm::mixunlearn;
  std::vector<MeanStd> values;
  std::vector<double> deltas;
};

struct Comparison {
  SetupTag setup = SetupTag::class_level;
  std::vector<std::string> columns;
  std::string oracle;
  std::vector<ComparisonRow> rows;

  void print(std::ostream& os) const;
};

/// Side-by-side aggregate metrics with deltas against the oracle run: the
/// explicit `oracle` directory if given, else the one run with algorithm
/// retrain. Throws ConfigError when no oracle can be identified or the runs
/// use different setups.
Comparison compare_runs(const std::vector<std::filesystem::path>& dirs,
                        const std::optional<std::filesystem::path>& oracle = std::nullopt);

/// Summary of the exported loss densities of a run directory.
void summarize_kde(const std::filesystem::path& run_dir, std::ostream& os);

} // namespace mixunlearn
