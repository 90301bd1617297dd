// Command-line front end: run <config>, compare <dirs...>, kde <run dir>.

#include "mixunlearn/errors.hpp"
#include "mixunlearn/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace mixunlearn;

namespace {

// Relative output paths land under $MIXUNLEARN_OUTPUT_ROOT when it is set.
fs::path resolve_output(const fs::path& p) {
  const char* root = std::getenv("MIXUNLEARN_OUTPUT_ROOT");
  if (!root || !*root || p.is_absolute()) return p;
  return fs::path(root) / p;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial mixup machine unlearning experiments"};
  app.require_subcommand(1);

  fs::path config_path;
  std::optional<fs::path> data_dir, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Train, unlearn and evaluate as described by a config file");
  run->add_option("config", config_path, "Experiment config (.ini)")->required()->check(CLI::ExistingFile);
  run->add_option("--data", data_dir, "Directory with the IDX files (overrides dataset.path)");
  run->add_option("--out", out_dir, "Output directory (overrides run.output)");
  run->add_option("--seed", seed, "Base seed (overrides run.seed)");
  run->add_option("--repeats", repeats, "Number of repeats (overrides run.repeats)")->check(CLI::PositiveNumber);
  run->add_flag("-q,--quiet", quiet, "Only print the final summary");

  std::vector<fs::path> compare_dirs;
  std::optional<fs::path> oracle;
  auto* compare = app.add_subcommand("compare", "Tabulate runs against the Retrain oracle");
  compare->add_option("dirs", compare_dirs, "Run directories")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--oracle", oracle, "Run directory to use as the oracle")->check(CLI::ExistingDirectory);

  fs::path kde_dir;
  auto* kde = app.add_subcommand("kde", "Summarize the exported loss densities of a run");
  kde->add_option("dir", kde_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ExperimentConfig cfg = load_config(config_path);
      if (data_dir) cfg.dataset.path = *data_dir;
      if (seed) cfg.seed = *seed;
      if (repeats) cfg.repeats = *repeats;
      cfg.output = resolve_output(out_dir ? *out_dir : cfg.output);
      cfg.validate();
      const ExperimentResult result = run_experiment(cfg, quiet ? nullptr : &std::cerr);
      std::cout << "wrote " << (result.directory / "metrics.csv").string() << '\n';
      for (const auto& s : result.seeds) {
        std::cout << "seed " << s.seed << ": ";
        if (!s.ok) {
          std::cout << "FAILED (" << s.error << ")\n";
          continue;
        }
        const auto cols = MetricReport::columns(s.report.setup);
        const auto vals = s.report.values();
        for (std::size_t k = 0; k < cols.size(); ++k) std::cout << cols[k] << '=' << vals[k] << (k + 1 < cols.size() ? " " : "\n");
      }
      return result.failures() == 0 ? 0 : 1;
    }
    if (*compare) {
      compare_runs(compare_dirs, oracle).print(std::cout);
      return 0;
    }
    if (*kde) {
      summarize_kde(kde_dir, std::cout);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
