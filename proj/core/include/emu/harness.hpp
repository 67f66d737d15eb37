#pragma once

// Experiment orchestration: spec parsing, multi-seed runs, metrics files and
// the normalized overall win-rate.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emu/env.hpp"
#include "emu/marl.hpp"

namespace emu {

struct ExperimentSpec {
  std::string env = "gridworld";
  GridworldConfig gridworld;
  RunConfig run;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir;
  std::vector<std::int64_t> horizons;  // empty: quarters of t_max
  int workers = 0;                     // 0: one per hardware thread
  bool save_buffer = false;
  std::string load_buffer;             // snapshot seeding every seed's buffer

  // Throws std::invalid_argument on the first violated constraint.
  void validate() const;
  std::vector<std::int64_t> resolved_horizons() const;
};

// Reads a JSON config on top of `base`. Unknown keys are rejected.
ExperimentSpec parse_spec(const std::string& json_text, ExperimentSpec base = {});
ExperimentSpec load_spec(const std::string& path, ExperimentSpec base = {});
std::string spec_to_json(const ExperimentSpec& spec);

std::unique_ptr<Environment> make_environment(const ExperimentSpec& spec);

struct WinRateCurve {
  std::vector<std::int64_t> steps;
  std::vector<double> win_rate;
};

// (1/t)(1/n) sum_i integral_0^t f_i(s) ds by the trapezoid rule over each
// curve's samples, interpolating linearly at t. Curves must share one grid
// starting at 0 with 0 < t <= last step. Throws std::invalid_argument
// otherwise or when `curves` is empty.
double overall_winrate(std::span<const WinRateCurve> curves, double horizon);

inline constexpr const char* kMetricsHeader =
    "seed,env_steps,test_win_rate,mean_test_return,mean_incentive,buffer_size,embed_loss,"
    "wall_seconds";

// One CSV line, floats at 9 significant digits.
std::string format_metrics_row(const MetricsRow& row);
// Parses metrics.csv; throws std::runtime_error on malformed input.
std::vector<MetricsRow> read_metrics(const std::string& path);
// Per-seed win-rate curves in first-appearance order of each seed.
std::vector<WinRateCurve> curves_by_seed(std::span<const MetricsRow> rows,
                                         std::vector<std::uint64_t>* seeds = nullptr);

struct SeedFailure {
  std::uint64_t seed = 0;
  std::string message;
};

struct ExperimentResult {
  std::vector<MetricsRow> rows;
  std::vector<SeedFailure> failures;
  int exit_code = 0;  // 0 ok, 2 every seed failed
};

// Runs every seed (in parallel workers), then writes metrics.csv,
// summary.json, config.json and one checkpoint per seed under out_dir.
ExperimentResult run_experiment(const ExperimentSpec& spec);

// summary.json content for the given rows; values use the rounded
// metrics.csv numbers so they can be recomputed from that file.
std::string summarize(std::span<const MetricsRow> rows, std::span<const std::int64_t> horizons,
                      std::span<const SeedFailure> failures = {});

struct CompareEntry {
  std::string run;
  double mu_w = 0.0;
  double final_win_rate = 0.0;  // seed mean at the last eval point
};

// Loads metrics.csv from each run directory and orders runs by mu_w
// (descending, stable). horizon <= 0 uses the last shared eval point.
// Throws std::runtime_error on mismatched eval grids.
std::vector<CompareEntry> compare_runs(std::span<const std::string> run_dirs, double horizon);

}  // namespace emu
