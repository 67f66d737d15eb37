#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "emu/harness.hpp"
#include "json.hpp"

using namespace emu;
namespace fs = std::filesystem;

namespace {

WinRateCurve curve(std::vector<std::int64_t> steps, std::vector<double> values) {
  return WinRateCurve{std::move(steps), std::move(values)};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("emu_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentSpec small_spec(const fs::path& out) {
  ExperimentSpec spec;
  spec.gridworld.t_max = 10;
  spec.run.train.agent_hidden = 8;
  spec.run.train.agent_layers = 1;
  spec.run.embedding.hidden = 8;
  spec.run.embedding.update_interval = 200;
  spec.run.t_max = 400;
  spec.run.eval_interval = 100;
  spec.run.eval_episodes = 4;
  spec.seeds = {3, 4};
  spec.workers = 2;
  spec.out_dir = out.string();
  return spec;
}

// Trapezoid over a shared grid, written out independently of the library.
double trapezoid_mean(const std::vector<std::vector<double>>& ys, const std::vector<double>& xs, double t) {
  double total = 0.0;
  for (const auto& y : ys) {
    double area = 0.0;
    for (std::size_t i = 1; i < xs.size() && xs[i - 1] < t; ++i) {
      const double x1 = std::min(xs[i], t);
      const double f1 = y[i - 1] + (y[i] - y[i - 1]) * (x1 - xs[i - 1]) / (xs[i] - xs[i - 1]);
      area += 0.5 * (y[i - 1] + f1) * (x1 - xs[i - 1]);
    }
    total += area / t;
  }
  return total / static_cast<double>(ys.size());
}

}  // namespace

TEST_CASE("overall win-rate unit values") {
  const std::vector<WinRateCurve> ones{curve({0, 10, 20}, {1, 1, 1}), curve({0, 10, 20}, {1, 1, 1})};
  CHECK(std::abs(overall_winrate(ones, 20) - 1.0) <= 1e-12);
  const std::vector<WinRateCurve> zeros{curve({0, 10, 20}, {0, 0, 0})};
  CHECK(std::abs(overall_winrate(zeros, 20)) <= 1e-12);
  const std::vector<WinRateCurve> ramp{curve({0, 5, 10}, {0, 0.5, 1})};
  CHECK(std::abs(overall_winrate(ramp, 10) - 0.5) <= 1e-12);
  CHECK(std::abs(overall_winrate(ramp, 5) - 0.25) <= 1e-12);
  const std::vector<WinRateCurve> step{curve({0, 10}, {0, 1})};
  CHECK(std::abs(overall_winrate(step, 4) - 0.2) <= 1e-12);
}

TEST_CASE("overall win-rate is monotone and refinement invariant") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::int64_t> steps{0};
    std::vector<double> lo{u(rng)}, hi;
    for (int i = 1; i <= 8; ++i) {
      steps.push_back(i * 100);
      lo.push_back(u(rng));
    }
    for (double v : lo) hi.push_back(std::min(1.0, v + 0.2 * u(rng)));
    const double t = 100 + 700 * u(rng);
    const std::vector<WinRateCurve> a{curve(steps, lo)}, b{curve(steps, hi)};
    CHECK(overall_winrate(b, t) >= overall_winrate(a, t));

    std::vector<std::int64_t> fine;
    std::vector<double> fine_vals;
    for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
      for (int k = 0; k < 4; ++k) {
        fine.push_back(steps[i] + 25 * k);
        fine_vals.push_back(lo[i] + (lo[i + 1] - lo[i]) * k / 4.0);
      }
    }
    fine.push_back(steps.back());
    fine_vals.push_back(lo.back());
    const std::vector<WinRateCurve> refined{curve(fine, fine_vals)};
    CHECK(std::abs(overall_winrate(refined, t) - overall_winrate(a, t)) <= 1e-12);
  }
}

TEST_CASE("overall win-rate rejects bad inputs") {
  CHECK_THROWS_AS(overall_winrate(std::span<const WinRateCurve>{}, 10), std::invalid_argument);
  const std::vector<WinRateCurve> c{curve({0, 10}, {0, 1})};
  CHECK_THROWS_AS(overall_winrate(c, 11), std::invalid_argument);
  CHECK_THROWS_AS(overall_winrate(c, 0), std::invalid_argument);
  const std::vector<WinRateCurve> late{curve({5, 10}, {0, 1})};
  CHECK_THROWS_AS(overall_winrate(late, 10), std::invalid_argument);
  const std::vector<WinRateCurve> mixed{curve({0, 10}, {0, 1}), curve({0, 5, 10}, {0, 1, 1})};
  CHECK_THROWS_AS(overall_winrate(mixed, 10), std::invalid_argument);
}

TEST_CASE("metrics rows format at nine significant digits and parse back") {
  MetricsRow row;
  row.seed = 7;
  row.env_steps = 1200;
  row.test_win_rate = 2.0 / 3.0;
  row.mean_incentive = 0.123456789123;
  row.buffer_size = 42;
  const std::string line = format_metrics_row(row);
  CHECK(line.rfind("7,1200,0.666666667,0,0.123456789,42,", 0) == 0);

  const fs::path dir = scratch("format");
  fs::create_directories(dir);
  std::ofstream(dir / "m.csv") << kMetricsHeader << "\n" << line << "\n";
  const auto rows = read_metrics((dir / "m.csv").string());
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].env_steps == 1200);
  CHECK(rows[0].test_win_rate == 0.666666667);
  std::ofstream(dir / "bad.csv") << "seed,oops\n1,2\n";
  CHECK_THROWS_AS(read_metrics((dir / "bad.csv").string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("a zero-step experiment writes a header-only metrics file") {
  const fs::path out = scratch("zero");
  ExperimentSpec spec = small_spec(out);
  spec.seeds = {0};
  spec.run.t_max = 0;
  const ExperimentResult r = run_experiment(spec);
  CHECK(r.exit_code == 0);
  CHECK(r.rows.empty());
  CHECK(fs::exists(out / "config.json"));
  CHECK(fs::exists(out / "summary.json"));
  CHECK(slurp(out / "metrics.csv") == std::string(kMetricsHeader) + "\n");
  fs::remove_all(out);
}

TEST_CASE("experiments are deterministic and summaries recompute from metrics.csv") {
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  const ExperimentResult ra = run_experiment(small_spec(a));
  const ExperimentResult rb = run_experiment(small_spec(b));
  REQUIRE(ra.exit_code == 0);
  REQUIRE(ra.rows.size() == 10);
  REQUIRE(ra.rows.size() == rb.rows.size());
  for (std::size_t i = 0; i < ra.rows.size(); ++i) {
    CHECK(ra.rows[i].seed == rb.rows[i].seed);
    CHECK(ra.rows[i].env_steps == rb.rows[i].env_steps);
    CHECK(ra.rows[i].test_win_rate == rb.rows[i].test_win_rate);
    CHECK(ra.rows[i].mean_test_return == rb.rows[i].mean_test_return);
    CHECK(ra.rows[i].buffer_size == rb.rows[i].buffer_size);
    CHECK(ra.rows[i].embed_loss == rb.rows[i].embed_loss);
  }

  std::ifstream csv(a / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == kMetricsHeader);
  std::map<std::uint64_t, std::vector<double>> by_seed;
  std::map<std::uint64_t, std::vector<double>> steps;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    REQUIRE(fields.size() == 8);
    const auto seed = std::stoull(fields[0]);
    const double step = std::stod(fields[1]);
    if (!steps[seed].empty()) CHECK(step > steps[seed].back());
    steps[seed].push_back(step);
    by_seed[seed].push_back(std::stod(fields[2]));
  }
  REQUIRE(by_seed.size() == 2);

  const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
  std::vector<std::vector<double>> ys;
  double mean_final = 0.0;
  for (const auto& [seed, ys_seed] : by_seed) {
    ys.push_back(ys_seed);
    mean_final += ys_seed.back() / 2.0;
  }
  const std::vector<double>& xs = steps.begin()->second;
  CHECK(std::abs(summary["final_win_rate"]["mean"].get<double>() - mean_final) <= 1e-9);
  for (const auto& [horizon, value] : summary["mu_w"].items()) {
    CHECK(std::abs(value.get<double>() - trapezoid_mean(ys, xs, std::stod(horizon))) <= 1e-9);
  }
  CHECK(summary["mu_w"].size() == 4);
  CHECK(fs::exists(a / "checkpoints" / "seed3.json"));

  const auto config = parse_spec(slurp(a / "config.json"));
  CHECK(config.run.t_max == 400);
  CHECK(config.seeds == std::vector<std::uint64_t>{3, 4});
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("compare orders runs by overall win-rate") {
  const fs::path root = scratch("compare");
  auto write_run = [&](const std::string& name, std::vector<double> wins, std::int64_t last = 200) {
    fs::create_directories(root / name);
    std::ofstream out(root / name / "metrics.csv");
    out << kMetricsHeader << "\n";
    const std::vector<std::int64_t> grid{0, 100, last};
    for (std::size_t i = 0; i < wins.size(); ++i) {
      MetricsRow r;
      r.env_steps = grid[i];
      r.test_win_rate = wins[i];
      out << format_metrics_row(r) << "\n";
    }
    return (root / name).string();
  };
  const std::string weak = write_run("weak", {0, 0.2, 0.4});
  const std::string strong = write_run("strong", {0, 0.6, 0.9});
  const std::string twin = write_run("twin", {0, 0.2, 0.4});
  const std::string odd = write_run("odd", {0, 0.2, 0.4}, 300);

  const std::vector<std::string> runs{weak, strong, twin};
  const auto ranked = compare_runs(runs, 0);
  REQUIRE(ranked.size() == 3);
  CHECK(ranked[0].run == strong);
  CHECK(ranked[1].run == weak);
  CHECK(ranked[2].run == twin);
  CHECK(ranked[1].mu_w == ranked[2].mu_w);
  CHECK(ranked[0].final_win_rate == doctest::Approx(0.9));

  const std::vector<std::string> mismatched{weak, odd};
  CHECK_THROWS_AS(compare_runs(mismatched, 0), std::runtime_error);
  fs::remove_all(root);
}

TEST_CASE("config parsing") {
  const ExperimentSpec spec = parse_spec(R"({"env": {"penalty_p": 3}, "memory": {"delta": "auto"},
    "incentive": {"mode": "ec", "lambda": 0.1}, "seeds": [1, 2], "t_max": 1000, "eval_interval": 100})");
  CHECK(spec.gridworld.penalty == 3.0);
  CHECK(spec.run.incentive.kind == IncentiveKind::kConventionalEc);
  CHECK(spec.seeds.size() == 2);
  CHECK(spec.resolved_horizons() == std::vector<std::int64_t>{250, 500, 750, 1000});
  CHECK_THROWS_AS(parse_spec(R"({"tmax": 5})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_spec(R"({"env": {"colour": 1}})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_spec(R"({"seeds": []})").validate(), std::invalid_argument);
  CHECK_THROWS_AS(parse_spec(R"({"t_max": 100, "eval_interval": 200})").validate(), std::invalid_argument);
  CHECK_THROWS(parse_spec("{not json"));
}

#ifdef EMU_CLI_PATH
TEST_CASE("command line exit codes") {
  const std::string cli = EMU_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status(cli + " delta -M 1000000 -k 4") == 0);
  CHECK(status(cli + " train --incentive bogus") == 1);
  CHECK(status(cli + " train --config /nonexistent/spec.json") == 1);
  CHECK(status(cli + " frobnicate") == 1);
  const fs::path out = scratch("cli");
  CHECK(status(cli + " train --t-max 0 --seeds 0 --out " + out.string()) == 0);
  CHECK(fs::exists(out / "metrics.csv"));
  fs::remove_all(out);
}
#endif
