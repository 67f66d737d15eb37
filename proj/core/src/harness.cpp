#include "emu/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace emu {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

std::vector<Cell> read_cells(const json& arr) {
  std::vector<Cell> out;
  for (const auto& c : arr) {
    if (!c.is_array() || c.size() != 2) throw std::invalid_argument("config: cells are [x, y] pairs");
    out.push_back({c[0].get<int>(), c[1].get<int>()});
  }
  return out;
}

json cells_json(const std::vector<Cell>& cells) {
  json arr = json::array();
  for (const Cell& c : cells) arr.push_back({c.x, c.y});
  return arr;
}

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double round9(double v) { return std::stod(fmt9(v)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

void ExperimentSpec::validate() const {
  if (env != "gridworld") throw std::invalid_argument("unknown env: " + env);
  gridworld.validate();
  run.validate();
  if (seeds.empty()) throw std::invalid_argument("spec: need at least one seed");
  if (workers < 0) throw std::invalid_argument("spec: workers must be >= 0");
  for (std::int64_t h : horizons) {
    if (h <= 0 || h > run.t_max) throw std::invalid_argument("spec: horizons must lie in (0, t_max]");
  }
}

std::vector<std::int64_t> ExperimentSpec::resolved_horizons() const {
  if (!horizons.empty()) return horizons;
  std::vector<std::int64_t> out;
  if (run.t_max <= 0) return out;
  for (int q = 1; q <= 4; ++q) {
    const std::int64_t h = run.t_max * q / 4;
    if (h > 0 && (out.empty() || out.back() != h)) out.push_back(h);
  }
  return out;
}

ExperimentSpec parse_spec(const std::string& json_text, ExperimentSpec base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  ExperimentSpec s = std::move(base);
  try {
    reject_unknown(j, {"env", "embedding", "memory", "incentive", "train", "seeds", "t_max",
                       "eval_interval", "eval_episodes", "out", "horizons", "workers", "save_buffer",
                       "load_buffer", "memory_resolved_delta"},
                   "config");
    if (j.contains("env")) {
      const json& e = j["env"];
      reject_unknown(e, {"name", "width", "height", "penalty_p", "win_reward", "t_max",
                         "observe_other", "starts", "goals"},
                     "env");
      read(e, "name", s.env);
      read(e, "width", s.gridworld.width);
      read(e, "height", s.gridworld.height);
      read(e, "penalty_p", s.gridworld.penalty);
      read(e, "win_reward", s.gridworld.win_reward);
      read(e, "t_max", s.gridworld.t_max);
      read(e, "observe_other", s.gridworld.observe_other);
      if (e.contains("starts")) s.gridworld.starts = read_cells(e["starts"]);
      if (e.contains("goals")) s.gridworld.goals = read_cells(e["goals"]);
    }
    if (j.contains("embedding")) {
      const json& e = j["embedding"];
      reject_unknown(e, {"mode", "embed_dim", "lambda_rcon", "t_emb", "train_samples", "batch_size",
                         "hidden", "embnet_decoder_hidden", "lr"},
                     "embedding");
      auto& c = s.run.embedding;
      if (e.contains("mode")) c.mode = parse_embed_mode(e["mode"].get<std::string>());
      read(e, "embed_dim", c.embed_dim);
      read(e, "lambda_rcon", c.lambda_rcon);
      read(e, "t_emb", c.update_interval);
      read(e, "train_samples", c.train_samples);
      read(e, "batch_size", c.batch_size);
      read(e, "hidden", c.hidden);
      read(e, "embnet_decoder_hidden", c.embnet_decoder_hidden);
      read(e, "lr", c.adam.lr);
    }
    if (j.contains("memory")) {
      const json& m = j["memory"];
      reject_unknown(m, {"capacity", "delta"}, "memory");
      read(m, "capacity", s.run.memory_capacity);
      if (m.contains("delta")) {
        const json& d = m["delta"];
        if (d.is_string() && d.get<std::string>() == "auto") {
          s.run.delta = DeltaPolicy::automatic();
        } else if (d.is_number()) {
          s.run.delta = DeltaPolicy::fixed(d.get<double>());
        } else {
          throw std::invalid_argument("config: memory.delta must be a number or \"auto\"");
        }
      }
    }
    if (j.contains("incentive")) {
      const json& m = j["incentive"];
      reject_unknown(m, {"mode", "lambda", "lambda_e3b", "beta_e3b", "clamp"}, "incentive");
      auto& c = s.run.incentive;
      if (m.contains("mode")) c.kind = parse_incentive(m["mode"].get<std::string>());
      read(m, "lambda", c.lambda);
      read(m, "lambda_e3b", c.lambda_e3b);
      read(m, "beta_e3b", c.beta_e3b);
      read(m, "clamp", c.clamp);
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      reject_unknown(t, {"gamma", "eps_start", "eps_finish", "eps_anneal", "target_interval",
                         "n_circle", "batch_episodes", "replay_capacity", "beta_c", "agent_hidden",
                         "agent_layers", "mixer", "mixer_hidden", "grad_clip", "lr"},
                     "train");
      auto& c = s.run.train;
      read(t, "gamma", c.gamma);
      read(t, "eps_start", c.eps_start);
      read(t, "eps_finish", c.eps_finish);
      read(t, "eps_anneal", c.eps_anneal_steps);
      read(t, "target_interval", c.target_interval);
      read(t, "n_circle", c.n_circle);
      read(t, "batch_episodes", c.batch_episodes);
      read(t, "replay_capacity", c.replay_capacity);
      read(t, "beta_c", c.beta_c);
      read(t, "agent_hidden", c.agent_hidden);
      read(t, "agent_layers", c.agent_layers);
      if (t.contains("mixer")) c.mixer = parse_mixer(t["mixer"].get<std::string>());
      read(t, "mixer_hidden", c.mixer_hidden);
      read(t, "grad_clip", c.grad_clip);
      read(t, "lr", c.adam.lr);
    }
    read(j, "seeds", s.seeds);
    read(j, "t_max", s.run.t_max);
    read(j, "eval_interval", s.run.eval_interval);
    read(j, "eval_episodes", s.run.eval_episodes);
    read(j, "out", s.out_dir);
    read(j, "horizons", s.horizons);
    read(j, "workers", s.workers);
    read(j, "save_buffer", s.save_buffer);
    read(j, "load_buffer", s.load_buffer);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return s;
}

ExperimentSpec load_spec(const std::string& path, ExperimentSpec base) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str(), std::move(base));
}

std::string spec_to_json(const ExperimentSpec& s) {
  const auto& e = s.run.embedding;
  const auto& inc = s.run.incentive;
  const auto& t = s.run.train;
  json j;
  j["env"] = {{"name", s.env},
              {"width", s.gridworld.width},
              {"height", s.gridworld.height},
              {"penalty_p", s.gridworld.penalty},
              {"win_reward", s.gridworld.win_reward},
              {"t_max", s.gridworld.t_max},
              {"observe_other", s.gridworld.observe_other},
              {"starts", cells_json(s.gridworld.starts)},
              {"goals", cells_json(s.gridworld.goals)}};
  j["embedding"] = {{"mode", to_string(e.mode)},
                    {"embed_dim", e.embed_dim},
                    {"lambda_rcon", e.lambda_rcon},
                    {"t_emb", e.update_interval},
                    {"train_samples", e.train_samples},
                    {"batch_size", e.batch_size},
                    {"hidden", e.hidden},
                    {"embnet_decoder_hidden", e.embnet_decoder_hidden},
                    {"lr", e.adam.lr}};
  json delta = s.run.delta.kind == DeltaPolicy::Kind::kAuto ? json("auto") : json(s.run.delta.value);
  j["memory"] = {{"capacity", s.run.memory_capacity}, {"delta", delta}};
  j["memory_resolved_delta"] = s.run.delta.resolve(s.run.memory_capacity, e.embed_dim);
  j["incentive"] = {{"mode", to_string(inc.kind)},
                    {"lambda", inc.lambda},
                    {"lambda_e3b", inc.lambda_e3b},
                    {"beta_e3b", inc.beta_e3b},
                    {"clamp", inc.clamp}};
  j["train"] = {{"gamma", t.gamma},
                {"eps_start", t.eps_start},
                {"eps_finish", t.eps_finish},
                {"eps_anneal", t.eps_anneal_steps},
                {"target_interval", t.target_interval},
                {"n_circle", t.n_circle},
                {"batch_episodes", t.batch_episodes},
                {"replay_capacity", t.replay_capacity},
                {"beta_c", t.beta_c},
                {"agent_hidden", t.agent_hidden},
                {"agent_layers", t.agent_layers},
                {"mixer", to_string(t.mixer)},
                {"mixer_hidden", t.mixer_hidden},
                {"grad_clip", t.grad_clip},
                {"lr", t.adam.lr}};
  j["seeds"] = s.seeds;
  j["t_max"] = s.run.t_max;
  j["eval_interval"] = s.run.eval_interval;
  j["eval_episodes"] = s.run.eval_episodes;
  j["out"] = s.out_dir;
  j["horizons"] = s.resolved_horizons();
  j["workers"] = s.workers;
  j["save_buffer"] = s.save_buffer;
  j["load_buffer"] = s.load_buffer;
  return j.dump(2);
}

std::unique_ptr<Environment> make_environment(const ExperimentSpec& spec) {
  if (spec.env == "gridworld") return std::make_unique<Gridworld>(spec.gridworld);
  throw std::invalid_argument("unknown env: " + spec.env);
}

double overall_winrate(std::span<const WinRateCurve> curves, double horizon) {
  if (curves.empty()) throw std::invalid_argument("overall_winrate: no curves");
  if (!(horizon > 0.0)) throw std::invalid_argument("overall_winrate: horizon must be > 0");
  const auto& grid = curves.front().steps;
  if (grid.empty()) throw std::invalid_argument("overall_winrate: empty curve");
  if (grid.front() != 0) throw std::invalid_argument("overall_winrate: grid must start at 0");
  if (horizon > static_cast<double>(grid.back())) {
    throw std::invalid_argument("overall_winrate: horizon beyond last eval point");
  }
  double total = 0.0;
  for (const WinRateCurve& c : curves) {
    if (c.steps != grid || c.win_rate.size() != grid.size()) {
      throw std::invalid_argument("overall_winrate: curves do not share an eval grid");
    }
    double area = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
      const double x0 = static_cast<double>(grid[i - 1]);
      const double x1 = static_cast<double>(grid[i]);
      if (!(x1 > x0)) throw std::invalid_argument("overall_winrate: grid must be increasing");
      if (x0 >= horizon) break;
      const double y0 = c.win_rate[i - 1];
      double y1 = c.win_rate[i];
      double end = x1;
      if (x1 > horizon) {
        y1 = y0 + (y1 - y0) * (horizon - x0) / (x1 - x0);
        end = horizon;
      }
      area += 0.5 * (y0 + y1) * (end - x0);
    }
    total += area;
  }
  return total / horizon / static_cast<double>(curves.size());
}

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream out;
  out << r.seed << ',' << r.env_steps << ',' << fmt9(r.test_win_rate) << ','
      << fmt9(r.mean_test_return) << ',' << fmt9(r.mean_incentive) << ',' << r.buffer_size << ','
      << fmt9(r.embed_loss) << ',' << fmt9(r.wall_seconds);
  return out.str();
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error("unexpected metrics header in " + path);
  }
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 8 fields");
    try {
      MetricsRow r;
      r.seed = std::stoull(f[0]);
      r.env_steps = std::stoll(f[1]);
      r.test_win_rate = std::stod(f[2]);
      r.mean_test_return = std::stod(f[3]);
      r.mean_incentive = std::stod(f[4]);
      r.buffer_size = std::stoull(f[5]);
      r.embed_loss = std::stod(f[6]);
      r.wall_seconds = std::stod(f[7]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::vector<WinRateCurve> curves_by_seed(std::span<const MetricsRow> rows,
                                         std::vector<std::uint64_t>* seeds) {
  std::vector<std::uint64_t> order;
  std::map<std::uint64_t, WinRateCurve> by_seed;
  for (const MetricsRow& r : rows) {
    auto [it, fresh] = by_seed.try_emplace(r.seed);
    if (fresh) order.push_back(r.seed);
    it->second.steps.push_back(r.env_steps);
    it->second.win_rate.push_back(r.test_win_rate);
  }
  std::vector<WinRateCurve> out;
  for (std::uint64_t s : order) out.push_back(std::move(by_seed[s]));
  if (seeds) *seeds = order;
  return out;
}

std::string summarize(std::span<const MetricsRow> rows, std::span<const std::int64_t> horizons,
                      std::span<const SeedFailure> failures) {
  std::vector<MetricsRow> rounded(rows.begin(), rows.end());
  for (MetricsRow& r : rounded) {
    r.test_win_rate = round9(r.test_win_rate);
    r.mean_test_return = round9(r.mean_test_return);
  }
  std::vector<std::uint64_t> seeds;
  const auto curves = curves_by_seed(rounded, &seeds);

  json j;
  j["seeds"] = seeds;
  json failed = json::array();
  for (const SeedFailure& f : failures) failed.push_back({{"seed", f.seed}, {"error", f.message}});
  j["failed_seeds"] = failed;
  j["mu_w"] = json::object();
  if (curves.empty() || curves.front().steps.empty()) {
    j["final_env_steps"] = nullptr;
    j["final_win_rate"] = {{"mean", nullptr}, {"std", nullptr}};
    return j.dump(2);
  }
  std::vector<double> finals;
  for (const auto& c : curves) finals.push_back(c.win_rate.back());
  const double mean = std::accumulate(finals.begin(), finals.end(), 0.0) / finals.size();
  double var = 0.0;
  for (double f : finals) var += (f - mean) * (f - mean);
  var /= static_cast<double>(finals.size());
  j["final_env_steps"] = curves.front().steps.back();
  j["final_win_rate"] = {{"mean", mean}, {"std", std::sqrt(var)}};
  for (std::int64_t h : horizons) {
    j["mu_w"][std::to_string(h)] = overall_winrate(curves, static_cast<double>(h));
  }
  return j.dump(2);
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const fs::path out = spec.out_dir.empty() ? fs::path("runs/default") : fs::path(spec.out_dir);
  fs::create_directories(out / "seeds");
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.json", spec_to_json(spec) + "\n");

  std::optional<EpisodicBuffer> seed_buffer;
  if (!spec.load_buffer.empty()) seed_buffer.emplace(EpisodicBuffer::load(spec.load_buffer));

  const std::size_t n = spec.seeds.size();
  std::vector<std::optional<std::string>> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const std::uint64_t seed = spec.seeds[i];
      const fs::path seed_file = out / "seeds" / ("metrics_seed" + std::to_string(seed) + ".csv");
      try {
        const auto env = make_environment(spec);
        Trainer trainer(*env, spec.run, seed);
        if (seed_buffer) trainer.set_memory(*seed_buffer);
        std::ofstream csv(seed_file);
        if (!csv) throw std::runtime_error("cannot write " + seed_file.string());
        trainer.run([&](const MetricsRow& row) { csv << format_metrics_row(row) << '\n' << std::flush; });
        trainer.learner().save((out / "checkpoints" / ("seed" + std::to_string(seed) + ".json")).string());
        if (spec.save_buffer) {
          trainer.memory().save((out / ("buffer_seed" + std::to_string(seed) + ".bin")).string());
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  unsigned threads = spec.workers > 0 ? static_cast<unsigned>(spec.workers)
                                      : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(n));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  ExperimentResult result;
  std::ofstream merged(out / "metrics.csv");
  if (!merged) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
  merged << kMetricsHeader << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = spec.seeds[i];
    if (errors[i]) {
      result.failures.push_back({seed, *errors[i]});
      continue;
    }
    const fs::path seed_file = out / "seeds" / ("metrics_seed" + std::to_string(seed) + ".csv");
    std::ifstream in(seed_file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      merged << line << '\n';
    }
  }
  merged.close();
  result.rows = read_metrics((out / "metrics.csv").string());
  const auto horizons = spec.resolved_horizons();
  write_text(out / "summary.json", summarize(result.rows, horizons, result.failures) + "\n");
  result.exit_code = result.failures.size() == n ? 2 : 0;
  return result;
}

std::vector<CompareEntry> compare_runs(std::span<const std::string> run_dirs, double horizon) {
  if (run_dirs.size() < 2) throw std::invalid_argument("compare: need at least two runs");
  std::vector<CompareEntry> out;
  std::vector<std::int64_t> grid;
  for (const std::string& dir : run_dirs) {
    const auto rows = read_metrics((fs::path(dir) / "metrics.csv").string());
    const auto curves = curves_by_seed(rows);
    if (curves.empty()) throw std::runtime_error("compare: no metrics in " + dir);
    for (const auto& c : curves) {
      if (c.steps != curves.front().steps) throw std::runtime_error("compare: seeds disagree on eval grid in " + dir);
    }
    if (grid.empty()) {
      grid = curves.front().steps;
    } else if (grid != curves.front().steps) {
      throw std::runtime_error("compare: eval grids differ between runs");
    }
    CompareEntry e;
    e.run = dir;
    const double h = horizon > 0.0 ? horizon : static_cast<double>(grid.back());
    try {
      e.mu_w = overall_winrate(curves, h);
    } catch (const std::invalid_argument& err) {
      throw std::runtime_error(std::string("compare: ") + err.what());
    }
    double sum = 0.0;
    for (const auto& c : curves) sum += c.win_rate.back();
    e.final_win_rate = sum / static_cast<double>(curves.size());
    out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const CompareEntry& a, const CompareEntry& b) { return a.mu_w > b.mu_w; });
  return out;
}

}  // namespace emu
