// emu: train, evaluate and compare episodic-memory MARL runs.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "emu/harness.hpp"

namespace {

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::string> env;
  std::optional<std::string> embed;
  std::optional<int> embed_dim;
  std::optional<double> lambda_rcon;
  std::optional<int> t_emb;
  std::optional<std::string> delta;
  std::optional<std::size_t> capacity;
  std::optional<std::string> incentive;
  std::optional<double> lambda_ec;
  std::optional<double> beta_e3b;
  std::optional<double> lambda_e3b;
  bool no_clamp = false;
  std::optional<std::string> mixer;
  std::optional<double> gamma;
  std::optional<std::int64_t> eps_anneal;
  std::optional<int> target_interval;
  std::optional<int> n_circle;
  std::optional<int> batch_episodes;
  std::vector<std::uint64_t> seeds;
  std::optional<std::int64_t> t_max;
  std::optional<std::int64_t> eval_interval;
  std::optional<int> eval_episodes;
  std::optional<double> penalty;
  std::optional<int> workers;
  std::optional<std::string> out;
  bool save_buffer = false;
  std::optional<std::string> load_buffer;
};

void add_spec_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON config file; flags override its values");
  app->add_option("--env", o.env, "Environment (gridworld)");
  app->add_option("--penalty", o.penalty, "Gridworld miscoordination penalty p");
  app->add_option("--embed", o.embed, "State embedding: random|embnet|dcae");
  app->add_option("--embed-dim", o.embed_dim, "Embedding dimension k");
  app->add_option("--lambda-rcon", o.lambda_rcon, "Reconstruction loss weight");
  app->add_option("--t-emb", o.t_emb, "Env steps between embedder updates");
  app->add_option("--delta", o.delta, "Recall threshold: a number or auto");
  app->add_option("--capacity", o.capacity, "Episodic memory capacity");
  app->add_option("--incentive", o.incentive, "Reward augmentation: ei|ec|rec|e3b|none");
  app->add_option("--lambda-ec", o.lambda_ec, "Episodic-control weight for ec/rec");
  app->add_option("--beta-e3b", o.beta_e3b, "Elliptical bonus scale");
  app->add_option("--lambda-e3b", o.lambda_e3b, "Elliptical covariance regularizer");
  app->add_flag("--no-clamp", o.no_clamp, "Allow negative episodic incentives");
  app->add_option("--mixer", o.mixer, "Mixer: vdn|mono");
  app->add_option("--gamma", o.gamma, "Discount factor");
  app->add_option("--eps-anneal", o.eps_anneal, "Env steps to anneal epsilon from 1 to 0.05");
  app->add_option("--target-interval", o.target_interval, "Train steps between target syncs");
  app->add_option("--n-circle", o.n_circle, "Gradient steps per episode");
  app->add_option("--batch-episodes", o.batch_episodes, "Episodes per training batch");
  app->add_option("--seeds", o.seeds, "Seed list")->delimiter(',');
  app->add_option("--t-max", o.t_max, "Env steps per seed");
  app->add_option("--eval-interval", o.eval_interval, "Env steps between evaluations");
  app->add_option("--eval-episodes", o.eval_episodes, "Greedy episodes per evaluation");
  app->add_option("--workers", o.workers, "Parallel seed workers (0: all cores)");
  app->add_option("--out", o.out, "Output directory");
  app->add_flag("--save-buffer", o.save_buffer, "Write each seed's episodic buffer snapshot");
  app->add_option("--load-buffer", o.load_buffer, "Seed every run's episodic buffer from a snapshot");
}

emu::ExperimentSpec resolve_spec(const Overrides& o) {
  emu::ExperimentSpec s;
  if (o.config) s = emu::load_spec(*o.config, s);
  if (o.env) s.env = *o.env;
  if (o.penalty) s.gridworld.penalty = *o.penalty;
  if (o.embed) s.run.embedding.mode = emu::parse_embed_mode(*o.embed);
  if (o.embed_dim) s.run.embedding.embed_dim = *o.embed_dim;
  if (o.lambda_rcon) s.run.embedding.lambda_rcon = *o.lambda_rcon;
  if (o.t_emb) s.run.embedding.update_interval = *o.t_emb;
  if (o.delta) {
    if (*o.delta == "auto") {
      s.run.delta = emu::DeltaPolicy::automatic();
    } else {
      try {
        s.run.delta = emu::DeltaPolicy::fixed(std::stod(*o.delta));
      } catch (const std::logic_error&) {
        throw std::invalid_argument("--delta expects a number or auto, got " + *o.delta);
      }
    }
  }
  if (o.capacity) s.run.memory_capacity = *o.capacity;
  if (o.incentive) s.run.incentive.kind = emu::parse_incentive(*o.incentive);
  if (o.lambda_ec) s.run.incentive.lambda = *o.lambda_ec;
  if (o.beta_e3b) s.run.incentive.beta_e3b = *o.beta_e3b;
  if (o.lambda_e3b) s.run.incentive.lambda_e3b = *o.lambda_e3b;
  if (o.no_clamp) s.run.incentive.clamp = false;
  if (o.mixer) s.run.train.mixer = emu::parse_mixer(*o.mixer);
  if (o.gamma) s.run.train.gamma = *o.gamma;
  if (o.eps_anneal) s.run.train.eps_anneal_steps = *o.eps_anneal;
  if (o.target_interval) s.run.train.target_interval = *o.target_interval;
  if (o.n_circle) s.run.train.n_circle = *o.n_circle;
  if (o.batch_episodes) s.run.train.batch_episodes = *o.batch_episodes;
  if (!o.seeds.empty()) s.seeds = o.seeds;
  if (o.t_max) s.run.t_max = *o.t_max;
  if (o.eval_interval) s.run.eval_interval = *o.eval_interval;
  if (o.eval_episodes) s.run.eval_episodes = *o.eval_episodes;
  if (o.workers) s.workers = *o.workers;
  if (o.save_buffer) s.save_buffer = true;
  if (o.load_buffer) s.load_buffer = *o.load_buffer;
  if (o.out) s.out_dir = *o.out;
  if (s.out_dir.empty()) {
    const char* root = std::getenv("EMU_OUT");
    const std::string name = emu::to_string(s.run.incentive.kind) + "_" +
                             emu::to_string(s.run.embedding.mode);
    s.out_dir = (std::filesystem::path(root ? root : "runs") / name).string();
  }
  s.validate();
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Episodic-memory multi-agent Q-learning experiments"};
  app.require_subcommand(1);

  Overrides train_opts;
  CLI::App* train = app.add_subcommand("train", "Run every seed of an experiment");
  add_spec_flags(train, train_opts);

  Overrides eval_opts;
  std::string checkpoint;
  int eval_n = 30;
  std::uint64_t eval_seed = 0;
  CLI::App* eval = app.add_subcommand("eval", "Greedy evaluation of a saved learner");
  add_spec_flags(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "Learner checkpoint (checkpoints/seed<k>.json)")->required();
  eval->add_option("--episodes", eval_n, "Greedy episodes");
  eval->add_option("--seed", eval_seed, "Evaluation seed");

  double capacity = 1e6;
  int k = 4;
  double sigma = 1.0;
  CLI::App* delta = app.add_subcommand("delta", "Print the recall threshold for M, k, sigma");
  delta->add_option("-M,--capacity", capacity, "Memory capacity M");
  delta->add_option("-k,--embed-dim", k, "Embedding dimension k");
  delta->add_option("--sigma", sigma, "Normalized key spread sigma_y");

  std::vector<std::string> runs;
  double horizon = 0.0;
  CLI::App* compare = app.add_subcommand("compare", "Rank runs by normalized overall win-rate");
  compare->add_option("runs", runs, "Run directories containing metrics.csv")->required();
  compare->add_option("--horizon", horizon, "Horizon in env steps (default: last eval point)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*delta) {
      if (!(capacity >= 1.0)) throw std::invalid_argument("capacity must be >= 1");
      std::printf("%.9g\n", emu::compute_delta(static_cast<std::size_t>(capacity), k, sigma));
      return 0;
    }
    if (*train) {
      const emu::ExperimentSpec spec = resolve_spec(train_opts);
      const emu::ExperimentResult result = emu::run_experiment(spec);
      for (const auto& f : result.failures) {
        std::cerr << "seed " << f.seed << " failed: " << f.message << '\n';
      }
      std::cout << spec.out_dir << '\n';
      return result.exit_code;
    }
    if (*eval) {
      const emu::ExperimentSpec spec = resolve_spec(eval_opts);
      const auto env = emu::make_environment(spec);
      emu::Learner learner(*env, spec.run.train, spec.run.incentive, eval_seed);
      learner.load(checkpoint);
      emu::Rng rng = emu::derive_rng(eval_seed, 8);
      const emu::EvalResult r = emu::evaluate_greedy(*env, learner.agents(), eval_n, rng);
      std::printf("{\"episodes\": %d, \"win_rate\": %.9g, \"mean_return\": %.9g}\n", eval_n,
                  r.win_rate, r.mean_return);
      return 0;
    }
    if (*compare) {
      const auto ranked = emu::compare_runs(runs, horizon);
      std::printf("%-4s %-12s %-12s %s\n", "rank", "mu_w", "final_win", "run");
      for (std::size_t i = 0; i < ranked.size(); ++i) {
        std::printf("%-4zu %-12.6f %-12.6f %s\n", i + 1, ranked[i].mu_w, ranked[i].final_win_rate,
                    ranked[i].run.c_str());
      }
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
