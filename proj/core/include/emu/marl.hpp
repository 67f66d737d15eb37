#pragma once

// Value-factorized multi-agent Q-learning with double-Q targets, episode
// replay, and pluggable reward augmentation backed by the episodic buffer.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emu/embedding.hpp"
#include "emu/env.hpp"
#include "emu/episodic_memory.hpp"
#include "emu/incentive.hpp"
#include "emu/numerics.hpp"

namespace emu {

enum class MixerKind { kVdn, kMonotonic };

std::string to_string(MixerKind kind);
// Accepts vdn | mono.
MixerKind parse_mixer(const std::string& text);

struct TrainConfig {
  double gamma = 0.99;
  double eps_start = 1.0;
  double eps_finish = 0.05;
  std::int64_t eps_anneal_steps = 200000;
  int target_interval = 200;  // train steps between target syncs
  int n_circle = 1;
  int batch_episodes = 32;
  int replay_capacity = 5000;
  double beta_c = 0.0;
  int agent_hidden = 64;
  int agent_layers = 2;
  int mixer_hidden = 32;
  double grad_clip = 10.0;
  MixerKind mixer = MixerKind::kVdn;
  AdamConfig adam;

  void validate() const;
  // Linear anneal from eps_start to eps_finish over eps_anneal_steps.
  double epsilon(std::int64_t t_env) const;
};

// One stored episode. Agent-major columns: obs column t * n_agents + i holds
// agent i's observation at timestep t, for t = 0..length.
struct Episode {
  int length = 0;
  int n_agents = 0;
  Matrix obs;
  Matrix states;                   // state_dim x (length + 1)
  std::vector<int> timesteps;      // length + 1
  std::vector<int> actions;        // length * n_agents
  std::vector<double> rewards;     // length
  std::vector<double> intrinsic;   // length; r^c per transition
  std::vector<std::uint8_t> terminal;  // length
  double episode_return = 0.0;
  bool desirable = false;
};

Episode to_episode(const Trajectory& trajectory, const Environment& env,
                   std::span<const double> intrinsic = {});

// Shared-parameter agent network over observation, one-hot agent id and
// one-hot previous action (all zeros at t = 0).
class AgentNet {
 public:
  AgentNet(int obs_dim, int n_agents, int n_actions, int hidden, int layers, Rng& rng);

  int obs_dim() const { return obs_dim_; }
  int n_agents() const { return n_agents_; }
  int n_actions() const { return n_actions_; }
  int input_dim() const { return obs_dim_ + n_agents_ + n_actions_; }

  // last_action < 0 means none.
  void write_input(const Vector& obs, int agent, int last_action, Eigen::Ref<Vector> out) const;
  Matrix inputs(const std::vector<Vector>& obs, std::span<const int> last_actions) const;
  // n_actions x n_agents
  Matrix q_values(const std::vector<Vector>& obs, std::span<const int> last_actions) const;

  Network& network() { return net_; }
  const Network& network() const { return net_; }

 private:
  int obs_dim_;
  int n_agents_;
  int n_actions_;
  Network net_;
};

// Per agent: uniform action with probability epsilon, otherwise the greedy
// action with ties to the lowest index.
JointAction select_actions(const AgentNet& agents, const std::vector<Vector>& obs,
                           std::span<const int> last_actions, double epsilon, Rng& rng);

int argmax_lowest(const Eigen::Ref<const Vector>& values);

struct MixTape {
  Matrix qs;
  Matrix raw_weights;  // monotonic: pre-abs weights
  ForwardTape w_tape;
  ForwardTape b_tape;
};

class Mixer {
 public:
  Mixer(MixerKind kind, int n_agents, int state_dim, int hidden, Rng& rng);

  MixerKind kind() const { return kind_; }
  int n_agents() const { return n_agents_; }

  // qs: n_agents x B chosen agent values; states: state_dim x B.
  // VDN: sum_i q_i. Monotonic: sum_i |w_i(s)| q_i + b(s).
  Vector mix(const Matrix& qs, const Matrix& states, MixTape* tape = nullptr) const;
  // Returns dL/dqs and accumulates parameter gradients into `grads`.
  Matrix backward(const MixTape& tape, const Vector& d_qtot, Mixer* grads) const;
  // Non-negative mixing weights, n_agents x B.
  Matrix weights(const Matrix& states) const;

  Network& weight_net() { return weight_net_; }
  Network& bias_net() { return bias_net_; }
  std::vector<std::span<double>> parameter_spans();
  void set_zero();

 private:
  MixerKind kind_;
  int n_agents_;
  Network weight_net_;
  Network bias_net_;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  // FIFO eviction once full.
  void add(Episode episode);
  // Uniform sample of n distinct episodes; requires n <= size().
  std::vector<const Episode*> sample(std::size_t n, Rng& rng) const;
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;
  const Episode& at(std::size_t i) const;

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Episode> episodes_;
};

struct LossReport {
  double loss = 0.0;
  std::size_t transitions = 0;
  double incentive_sum = 0.0;        // sum of reward-side augmentations
  double incentive_min = 0.0;
  std::size_t incentive_count = 0;   // transitions with nonzero augmentation
  std::size_t recall_hits = 0;
  double grad_norm = 0.0;
  // Per transition, per agent: action used for the bootstrap (-1 at terminal).
  std::vector<int> bootstrap_actions;
  std::vector<double> incentives;    // per transition
};

// Online and target agent nets plus mixers, trained on episode batches.
class Learner {
 public:
  Learner(const Environment& env, const TrainConfig& config, const IncentiveMode& incentive,
          std::uint64_t seed);

  const TrainConfig& config() const { return config_; }
  const IncentiveMode& incentive() const { return incentive_; }
  AgentNet& agents() { return agents_; }
  const AgentNet& agents() const { return agents_; }
  const AgentNet& target_agents() const { return target_agents_; }
  Mixer& mixer() { return mixer_; }
  const Mixer& mixer() const { return mixer_; }
  const Mixer& target_mixer() const { return target_mixer_; }

  // Mean over batch transitions of (y - Q_tot)^2 (+ lambda EC term) with
  // y = r + augmentation + beta_c r^c + gamma (1 - done) Q_tot^-(s', a*),
  // a* the online greedy joint action at s'. Leaves gradients in
  // gradient_spans() without stepping.
  LossReport compute_loss(std::span<const Episode* const> batch, EpisodicBuffer* memory,
                          const Embedder* embedder);
  // compute_loss, clip, optimizer step; syncs the target every
  // target_interval calls.
  LossReport train(std::span<const Episode* const> batch, EpisodicBuffer* memory,
                   const Embedder* embedder);
  void sync_target();

  std::int64_t train_steps() const { return train_steps_; }

  std::vector<std::span<double>> parameter_spans();
  std::vector<std::span<double>> gradient_spans();
  std::vector<std::span<double>> target_parameter_spans();

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  TrainConfig config_;
  IncentiveMode incentive_;
  int n_agents_;
  int n_actions_;
  int state_dim_;
  AgentNet agents_;
  AgentNet target_agents_;
  Network agent_grad_;
  Mixer mixer_;
  Mixer target_mixer_;
  Mixer mixer_grad_;
  Adam adam_;
  std::int64_t train_steps_ = 0;
};

struct RunConfig {
  TrainConfig train;
  EmbeddingConfig embedding;
  IncentiveMode incentive;
  DeltaPolicy delta;
  std::size_t memory_capacity = 100000;
  std::int64_t t_max = 200000;
  std::int64_t eval_interval = 2000;
  int eval_episodes = 30;

  void validate() const;
};

struct MetricsRow {
  std::uint64_t seed = 0;
  std::int64_t env_steps = 0;
  double test_win_rate = 0.0;
  double mean_test_return = 0.0;
  double mean_incentive = 0.0;  // mean augmentation since the previous row
  std::size_t buffer_size = 0;
  double embed_loss = 0.0;      // mean loss of the latest embedder update
  double wall_seconds = 0.0;
};

struct EvalResult {
  double win_rate = 0.0;
  double mean_return = 0.0;
};

// Greedy rollouts; an episode is a win when its return reaches the
// environment's threshold.
EvalResult evaluate_greedy(const Environment& env, const AgentNet& agents, int episodes, Rng& rng);

// Rolls out one epsilon-greedy episode. Fills per-step elliptical bonuses
// into `intrinsic` when `e3b` is non-null.
Trajectory rollout(const Environment& env, const AgentNet& agents, double epsilon, Rng& rng,
                   const Embedder* embedder = nullptr, E3BState* e3b = nullptr,
                   std::vector<double>* intrinsic = nullptr);

// Full training loop for one seed.
class Trainer {
 public:
  Trainer(const Environment& env, const RunConfig& config, std::uint64_t seed);

  // Runs until t_max env steps; `on_row` sees every metrics row as produced.
  std::vector<MetricsRow> run(const std::function<void(const MetricsRow&)>& on_row = {});

  const Learner& learner() const { return learner_; }
  Learner& learner() { return learner_; }
  const EpisodicBuffer& memory() const { return memory_; }
  // Seeds the episodic buffer, e.g. from a snapshot. Shapes must match.
  void set_memory(EpisodicBuffer memory);
  const Embedder& embedder() const { return embedder_; }
  std::int64_t env_steps() const { return t_env_; }

 private:
  void train_round();
  MetricsRow evaluate_row(std::int64_t grid_step);
  bool uses_memory() const;

  const Environment& env_;
  RunConfig config_;
  std::uint64_t seed_;
  Rng action_rng_;
  Rng replay_rng_;
  Rng embed_rng_;
  Rng eval_rng_;
  Learner learner_;
  Embedder embedder_;
  EpisodicBuffer memory_;
  ReplayBuffer replay_;
  std::int64_t t_env_ = 0;
  double incentive_sum_ = 0.0;
  std::size_t incentive_n_ = 0;
  double last_embed_loss_ = 0.0;
  std::chrono::steady_clock::time_point started_{};
};

std::vector<MetricsRow> train_run(const Environment& env, const RunConfig& config,
                                  std::uint64_t seed,
                                  const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace emu
