#pragma once

// Dec-POMDP environment interface and the two-agent cooperative gridworld.

#include <string>
#include <vector>

#include "emu/numerics.hpp"

namespace emu {

enum class Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
inline constexpr int kNumGridActions = 5;

using JointAction = std::vector<Action>;

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct EnvState {
  std::vector<Cell> positions;
  int t = 0;
  bool terminal = false;
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct Transition {
  EnvState state;
  JointAction action;
  double reward = 0.0;
  EnvState next_state;
  bool terminal = false;
  std::vector<Vector> observations;  // per agent, taken at `state`
};

struct Trajectory {
  std::vector<Transition> transitions;
  double episode_return = 0.0;  // undiscounted
  bool desirable = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual int num_agents() const = 0;
  virtual int num_actions() const = 0;
  virtual int obs_dim() const = 0;
  virtual int state_dim() const = 0;
  virtual int t_max() const = 0;
  // Episode return at or above which a trajectory counts as desirable.
  virtual double return_threshold() const = 0;

  virtual EnvState reset(Rng& rng) const = 0;
  // Throws std::logic_error when `state` is terminal.
  virtual Transition step(const EnvState& state, const JointAction& action) const = 0;
  virtual std::vector<Vector> observe(const EnvState& state) const = 0;
  virtual Vector global_state(const EnvState& state) const = 0;
};

struct GridworldConfig {
  int width = 7;
  int height = 7;
  std::vector<Cell> starts{{0, 0}, {6, 6}};
  std::vector<Cell> goals{{6, 6}, {0, 0}};
  double penalty = 2.0;
  double win_reward = 10.0;
  int t_max = 50;
  bool observe_other = false;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Agents must enter their goal cells on the same step. The episode ends as
// soon as any agent stands on its goal: all agents there pays `win_reward`,
// a strict subset pays -penalty. Off-grid moves are clamped.
class Gridworld final : public Environment {
 public:
  explicit Gridworld(GridworldConfig config);

  int num_agents() const override { return static_cast<int>(config_.starts.size()); }
  int num_actions() const override { return kNumGridActions; }
  int obs_dim() const override;
  int state_dim() const override { return 2 * num_agents() + 1; }
  int t_max() const override { return config_.t_max; }
  double return_threshold() const override { return config_.win_reward; }

  EnvState reset(Rng& rng) const override;
  Transition step(const EnvState& state, const JointAction& action) const override;
  // Own (x/width, y/height, t/t_max), optionally followed by the others' cells.
  std::vector<Vector> observe(const EnvState& state) const override;
  // (x_1/width, y_1/height, ..., t/t_max).
  Vector global_state(const EnvState& state) const override;

  const GridworldConfig& config() const { return config_; }

 private:
  GridworldConfig config_;
};

// True iff the undiscounted episode return reaches `return_threshold`.
bool label_desirability(const Trajectory& trajectory, double return_threshold);

Cell apply_move(Cell cell, Action action, int width, int height);
std::string to_string(Action action);

}  // namespace emu
