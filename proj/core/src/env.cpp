#include "emu/env.hpp"

#include <algorithm>
#include <stdexcept>

namespace emu {
namespace {

bool inside(const Cell& c, int width, int height) {
  return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
}

}  // namespace

void GridworldConfig::validate() const {
  if (width < 1 || height < 1) throw std::invalid_argument("gridworld: width/height must be >= 1");
  if (t_max < 1) throw std::invalid_argument("gridworld: t_max must be >= 1");
  if (penalty < 0.0) throw std::invalid_argument("gridworld: penalty must be non-negative");
  if (starts.empty()) throw std::invalid_argument("gridworld: need at least one agent");
  if (starts.size() != goals.size()) {
    throw std::invalid_argument("gridworld: one goal per agent required");
  }
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (!inside(starts[i], width, height)) throw std::invalid_argument("gridworld: start outside grid");
    if (!inside(goals[i], width, height)) throw std::invalid_argument("gridworld: goal outside grid");
    if (starts[i] == goals[i]) throw std::invalid_argument("gridworld: start equals goal");
  }
}

Gridworld::Gridworld(GridworldConfig config) : config_(std::move(config)) { config_.validate(); }

int Gridworld::obs_dim() const {
  return config_.observe_other ? 2 * num_agents() + 1 : 3;
}

EnvState Gridworld::reset(Rng& /*rng*/) const {
  EnvState state;
  state.positions = config_.starts;
  state.t = 0;
  state.terminal = false;
  return state;
}

Cell apply_move(Cell cell, Action action, int width, int height) {
  switch (action) {
    case Action::kUp: cell.y += 1; break;
    case Action::kDown: cell.y -= 1; break;
    case Action::kLeft: cell.x -= 1; break;
    case Action::kRight: cell.x += 1; break;
    case Action::kStay: break;
  }
  cell.x = std::clamp(cell.x, 0, width - 1);
  cell.y = std::clamp(cell.y, 0, height - 1);
  return cell;
}

Transition Gridworld::step(const EnvState& state, const JointAction& action) const {
  if (state.terminal) throw std::logic_error("gridworld: step on terminal state");
  if (static_cast<int>(action.size()) != num_agents()) {
    throw std::invalid_argument("gridworld: joint action size != number of agents");
  }
  Transition tr;
  tr.state = state;
  tr.action = action;
  tr.observations = observe(state);

  EnvState next = state;
  int on_goal = 0;
  for (int i = 0; i < num_agents(); ++i) {
    next.positions[i] = apply_move(state.positions[i], action[i], config_.width, config_.height);
    if (next.positions[i] == config_.goals[i]) ++on_goal;
  }
  next.t = state.t + 1;
  if (on_goal == num_agents()) {
    tr.reward = config_.win_reward;
    next.terminal = true;
  } else if (on_goal > 0) {
    tr.reward = -config_.penalty;
    next.terminal = true;
  } else {
    tr.reward = 0.0;
    next.terminal = next.t >= config_.t_max;
  }
  tr.terminal = next.terminal;
  tr.next_state = std::move(next);
  return tr;
}

std::vector<Vector> Gridworld::observe(const EnvState& state) const {
  const double w = config_.width;
  const double h = config_.height;
  const double tn = static_cast<double>(state.t) / config_.t_max;
  std::vector<Vector> out;
  out.reserve(state.positions.size());
  for (int i = 0; i < num_agents(); ++i) {
    Vector o(obs_dim());
    o(0) = state.positions[i].x / w;
    o(1) = state.positions[i].y / h;
    if (config_.observe_other) {
      Index k = 2;
      for (int j = 0; j < num_agents(); ++j) {
        if (j == i) continue;
        o(k++) = state.positions[j].x / w;
        o(k++) = state.positions[j].y / h;
      }
    }
    o(obs_dim() - 1) = tn;
    out.push_back(std::move(o));
  }
  return out;
}

Vector Gridworld::global_state(const EnvState& state) const {
  Vector s(state_dim());
  for (int i = 0; i < num_agents(); ++i) {
    s(2 * i) = state.positions[i].x / static_cast<double>(config_.width);
    s(2 * i + 1) = state.positions[i].y / static_cast<double>(config_.height);
  }
  s(state_dim() - 1) = static_cast<double>(state.t) / config_.t_max;
  return s;
}

bool label_desirability(const Trajectory& trajectory, double return_threshold) {
  double total = 0.0;
  for (const auto& tr : trajectory.transitions) total += tr.reward;
  return total >= return_threshold;
}

std::string to_string(Action action) {
  switch (action) {
    case Action::kUp: return "up";
    case Action::kDown: return "down";
    case Action::kLeft: return "left";
    case Action::kRight: return "right";
    case Action::kStay: return "stay";
  }
  return "?";
}

}  // namespace emu
