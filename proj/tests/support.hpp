#pragma once

#include <cmath>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "emu/env.hpp"
#include "emu/marl.hpp"
#include "emu/numerics.hpp"

namespace emu::test {

// Two states, two actions, one agent, gamma-discounted:
//   s0: a0 -> s1 (r = 0), a1 -> end (r = 1)
//   s1: a0 -> end (r = 10), a1 -> s0 (r = 0)
// With gamma = 0.9: V*(s1) = 10, V*(s0) = 9.
class TwoStateMdp final : public Environment {
 public:
  int num_agents() const override { return 1; }
  int num_actions() const override { return 2; }
  int obs_dim() const override { return 2; }
  int state_dim() const override { return 2; }
  int t_max() const override { return 20; }
  double return_threshold() const override { return 10.0; }

  EnvState reset(Rng&) const override {
    EnvState s;
    s.positions = {{0, 0}};
    return s;
  }

  Transition step(const EnvState& state, const JointAction& action) const override {
    if (state.terminal) throw std::logic_error("mdp: terminal");
    Transition tr;
    tr.state = state;
    tr.action = action;
    tr.observations = observe(state);
    EnvState next = state;
    next.t = state.t + 1;
    const int s = state.positions[0].x;
    const int a = static_cast<int>(action[0]);
    if (s == 0 && a == 0) next.positions[0].x = 1;
    if (s == 0 && a == 1) { tr.reward = 1.0; next.terminal = true; }
    if (s == 1 && a == 0) { tr.reward = 10.0; next.terminal = true; }
    if (s == 1 && a == 1) next.positions[0].x = 0;
    if (next.t >= t_max()) next.terminal = true;
    tr.next_state = next;
    tr.terminal = next.terminal;
    return tr;
  }

  std::vector<Vector> observe(const EnvState& state) const override { return {global_state(state)}; }

  Vector global_state(const EnvState& state) const override {
    Vector v = Vector::Zero(2);
    v(state.positions[0].x) = 1.0;
    return v;
  }

  static constexpr double kGamma = 0.9;
  static double v_star(int s) { return s == 1 ? 10.0 : 9.0; }
};

// Episode visiting the given states with the given actions; the last
// transition terminates.
inline Episode make_episode(const Environment& env, const std::vector<int>& actions) {
  Rng rng(0);
  Trajectory traj;
  EnvState s = env.reset(rng);
  for (int a : actions) {
    Transition tr = env.step(s, JointAction(env.num_agents(), static_cast<Action>(a)));
    traj.episode_return += tr.reward;
    s = tr.next_state;
    traj.transitions.push_back(tr);
    if (s.terminal) break;
  }
  traj.desirable = label_desirability(traj, env.return_threshold());
  return to_episode(traj, env);
}

// Upper chi-square tail probability for observed counts against a uniform
// expectation.
inline double chi_square_uniform_p(const std::vector<long>& counts) {
  double total = 0.0;
  for (long c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (long c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<double> flat(const std::vector<std::span<double>>& blocks) {
  return flatten(blocks);
}

}  // namespace emu::test
