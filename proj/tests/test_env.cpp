#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "emu/env.hpp"

using namespace emu;

namespace {

Transition go(const Gridworld& env, const EnvState& s, Action a0, Action a1) {
  return env.step(s, {a0, a1});
}

}  // namespace

TEST_CASE("reset places agents at the configured starts") {
  Gridworld env({});
  Rng rng(0);
  const EnvState s = env.reset(rng);
  CHECK(s.positions == std::vector<Cell>{{0, 0}, {6, 6}});
  CHECK(s.t == 0);
  CHECK_FALSE(s.terminal);
}

TEST_CASE("moves are clamped at the border") {
  CHECK(apply_move({0, 0}, Action::kLeft, 7, 7) == Cell{0, 0});
  CHECK(apply_move({0, 0}, Action::kDown, 7, 7) == Cell{0, 0});
  CHECK(apply_move({6, 6}, Action::kUp, 7, 7) == Cell{6, 6});
  CHECK(apply_move({3, 3}, Action::kRight, 7, 7) == Cell{4, 3});
  CHECK(apply_move({3, 3}, Action::kStay, 7, 7) == Cell{3, 3});
}

TEST_CASE("simultaneous arrival wins, a lone arrival pays the penalty") {
  GridworldConfig cfg;
  cfg.starts = {{5, 6}, {1, 0}};
  Gridworld env(cfg);
  Rng rng(0);
  const EnvState s = env.reset(rng);

  const Transition win = go(env, s, Action::kRight, Action::kLeft);
  CHECK(win.reward == 10.0);
  CHECK(win.terminal);

  const Transition lose = go(env, s, Action::kRight, Action::kStay);
  CHECK(lose.reward == -2.0);
  CHECK(lose.terminal);

  const Transition idle = go(env, s, Action::kStay, Action::kStay);
  CHECK(idle.reward == 0.0);
  CHECK_FALSE(idle.terminal);
  CHECK(idle.next_state.t == 1);
}

TEST_CASE("episode ends at the step limit") {
  GridworldConfig cfg;
  cfg.t_max = 3;
  Gridworld env(cfg);
  Rng rng(0);
  EnvState s = env.reset(rng);
  for (int i = 0; i < 3; ++i) {
    CHECK_FALSE(s.terminal);
    s = go(env, s, Action::kStay, Action::kStay).next_state;
  }
  CHECK(s.terminal);
  CHECK_THROWS_AS(go(env, s, Action::kStay, Action::kStay), std::logic_error);
}

TEST_CASE("observations hold own position and normalized time") {
  Gridworld env({});
  Rng rng(0);
  EnvState s = env.reset(rng);
  s = go(env, s, Action::kRight, Action::kDown).next_state;
  const auto obs = env.observe(s);
  REQUIRE(obs.size() == 2);
  REQUIRE(obs[0].size() == env.obs_dim());
  CHECK(obs[0](0) == doctest::Approx(1.0 / 7));
  CHECK(obs[0](1) == doctest::Approx(0.0));
  CHECK(obs[0](2) == doctest::Approx(1.0 / 50));
  CHECK(obs[1](1) == doctest::Approx(5.0 / 7));

  const Vector g = env.global_state(s);
  CHECK(g.size() == env.state_dim());
  CHECK(g(2) == doctest::Approx(6.0 / 7));
  CHECK(g(4) == doctest::Approx(1.0 / 50));

  GridworldConfig cfg;
  cfg.observe_other = true;
  Gridworld full(cfg);
  CHECK(full.observe(s)[0].size() == 5);
}

TEST_CASE("desirability follows the return threshold") {
  Trajectory traj;
  traj.transitions.resize(2);
  traj.transitions[0].reward = 0.0;
  traj.transitions[1].reward = 10.0;
  CHECK(label_desirability(traj, 10.0));
  traj.transitions[1].reward = -2.0;
  CHECK_FALSE(label_desirability(traj, 10.0));
}

TEST_CASE("invalid configurations are rejected") {
  GridworldConfig cfg;
  cfg.penalty = -1.0;
  CHECK_THROWS_AS(Gridworld{cfg}, std::invalid_argument);
  cfg = {};
  cfg.goals = {{6, 6}};
  CHECK_THROWS_AS(Gridworld{cfg}, std::invalid_argument);
  cfg = {};
  cfg.starts = {{9, 0}, {6, 6}};
  CHECK_THROWS_AS(Gridworld{cfg}, std::invalid_argument);
  cfg = {};
  cfg.t_max = 0;
  CHECK_THROWS_AS(Gridworld{cfg}, std::invalid_argument);
}
