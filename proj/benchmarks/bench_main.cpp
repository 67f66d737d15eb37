#include <benchmark/benchmark.h>

#include "emu/episodic_memory.hpp"
#include "emu/marl.hpp"

using namespace emu;

namespace {

EpisodicBuffer filled_buffer(int k, std::size_t n, double delta) {
  EpisodicBuffer buffer(k, 0, n, delta);
  Rng rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector x(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < k; ++d) x(d) = g(rng);
    buffer.ec_update(x, 0.0);
  }
  return buffer;
}

void BM_RecallIndexed(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const EpisodicBuffer buffer = filled_buffer(4, n, compute_delta(n, 4, 1.0));
  Rng rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector q(4);
  for (auto _ : state) {
    for (int d = 0; d < 4; ++d) q(d) = g(rng);
    benchmark::DoNotOptimize(buffer.nearest_within(q, buffer.delta()));
  }
}
BENCHMARK(BM_RecallIndexed)->Arg(1000)->Arg(10000)->Arg(100000);

void BM_RecallScan(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const EpisodicBuffer buffer = filled_buffer(4, n, compute_delta(n, 4, 1.0));
  Rng rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector q(4);
  for (auto _ : state) {
    for (int d = 0; d < 4; ++d) q(d) = g(rng);
    benchmark::DoNotOptimize(buffer.nearest_neighbor(q));
  }
}
BENCHMARK(BM_RecallScan)->Arg(1000)->Arg(10000)->Arg(100000);

void BM_DenseForwardBackward(benchmark::State& state) {
  Rng rng(3);
  const std::vector<Index> widths{14, 64, 64, 5};
  const Network net = make_mlp(widths, Activation::kRelu, Activation::kIdentity, rng);
  const Matrix x = Matrix::Random(14, state.range(0));
  const Matrix up = Matrix::Random(5, state.range(0));
  Network grads = zeros_like(net);
  for (auto _ : state) {
    ForwardTape tape;
    forward(net, x, &tape);
    benchmark::DoNotOptimize(backward(net, tape, up, &grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DenseForwardBackward)->Arg(64)->Arg(1024)->Arg(3200);

void BM_LearnerTrainStep(benchmark::State& state) {
  Gridworld env({});
  TrainConfig config;
  Learner learner(env, config, IncentiveMode{IncentiveKind::kNone}, 4);
  Rng rng(5);
  std::vector<Episode> episodes;
  for (int i = 0; i < config.batch_episodes; ++i) {
    episodes.push_back(to_episode(rollout(env, learner.agents(), 1.0, rng), env));
  }
  std::vector<const Episode*> batch;
  for (const auto& e : episodes) batch.push_back(&e);
  for (auto _ : state) benchmark::DoNotOptimize(learner.train(batch, nullptr, nullptr));
}
BENCHMARK(BM_LearnerTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
