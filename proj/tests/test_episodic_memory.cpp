#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "buffer_oracle.hpp"
#include "emu/episodic_memory.hpp"

using namespace emu;
using emu::test::RefBuffer;

namespace {

Vector v(std::initializer_list<double> xs) {
  Vector out(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

Embedder identity_embedder(int dim) {
  EmbeddingConfig cfg;
  cfg.mode = EmbedMode::kRandom;
  cfg.embed_dim = dim;
  Rng rng(0);
  Embedder e(cfg, dim, 50, rng);
  e.set_projection(Matrix::Identity(dim, dim));
  return e;
}

}  // namespace

TEST_CASE("delta rule values") {
  CHECK(compute_delta(1000000, 4, 1.0) == doctest::Approx(0.001296).epsilon(1e-12));
  CHECK(compute_delta(100000, 4, 1.0) == doctest::Approx(0.01296).epsilon(1e-12));
  CHECK(compute_delta(10, 1, 0.5) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(compute_delta(0, 4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(compute_delta(10, 4, 0.0), std::invalid_argument);
  CHECK(DeltaPolicy::automatic().resolve(1000000, 4) == doctest::Approx(0.001296));
  CHECK(DeltaPolicy::fixed(0.5).resolve(1000000, 4) == 0.5);
  CHECK_THROWS(DeltaPolicy::fixed(-1.0));
}

TEST_CASE("nearest neighbour matches a brute-force scan") {
  Rng rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + trial % 5;
    EpisodicBuffer buffer(k, 0, 1000, 0.3);
    RefBuffer ref(1000, 0.3);
    std::vector<Vector> keys;
    for (int i = 0; i < 40; ++i) {
      Vector x(k);
      for (int d = 0; d < k; ++d) x(d) = g(rng);
      if (i % 7 == 3) x = keys[i / 2];
      keys.push_back(x);
      buffer.ec_update(x, 0.0);
      ref.ec_update(x, 0.0, Vector(), 0);
    }
    for (int q = 0; q < 20; ++q) {
      Vector y(k);
      for (int d = 0; d < k; ++d) y(d) = g(rng);
      const auto got = buffer.nearest_neighbor(y);
      const auto want = ref.nearest(y);
      REQUIRE(got.has_value());
      CHECK(buffer.record(got->slot).insertion_id == ref.records()[*want].id);
      const auto within = buffer.nearest_within(y, 0.3);
      const auto within_ref = ref.within(y);
      CHECK(within.has_value() == within_ref.has_value());
      if (within) CHECK(buffer.record(within->slot).insertion_id == ref.records()[*within_ref].id);
    }
  }
}

TEST_CASE("matching is strict and ties go to the older record") {
  EpisodicBuffer buffer(1, 0, 10, 0.5);
  buffer.ec_update(v({0.0}), 1.0);
  buffer.ec_update(v({1.0}), 2.0);
  CHECK(buffer.size() == 2);
  auto hit = buffer.nearest_within(v({0.5}), 0.5);
  CHECK_FALSE(hit.has_value());
  hit = buffer.nearest_within(v({0.5}), 0.6);
  REQUIRE(hit.has_value());
  CHECK(buffer.record(hit->slot).insertion_id == 0);
}

TEST_CASE("ec_update raises H to the max and inserts on a miss") {
  EpisodicBuffer buffer(2, 1, 10, 0.1);
  buffer.ec_update(v({0.0, 0.0}), 1.0, v({3.0}), 4);
  buffer.ec_update(v({0.01, 0.0}), 5.0);
  buffer.ec_update(v({0.0, 0.01}), 2.0);
  REQUIRE(buffer.size() == 1);
  auto r = buffer.records().front();
  CHECK(r.H == 5.0);
  CHECK(r.n_call == 3);
  CHECK(r.n_xi == 0);
  CHECK_FALSE(r.desirable);
  CHECK(r.s(0) == 3.0);
  CHECK(r.t == 4);
  buffer.ec_update(v({1.0, 1.0}), -1.0);
  CHECK(buffer.size() == 2);
}

TEST_CASE("construction propagates desirability and shifts memories") {
  const Embedder e = identity_embedder(1);
  EpisodicBuffer buffer(1, 1, 100, 0.25);

  Matrix states(1, 3);
  states << 0.0, 1.0, 2.0;
  const std::vector<int> ts{0, 1, 2};
  buffer.construct_from_trajectory(states, ts, std::vector<double>{0.0, 0.0, -2.0}, false, 0.5, e);
  REQUIRE(buffer.size() == 3);
  auto recs = buffer.records();
  CHECK(recs[0].s(0) == 2.0);
  CHECK(recs[0].H == -2.0);
  CHECK(recs[1].H == -1.0);
  CHECK(recs[2].H == -0.5);

  Matrix near(1, 3);
  near << 0.1, 1.1, 3.0;
  buffer.construct_from_trajectory(near, ts, std::vector<double>{0.0, 0.0, 10.0}, true, 0.5, e);
  recs = buffer.records();
  REQUIRE(recs.size() == 4);
  CHECK(recs[3].s(0) == 3.0);
  CHECK(recs[3].desirable);
  CHECK(recs[3].n_call == 1);
  CHECK(recs[3].n_xi == 1);
  for (int i : {1, 2}) {
    CHECK(recs[i].desirable);
    CHECK(recs[i].n_call == 2);
    CHECK(recs[i].n_xi == 1);
  }
  CHECK(recs[2].s(0) == doctest::Approx(0.1));
  CHECK(recs[2].x(0) == doctest::Approx(0.1));
  CHECK(recs[2].H == doctest::Approx(2.5));
  CHECK(recs[1].s(0) == doctest::Approx(1.1));
  CHECK(recs[1].H == doctest::Approx(5.0));

  buffer.construct_from_trajectory(states.leftCols(1), std::vector<int>{0}, std::vector<double>{-5.0}, false, 0.5, e);
  recs = buffer.records();
  CHECK(recs[2].desirable);
  CHECK(recs[2].n_call == 3);
  CHECK(recs[2].n_xi == 1);
  CHECK(recs[2].H == doctest::Approx(2.5));
}

TEST_CASE("eviction follows least-recent recall") {
  EpisodicBuffer buffer(1, 0, 5, 0.1);
  RefBuffer ref(5, 0.1);
  for (int i = 0; i < 10; ++i) {
    buffer.ec_update(v({static_cast<double>(i)}), i);
    ref.ec_update(v({static_cast<double>(i)}), i, Vector(), 0);
    if (i % 3 == 1) {
      const Vector q = v({static_cast<double>(i / 2)});
      const bool hit = buffer.recall_key(q).has_value();
      CHECK(hit == ref.recall(q).has_value());
    }
    CHECK(buffer.size() <= 5);
    std::string why;
    CHECK_MESSAGE(emu::test::same_contents(buffer, ref, &why), why);
  }

  EpisodicBuffer fresh(1, 0, 3, 0.1);
  for (int i = 0; i < 4; ++i) fresh.ec_update(v({static_cast<double>(i)}), 0.0);
  const auto recs = fresh.records();
  REQUIRE(recs.size() == 3);
  CHECK(recs.front().insertion_id == 1);
}

TEST_CASE("randomized buffer operations match the reference model") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::string why;
    CHECK_MESSAGE(emu::test::run_buffer_instance(seed, &why), why);
  }
}

TEST_CASE("cell index agrees with the exhaustive scan") {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k : {1, 2, 4, 8}) {
    EpisodicBuffer buffer(k, 0, 5000, 0.2);
    for (int i = 0; i < 500; ++i) {
      Vector x(k);
      for (int d = 0; d < k; ++d) x(d) = u(rng);
      buffer.ec_update(x, 0.0);
    }
    for (int q = 0; q < 300; ++q) {
      Vector y(k);
      for (int d = 0; d < k; ++d) y(d) = u(rng);
      const auto fast = buffer.nearest_within(y, buffer.delta());
      const auto nn = buffer.nearest_neighbor(y);
      const bool expect = nn && nn->distance < buffer.delta();
      CHECK(fast.has_value() == expect);
      if (fast && expect) CHECK(fast->slot == nn->slot);
    }
  }
}

TEST_CASE("statistics normalize keys after a refresh") {
  EpisodicBuffer buffer(2, 0, 5000, 1e-9);
  Rng rng(4);
  std::normal_distribution<double> g(3.0, 2.0);
  for (std::size_t i = 0; i < EpisodicBuffer::kStatsRefreshInterval; ++i) {
    buffer.ec_update(v({g(rng), 10.0}), 0.0);
  }
  CHECK(buffer.mean()(0) == doctest::Approx(3.0).epsilon(0.1));
  CHECK(buffer.stddev()(0) == doctest::Approx(2.0).epsilon(0.1));
  CHECK(buffer.stddev()(1) == EpisodicBuffer::kMinStd);
  for (const auto& r : buffer.records()) {
    CHECK(r.y(0) == doctest::Approx((r.x(0) - buffer.mean()(0)) / buffer.stddev()(0)));
  }
}

TEST_CASE("rekey_all re-embeds every stored state") {
  EmbeddingConfig cfg;
  cfg.mode = EmbedMode::kRandom;
  cfg.embed_dim = 2;
  Rng rng(5);
  Embedder a(cfg, 2, 50, rng);
  Embedder b(cfg, 2, 50, rng);
  EpisodicBuffer buffer(2, 2, 100, 0.01);
  Matrix states = Matrix::Random(2, 20);
  std::vector<int> ts(20, 0);
  buffer.construct_from_trajectory(states, ts, std::vector<double>(20, 1.0), false, 0.9, a);
  buffer.rekey_all(b);
  for (const auto& r : buffer.records()) {
    CHECK((r.x - b.embed(r.s, r.t)).norm() < 1e-12);
    CHECK((r.y - buffer.normalize(r.x)).norm() < 1e-12);
  }
}

TEST_CASE("snapshot round trip preserves records and recall order") {
  const auto path = (std::filesystem::temp_directory_path() / "emu_buffer_roundtrip.bin").string();
  std::string why;
  EpisodicBuffer buffer(2, 1, 4, 0.2);
  for (int i = 0; i < 6; ++i) buffer.ec_update(v({0.5 * i, 0.0}), i, v({static_cast<double>(i)}), i);
  buffer.recall_key(v({1.0, 0.0}));
  buffer.save(path);
  EpisodicBuffer loaded = EpisodicBuffer::load(path);
  std::remove(path.c_str());
  CHECK(loaded.size() == buffer.size());
  CHECK(loaded.delta() == buffer.delta());
  const auto a = buffer.records();
  const auto b = loaded.records();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].insertion_id == b[i].insertion_id);
    CHECK(a[i].H == b[i].H);
    CHECK(a[i].last_recalled == b[i].last_recalled);
    CHECK((a[i].x - b[i].x).norm() == 0.0);
  }
  buffer.ec_update(v({9.0, 9.0}), 0.0);
  loaded.ec_update(v({9.0, 9.0}), 0.0);
  CHECK(buffer.records().front().insertion_id == loaded.records().front().insertion_id);

  CHECK_THROWS(EpisodicBuffer::load(path));
}
