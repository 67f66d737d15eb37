#pragma once

// Straight-line reference model of the episodic buffer for small instances
// (fewer than EpisodicBuffer::kStatsRefreshInterval inserts, so keys stay
// unnormalized). Every lookup is a linear scan and eviction picks the
// smallest recall stamp.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "emu/embedding.hpp"
#include "emu/episodic_memory.hpp"

namespace emu::test {

struct RefRecord {
  Vector x;
  double H = 0.0;
  Vector s;
  int t = 0;
  bool xi = false;
  std::int64_t n_call = 0;
  std::int64_t n_xi = 0;
  std::uint64_t last = 0;
  std::uint64_t id = 0;
};

class RefBuffer {
 public:
  RefBuffer(std::size_t capacity, double delta) : capacity_(capacity), delta_(delta) {}

  std::optional<std::size_t> nearest(const Vector& y) const {
    std::optional<std::size_t> best;
    double best_d = INFINITY;
    for (std::size_t i = 0; i < recs_.size(); ++i) {
      const double d = (recs_[i].x - y).norm();
      if (!best || d < best_d || (d == best_d && recs_[i].id < recs_[*best].id)) {
        best = i;
        best_d = d;
      }
    }
    return best;
  }

  std::optional<std::size_t> within(const Vector& y) const {
    auto i = nearest(y);
    if (i && (recs_[*i].x - y).norm() < delta_) return i;
    return std::nullopt;
  }

  void insert(const Vector& x, double H, const Vector& s, int t, bool xi) {
    RefRecord r;
    r.x = x;
    r.H = H;
    r.s = s;
    r.t = t;
    r.xi = xi;
    r.n_call = 1;
    r.n_xi = xi ? 1 : 0;
    r.last = ++clock_;
    r.id = next_id_++;
    recs_.push_back(r);
    while (recs_.size() > capacity_) {
      auto it = std::min_element(recs_.begin(), recs_.end(),
                                 [](const RefRecord& a, const RefRecord& b) { return a.last < b.last; });
      recs_.erase(it);
    }
  }

  void ec_update(const Vector& x, double R, const Vector& s, int t) {
    if (auto i = within(x)) {
      recs_[*i].H = std::max(recs_[*i].H, R);
      recs_[*i].n_call += 1;
      recs_[*i].last = ++clock_;
      return;
    }
    insert(x, R, s, t, false);
  }

  // Memory construction over states (columns) with precomputed keys.
  void construct(const Matrix& keys, const Matrix& states, const std::vector<int>& ts,
                 const std::vector<double>& rewards, bool desirable, double gamma) {
    double R = 0.0;
    for (Index t = states.cols() - 1; t >= 0; --t) {
      R = rewards[t] + gamma * R;
      const Vector x = keys.col(t);
      if (auto i = within(x)) {
        RefRecord& m = recs_[*i];
        m.n_call += 1;
        if (desirable) m.n_xi += 1;
        if (!m.xi && desirable) {
          m.xi = true;
          m.x = x;
          m.s = states.col(t);
          m.t = ts[t];
          m.H = R;
        } else if (m.H < R) {
          m.H = R;
        }
        m.last = ++clock_;
      } else {
        insert(x, R, states.col(t), ts[t], desirable);
      }
    }
  }

  std::optional<std::size_t> recall(const Vector& x) {
    auto i = within(x);
    if (i) recs_[*i].last = ++clock_;
    return i;
  }

  std::vector<RefRecord> sorted() const {
    auto out = recs_;
    std::sort(out.begin(), out.end(), [](const RefRecord& a, const RefRecord& b) { return a.id < b.id; });
    return out;
  }

  const std::vector<RefRecord>& records() const { return recs_; }

 private:
  std::size_t capacity_;
  double delta_;
  std::uint64_t clock_ = 0;
  std::uint64_t next_id_ = 0;
  std::vector<RefRecord> recs_;
};

// True when the buffer's live records equal the reference, field by field.
inline bool same_contents(const EpisodicBuffer& buffer, const RefBuffer& ref, std::string* why = nullptr) {
  const auto got = buffer.records();
  const auto want = ref.sorted();
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  if (got.size() != want.size()) return fail("size " + std::to_string(got.size()) + " vs " + std::to_string(want.size()));
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto& g = got[i];
    const auto& w = want[i];
    if (g.insertion_id != w.id) return fail("insertion id");
    if ((g.x - w.x).norm() != 0.0) return fail("key");
    if (g.H != w.H) return fail("H");
    if (g.s.size() != w.s.size() || (g.s - w.s).norm() != 0.0) return fail("state");
    if (g.t != w.t) return fail("timestep");
    if (g.desirable != w.xi) return fail("xi");
    if (g.n_call != w.n_call) return fail("n_call");
    if (g.n_xi != w.n_xi) return fail("n_xi");
    if (g.last_recalled != w.last) return fail("recall stamp");
  }
  return true;
}

// One randomized instance: interleaved construction, single-key updates and
// recalls against the reference, with the monotonicity properties checked
// after every operation. Returns false with a reason on the first mismatch.
inline bool run_buffer_instance(std::uint64_t seed, std::string* why) {
  Rng rng(seed);
  std::uniform_int_distribution<int> kdist(1, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const int k = kdist(rng);
  const int d = 3;
  const double delta = 0.2 + u(rng);
  const std::size_t capacity = 3 + static_cast<std::size_t>(u(rng) * 37);
  const double gamma = 0.9;

  EmbeddingConfig cfg;
  cfg.mode = EmbedMode::kRandom;
  cfg.embed_dim = k;
  Embedder embedder(cfg, d, 50, rng);
  Matrix P(k, d);
  for (Index i = 0; i < P.size(); ++i) P.data()[i] = g(rng);
  embedder.set_projection(P);

  EpisodicBuffer buffer(k, d, capacity, delta);
  RefBuffer ref(capacity, delta);

  // Coordinates from {0, 1, 3}: repeats are common but no state is the
  // midpoint of two others, so nearest-neighbour ties cannot occur.
  const double coords[] = {0.0, 1.0, 3.0};
  std::uniform_int_distribution<int> lattice(0, 2);
  auto random_state = [&] {
    Vector s(d);
    for (int i = 0; i < d; ++i) s(i) = coords[lattice(rng)];
    return s;
  };
  const double reward_values[] = {0.0, 0.0, 1.0, -2.0, 10.0};
  std::uniform_int_distribution<int> rdist(0, 4);
  std::uniform_int_distribution<int> len(1, 8);
  std::uniform_int_distribution<int> op(0, 2);

  struct Seen { double H; bool xi; };
  std::map<std::uint64_t, Seen> seen;
  auto fail = [&](const std::string& m) {
    if (why) *why = "seed " + std::to_string(seed) + ": " + m;
    return false;
  };

  for (int step = 0; step < 30; ++step) {
    const int kind = op(rng);
    if (kind == 0) {
      const int T = len(rng);
      Matrix states(d, T);
      std::vector<int> ts(T);
      std::vector<double> rewards(T);
      for (int t = 0; t < T; ++t) {
        states.col(t) = random_state();
        ts[t] = t;
        rewards[t] = reward_values[rdist(rng)];
      }
      const bool desirable = u(rng) < 0.4;
      buffer.construct_from_trajectory(states, ts, rewards, desirable, gamma, embedder);
      ref.construct(embedder.embed_batch(states, ts), states, ts, rewards, desirable, gamma);
    } else if (kind == 1) {
      const Vector s = random_state();
      const Vector x = embedder.embed(s, 0);
      const double R = 10.0 * u(rng) - 2.0;
      buffer.ec_update(x, R, s, 0);
      ref.ec_update(x, R, s, 0);
    } else {
      const Vector x = embedder.embed(random_state(), 0);
      const auto got = buffer.recall_key(x);
      const auto want = ref.recall(x);
      if (got.has_value() != want.has_value()) return fail("recall hit/miss differs");
      if (got && got->H != ref.records()[*want].H) return fail("recalled H differs");
    }
    {
      Vector q(k);
      for (int i = 0; i < k; ++i) q(i) = 2.0 * g(rng);
      const auto nn = buffer.nearest_neighbor(q);
      const auto want = ref.nearest(q);
      if (nn.has_value() != want.has_value()) return fail("nearest_neighbor emptiness differs");
      if (nn && buffer.record(nn->slot).insertion_id != ref.records()[*want].id) {
        return fail("nearest_neighbor picked a different record");
      }
    }
    std::string reason;
    if (!same_contents(buffer, ref, &reason)) return fail("after op " + std::to_string(step) + ": " + reason);

    for (const EpisodicRecord& r : buffer.records()) {
      if (r.n_xi > r.n_call) return fail("N_xi > N_call");
      auto it = seen.find(r.insertion_id);
      if (it != seen.end()) {
        if (it->second.xi && !r.desirable) return fail("xi went 1 -> 0");
        const bool shifted = !it->second.xi && r.desirable;
        if (!shifted && r.H < it->second.H) return fail("H decreased without a memory shift");
      }
      seen[r.insertion_id] = {r.H, r.desirable};
    }
  }
  return true;
}

}  // namespace emu::test
