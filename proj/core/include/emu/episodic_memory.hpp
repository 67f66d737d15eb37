#pragma once

// Episodic buffer: best-return memory keyed by state embeddings, with
// desirability flags and recall counters per record.
//
// Keys are compared in normalized space y = (x - mu_x) / sigma_x. A match is
// the nearest record with ||y_hat - y|| < delta; ties go to the record that
// was inserted first. Records are evicted least-recently-recalled first.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "emu/embedding.hpp"
#include "emu/env.hpp"
#include "emu/numerics.hpp"

namespace emu {

struct EpisodicRecord {
  Vector x;                  // embedding key
  Vector y;                  // normalized key
  double H = 0.0;            // best discounted return seen from this state
  Vector s;                  // raw global state
  int t = 0;                 // episode timestep of s
  bool desirable = false;    // xi
  std::int64_t n_call = 0;
  std::int64_t n_xi = 0;
  std::uint64_t last_recalled = 0;
  std::uint64_t insertion_id = 0;
};

struct Neighbor {
  std::size_t slot = 0;
  double distance = 0.0;
};

struct RecallResult {
  double H = 0.0;
  bool desirable = false;
  std::int64_t n_call = 0;
  std::int64_t n_xi = 0;
  double distance = 0.0;
  std::size_t slot = 0;
};

// delta = (2 * 3 * sigma_y)^k / M: a +-3 sigma box split evenly among M
// memories. Throws on non-positive inputs.
double compute_delta(std::size_t capacity, int embed_dim, double sigma_y);

struct DeltaPolicy {
  enum class Kind { kFixed, kAuto };
  Kind kind = Kind::kAuto;
  double value = 0.0;  // used when kind == kFixed

  static DeltaPolicy fixed(double delta);
  static DeltaPolicy automatic() { return {}; }
  // Auto mode evaluates compute_delta with sigma_y = 1.
  double resolve(std::size_t capacity, int embed_dim) const;
};

class EpisodicBuffer {
 public:
  static constexpr double kMinStd = 1e-6;
  static constexpr std::size_t kStatsRefreshInterval = 1000;

  EpisodicBuffer(int embed_dim, int state_dim, std::size_t capacity, double delta);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  int embed_dim() const { return embed_dim_; }
  int state_dim() const { return state_dim_; }
  double delta() const { return delta_; }
  void set_delta(double delta);

  const Vector& mean() const { return mean_; }
  const Vector& stddev() const { return std_; }
  Vector normalize(const Vector& x) const;
  // Recomputes mu_x, sigma_x over all records, then every y.
  void recompute_stats();

  // Exhaustive scan over all records.
  std::optional<Neighbor> nearest_neighbor(const Vector& y) const;
  // Nearest record strictly closer than `radius`. Uses the cell index when
  // radius <= delta, a scan otherwise.
  std::optional<Neighbor> nearest_within(const Vector& y, double radius) const;

  // Single-key update: raise H of a match to max(H, R) or insert (x, R).
  void ec_update(const Vector& x, double R, const Vector& s = Vector(), int t = 0);

  // Backward pass over one episode (states s_0..s_{T-1}, rewards r_0..r_{T-1})
  // with R_t = r_t + gamma * R_{t+1}. Matches gain N_call (and N_xi for a
  // desirable episode); an undesirable match reached by a desirable episode
  // takes over its key, state and return. Everything else follows ec_update.
  void construct_from_trajectory(const Matrix& states, std::span<const int> timesteps,
                                 std::span<const double> rewards, bool desirable, double gamma,
                                 const Embedder& embedder);
  void construct_from_trajectory(const Trajectory& trajectory, const Environment& env,
                                 double gamma, const Embedder& embedder);

  // Match for f(state|t); refreshes the record's recall stamp on a hit.
  std::optional<RecallResult> recall(const Vector& state, int t, const Embedder& embedder);
  std::optional<RecallResult> recall_key(const Vector& x);

  // Re-embeds every stored state, then recomputes stats and normalized keys.
  void rekey_all(const Embedder& embedder);

  // Drops least-recently-recalled records until size <= capacity.
  void evict_if_full();

  EpisodicRecord record(std::size_t slot) const;
  // Live records ordered by insertion id.
  std::vector<EpisodicRecord> records() const;
  std::vector<std::size_t> live_slots() const;
  EmbedBatch gather(std::span<const std::size_t> slots) const;

  std::uint64_t clock() const { return clock_; }

  // Binary snapshot of records and statistics.
  void save(const std::string& path) const;
  static EpisodicBuffer load(const std::string& path);

 private:
  std::size_t insert(const Vector& x, const Vector& y, double H, const Vector& s, int t,
                     bool desirable);
  void touch(std::size_t slot);
  void lru_unlink(std::size_t slot);
  void lru_push_back(std::size_t slot);
  void remove(std::size_t slot);
  void set_keys(std::size_t slot, const Vector& x, const Vector& y);

  std::uint64_t cell_hash(const double* y) const;
  void index_add(std::size_t slot);
  void index_remove(std::size_t slot);
  void rebuild_index();
  bool index_usable() const;

  double distance_sq(std::size_t slot, const Vector& y) const;
  bool better(std::size_t a, double da, std::size_t b, double db) const;

  int embed_dim_;
  int state_dim_;
  std::size_t capacity_;
  double delta_;

  std::size_t size_ = 0;
  std::uint64_t clock_ = 0;
  std::uint64_t next_id_ = 0;
  std::size_t inserts_since_refresh_ = 0;
  Vector mean_;
  Vector std_;

  // Slot-indexed storage; slots are reused after eviction.
  std::vector<double> xs_;
  std::vector<double> ys_;
  std::vector<double> states_;
  std::vector<double> returns_;
  std::vector<int> timesteps_;
  std::vector<std::uint8_t> desirable_;
  std::vector<std::int64_t> n_call_;
  std::vector<std::int64_t> n_xi_;
  std::vector<std::uint64_t> last_recalled_;
  std::vector<std::uint64_t> insertion_id_;
  std::vector<std::uint8_t> alive_;
  std::vector<std::size_t> free_;

  // Recall-order list, least recent at head.
  static constexpr std::size_t kNil = static_cast<std::size_t>(-1);
  std::vector<std::size_t> prev_;
  std::vector<std::size_t> next_;
  std::size_t head_ = kNil;
  std::size_t tail_ = kNil;

  // Uniform grid of side delta over y.
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
  std::vector<std::uint64_t> cell_of_;
};

}  // namespace emu
