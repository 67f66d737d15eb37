#include "emu/episodic_memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace emu {
namespace {

constexpr char kSnapshotMagic[8] = {'E', 'M', 'U', 'D', 'E', 'M', '0', '1'};

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_coords(std::span<const std::int64_t> coords) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (std::int64_t c : coords) h = mix64(h ^ static_cast<std::uint64_t>(c));
  return h;
}

std::int64_t cell_coord(double y, double side) {
  const double q = std::floor(y / side);
  constexpr double kLimit = 1e15;
  if (!(q > -kLimit)) return static_cast<std::int64_t>(-kLimit);
  if (!(q < kLimit)) return static_cast<std::int64_t>(kLimit);
  return static_cast<std::int64_t>(q);
}

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("episodic snapshot: truncated file");
  return v;
}

void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& is, double* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("episodic snapshot: truncated file");
}

}  // namespace

double compute_delta(std::size_t capacity, int embed_dim, double sigma_y) {
  if (capacity < 1) throw std::invalid_argument("compute_delta: capacity must be >= 1");
  if (embed_dim < 1) throw std::invalid_argument("compute_delta: embed_dim must be >= 1");
  if (!(sigma_y > 0.0)) throw std::invalid_argument("compute_delta: sigma_y must be > 0");
  return std::pow(6.0 * sigma_y, embed_dim) / static_cast<double>(capacity);
}

DeltaPolicy DeltaPolicy::fixed(double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("delta must be positive");
  return {Kind::kFixed, delta};
}

double DeltaPolicy::resolve(std::size_t capacity, int embed_dim) const {
  return kind == Kind::kFixed ? value : compute_delta(capacity, embed_dim, 1.0);
}

EpisodicBuffer::EpisodicBuffer(int embed_dim, int state_dim, std::size_t capacity, double delta)
    : embed_dim_(embed_dim), state_dim_(state_dim), capacity_(capacity), delta_(delta) {
  if (embed_dim < 1) throw std::invalid_argument("episodic buffer: embed_dim must be >= 1");
  if (state_dim < 0) throw std::invalid_argument("episodic buffer: state_dim must be >= 0");
  if (capacity < 1) throw std::invalid_argument("episodic buffer: capacity must be >= 1");
  if (!(delta > 0.0)) throw std::invalid_argument("episodic buffer: delta must be positive");
  mean_ = Vector::Zero(embed_dim);
  std_ = Vector::Ones(embed_dim);
}

void EpisodicBuffer::set_delta(double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("episodic buffer: delta must be positive");
  delta_ = delta;
  rebuild_index();
}

Vector EpisodicBuffer::normalize(const Vector& x) const {
  if (x.size() != embed_dim_) throw std::invalid_argument("normalize: key dimension mismatch");
  return ((x - mean_).array() / std_.array()).matrix();
}

void EpisodicBuffer::recompute_stats() {
  inserts_since_refresh_ = 0;
  const Index k = embed_dim_;
  if (size_ == 0) {
    mean_ = Vector::Zero(k);
    std_ = Vector::Ones(k);
    rebuild_index();
    return;
  }
  Vector sum = Vector::Zero(k);
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (!alive_[slot]) continue;
    sum += Eigen::Map<const Vector>(&xs_[slot * k], k);
  }
  mean_ = sum / static_cast<double>(size_);
  Vector sq = Vector::Zero(k);
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (!alive_[slot]) continue;
    sq += (Eigen::Map<const Vector>(&xs_[slot * k], k) - mean_).cwiseAbs2();
  }
  std_ = (sq / static_cast<double>(size_)).cwiseSqrt().cwiseMax(kMinStd);
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (!alive_[slot]) continue;
    Eigen::Map<Vector>(&ys_[slot * k], k) =
        ((Eigen::Map<const Vector>(&xs_[slot * k], k) - mean_).array() / std_.array()).matrix();
  }
  rebuild_index();
}

double EpisodicBuffer::distance_sq(std::size_t slot, const Vector& y) const {
  return (Eigen::Map<const Vector>(&ys_[slot * embed_dim_], embed_dim_) - y).squaredNorm();
}

bool EpisodicBuffer::better(std::size_t a, double da, std::size_t b, double db) const {
  return da < db || (da == db && insertion_id_[a] < insertion_id_[b]);
}

std::optional<Neighbor> EpisodicBuffer::nearest_neighbor(const Vector& y) const {
  if (y.size() != embed_dim_) throw std::invalid_argument("nearest_neighbor: dimension mismatch");
  std::optional<Neighbor> best;
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (!alive_[slot]) continue;
    const double d = distance_sq(slot, y);
    if (!best || better(slot, d, best->slot, best_sq)) {
      best = Neighbor{slot, 0.0};
      best_sq = d;
    }
  }
  if (best) best->distance = std::sqrt(best_sq);
  return best;
}

bool EpisodicBuffer::index_usable() const { return embed_dim_ <= 8; }

std::optional<Neighbor> EpisodicBuffer::nearest_within(const Vector& y, double radius) const {
  if (y.size() != embed_dim_) throw std::invalid_argument("nearest_within: dimension mismatch");
  if (size_ == 0) return std::nullopt;
  std::optional<Neighbor> best;
  double best_sq = std::numeric_limits<double>::infinity();
  auto consider = [&](std::size_t slot) {
    const double d = distance_sq(slot, y);
    if (!best || better(slot, d, best->slot, best_sq)) {
      best = Neighbor{slot, 0.0};
      best_sq = d;
    }
  };
  if (radius <= delta_ && index_usable()) {
    const int k = embed_dim_;
    std::vector<std::int64_t> base(k), probe(k);
    for (int i = 0; i < k; ++i) base[i] = cell_coord(y(i), delta_);
    std::vector<int> offset(k, -1);
    while (true) {
      for (int i = 0; i < k; ++i) probe[i] = base[i] + offset[i];
      auto it = cells_.find(hash_coords(probe));
      if (it != cells_.end()) {
        for (std::size_t slot : it->second) consider(slot);
      }
      int i = 0;
      while (i < k && offset[i] == 1) offset[i++] = -1;
      if (i == k) break;
      ++offset[i];
    }
  } else {
    for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
      if (alive_[slot]) consider(slot);
    }
  }
  if (!best) return std::nullopt;
  best->distance = std::sqrt(best_sq);
  if (!(best->distance < radius)) return std::nullopt;
  return best;
}

std::uint64_t EpisodicBuffer::cell_hash(const double* y) const {
  std::vector<std::int64_t> coords(embed_dim_);
  for (int i = 0; i < embed_dim_; ++i) coords[i] = cell_coord(y[i], delta_);
  return hash_coords(coords);
}

void EpisodicBuffer::index_add(std::size_t slot) {
  if (!index_usable()) return;
  const std::uint64_t h = cell_hash(&ys_[slot * embed_dim_]);
  cell_of_[slot] = h;
  cells_[h].push_back(slot);
}

void EpisodicBuffer::index_remove(std::size_t slot) {
  if (!index_usable()) return;
  auto it = cells_.find(cell_of_[slot]);
  if (it == cells_.end()) return;
  auto& bucket = it->second;
  auto pos = std::find(bucket.begin(), bucket.end(), slot);
  if (pos != bucket.end()) {
    *pos = bucket.back();
    bucket.pop_back();
  }
  if (bucket.empty()) cells_.erase(it);
}

void EpisodicBuffer::rebuild_index() {
  cells_.clear();
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (alive_[slot]) index_add(slot);
  }
}

void EpisodicBuffer::lru_unlink(std::size_t slot) {
  const std::size_t p = prev_[slot];
  const std::size_t n = next_[slot];
  if (p != kNil) next_[p] = n; else head_ = n;
  if (n != kNil) prev_[n] = p; else tail_ = p;
  prev_[slot] = next_[slot] = kNil;
}

void EpisodicBuffer::lru_push_back(std::size_t slot) {
  prev_[slot] = tail_;
  next_[slot] = kNil;
  if (tail_ != kNil) next_[tail_] = slot; else head_ = slot;
  tail_ = slot;
}

void EpisodicBuffer::touch(std::size_t slot) {
  last_recalled_[slot] = ++clock_;
  lru_unlink(slot);
  lru_push_back(slot);
}

void EpisodicBuffer::set_keys(std::size_t slot, const Vector& x, const Vector& y) {
  index_remove(slot);
  Eigen::Map<Vector>(&xs_[slot * embed_dim_], embed_dim_) = x;
  Eigen::Map<Vector>(&ys_[slot * embed_dim_], embed_dim_) = y;
  index_add(slot);
}

std::size_t EpisodicBuffer::insert(const Vector& x, const Vector& y, double H, const Vector& s,
                                   int t, bool desirable) {
  if (!std::isfinite(H)) throw std::invalid_argument("episodic buffer: non-finite return");
  if (s.size() != 0 && s.size() != state_dim_) {
    throw std::invalid_argument("episodic buffer: state dimension mismatch");
  }
  std::size_t slot;
  if (!free_.empty()) {
    slot = free_.back();
    free_.pop_back();
  } else {
    slot = alive_.size();
    const std::size_t n = slot + 1;
    xs_.resize(n * embed_dim_);
    ys_.resize(n * embed_dim_);
    states_.resize(n * state_dim_);
    returns_.resize(n);
    timesteps_.resize(n);
    desirable_.resize(n);
    n_call_.resize(n);
    n_xi_.resize(n);
    last_recalled_.resize(n);
    insertion_id_.resize(n);
    alive_.resize(n);
    prev_.resize(n, kNil);
    next_.resize(n, kNil);
    cell_of_.resize(n);
  }
  alive_[slot] = 1;
  Eigen::Map<Vector>(&xs_[slot * embed_dim_], embed_dim_) = x;
  Eigen::Map<Vector>(&ys_[slot * embed_dim_], embed_dim_) = y;
  if (state_dim_ > 0) {
    auto dst = Eigen::Map<Vector>(states_.data() + slot * state_dim_, state_dim_);
    if (s.size() == state_dim_) dst = s; else dst.setZero();
  }
  returns_[slot] = H;
  timesteps_[slot] = t;
  desirable_[slot] = desirable ? 1 : 0;
  n_call_[slot] = 1;
  n_xi_[slot] = desirable ? 1 : 0;
  insertion_id_[slot] = next_id_++;
  last_recalled_[slot] = ++clock_;
  lru_push_back(slot);
  index_add(slot);
  ++size_;
  evict_if_full();
  if (++inserts_since_refresh_ >= kStatsRefreshInterval) recompute_stats();
  return slot;
}

void EpisodicBuffer::remove(std::size_t slot) {
  index_remove(slot);
  lru_unlink(slot);
  alive_[slot] = 0;
  free_.push_back(slot);
  --size_;
}

void EpisodicBuffer::evict_if_full() {
  while (size_ > capacity_ && head_ != kNil) remove(head_);
}

void EpisodicBuffer::ec_update(const Vector& x, double R, const Vector& s, int t) {
  if (!std::isfinite(R)) throw std::invalid_argument("ec_update: non-finite return");
  const Vector y = normalize(x);
  if (auto hit = nearest_within(y, delta_)) {
    returns_[hit->slot] = std::max(returns_[hit->slot], R);
    ++n_call_[hit->slot];
    touch(hit->slot);
    return;
  }
  insert(x, y, R, s, t, false);
}

void EpisodicBuffer::construct_from_trajectory(const Matrix& states,
                                               std::span<const int> timesteps,
                                               std::span<const double> rewards, bool desirable,
                                               double gamma, const Embedder& embedder) {
  const Index T = states.cols();
  if (static_cast<Index>(rewards.size()) != T || static_cast<Index>(timesteps.size()) != T) {
    throw std::invalid_argument("construct_from_trajectory: one reward and timestep per state");
  }
  if (T == 0) return;
  const Matrix keys = embedder.embed_batch(states, timesteps);
  double R = 0.0;
  for (Index t = T - 1; t >= 0; --t) {
    R = rewards[t] + gamma * R;
    const Vector x = keys.col(t);
    const Vector y = normalize(x);
    if (auto hit = nearest_within(y, delta_)) {
      const std::size_t slot = hit->slot;
      ++n_call_[slot];
      if (desirable) ++n_xi_[slot];
      if (!desirable_[slot] && desirable) {
        desirable_[slot] = 1;
        set_keys(slot, x, y);
        Eigen::Map<Vector>(states_.data() + slot * state_dim_, state_dim_) = states.col(t);
        timesteps_[slot] = timesteps[t];
        returns_[slot] = R;
      } else if (returns_[slot] < R) {
        returns_[slot] = R;
      }
      touch(slot);
    } else {
      insert(x, y, R, states.col(t), timesteps[t], desirable);
    }
  }
}

void EpisodicBuffer::construct_from_trajectory(const Trajectory& trajectory,
                                               const Environment& env, double gamma,
                                               const Embedder& embedder) {
  const auto& trs = trajectory.transitions;
  Matrix states(env.state_dim(), static_cast<Index>(trs.size()));
  std::vector<int> ts(trs.size());
  std::vector<double> rewards(trs.size());
  for (std::size_t i = 0; i < trs.size(); ++i) {
    states.col(static_cast<Index>(i)) = env.global_state(trs[i].state);
    ts[i] = trs[i].state.t;
    rewards[i] = trs[i].reward;
  }
  const bool desirable = label_desirability(trajectory, env.return_threshold());
  construct_from_trajectory(states, ts, rewards, desirable, gamma, embedder);
}

std::optional<RecallResult> EpisodicBuffer::recall(const Vector& state, int t,
                                                   const Embedder& embedder) {
  return recall_key(embedder.embed(state, t));
}

std::optional<RecallResult> EpisodicBuffer::recall_key(const Vector& x) {
  auto hit = nearest_within(normalize(x), delta_);
  if (!hit) return std::nullopt;
  touch(hit->slot);
  return RecallResult{returns_[hit->slot], desirable_[hit->slot] != 0, n_call_[hit->slot],
                      n_xi_[hit->slot], hit->distance, hit->slot};
}

void EpisodicBuffer::rekey_all(const Embedder& embedder) {
  if (embedder.embed_dim() != embed_dim_ || embedder.state_dim() != state_dim_) {
    throw std::invalid_argument("rekey_all: embedder shape does not match buffer");
  }
  const std::vector<std::size_t> slots = live_slots();
  constexpr std::size_t kChunk = 4096;
  for (std::size_t begin = 0; begin < slots.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, slots.size() - begin);
    Matrix states(state_dim_, static_cast<Index>(n));
    std::vector<int> ts(n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t slot = slots[begin + j];
      states.col(static_cast<Index>(j)) = Eigen::Map<const Vector>(states_.data() + slot * state_dim_, state_dim_);
      ts[j] = timesteps_[slot];
    }
    const Matrix keys = embedder.embed_batch(states, ts);
    for (std::size_t j = 0; j < n; ++j) {
      Eigen::Map<Vector>(&xs_[slots[begin + j] * embed_dim_], embed_dim_) = keys.col(static_cast<Index>(j));
    }
  }
  recompute_stats();
}

EpisodicRecord EpisodicBuffer::record(std::size_t slot) const {
  if (slot >= alive_.size() || !alive_[slot]) throw std::out_of_range("episodic buffer: dead slot");
  EpisodicRecord r;
  r.x = Eigen::Map<const Vector>(&xs_[slot * embed_dim_], embed_dim_);
  r.y = Eigen::Map<const Vector>(&ys_[slot * embed_dim_], embed_dim_);
  r.H = returns_[slot];
  r.s = Eigen::Map<const Vector>(states_.data() + slot * state_dim_, state_dim_);
  r.t = timesteps_[slot];
  r.desirable = desirable_[slot] != 0;
  r.n_call = n_call_[slot];
  r.n_xi = n_xi_[slot];
  r.last_recalled = last_recalled_[slot];
  r.insertion_id = insertion_id_[slot];
  return r;
}

std::vector<std::size_t> EpisodicBuffer::live_slots() const {
  std::vector<std::size_t> out;
  out.reserve(size_);
  for (std::size_t slot = 0; slot < alive_.size(); ++slot) {
    if (alive_[slot]) out.push_back(slot);
  }
  std::sort(out.begin(), out.end(),
            [&](std::size_t a, std::size_t b) { return insertion_id_[a] < insertion_id_[b]; });
  return out;
}

std::vector<EpisodicRecord> EpisodicBuffer::records() const {
  std::vector<EpisodicRecord> out;
  for (std::size_t slot : live_slots()) out.push_back(record(slot));
  return out;
}

EmbedBatch EpisodicBuffer::gather(std::span<const std::size_t> slots) const {
  EmbedBatch batch;
  batch.states.resize(state_dim_, static_cast<Index>(slots.size()));
  batch.returns.resize(static_cast<Index>(slots.size()));
  batch.timesteps.resize(slots.size());
  for (std::size_t j = 0; j < slots.size(); ++j) {
    const std::size_t slot = slots[j];
    if (slot >= alive_.size() || !alive_[slot]) throw std::out_of_range("gather: dead slot");
    batch.states.col(static_cast<Index>(j)) = Eigen::Map<const Vector>(states_.data() + slot * state_dim_, state_dim_);
    batch.returns(static_cast<Index>(j)) = returns_[slot];
    batch.timesteps[j] = timesteps_[slot];
  }
  return batch;
}

void EpisodicBuffer::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("episodic snapshot: cannot open " + path);
  os.write(kSnapshotMagic, sizeof(kSnapshotMagic));
  write_pod<std::int32_t>(os, embed_dim_);
  write_pod<std::int32_t>(os, state_dim_);
  write_pod<std::uint64_t>(os, capacity_);
  write_pod<double>(os, delta_);
  write_pod<std::uint64_t>(os, clock_);
  write_pod<std::uint64_t>(os, next_id_);
  write_pod<std::uint64_t>(os, inserts_since_refresh_);
  write_pod<std::uint64_t>(os, size_);
  write_doubles(os, mean_.data(), embed_dim_);
  write_doubles(os, std_.data(), embed_dim_);
  for (std::size_t slot : live_slots()) {
    write_doubles(os, &xs_[slot * embed_dim_], embed_dim_);
    write_doubles(os, &ys_[slot * embed_dim_], embed_dim_);
    write_doubles(os, states_.data() + slot * state_dim_, state_dim_);
    write_pod<double>(os, returns_[slot]);
    write_pod<std::int32_t>(os, timesteps_[slot]);
    write_pod<std::uint8_t>(os, desirable_[slot]);
    write_pod<std::int64_t>(os, n_call_[slot]);
    write_pod<std::int64_t>(os, n_xi_[slot]);
    write_pod<std::uint64_t>(os, last_recalled_[slot]);
    write_pod<std::uint64_t>(os, insertion_id_[slot]);
  }
  if (!os) throw std::runtime_error("episodic snapshot: write failed for " + path);
}

EpisodicBuffer EpisodicBuffer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("episodic snapshot: cannot open " + path);
  char magic[sizeof(kSnapshotMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kSnapshotMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("episodic snapshot: bad magic in " + path);
  }
  const int k = read_pod<std::int32_t>(is);
  const int d = read_pod<std::int32_t>(is);
  const auto capacity = read_pod<std::uint64_t>(is);
  const double delta = read_pod<double>(is);
  EpisodicBuffer buf(k, d, capacity, delta);
  buf.clock_ = read_pod<std::uint64_t>(is);
  buf.next_id_ = read_pod<std::uint64_t>(is);
  buf.inserts_since_refresh_ = read_pod<std::uint64_t>(is);
  const auto n = read_pod<std::uint64_t>(is);
  read_doubles(is, buf.mean_.data(), k);
  read_doubles(is, buf.std_.data(), k);

  buf.xs_.resize(n * k);
  buf.ys_.resize(n * k);
  buf.states_.resize(n * d);
  buf.returns_.resize(n);
  buf.timesteps_.resize(n);
  buf.desirable_.resize(n);
  buf.n_call_.resize(n);
  buf.n_xi_.resize(n);
  buf.last_recalled_.resize(n);
  buf.insertion_id_.resize(n);
  buf.alive_.assign(n, 1);
  buf.prev_.assign(n, kNil);
  buf.next_.assign(n, kNil);
  buf.cell_of_.resize(n);
  for (std::size_t slot = 0; slot < n; ++slot) {
    read_doubles(is, &buf.xs_[slot * k], k);
    read_doubles(is, &buf.ys_[slot * k], k);
    read_doubles(is, buf.states_.data() + slot * d, d);
    buf.returns_[slot] = read_pod<double>(is);
    buf.timesteps_[slot] = read_pod<std::int32_t>(is);
    buf.desirable_[slot] = read_pod<std::uint8_t>(is);
    buf.n_call_[slot] = read_pod<std::int64_t>(is);
    buf.n_xi_[slot] = read_pod<std::int64_t>(is);
    buf.last_recalled_[slot] = read_pod<std::uint64_t>(is);
    buf.insertion_id_[slot] = read_pod<std::uint64_t>(is);
  }
  buf.size_ = n;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return buf.last_recalled_[a] < buf.last_recalled_[b];
  });
  for (std::size_t slot : order) buf.lru_push_back(slot);
  buf.rebuild_index();
  return buf;
}

}  // namespace emu
