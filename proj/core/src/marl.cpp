#include "emu/marl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace emu {

std::string to_string(MixerKind kind) {
  return kind == MixerKind::kVdn ? "vdn" : "mono";
}

MixerKind parse_mixer(const std::string& text) {
  if (text == "vdn") return MixerKind::kVdn;
  if (text == "mono") return MixerKind::kMonotonic;
  throw std::invalid_argument("unknown mixer: " + text);
}

void TrainConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("train: gamma must be in [0, 1)");
  if (!(eps_finish >= 0.05 && eps_finish <= 1.0 && eps_start >= eps_finish && eps_start <= 1.0)) {
    throw std::invalid_argument("train: epsilon schedule must stay within [0.05, 1]");
  }
  if (eps_anneal_steps < 0) throw std::invalid_argument("train: eps_anneal_steps must be >= 0");
  if (target_interval < 1) throw std::invalid_argument("train: target_interval must be >= 1");
  if (n_circle < 0) throw std::invalid_argument("train: n_circle must be >= 0");
  if (batch_episodes < 1) throw std::invalid_argument("train: batch_episodes must be >= 1");
  if (replay_capacity < batch_episodes) {
    throw std::invalid_argument("train: replay_capacity must be >= batch_episodes");
  }
  if (agent_hidden < 1 || agent_layers < 1 || mixer_hidden < 1) {
    throw std::invalid_argument("train: network widths must be >= 1");
  }
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad_clip must be > 0");
}

double TrainConfig::epsilon(std::int64_t t_env) const {
  if (eps_anneal_steps == 0 || t_env >= eps_anneal_steps) return eps_finish;
  const double frac = static_cast<double>(std::max<std::int64_t>(t_env, 0)) /
                      static_cast<double>(eps_anneal_steps);
  return eps_start + frac * (eps_finish - eps_start);
}

Episode to_episode(const Trajectory& trajectory, const Environment& env,
                   std::span<const double> intrinsic) {
  const auto& trs = trajectory.transitions;
  if (trs.empty()) throw std::invalid_argument("to_episode: empty trajectory");
  if (!intrinsic.empty() && intrinsic.size() != trs.size()) {
    throw std::invalid_argument("to_episode: intrinsic length mismatch");
  }
  Episode ep;
  ep.length = static_cast<int>(trs.size());
  ep.n_agents = env.num_agents();
  const int n = ep.n_agents;
  ep.obs.resize(env.obs_dim(), static_cast<Index>(ep.length + 1) * n);
  ep.states.resize(env.state_dim(), ep.length + 1);
  ep.timesteps.resize(ep.length + 1);
  ep.actions.resize(static_cast<std::size_t>(ep.length) * n);
  ep.rewards.resize(ep.length);
  ep.intrinsic.assign(ep.length, 0.0);
  ep.terminal.resize(ep.length);

  auto put_obs = [&](int t, const std::vector<Vector>& obs) {
    for (int i = 0; i < n; ++i) ep.obs.col(static_cast<Index>(t) * n + i) = obs[i];
  };
  for (int t = 0; t < ep.length; ++t) {
    const Transition& tr = trs[t];
    put_obs(t, tr.observations.empty() ? env.observe(tr.state) : tr.observations);
    ep.states.col(t) = env.global_state(tr.state);
    ep.timesteps[t] = tr.state.t;
    for (int i = 0; i < n; ++i) ep.actions[static_cast<std::size_t>(t) * n + i] = static_cast<int>(tr.action[i]);
    ep.rewards[t] = tr.reward;
    ep.terminal[t] = tr.terminal ? 1 : 0;
    if (!intrinsic.empty()) ep.intrinsic[t] = intrinsic[t];
  }
  const EnvState& last = trs.back().next_state;
  put_obs(ep.length, env.observe(last));
  ep.states.col(ep.length) = env.global_state(last);
  ep.timesteps[ep.length] = last.t;
  ep.episode_return = trajectory.episode_return;
  ep.desirable = trajectory.desirable;
  return ep;
}

AgentNet::AgentNet(int obs_dim, int n_agents, int n_actions, int hidden, int layers, Rng& rng)
    : obs_dim_(obs_dim), n_agents_(n_agents), n_actions_(n_actions) {
  if (obs_dim < 1 || n_agents < 1 || n_actions < 1) {
    throw std::invalid_argument("agent net: dimensions must be >= 1");
  }
  std::vector<Index> widths{input_dim()};
  for (int l = 0; l < layers; ++l) widths.push_back(hidden);
  widths.push_back(n_actions);
  net_ = make_mlp(widths, Activation::kRelu, Activation::kIdentity, rng);
}

void AgentNet::write_input(const Vector& obs, int agent, int last_action,
                           Eigen::Ref<Vector> out) const {
  out.setZero();
  out.head(obs_dim_) = obs;
  out(obs_dim_ + agent) = 1.0;
  if (last_action >= 0) out(obs_dim_ + n_agents_ + last_action) = 1.0;
}

Matrix AgentNet::inputs(const std::vector<Vector>& obs, std::span<const int> last_actions) const {
  if (static_cast<int>(obs.size()) != n_agents_ || static_cast<int>(last_actions.size()) != n_agents_) {
    throw std::invalid_argument("agent net: expected one observation and last action per agent");
  }
  Matrix in(input_dim(), n_agents_);
  for (int i = 0; i < n_agents_; ++i) write_input(obs[i], i, last_actions[i], in.col(i));
  return in;
}

Matrix AgentNet::q_values(const std::vector<Vector>& obs, std::span<const int> last_actions) const {
  return forward(net_, inputs(obs, last_actions));
}

int argmax_lowest(const Eigen::Ref<const Vector>& values) {
  int best = 0;
  for (Index a = 1; a < values.size(); ++a) {
    if (values(a) > values(best)) best = static_cast<int>(a);
  }
  return best;
}

JointAction select_actions(const AgentNet& agents, const std::vector<Vector>& obs,
                           std::span<const int> last_actions, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("select_actions: epsilon outside [0, 1]");
  const Matrix q = agents.q_values(obs, last_actions);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, agents.n_actions() - 1);
  JointAction joint(agents.n_agents());
  for (int i = 0; i < agents.n_agents(); ++i) {
    const bool explore = coin(rng) < epsilon;
    const int a = explore ? pick(rng) : argmax_lowest(q.col(i));
    joint[i] = static_cast<Action>(a);
  }
  return joint;
}

Mixer::Mixer(MixerKind kind, int n_agents, int state_dim, int hidden, Rng& rng)
    : kind_(kind), n_agents_(n_agents) {
  if (n_agents < 1) throw std::invalid_argument("mixer: n_agents must be >= 1");
  if (kind_ == MixerKind::kMonotonic) {
    const std::vector<Index> w{state_dim, hidden, n_agents};
    const std::vector<Index> b{state_dim, hidden, 1};
    weight_net_ = make_mlp(w, Activation::kRelu, Activation::kIdentity, rng);
    bias_net_ = make_mlp(b, Activation::kRelu, Activation::kIdentity, rng);
  }
}

Vector Mixer::mix(const Matrix& qs, const Matrix& states, MixTape* tape) const {
  if (qs.rows() != n_agents_) throw std::invalid_argument("mixer: expected one Q per agent");
  if (kind_ == MixerKind::kVdn) {
    if (tape) tape->qs = qs;
    return qs.colwise().sum().transpose();
  }
  if (states.cols() != qs.cols()) throw std::invalid_argument("mixer: state batch mismatch");
  ForwardTape* wt = tape ? &tape->w_tape : nullptr;
  ForwardTape* bt = tape ? &tape->b_tape : nullptr;
  Matrix raw = forward(weight_net_, states, wt);
  const Matrix bias = forward(bias_net_, states, bt);
  Vector out = raw.cwiseAbs().cwiseProduct(qs).colwise().sum().transpose() + bias.row(0).transpose();
  if (tape) {
    tape->qs = qs;
    tape->raw_weights = std::move(raw);
  }
  return out;
}

Matrix Mixer::backward(const MixTape& tape, const Vector& d_qtot, Mixer* grads) const {
  const Index B = d_qtot.size();
  if (kind_ == MixerKind::kVdn) return d_qtot.transpose().replicate(n_agents_, 1);
  const Matrix& raw = tape.raw_weights;
  Matrix dq(n_agents_, B);
  Matrix d_raw(n_agents_, B);
  for (Index j = 0; j < B; ++j) {
    for (int i = 0; i < n_agents_; ++i) {
      const double w = raw(i, j);
      dq(i, j) = std::abs(w) * d_qtot(j);
      const double sign = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
      d_raw(i, j) = tape.qs(i, j) * sign * d_qtot(j);
    }
  }
  emu::backward(weight_net_, tape.w_tape, d_raw, &grads->weight_net_);
  emu::backward(bias_net_, tape.b_tape, d_qtot.transpose(), &grads->bias_net_);
  return dq;
}

Matrix Mixer::weights(const Matrix& states) const {
  if (kind_ == MixerKind::kVdn) return Matrix::Ones(n_agents_, states.cols());
  return forward(weight_net_, states).cwiseAbs();
}

std::vector<std::span<double>> Mixer::parameter_spans() {
  auto out = emu::parameter_spans(weight_net_);
  auto b = emu::parameter_spans(bias_net_);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void Mixer::set_zero() {
  emu::set_zero(&weight_net_);
  emu::set_zero(&bias_net_);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay: capacity must be >= 1");
  episodes_.reserve(std::min<std::size_t>(capacity, 1024));
}

void ReplayBuffer::add(Episode episode) {
  if (episodes_.size() < capacity_) {
    episodes_.push_back(std::move(episode));
    return;
  }
  episodes_[head_] = std::move(episode);
  head_ = (head_ + 1) % capacity_;
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  if (n > episodes_.size()) throw std::invalid_argument("replay: sample larger than buffer");
  std::vector<std::size_t> idx(episodes_.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

std::vector<const Episode*> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<const Episode*> out;
  for (std::size_t i : sample_indices(n, rng)) out.push_back(&episodes_[i]);
  return out;
}

const Episode& ReplayBuffer::at(std::size_t i) const { return episodes_.at(i); }

namespace {

AgentNet build_agents(const Environment& env, const TrainConfig& c, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 6);
  return AgentNet(env.obs_dim(), env.num_agents(), env.num_actions(), c.agent_hidden,
                  c.agent_layers, rng);
}

Mixer build_mixer(const Environment& env, const TrainConfig& c, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 7);
  return Mixer(c.mixer, env.num_agents(), env.state_dim(), c.mixer_hidden, rng);
}

void copy_blocks(std::span<const std::span<double>> from, std::span<const std::span<double>> to) {
  for (std::size_t b = 0; b < from.size(); ++b) std::copy(from[b].begin(), from[b].end(), to[b].begin());
}

}  // namespace

Learner::Learner(const Environment& env, const TrainConfig& config, const IncentiveMode& incentive,
                 std::uint64_t seed)
    : config_(config),
      incentive_(incentive),
      n_agents_(env.num_agents()),
      n_actions_(env.num_actions()),
      state_dim_(env.state_dim()),
      agents_(build_agents(env, config, seed)),
      target_agents_(agents_),
      agent_grad_(zeros_like(agents_.network())),
      mixer_(build_mixer(env, config, seed)),
      target_mixer_(mixer_),
      mixer_grad_(mixer_),
      adam_(config.adam) {
  config_.validate();
  incentive_.validate();
  mixer_grad_.set_zero();
}

std::vector<std::span<double>> Learner::parameter_spans() {
  auto out = emu::parameter_spans(agents_.network());
  auto m = mixer_.parameter_spans();
  out.insert(out.end(), m.begin(), m.end());
  return out;
}

std::vector<std::span<double>> Learner::gradient_spans() {
  auto out = emu::parameter_spans(agent_grad_);
  auto m = mixer_grad_.parameter_spans();
  out.insert(out.end(), m.begin(), m.end());
  return out;
}

std::vector<std::span<double>> Learner::target_parameter_spans() {
  auto out = emu::parameter_spans(target_agents_.network());
  auto m = target_mixer_.parameter_spans();
  out.insert(out.end(), m.begin(), m.end());
  return out;
}

void Learner::sync_target() {
  copy_blocks(parameter_spans(), target_parameter_spans());
}

LossReport Learner::compute_loss(std::span<const Episode* const> batch, EpisodicBuffer* memory,
                                 const Embedder* embedder) {
  if (batch.empty()) throw std::invalid_argument("td_loss: empty batch");
  const int n = n_agents_;
  const int A = n_actions_;

  std::vector<Index> base(batch.size());
  Index cols = 0;
  Index N = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = *batch[e];
    if (ep.n_agents != n || ep.length < 1) throw std::invalid_argument("td_loss: malformed episode");
    base[e] = cols;
    cols += static_cast<Index>(ep.length + 1) * n;
    N += ep.length;
  }

  Matrix in(agents_.input_dim(), cols);
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = *batch[e];
    for (int t = 0; t <= ep.length; ++t) {
      for (int i = 0; i < n; ++i) {
        const Index c = base[e] + static_cast<Index>(t) * n + i;
        const int last = t > 0 ? ep.actions[static_cast<std::size_t>(t - 1) * n + i] : -1;
        agents_.write_input(ep.obs.col(c - base[e]), i, last, in.col(c));
      }
    }
  }

  ForwardTape tape;
  const Matrix q = forward(agents_.network(), in, &tape);
  const Matrix q_target = forward(target_agents_.network(), in);

  Matrix chosen(n, N);
  Matrix boot = Matrix::Zero(n, N);
  Matrix states(state_dim_, N);
  Matrix next_states(state_dim_, N);
  std::vector<int> next_t(N);
  std::vector<Index> chosen_row(static_cast<std::size_t>(N) * n);
  std::vector<Index> chosen_col(static_cast<std::size_t>(N) * n);
  std::vector<double> rewards(N), intrinsic(N);
  std::vector<std::uint8_t> terminal(N);

  LossReport report;
  report.transitions = static_cast<std::size_t>(N);
  report.bootstrap_actions.assign(static_cast<std::size_t>(N) * n, -1);
  report.incentives.assign(N, 0.0);

  Index j = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Episode& ep = *batch[e];
    for (int t = 0; t < ep.length; ++t, ++j) {
      const bool done = ep.terminal[t] != 0;
      for (int i = 0; i < n; ++i) {
        const Index c = base[e] + static_cast<Index>(t) * n + i;
        const int a = ep.actions[static_cast<std::size_t>(t) * n + i];
        chosen(i, j) = q(a, c);
        chosen_row[j * n + i] = a;
        chosen_col[j * n + i] = c;
        if (!done) {
          const Index nc = c + n;
          const int best = argmax_lowest(q.col(nc));
          boot(i, j) = q_target(best, nc);
          report.bootstrap_actions[j * n + i] = best;
        }
      }
      states.col(j) = ep.states.col(t);
      next_states.col(j) = ep.states.col(t + 1);
      next_t[j] = ep.timesteps[t + 1];
      rewards[j] = ep.rewards[t];
      intrinsic[j] = ep.intrinsic[t];
      terminal[j] = done ? 1 : 0;
    }
  }

  MixTape mix_tape;
  const Vector q_tot = mixer_.mix(chosen, states, &mix_tape);
  const Vector q_next = target_mixer_.mix(boot, next_states);

  std::vector<std::optional<RecallResult>> recalls(N);
  if (incentive_.uses_memory() && memory != nullptr && embedder != nullptr && memory->size() > 0) {
    const Matrix keys = embedder->embed_batch(next_states, next_t);
    for (Index k = 0; k < N; ++k) {
      if (terminal[k]) continue;
      recalls[k] = memory->recall_key(keys.col(k));
      if (recalls[k]) ++report.recall_hits;
    }
  }

  const bool e3b = incentive_.kind == IncentiveKind::kE3B;
  Vector d_qtot(N);
  double loss = 0.0;
  double min_incentive = 0.0;
  for (Index k = 0; k < N; ++k) {
    RewardContext ctx;
    ctx.gamma = config_.gamma;
    ctx.recall = recalls[k];
    ctx.target_max = q_next(k);
    ctx.q_taken = q_tot(k);
    ctx.e3b_bonus = e3b ? intrinsic[k] : 0.0;
    ctx.terminal = terminal[k] != 0;
    const CombinedReward cr = combined_reward(rewards[k], incentive_, ctx);

    double y = cr.reward + (e3b ? 0.0 : config_.beta_c * intrinsic[k]);
    if (!ctx.terminal) y += config_.gamma * q_next(k);
    const double td = q_tot(k) - y;
    loss += td * td;
    double d = 2.0 * td;
    if (cr.has_ec_term) {
      const double gap = q_tot(k) - cr.ec_target;
      loss += cr.ec_weight * gap * gap;
      d += 2.0 * cr.ec_weight * gap;
    }
    d_qtot(k) = d / static_cast<double>(N);

    report.incentives[k] = cr.incentive;
    report.incentive_sum += cr.incentive;
    if (cr.incentive != 0.0) ++report.incentive_count;
    min_incentive = k == 0 ? cr.incentive : std::min(min_incentive, cr.incentive);
  }
  report.loss = loss / static_cast<double>(N);
  report.incentive_min = min_incentive;

  emu::set_zero(&agent_grad_);
  mixer_grad_.set_zero();
  const Matrix dq = mixer_.backward(mix_tape, d_qtot, &mixer_grad_);
  Matrix upstream = Matrix::Zero(A, cols);
  for (Index k = 0; k < N; ++k) {
    for (int i = 0; i < n; ++i) upstream(chosen_row[k * n + i], chosen_col[k * n + i]) += dq(i, k);
  }
  emu::backward(agents_.network(), tape, upstream, &agent_grad_);
  report.grad_norm = global_norm(gradient_spans());
  return report;
}

LossReport Learner::train(std::span<const Episode* const> batch, EpisodicBuffer* memory,
                          const Embedder* embedder) {
  LossReport report = compute_loss(batch, memory, embedder);
  if (!std::isfinite(report.loss) || !std::isfinite(report.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite TD loss at train step " << train_steps_ << " (loss=" << report.loss
        << ", grad_norm=" << report.grad_norm << ", transitions=" << report.transitions << ")";
    throw std::runtime_error(msg.str());
  }
  auto grads = gradient_spans();
  if (report.grad_norm > config_.grad_clip) scale(grads, config_.grad_clip / report.grad_norm);
  adam_.step(parameter_spans(), grads);
  ++train_steps_;
  if (train_steps_ % config_.target_interval == 0) sync_target();
  return report;
}

namespace {

constexpr const char* kCheckpointFormat = "emu-learner-1";

std::vector<double> flatten_const(const Network& net) {
  std::vector<double> out;
  for (auto block : parameter_spans(net)) out.insert(out.end(), block.begin(), block.end());
  return out;
}

}  // namespace

void Learner::save(const std::string& path) const {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["n_agents"] = n_agents_;
  j["n_actions"] = n_actions_;
  j["state_dim"] = state_dim_;
  j["obs_dim"] = agents_.obs_dim();
  j["agent_hidden"] = config_.agent_hidden;
  j["agent_layers"] = config_.agent_layers;
  j["mixer"] = to_string(config_.mixer);
  j["mixer_hidden"] = config_.mixer_hidden;
  j["train_steps"] = train_steps_;
  j["agent"] = flatten_const(agents_.network());
  Mixer copy = mixer_;
  j["mixer_params"] = flatten(copy.parameter_spans());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump() << '\n';
}

void Learner::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw std::runtime_error("unknown checkpoint format: " + path);
  const bool same = j.at("n_agents") == n_agents_ && j.at("n_actions") == n_actions_ &&
                    j.at("state_dim") == state_dim_ && j.at("obs_dim") == agents_.obs_dim() &&
                    j.at("agent_hidden") == config_.agent_hidden &&
                    j.at("agent_layers") == config_.agent_layers &&
                    j.at("mixer") == to_string(config_.mixer) &&
                    j.at("mixer_hidden") == config_.mixer_hidden;
  if (!same) throw std::runtime_error("checkpoint architecture does not match: " + path);
  const auto agent = j.at("agent").get<std::vector<double>>();
  const auto mix = j.at("mixer_params").get<std::vector<double>>();
  auto agent_blocks = emu::parameter_spans(agents_.network());
  auto mix_blocks = mixer_.parameter_spans();
  if (agent.size() != parameter_count(agents_.network()) ||
      mix.size() != static_cast<std::size_t>(flatten(mix_blocks).size())) {
    throw std::runtime_error("checkpoint parameter count mismatch: " + path);
  }
  unflatten(agent, agent_blocks);
  unflatten(mix, mix_blocks);
  train_steps_ = j.at("train_steps").get<std::int64_t>();
  sync_target();
}

void RunConfig::validate() const {
  train.validate();
  embedding.validate();
  incentive.validate();
  if (memory_capacity == 0) throw std::invalid_argument("run: memory capacity must be >= 1");
  if (t_max < 0) throw std::invalid_argument("run: t_max must be >= 0");
  if (eval_interval < 1) throw std::invalid_argument("run: eval_interval must be >= 1");
  if (t_max > 0 && eval_interval > t_max) throw std::invalid_argument("run: eval_interval must be <= t_max");
  if (eval_episodes < 1) throw std::invalid_argument("run: eval_episodes must be >= 1");
  if (delta.kind == DeltaPolicy::Kind::kFixed && !(delta.value > 0.0)) {
    throw std::invalid_argument("run: fixed delta must be > 0");
  }
}

Trajectory rollout(const Environment& env, const AgentNet& agents, double epsilon, Rng& rng,
                   const Embedder* embedder, E3BState* e3b, std::vector<double>* intrinsic) {
  if (e3b != nullptr && embedder == nullptr) throw std::invalid_argument("rollout: e3b requires an embedder");
  Trajectory traj;
  EnvState state = env.reset(rng);
  std::vector<int> last(env.num_agents(), -1);
  if (e3b) e3b->reset();
  if (intrinsic) intrinsic->clear();
  while (!state.terminal) {
    const std::vector<Vector> obs = env.observe(state);
    const JointAction joint = select_actions(agents, obs, last, epsilon, rng);
    Transition tr = env.step(state, joint);
    if (e3b) {
      const Vector phi = embedder->embed(env.global_state(tr.next_state), tr.next_state.t);
      const double b = e3b->bonus_and_update(phi);
      if (intrinsic) intrinsic->push_back(b);
    } else if (intrinsic) {
      intrinsic->push_back(0.0);
    }
    traj.episode_return += tr.reward;
    for (int i = 0; i < env.num_agents(); ++i) last[i] = static_cast<int>(joint[i]);
    state = tr.next_state;
    traj.transitions.push_back(std::move(tr));
  }
  traj.desirable = label_desirability(traj, env.return_threshold());
  return traj;
}

EvalResult evaluate_greedy(const Environment& env, const AgentNet& agents, int episodes, Rng& rng) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  EvalResult out;
  int wins = 0;
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const Trajectory traj = rollout(env, agents, 0.0, rng);
    wins += traj.desirable ? 1 : 0;
    total += traj.episode_return;
  }
  out.win_rate = static_cast<double>(wins) / episodes;
  out.mean_return = total / episodes;
  return out;
}

namespace {

Embedder build_embedder(const Environment& env, const EmbeddingConfig& c, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 4);
  return Embedder(c, env.state_dim(), env.t_max(), rng);
}

}  // namespace

Trainer::Trainer(const Environment& env, const RunConfig& config, std::uint64_t seed)
    : env_(env),
      config_(config),
      seed_(seed),
      action_rng_(derive_rng(seed, 2)),
      replay_rng_(derive_rng(seed, 3)),
      embed_rng_(derive_rng(seed, 5)),
      eval_rng_(derive_rng(seed, 8)),
      learner_(env, config.train, config.incentive, seed),
      embedder_(build_embedder(env, config.embedding, seed)),
      memory_(config.embedding.embed_dim, env.state_dim(), config.memory_capacity,
              config.delta.resolve(config.memory_capacity, config.embedding.embed_dim)),
      replay_(static_cast<std::size_t>(config.train.replay_capacity)) {
  config_.validate();
}

void Trainer::set_memory(EpisodicBuffer memory) {
  if (memory.embed_dim() != memory_.embed_dim() || memory.state_dim() != memory_.state_dim()) {
    throw std::invalid_argument("trainer: episodic buffer shape mismatch");
  }
  memory_ = std::move(memory);
}

bool Trainer::uses_memory() const {
  return config_.incentive.uses_memory() ||
         (config_.incentive.kind == IncentiveKind::kE3B && embedder_.trainable());
}

MetricsRow Trainer::evaluate_row(std::int64_t grid_step) {
  const EvalResult ev = evaluate_greedy(env_, learner_.agents(), config_.eval_episodes, eval_rng_);
  MetricsRow row;
  row.seed = seed_;
  row.env_steps = grid_step;
  row.test_win_rate = ev.win_rate;
  row.mean_test_return = ev.mean_return;
  row.mean_incentive = incentive_n_ > 0 ? incentive_sum_ / static_cast<double>(incentive_n_) : 0.0;
  row.buffer_size = memory_.size();
  row.embed_loss = last_embed_loss_;
  row.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  incentive_sum_ = 0.0;
  incentive_n_ = 0;
  return row;
}

void Trainer::train_round() {
  const auto batch_size = static_cast<std::size_t>(config_.train.batch_episodes);
  if (replay_.size() < batch_size) return;
  EpisodicBuffer* memory = config_.incentive.uses_memory() ? &memory_ : nullptr;
  for (int c = 0; c < config_.train.n_circle; ++c) {
    const auto batch = replay_.sample(batch_size, replay_rng_);
    const LossReport report = learner_.train(batch, memory, &embedder_);
    incentive_sum_ += report.incentive_sum;
    incentive_n_ += report.transitions;
  }
}

std::vector<MetricsRow> Trainer::run(const std::function<void(const MetricsRow&)>& on_row) {
  started_ = std::chrono::steady_clock::now();
  std::vector<MetricsRow> rows;
  const std::int64_t t_max = config_.t_max;
  if (t_max == 0) return rows;

  const bool memory_on = uses_memory();
  const bool e3b_on = config_.incentive.kind == IncentiveKind::kE3B;
  std::optional<E3BState> e3b;
  if (e3b_on) e3b.emplace(embedder_.embed_dim(), config_.incentive.lambda_e3b);

  std::int64_t next_eval = 0;
  auto advance = [&](std::int64_t g) {
    if (g >= t_max) return t_max + 1;
    return std::min(g + config_.eval_interval, t_max);
  };
  auto emit_due = [&](bool flush) {
    while (next_eval <= t_max && (flush || t_env_ >= next_eval)) {
      rows.push_back(evaluate_row(next_eval));
      if (on_row) on_row(rows.back());
      next_eval = advance(next_eval);
    }
  };

  const std::int64_t t_emb = config_.embedding.update_interval;
  std::int64_t next_emb = t_emb;
  std::vector<double> intrinsic;
  while (t_env_ < t_max) {
    emit_due(false);
    const double eps = config_.train.epsilon(t_env_);
    const Trajectory traj = rollout(env_, learner_.agents(), eps, action_rng_,
                                    e3b_on ? &embedder_ : nullptr, e3b ? &*e3b : nullptr,
                                    &intrinsic);
    t_env_ += static_cast<std::int64_t>(traj.transitions.size());
    if (memory_on) memory_.construct_from_trajectory(traj, env_, config_.train.gamma, embedder_);
    replay_.add(to_episode(traj, env_, intrinsic));
    train_round();
    if (memory_on && embedder_.trainable() && t_env_ >= next_emb) {
      const std::vector<double> losses = train_embedder(embedder_, memory_, embed_rng_);
      if (!losses.empty()) {
        last_embed_loss_ = std::accumulate(losses.begin(), losses.end(), 0.0) /
                           static_cast<double>(losses.size());
      }
      memory_.rekey_all(embedder_);
      while (next_emb <= t_env_) next_emb += t_emb;
    }
  }
  emit_due(true);
  return rows;
}

std::vector<MetricsRow> train_run(const Environment& env, const RunConfig& config,
                                  std::uint64_t seed,
                                  const std::function<void(const MetricsRow&)>& on_row) {
  Trainer trainer(env, config, seed);
  return trainer.run(on_row);
}

}  // namespace emu
