#include "emu/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "emu/episodic_memory.hpp"

namespace emu {

std::string to_string(EmbedMode mode) {
  switch (mode) {
    case EmbedMode::kRandom: return "random";
    case EmbedMode::kEmbNet: return "embnet";
    case EmbedMode::kDcae: return "dcae";
  }
  return "?";
}

EmbedMode parse_embed_mode(const std::string& text) {
  if (text == "random") return EmbedMode::kRandom;
  if (text == "embnet") return EmbedMode::kEmbNet;
  if (text == "dcae") return EmbedMode::kDcae;
  throw std::invalid_argument("unknown embedding mode: " + text);
}

void EmbeddingConfig::validate() const {
  if (embed_dim < 1) throw std::invalid_argument("embedding: embed_dim must be >= 1");
  if (lambda_rcon < 0.0) throw std::invalid_argument("embedding: lambda_rcon must be >= 0");
  if (update_interval < 1) throw std::invalid_argument("embedding: update interval must be >= 1");
  if (batch_size < 1 || train_samples < 1) {
    throw std::invalid_argument("embedding: sample and batch counts must be >= 1");
  }
  if (batch_size > train_samples) {
    throw std::invalid_argument("embedding: batch size must not exceed train sample count");
  }
  if (hidden < 1 || embnet_decoder_hidden < 1) {
    throw std::invalid_argument("embedding: hidden widths must be >= 1");
  }
}

Embedder::Embedder(const EmbeddingConfig& config, int state_dim, int t_max, Rng& rng)
    : config_(config), state_dim_(state_dim), t_max_(t_max), adam_(config.adam) {
  config_.validate();
  if (state_dim < 1) throw std::invalid_argument("embedding: state_dim must be >= 1");
  if (t_max < 1) throw std::invalid_argument("embedding: t_max must be >= 1");
  const Index k = config_.embed_dim;
  const Index d = state_dim_;
  const Index h = config_.hidden;
  switch (config_.mode) {
    case EmbedMode::kRandom: {
      std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(k)));
      projection_.resize(k, d);
      for (Index c = 0; c < d; ++c) {
        for (Index r = 0; r < k; ++r) projection_(r, c) = gauss(rng);
      }
      break;
    }
    case EmbedMode::kEmbNet: {
      const Index hd = config_.embnet_decoder_hidden;
      encoder_.layers = {make_dense(d, h, Activation::kRelu, rng),
                         make_dense(h, k, Activation::kIdentity, rng), make_layer_norm(k)};
      trunk_.layers = {make_dense(k, hd, Activation::kRelu, rng),
                       make_dense(hd, hd, Activation::kRelu, rng)};
      return_head_.layers = {make_dense(hd, 1, Activation::kIdentity, rng)};
      break;
    }
    case EmbedMode::kDcae: {
      encoder_.layers = {make_dense(d + 1, h, Activation::kRelu, rng),
                         make_dense(h, h, Activation::kRelu, rng),
                         make_dense(h, k, Activation::kIdentity, rng)};
      trunk_.layers = {make_dense(k + 1, h, Activation::kRelu, rng),
                       make_dense(h, h, Activation::kRelu, rng)};
      return_head_.layers = {make_dense(h, 1, Activation::kIdentity, rng)};
      state_head_.layers = {make_dense(h, d, Activation::kIdentity, rng)};
      break;
    }
  }
  encoder_grad_ = zeros_like(encoder_);
  trunk_grad_ = zeros_like(trunk_);
  return_head_grad_ = zeros_like(return_head_);
  state_head_grad_ = zeros_like(state_head_);
}

Matrix Embedder::encoder_input(const Matrix& states, std::span<const int> timesteps) const {
  if (states.rows() != state_dim_) throw std::invalid_argument("embed: state dimension mismatch");
  if (static_cast<Index>(timesteps.size()) != states.cols()) {
    throw std::invalid_argument("embed: one timestep per state required");
  }
  if (config_.mode != EmbedMode::kDcae) return states;
  Matrix in(state_dim_ + 1, states.cols());
  in.topRows(state_dim_) = states;
  for (Index b = 0; b < states.cols(); ++b) in(state_dim_, b) = normalized_time(timesteps[b]);
  return in;
}

Matrix Embedder::trunk_input(const Matrix& keys, std::span<const int> timesteps) const {
  if (config_.mode != EmbedMode::kDcae) return keys;
  const Index k = config_.embed_dim;
  Matrix in(k + 1, keys.cols());
  in.topRows(k) = keys;
  for (Index b = 0; b < keys.cols(); ++b) in(k, b) = normalized_time(timesteps[b]);
  return in;
}

Vector Embedder::embed(const Vector& state, int t) const {
  const int ts[1] = {t};
  return embed_batch(Matrix(state), ts).col(0);
}

Matrix Embedder::embed_batch(const Matrix& states, std::span<const int> timesteps) const {
  if (config_.mode == EmbedMode::kRandom) {
    if (states.rows() != state_dim_) throw std::invalid_argument("embed: state dimension mismatch");
    return projection_ * states;
  }
  return forward(encoder_, encoder_input(states, timesteps));
}

Decoded Embedder::decode(const Matrix& keys, std::span<const int> timesteps) const {
  if (config_.mode == EmbedMode::kRandom) {
    throw std::logic_error("decode: random projection has no decoder");
  }
  Matrix hidden = forward(trunk_, trunk_input(keys, timesteps));
  Decoded out;
  out.returns = forward(return_head_, hidden).row(0).transpose();
  if (config_.mode == EmbedMode::kDcae) out.states = forward(state_head_, hidden);
  return out;
}

EmbedLoss Embedder::evaluate(const EmbedBatch& batch, double lambda_rcon) const {
  if (config_.mode == EmbedMode::kRandom) {
    throw std::logic_error("embedder loss: random projection is not trainable");
  }
  if (batch.size() == 0) throw std::invalid_argument("embedder loss: empty batch");
  const Matrix keys = embed_batch(batch.states, batch.timesteps);
  const Decoded dec = decode(keys, batch.timesteps);
  const double n = static_cast<double>(batch.size());
  EmbedLoss loss;
  loss.return_term = (batch.returns - dec.returns).squaredNorm() / n;
  if (config_.mode == EmbedMode::kDcae) {
    loss.recon_term = (batch.states - dec.states).squaredNorm() / n;
  }
  loss.total = loss.return_term + lambda_rcon * loss.recon_term;
  return loss;
}

double Embedder::compute_gradient(const EmbedBatch& batch, double lambda_rcon) {
  if (config_.mode == EmbedMode::kRandom) {
    throw std::logic_error("embedder gradient: random projection is not trainable");
  }
  if (batch.size() == 0) throw std::invalid_argument("embedder gradient: empty batch");
  set_zero(&encoder_grad_);
  set_zero(&trunk_grad_);
  set_zero(&return_head_grad_);
  set_zero(&state_head_grad_);

  const double n = static_cast<double>(batch.size());
  ForwardTape enc_tape, trunk_tape, ret_tape, state_tape;
  const Matrix keys = forward(encoder_, encoder_input(batch.states, batch.timesteps), &enc_tape);
  const Matrix hidden = forward(trunk_, trunk_input(keys, batch.timesteps), &trunk_tape);
  const Matrix predicted = forward(return_head_, hidden, &ret_tape);

  const Eigen::RowVectorXd ret_err = batch.returns.transpose() - predicted.row(0);
  double loss = ret_err.squaredNorm() / n;
  Matrix d_hidden = backward(return_head_, ret_tape, (-2.0 / n) * ret_err, &return_head_grad_);

  if (config_.mode == EmbedMode::kDcae) {
    const Matrix recon = forward(state_head_, hidden, &state_tape);
    const Matrix rec_err = batch.states - recon;
    loss += lambda_rcon * rec_err.squaredNorm() / n;
    d_hidden += backward(state_head_, state_tape, (-2.0 * lambda_rcon / n) * rec_err,
                         &state_head_grad_);
  }
  const Matrix d_trunk_in = backward(trunk_, trunk_tape, d_hidden, &trunk_grad_);
  backward(encoder_, enc_tape, d_trunk_in.topRows(config_.embed_dim), &encoder_grad_);
  return loss;
}

double Embedder::train_step(const EmbedBatch& batch) {
  const double loss = compute_gradient(batch, config_.lambda_rcon);
  if (!std::isfinite(loss)) throw std::runtime_error("embedder: non-finite loss");
  adam_.step(parameter_spans(), gradient_spans());
  ++version_;
  return loss;
}

std::vector<std::span<double>> Embedder::parameter_spans() {
  std::vector<std::span<double>> out;
  for (Network* net : {&encoder_, &trunk_, &return_head_, &state_head_}) {
    auto spans = emu::parameter_spans(*net);
    out.insert(out.end(), spans.begin(), spans.end());
  }
  return out;
}

std::vector<std::span<double>> Embedder::gradient_spans() {
  std::vector<std::span<double>> out;
  for (Network* net : {&encoder_grad_, &trunk_grad_, &return_head_grad_, &state_head_grad_}) {
    auto spans = emu::parameter_spans(*net);
    out.insert(out.end(), spans.begin(), spans.end());
  }
  return out;
}

void Embedder::set_projection(Matrix projection) {
  if (config_.mode != EmbedMode::kRandom) {
    throw std::logic_error("set_projection: only valid in random mode");
  }
  if (projection.rows() != config_.embed_dim || projection.cols() != state_dim_) {
    throw std::invalid_argument("set_projection: expected embed_dim x state_dim");
  }
  projection_ = std::move(projection);
  ++version_;
}

double embnet_loss(const Embedder& embedder, const EmbedBatch& batch) {
  return embedder.evaluate(batch, 0.0).return_term;
}

double dcae_loss(const Embedder& embedder, const EmbedBatch& batch, double lambda_rcon) {
  if (embedder.mode() != EmbedMode::kDcae) {
    throw std::logic_error("dcae_loss: embedder is not a dCAE");
  }
  return embedder.evaluate(batch, lambda_rcon).total;
}

std::vector<double> train_embedder(Embedder& embedder, const EpisodicBuffer& buffer, Rng& rng) {
  std::vector<double> losses;
  if (!embedder.trainable() || buffer.size() == 0) return losses;
  const auto& cfg = embedder.config();
  std::vector<std::size_t> slots = buffer.live_slots();
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.train_samples), slots.size());
  // Partial Fisher-Yates: the first n entries become a uniform sample
  // without replacement.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, slots.size() - 1);
    std::swap(slots[i], slots[pick(rng)]);
  }
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t rounds = n < batch ? 1 : n / batch;
  const std::size_t width = n < batch ? n : batch;
  losses.reserve(rounds);
  for (std::size_t r = 0; r < rounds; ++r) {
    std::span<const std::size_t> chunk(slots.data() + r * width, width);
    losses.push_back(embedder.train_step(buffer.gather(chunk)));
  }
  return losses;
}

}  // namespace emu
