#pragma once

// State embeddings used as episodic-memory keys: a frozen random projection,
// a return-predicting encoder (EmbNet) and a timestep-conditioned
// autoencoder (dCAE) with return and reconstruction heads.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emu/numerics.hpp"

namespace emu {

class EpisodicBuffer;

enum class EmbedMode { kRandom, kEmbNet, kDcae };

std::string to_string(EmbedMode mode);
EmbedMode parse_embed_mode(const std::string& text);

struct EmbeddingConfig {
  EmbedMode mode = EmbedMode::kDcae;
  int embed_dim = 4;
  double lambda_rcon = 0.1;
  int update_interval = 1000;   // env steps between embedder updates
  int train_samples = 102400;   // N, capped at the buffer size
  int batch_size = 1024;        // B
  int hidden = 64;
  int embnet_decoder_hidden = 128;
  AdamConfig adam;

  void validate() const;
};

struct EmbedBatch {
  Matrix states;               // state_dim x B
  Vector returns;              // B
  std::vector<int> timesteps;  // B

  Index size() const { return states.cols(); }
};

struct EmbedLoss {
  double total = 0.0;
  double return_term = 0.0;  // mean (H - H_pred)^2
  double recon_term = 0.0;   // mean ||s - s_pred||^2, unscaled
};

struct Decoded {
  Vector returns;  // B
  Matrix states;   // state_dim x B; empty unless dCAE
};

class Embedder {
 public:
  Embedder(const EmbeddingConfig& config, int state_dim, int t_max, Rng& rng);

  EmbedMode mode() const { return config_.mode; }
  const EmbeddingConfig& config() const { return config_; }
  int embed_dim() const { return config_.embed_dim; }
  int state_dim() const { return state_dim_; }
  int t_max() const { return t_max_; }
  bool trainable() const { return config_.mode != EmbedMode::kRandom; }

  // Deterministic key for (state, t). Random mode ignores t.
  Vector embed(const Vector& state, int t) const;
  Matrix embed_batch(const Matrix& states, std::span<const int> timesteps) const;
  Decoded decode(const Matrix& keys, std::span<const int> timesteps) const;

  // Both loss terms at the current parameters. Throws in Random mode.
  EmbedLoss evaluate(const EmbedBatch& batch, double lambda_rcon) const;
  // Loss and its gradient; the gradient is left in gradient_spans().
  double compute_gradient(const EmbedBatch& batch, double lambda_rcon);
  // One optimizer step on `batch` with the configured lambda_rcon.
  double train_step(const EmbedBatch& batch);

  std::vector<std::span<double>> parameter_spans();
  std::vector<std::span<double>> gradient_spans();

  // Random mode only: replace the frozen k x state_dim projection.
  void set_projection(Matrix projection);
  const Matrix& projection() const { return projection_; }

  const Network& encoder() const { return encoder_; }
  const Network& trunk() const { return trunk_; }
  const Network& return_head() const { return return_head_; }
  const Network& state_head() const { return state_head_; }

  // Incremented whenever parameters change.
  std::uint64_t version() const { return version_; }

  double normalized_time(int t) const { return static_cast<double>(t) / t_max_; }

 private:
  Matrix encoder_input(const Matrix& states, std::span<const int> timesteps) const;
  Matrix trunk_input(const Matrix& keys, std::span<const int> timesteps) const;

  EmbeddingConfig config_;
  int state_dim_;
  int t_max_;
  Matrix projection_;
  Network encoder_;
  Network trunk_;
  Network return_head_;
  Network state_head_;
  Network encoder_grad_;
  Network trunk_grad_;
  Network return_head_grad_;
  Network state_head_grad_;
  Adam adam_;
  std::uint64_t version_ = 0;
};

// mean_b (H_b - f_psi(f_phi(s_b)))^2
double embnet_loss(const Embedder& embedder, const EmbedBatch& batch);
// mean_b (H_b - f_psi^H(x_b|t_b))^2 + lambda_rcon * ||s_b - f_psi^s(x_b|t_b)||^2
double dcae_loss(const Embedder& embedder, const EmbedBatch& batch, double lambda_rcon);

// Samples min(N, |buffer|) records without replacement and runs one
// optimizer step per full batch of B (a single batch when fewer than B
// samples exist). Returns the per-batch losses; no-op in Random mode or on
// an empty buffer.
std::vector<double> train_embedder(Embedder& embedder, const EpisodicBuffer& buffer, Rng& rng);

}  // namespace emu
