#pragma once

// Dense tensors and a small feed-forward network core with analytic
// reverse-mode gradients. Batched calls use one column per sample.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <variant>
#include <vector>

namespace emu {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

enum class Activation { kIdentity, kRelu };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::kIdentity;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

struct LayerNorm {
  Vector gain;
  Vector shift;
  double epsilon = 1e-5;

  Index dim() const { return gain.size(); }
};

using Layer = std::variant<DenseLayer, LayerNorm>;

// An ordered stack of layers. A Network of identical shape doubles as the
// gradient accumulator for another Network.
struct Network {
  std::vector<Layer> layers;

  Index input_dim() const;
  Index output_dim() const;
};

// Intermediate values recorded by forward() for use by backward().
struct ForwardTape {
  std::vector<Matrix> inputs;   // input to layer i
  std::vector<Matrix> hidden;   // dense: pre-activation; layer norm: x_hat
  std::vector<Vector> inv_std;  // layer norm only (empty for dense)
};

// Single-vector forward through one dense layer. Throws on shape mismatch.
Vector dense_forward(const DenseLayer& layer, const Vector& input);

Matrix forward(const Network& net, const Matrix& input, ForwardTape* tape = nullptr);
Vector forward(const Network& net, const Vector& input);

// Accumulates d(sum upstream . output)/d(params) into `grads` and returns the
// gradient with respect to the network input. `tape` must come from a
// forward() call on the same parameters.
Matrix backward(const Network& net, const ForwardTape& tape, const Matrix& upstream,
                Network* grads);

// Xavier-uniform weights, zero biases; layer norm starts at gain 1, shift 0.
DenseLayer make_dense(Index in, Index out, Activation activation, Rng& rng);
LayerNorm make_layer_norm(Index dim, double epsilon = 1e-5);

// widths = {in, h1, ..., out}; hidden layers use `hidden`, the last `output`.
Network make_mlp(std::span<const Index> widths, Activation hidden, Activation output, Rng& rng);

Network zeros_like(const Network& net);
void set_zero(Network* net);

// Views over every parameter block, in a fixed order.
std::vector<std::span<double>> parameter_spans(Network& net);
std::vector<std::span<const double>> parameter_spans(const Network& net);
std::size_t parameter_count(const Network& net);

// Concatenation helpers for multi-network models.
std::vector<double> flatten(std::span<const std::span<double>> blocks);
void unflatten(std::span<const double> flat, std::span<const std::span<double>> blocks);
double global_norm(std::span<const std::span<double>> blocks);
void scale(std::span<const std::span<double>> blocks, double factor);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected adaptive-moment optimizer over a fixed list of parameter
// blocks. Moment buffers are sized on first use and must keep matching.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Throws std::invalid_argument on shape mismatch or non-finite gradient.
  void step(std::span<const std::span<double>> params,
            std::span<const std::span<double>> grads);

  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Central-difference check of analytic gradients against `loss`, which must
// read the parameters through `params`. Returns the max relative error
// |analytic - fd| / max(|analytic|, |fd|, 1e-8) over all coordinates.
double grad_check(const std::function<double()>& loss,
                  std::span<const std::span<double>> params,
                  std::span<const std::span<double>> analytic, double h);

// Network form: the scalar is sum(upstream . forward(net, input)).
double grad_check(Network net, const Matrix& input, const Matrix& upstream, double h);

// Deterministic child stream for a named component of a seeded run.
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

}  // namespace emu
