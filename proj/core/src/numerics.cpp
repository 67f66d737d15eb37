#include "emu/numerics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace emu {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

Index layer_in(const Layer& layer) {
  return std::visit(Overloaded{[](const DenseLayer& d) { return d.in_dim(); },
                               [](const LayerNorm& n) { return n.dim(); }},
                    layer);
}

Index layer_out(const Layer& layer) {
  return std::visit(Overloaded{[](const DenseLayer& d) { return d.out_dim(); },
                               [](const LayerNorm& n) { return n.dim(); }},
                    layer);
}

}  // namespace

Index Network::input_dim() const { return layers.empty() ? 0 : layer_in(layers.front()); }
Index Network::output_dim() const { return layers.empty() ? 0 : layer_out(layers.back()); }

Vector dense_forward(const DenseLayer& layer, const Vector& input) {
  require(input.size() == layer.in_dim(), "dense_forward: input size != weight.cols");
  require(layer.bias.size() == layer.out_dim(), "dense_forward: bias size != weight.rows");
  Vector out = layer.weight * input + layer.bias;
  if (layer.activation == Activation::kRelu) out = out.cwiseMax(0.0);
  return out;
}

Matrix forward(const Network& net, const Matrix& input, ForwardTape* tape) {
  if (tape != nullptr) {
    tape->inputs.clear();
    tape->hidden.clear();
    tape->inv_std.clear();
  }
  Matrix current = input;
  for (const Layer& layer : net.layers) {
    require(current.rows() == layer_in(layer), "forward: shape mismatch");
    if (tape != nullptr) tape->inputs.push_back(current);
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      Matrix pre = dense->weight * current;
      pre.colwise() += dense->bias;
      if (dense->activation == Activation::kRelu) {
        current = pre.cwiseMax(0.0);
      } else {
        current = pre;
      }
      if (tape != nullptr) {
        tape->hidden.push_back(std::move(pre));
        tape->inv_std.emplace_back();
      }
    } else {
      const auto& norm = std::get<LayerNorm>(layer);
      const Index n = current.rows();
      Eigen::RowVectorXd mean = current.colwise().mean();
      Matrix centered = current.rowwise() - mean;
      Eigen::RowVectorXd var = centered.cwiseAbs2().colwise().sum() / static_cast<double>(n);
      Vector inv = (var.array() + norm.epsilon).rsqrt().transpose();
      Matrix x_hat = centered * inv.asDiagonal();
      current = (x_hat.array().colwise() * norm.gain.array()).colwise() + norm.shift.array();
      if (tape != nullptr) {
        tape->hidden.push_back(std::move(x_hat));
        tape->inv_std.push_back(std::move(inv));
      }
    }
  }
  return current;
}

Vector forward(const Network& net, const Vector& input) {
  Matrix out = forward(net, Matrix(input), nullptr);
  return out.col(0);
}

Matrix backward(const Network& net, const ForwardTape& tape, const Matrix& upstream,
                Network* grads) {
  require(tape.inputs.size() == net.layers.size(), "backward: tape does not match network");
  require(grads != nullptr && grads->layers.size() == net.layers.size(),
          "backward: gradient network shape mismatch");
  require(upstream.rows() == net.output_dim(), "backward: upstream rows != output dim");
  Matrix delta = upstream;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const Matrix& input = tape.inputs[i];
    require(delta.cols() == input.cols(), "backward: batch size mismatch");
    if (const auto* dense = std::get_if<DenseLayer>(&net.layers[i])) {
      auto& g = std::get<DenseLayer>(grads->layers[i]);
      if (dense->activation == Activation::kRelu) {
        delta = (tape.hidden[i].array() > 0.0).select(delta, 0.0);
      }
      g.weight.noalias() += delta * input.transpose();
      g.bias += delta.rowwise().sum();
      delta = dense->weight.transpose() * delta;
    } else {
      const auto& norm = std::get<LayerNorm>(net.layers[i]);
      auto& g = std::get<LayerNorm>(grads->layers[i]);
      const Matrix& x_hat = tape.hidden[i];
      const Vector& inv = tape.inv_std[i];
      const double n = static_cast<double>(x_hat.rows());
      g.gain += (delta.array() * x_hat.array()).rowwise().sum().matrix();
      g.shift += delta.rowwise().sum();
      Matrix dx_hat = (delta.array().colwise() * norm.gain.array()).matrix();
      Eigen::RowVectorXd sum_d = dx_hat.colwise().sum();
      Eigen::RowVectorXd sum_dx = (dx_hat.array() * x_hat.array()).colwise().sum();
      Matrix dx = (n * dx_hat.array()).matrix();
      dx.rowwise() -= sum_d;
      dx -= (x_hat.array().rowwise() * sum_dx.array()).matrix();
      delta = dx * (inv / n).asDiagonal();
    }
  }
  return delta;
}

DenseLayer make_dense(Index in, Index out, Activation activation, Rng& rng) {
  require(in > 0 && out > 0, "make_dense: dimensions must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer layer;
  layer.weight.resize(out, in);
  for (Index c = 0; c < in; ++c) {
    for (Index r = 0; r < out; ++r) layer.weight(r, c) = dist(rng);
  }
  layer.bias = Vector::Zero(out);
  layer.activation = activation;
  return layer;
}

LayerNorm make_layer_norm(Index dim, double epsilon) {
  require(epsilon > 0.0, "make_layer_norm: epsilon must be positive");
  return LayerNorm{Vector::Ones(dim), Vector::Zero(dim), epsilon};
}

Network make_mlp(std::span<const Index> widths, Activation hidden, Activation output, Rng& rng) {
  require(widths.size() >= 2, "make_mlp: need at least input and output widths");
  Network net;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    net.layers.emplace_back(make_dense(widths[i], widths[i + 1], last ? output : hidden, rng));
  }
  return net;
}

Network zeros_like(const Network& net) {
  Network out = net;
  set_zero(&out);
  return out;
}

void set_zero(Network* net) {
  for (Layer& layer : net->layers) {
    std::visit(Overloaded{[](DenseLayer& d) {
                            d.weight.setZero();
                            d.bias.setZero();
                          },
                          [](LayerNorm& n) {
                            n.gain.setZero();
                            n.shift.setZero();
                          }},
               layer);
  }
}

std::vector<std::span<double>> parameter_spans(Network& net) {
  std::vector<std::span<double>> out;
  for (Layer& layer : net.layers) {
    std::visit(Overloaded{[&](DenseLayer& d) {
                            out.emplace_back(d.weight.data(), static_cast<std::size_t>(d.weight.size()));
                            out.emplace_back(d.bias.data(), static_cast<std::size_t>(d.bias.size()));
                          },
                          [&](LayerNorm& n) {
                            out.emplace_back(n.gain.data(), static_cast<std::size_t>(n.gain.size()));
                            out.emplace_back(n.shift.data(), static_cast<std::size_t>(n.shift.size()));
                          }},
               layer);
  }
  return out;
}

std::vector<std::span<const double>> parameter_spans(const Network& net) {
  auto mutable_spans = parameter_spans(const_cast<Network&>(net));
  return {mutable_spans.begin(), mutable_spans.end()};
}

std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  for (auto block : parameter_spans(net)) n += block.size();
  return n;
}

std::vector<double> flatten(std::span<const std::span<double>> blocks) {
  std::vector<double> out;
  for (auto block : blocks) out.insert(out.end(), block.begin(), block.end());
  return out;
}

void unflatten(std::span<const double> flat, std::span<const std::span<double>> blocks) {
  std::size_t offset = 0;
  for (auto block : blocks) {
    require(offset + block.size() <= flat.size(), "unflatten: flat vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), block.size(), block.begin());
    offset += block.size();
  }
  require(offset == flat.size(), "unflatten: flat vector too long");
}

double global_norm(std::span<const std::span<double>> blocks) {
  double sum = 0.0;
  for (auto block : blocks) {
    for (double v : block) sum += v * v;
  }
  return std::sqrt(sum);
}

void scale(std::span<const std::span<double>> blocks, double factor) {
  for (auto block : blocks) {
    for (double& v : block) v *= factor;
  }
}

void Adam::step(std::span<const std::span<double>> params,
                std::span<const std::span<double>> grads) {
  require(params.size() == grads.size(), "adam: parameter/gradient block count mismatch");
  if (m_.empty()) {
    for (auto block : params) {
      m_.emplace_back(block.size(), 0.0);
      v_.emplace_back(block.size(), 0.0);
    }
  }
  require(m_.size() == params.size(), "adam: block count changed between steps");
  for (std::size_t b = 0; b < params.size(); ++b) {
    require(params[b].size() == grads[b].size() && params[b].size() == m_[b].size(),
            "adam: block shape mismatch");
    for (double g : grads[b]) {
      if (!std::isfinite(g)) throw std::invalid_argument("adam: non-finite gradient");
    }
  }
  ++step_;
  const auto& c = config_;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(step_));
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    auto g = grads[b];
    auto& m = m_[b];
    auto& v = v_[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

double grad_check(const std::function<double()>& loss,
                  std::span<const std::span<double>> params,
                  std::span<const std::span<double>> analytic, double h) {
  require(h > 0.0, "grad_check: step must be positive");
  require(params.size() == analytic.size(), "grad_check: block count mismatch");
  double worst = 0.0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    require(params[b].size() == analytic[b].size(), "grad_check: block shape mismatch");
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      double& p = params[b][i];
      const double saved = p;
      p = saved + h;
      const double plus = loss();
      p = saved - h;
      const double minus = loss();
      p = saved;
      const double fd = (plus - minus) / (2.0 * h);
      const double a = analytic[b][i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

double grad_check(Network net, const Matrix& input, const Matrix& upstream, double h) {
  ForwardTape tape;
  forward(net, input, &tape);
  Network grads = zeros_like(net);
  backward(net, tape, upstream, &grads);
  auto params = parameter_spans(net);
  auto analytic = parameter_spans(grads);
  auto loss = [&] { return (forward(net, input).array() * upstream.array()).sum(); };
  return grad_check(loss, params, analytic, h);
}

Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x9e3779b9u};
  return Rng(seq);
}

}  // namespace emu
