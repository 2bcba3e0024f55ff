#pragma once

// Noise-prediction network eps_theta(x_t, t): a fully connected SiLU network
// over [x_t ; sinusoidal(t)], with hand-written reverse-mode gradients of the
// per-step loss L_t = ||eps_theta(x_t, t) - eps||^2.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajfx/common.hpp"
#include "trajfx/error.hpp"
#include "trajfx/rng.hpp"
#include "trajfx/schedule.hpp"

namespace trajfx {

enum class Activation : std::uint32_t { kSiLU = 1 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kSiLU:
      return "silu";
  }
  return "unknown";
}

struct LayerShape {
  int in = 0;
  int out = 0;
  std::size_t offset = 0;  // weights (out x in, row-major) then bias (out)

  std::size_t weight_count() const noexcept { return static_cast<std::size_t>(in) * out; }
  std::size_t size() const noexcept { return weight_count() + out; }
};

/// Weights of eps_theta stored as one flat vector in layer order, so that
/// optimizer state and grad_theta share the same layout.
struct DenoiserParams {
  int data_dim = 0;
  int embed_dim = 0;
  int num_steps = 0;  // T used by the timestep embedding
  Activation activation = Activation::kSiLU;
  std::vector<LayerShape> layers;
  Vec theta;

  /// Zero-valued parameters for the given layer widths. Hidden widths may be
  /// empty, which yields a single affine layer.
  static DenoiserParams zeros(int data_dim, std::span<const int> hidden_widths, int embed_dim,
                              int num_steps) {
    if (data_dim < 1 || embed_dim < 0 || num_steps < 1)
      throw ParameterError("denoiser dims must be positive");
    if (embed_dim % 2 != 0) throw ParameterError("embed_dim must be even");
    DenoiserParams p;
    p.data_dim = data_dim;
    p.embed_dim = embed_dim;
    p.num_steps = num_steps;
    int in = data_dim + embed_dim;
    std::size_t offset = 0;
    auto add = [&](int out) {
      if (out < 1) throw ParameterError("layer widths must be >= 1");
      p.layers.push_back({in, out, offset});
      offset += p.layers.back().size();
      in = out;
    };
    for (int w : hidden_widths) add(w);
    add(data_dim);
    p.theta.assign(offset, 0.0);
    return p;
  }

  std::size_t param_count() const noexcept { return theta.size(); }
  std::size_t num_layers() const noexcept { return layers.size(); }

  std::span<double> weights(std::size_t l) {
    return {theta.data() + layers[l].offset, layers[l].weight_count()};
  }
  std::span<const double> weights(std::size_t l) const {
    return {theta.data() + layers[l].offset, layers[l].weight_count()};
  }
  std::span<double> bias(std::size_t l) {
    return {theta.data() + layers[l].offset + layers[l].weight_count(),
            static_cast<std::size_t>(layers[l].out)};
  }
  std::span<const double> bias(std::size_t l) const {
    return {theta.data() + layers[l].offset + layers[l].weight_count(),
            static_cast<std::size_t>(layers[l].out)};
  }

  std::vector<int> hidden_widths() const {
    std::vector<int> w;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) w.push_back(layers[l].out);
    return w;
  }

  std::string arch_string() const {
    std::string s = "mlp:" + std::string(activation_name(activation)) + ":d" +
                    std::to_string(data_dim) + ":e" + std::to_string(embed_dim) + ":T" +
                    std::to_string(num_steps) + ":h";
    for (int w : hidden_widths()) s += std::to_string(w) + ",";
    return s;
  }

  /// Digest of the architecture metadata (not the weight values).
  std::uint64_t arch_hash() const { return fnv1a(arch_string()); }

  /// Digest of the weight bytes, for manifests that must pin a checkpoint.
  std::uint64_t weights_digest() const {
    return fnv1a(std::string_view(reinterpret_cast<const char*>(theta.data()),
                                  theta.size() * sizeof(double)));
  }

  void validate() const {
    if (layers.empty()) throw ContractError("denoiser has no layers");
    if (layers.front().in != data_dim + embed_dim)
      throw ContractError("first layer width does not match data_dim + embed_dim");
    if (layers.back().out != data_dim) throw ContractError("last layer width must be data_dim");
    for (std::size_t l = 1; l < layers.size(); ++l)
      if (layers[l].in != layers[l - 1].out) throw ContractError("layer widths do not chain");
    if (!all_finite(theta)) throw NumericError("non-finite weight");
  }
};

/// Fan-in uniform initialization U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
inline DenoiserParams init_params(int data_dim, std::span<const int> hidden_widths, int embed_dim,
                                  std::uint64_t seed, int num_steps = 100) {
  if (hidden_widths.empty()) throw ParameterError("init_params needs at least one hidden layer");
  DenoiserParams p = DenoiserParams::zeros(data_dim, hidden_widths, embed_dim, num_steps);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CounterRng rng(seed, StreamDomain::kInit, l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.layers[l].in));
    for (double& w : p.weights(l)) w = (2.0 * rng.uniform() - 1.0) * bound;
    for (double& b : p.bias(l)) b = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return p;
}

inline DenoiserParams init_params(int data_dim, std::initializer_list<int> hidden_widths,
                                  int embed_dim, std::uint64_t seed, int num_steps = 100) {
  std::vector<int> w(hidden_widths);
  return init_params(data_dim, std::span<const int>(w), embed_dim, seed, num_steps);
}

/// Sinusoidal embedding [sin(t w_k) ; cos(t w_k)], w_k geometric from 1 down
/// to 1e-4, with t rescaled by 1000/T so small-T schedules see the same
/// angular range as a T=1000 model.
inline void timestep_embedding_into(int t, int embed_dim, int T, std::span<double> out) {
  if (embed_dim % 2 != 0) throw ParameterError("embed_dim must be even");
  if (T < 1) throw ParameterError("T must be positive");
  const int half = embed_dim / 2;
  const double scaled_t = static_cast<double>(t) * 1000.0 / T;
  for (int k = 0; k < half; ++k) {
    const double expo = half > 1 ? static_cast<double>(k) / (half - 1) : 0.0;
    const double freq = std::pow(1e-4, expo);
    out[k] = std::sin(scaled_t * freq);
    out[half + k] = std::cos(scaled_t * freq);
  }
}

inline Vec timestep_embedding(int t, int embed_dim, int T) {
  if (embed_dim % 2 != 0) throw ParameterError("embed_dim must be even");
  Vec e(embed_dim);
  timestep_embedding_into(t, embed_dim, T, e);
  return e;
}

namespace detail {

inline double sigmoid(double z) noexcept { return 1.0 / (1.0 + std::exp(-z)); }

/// Layer activations kept for the backward pass.
struct ForwardTrace {
  std::vector<Vec> inputs;  // inputs[l] = input to layer l
  std::vector<Vec> pre;     // pre-activation of hidden layers
  Vec output;
};

inline ForwardTrace forward(const DenoiserParams& p, std::span<const double> x_t, int t) {
  if (x_t.size() != static_cast<std::size_t>(p.data_dim))
    throw ParameterError("input has size " + std::to_string(x_t.size()) + ", expected " +
                         std::to_string(p.data_dim));
  ForwardTrace tr;
  tr.inputs.resize(p.layers.size());
  tr.pre.resize(p.layers.size());
  Vec& a0 = tr.inputs[0];
  a0.resize(p.data_dim + p.embed_dim);
  std::copy(x_t.begin(), x_t.end(), a0.begin());
  if (p.embed_dim > 0)
    timestep_embedding_into(t, p.embed_dim, p.num_steps,
                            std::span<double>(a0).subspan(p.data_dim));

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerShape& sh = p.layers[l];
    const auto W = p.weights(l);
    const auto b = p.bias(l);
    const Vec& in = tr.inputs[l];
    Vec z(sh.out);
    for (int o = 0; o < sh.out; ++o) {
      const double* row = W.data() + static_cast<std::size_t>(o) * sh.in;
      double acc = b[o];
      for (int i = 0; i < sh.in; ++i) acc += row[i] * in[i];
      z[o] = acc;
    }
    if (!all_finite(z))
      throw NumericError("non-finite activation in layer " + std::to_string(l), static_cast<int>(l));
    const bool last = l + 1 == p.layers.size();
    if (last) {
      tr.output = std::move(z);
    } else {
      Vec a(sh.out);
      for (int o = 0; o < sh.out; ++o) a[o] = z[o] * sigmoid(z[o]);
      tr.pre[l] = std::move(z);
      tr.inputs[l + 1] = std::move(a);
    }
  }
  return tr;
}

}  // namespace detail

/// Deterministic forward pass; returns the predicted noise.
inline Vec predict_eps(const DenoiserParams& p, std::span<const double> x_t, int t) {
  return detail::forward(p, x_t, t).output;
}

struct GradBundle {
  double loss = 0.0;
  std::optional<Vec> grad_x;
  std::optional<Vec> grad_theta;
  std::optional<Vec> per_group_sq_norms;  // one entry per layer
};

/// Loss and gradients at an already-noised input x_t against target `eps`.
/// grad_x here is with respect to x_t, scaled by `input_scale` (the chain-rule
/// factor dx_t/dx when the caller differentiates through forward_diffuse).
inline GradBundle loss_and_grads_at(const DenoiserParams& p, std::span<const double> x_t, int t,
                                    std::span<const double> eps, bool want_grad_x,
                                    bool want_grad_theta, double input_scale = 1.0) {
  if (eps.size() != static_cast<std::size_t>(p.data_dim))
    throw ParameterError("eps has wrong dimension");
  detail::ForwardTrace tr = detail::forward(p, x_t, t);

  GradBundle g;
  Vec delta(p.data_dim);
  for (int i = 0; i < p.data_dim; ++i) {
    const double r = tr.output[i] - eps[i];
    g.loss += r * r;
    delta[i] = 2.0 * r;
  }
  if (!want_grad_x && !want_grad_theta) return g;

  if (want_grad_theta) {
    g.grad_theta.emplace(p.param_count(), 0.0);
    g.per_group_sq_norms.emplace(p.layers.size(), 0.0);
  }

  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const LayerShape& sh = p.layers[l];
    const Vec& in = tr.inputs[l];
    const auto W = p.weights(l);
    if (want_grad_theta) {
      double* gw = g.grad_theta->data() + sh.offset;
      double* gb = gw + sh.weight_count();
      double sq = 0.0;
      for (int o = 0; o < sh.out; ++o) {
        const double d = delta[o];
        double* row = gw + static_cast<std::size_t>(o) * sh.in;
        for (int i = 0; i < sh.in; ++i) {
          row[i] = d * in[i];
          sq += row[i] * row[i];
        }
        gb[o] = d;
        sq += d * d;
      }
      (*g.per_group_sq_norms)[l] = sq;
    }
    if (l == 0 && !want_grad_x) break;

    // Back through the weights; for l == 0 only the x-part of the input matters.
    const int needed = l == 0 ? p.data_dim : sh.in;
    Vec up(needed, 0.0);
    for (int o = 0; o < sh.out; ++o) {
      const double d = delta[o];
      const double* row = W.data() + static_cast<std::size_t>(o) * sh.in;
      for (int i = 0; i < needed; ++i) up[i] += row[i] * d;
    }
    if (l == 0) {
      for (double& v : up) v *= input_scale;
      g.grad_x = std::move(up);
      break;
    }
    const Vec& z = tr.pre[l - 1];
    for (int i = 0; i < needed; ++i) {
      const double s = detail::sigmoid(z[i]);
      up[i] *= s * (1.0 + z[i] * (1.0 - s));
    }
    delta = std::move(up);
  }
  return g;
}

/// L_t = ||eps_theta(sqrt(abar_t) x + sqrt(1-abar_t) eps, t) - eps||^2 with
/// gradients taken with respect to the clean input x and to theta.
inline GradBundle loss_and_grads(const DenoiserParams& p, std::span<const double> x, int t,
                                 std::span<const double> eps, const NoiseSchedule& schedule,
                                 bool want_grad_x, bool want_grad_theta) {
  if (eps.size() != static_cast<std::size_t>(p.data_dim) ||
      x.size() != static_cast<std::size_t>(p.data_dim))
    throw ParameterError("x/eps dimension does not match the network");
  const Vec x_t = forward_diffuse(schedule, x, t, eps);
  return loss_and_grads_at(p, x_t, t, eps, want_grad_x, want_grad_theta,
                           std::sqrt(schedule.alpha_bars[t]));
}

}  // namespace trajfx
