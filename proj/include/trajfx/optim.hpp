#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "trajfx/common.hpp"
#include "trajfx/error.hpp"

namespace trajfx {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::int64_t step_count = 0;
  Vec m;
  Vec v;
  AdamWHyper hyper;

  AdamWState() = default;
  AdamWState(std::size_t n, AdamWHyper h) : m(n, 0.0), v(n, 0.0), hyper(h) {}
};

/// One AdamW update with decoupled weight decay:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
inline void adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& st) {
  if (grads.size() != params.size() || st.m.size() != params.size() ||
      st.v.size() != params.size())
    throw ParameterError("adamw_step: parameter, gradient and state lengths differ");
  const AdamWHyper& h = st.hyper;
  ++st.step_count;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g;
    st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g * g;
    const double m_hat = st.m[i] / bc1;
    const double v_hat = st.v[i] / bc2;
    params[i] -= h.lr * (m_hat / (std::sqrt(v_hat) + h.eps_hat) + h.weight_decay * params[i]);
  }
}

/// lr0 * gamma^floor(epoch / step_epochs)
inline double step_lr(double lr0, int epoch, int step_epochs, double gamma) {
  if (epoch < 0) throw ParameterError("epoch must be >= 0");
  if (step_epochs < 1) throw ParameterError("step_epochs must be >= 1");
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_epochs));
}

struct TrainConfig {
  int epochs = 100;
  int batch_size = 50;
  double lr = 1e-3;
  double weight_decay = 10.0;
  int sched_step_epochs = 5;
  double sched_gamma = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || !(lr > 0.0) || weight_decay < 0.0 ||
        sched_step_epochs < 1 || !(sched_gamma > 0.0 && sched_gamma <= 1.0))
      throw ParameterError("invalid TrainConfig");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear classifier recipe: batch 50, 100 epochs, AdamW lr 1e-3 with weight
/// decay 10, StepLR every 5 epochs by 0.8.
inline TrainConfig classifier_train_config(std::uint64_t seed = 0) {
  return TrainConfig{100, 50, 1e-3, 10.0, 5, 0.8, seed};
}

/// Desk-scale DDPM recipe: lr 2e-4, no decay, batch 64, constant schedule.
inline TrainConfig ddpm_train_config(std::uint64_t seed = 0, int epochs = 2000) {
  return TrainConfig{epochs, 64, 2e-4, 0.0, 1000000, 1.0, seed};
}

}  // namespace trajfx
