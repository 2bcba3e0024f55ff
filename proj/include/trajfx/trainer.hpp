#pragma once

#include <cmath>
#include <ostream>
#include <span>
#include <vector>

#include "trajfx/common.hpp"
#include "trajfx/denoiser.hpp"
#include "trajfx/error.hpp"
#include "trajfx/optim.hpp"
#include "trajfx/rng.hpp"
#include "trajfx/schedule.hpp"

namespace trajfx {

struct ArchConfig {
  std::vector<int> hidden_widths{64, 64};
  int embed_dim = 16;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct DdpmTrainResult {
  DenoiserParams params;
  std::vector<EpochRecord> history;
};

/// Minimizes E_{t, x, eps} L_t with uniform t (lambda_t = 1) using AdamW.
/// Per-example (t, eps) are keyed by (seed, epoch, sample index) and batch
/// gradients are summed in sample order, so the result does not depend on
/// `workers`.
inline DdpmTrainResult train_ddpm(std::span<const Vec> data, const NoiseSchedule& schedule,
                                  const ArchConfig& arch, const TrainConfig& cfg,
                                  unsigned workers = 1) {
  if (data.empty()) throw ParameterError("train_ddpm: empty dataset");
  cfg.validate();
  const int dim = static_cast<int>(data.front().size());
  for (const Vec& x : data)
    if (static_cast<int>(x.size()) != dim) throw ParameterError("train_ddpm: ragged dataset");

  DdpmTrainResult res{init_params(dim, std::span<const int>(arch.hidden_widths), arch.embed_dim,
                                  cfg.seed, schedule.T),
                      {}};
  DenoiserParams& net = res.params;
  AdamWState opt(net.param_count(), AdamWHyper{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const std::size_t n = data.size();
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, n);
  std::vector<Vec> slot_grads(batch);
  std::vector<double> slot_loss(batch);
  Vec grad(net.param_count());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.hyper.lr = step_lr(cfg.lr, epoch, cfg.sched_step_epochs, cfg.sched_gamma);
    const auto order = CounterRng(cfg.seed, StreamDomain::kShuffle, epoch).permutation(n);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      parallel_for(len, workers, [&](std::size_t k) {
        const std::size_t i = order[start + k];
        CounterRng rng(cfg.seed, StreamDomain::kTrainStep, epoch, i);
        const int t = static_cast<int>(rng.uniform_index(schedule.T));
        const Vec eps = rng.normal_vector(dim);
        GradBundle g = loss_and_grads(net, data[i], t, eps, schedule, false, true);
        slot_loss[k] = g.loss;
        slot_grads[k] = std::move(*g.grad_theta);
      });
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        batch_loss += slot_loss[k];
        const Vec& gk = slot_grads[k];
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += gk[j];
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("non-finite DDPM training loss").at_epoch(epoch);
      const double inv = 1.0 / static_cast<double>(len);
      for (double& gj : grad) gj *= inv;
      adamw_step(net.theta, grad, opt);
      epoch_loss += batch_loss;
    }
    res.history.push_back({epoch, epoch_loss / static_cast<double>(n), opt.hyper.lr});
  }
  return res;
}

inline void write_loss_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
  os << "epoch,mean_loss,lr\n";
  for (const auto& r : history)
    os << r.epoch << ',' << format_double(r.mean_loss) << ',' << format_double(r.lr) << '\n';
}

}  // namespace trajfx
