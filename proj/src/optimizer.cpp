#include "attnlab/optimizer.hpp"

#include <cmath>
#include <numbers>

namespace attnlab {

void AdamwConfig::validate() const {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("AdamwConfig: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("AdamwConfig: eps must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("AdamwConfig: weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("AdamwConfig: clip_norm must be > 0");
}

void ScheduleConfig::validate() const {
  if (!(lr_min > 0.0) || lr_min > lr_max) {
    throw std::invalid_argument("ScheduleConfig: need 0 < lr_min <= lr_max");
  }
  if (warmup_steps >= decay_steps) {
    throw std::invalid_argument("ScheduleConfig: warmup_steps must be < decay_steps");
  }
}

AdamState AdamState::zeros_like(std::span<const Matrix* const> params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Matrix* p : params) {
    state.m.emplace_back(p->rows, p->cols, 0.0);
    state.v.emplace_back(p->rows, p->cols, 0.0);
  }
  return state;
}

double lr_at(std::uint64_t step, const ScheduleConfig& sched) {
  if (step < sched.warmup_steps) {
    return sched.lr_max * static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
  }
  if (step >= sched.decay_steps) return sched.lr_min;
  const double progress = static_cast<double>(step - sched.warmup_steps) /
                          static_cast<double>(sched.decay_steps - sched.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return sched.lr_min + (sched.lr_max - sched.lr_min) * cosine;
}

double clip_global_norm(std::span<Matrix* const> grads, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_global_norm: clip_norm must be > 0");
  const double norm = global_l2_norm(std::span<const Matrix* const>(
      const_cast<const Matrix* const*>(grads.data()), grads.size()));
  if (norm > clip_norm) {
    const double factor = clip_norm / norm;
    for (Matrix* g : grads) {
      for (double& x : g->data) x *= factor;
    }
  }
  return norm;
}

void adamw_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                AdamState& state, const AdamwConfig& cfg, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adamw_step: parameter/gradient/state count mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  for (std::size_t idx = 0; idx < params.size(); ++idx) {
    Matrix& theta = *params[idx];
    const Matrix& g = *grads[idx];
    Matrix& m = state.m[idx];
    Matrix& v = state.v[idx];
    if (!theta.same_shape(g) || !theta.same_shape(m)) {
      throw std::invalid_argument("adamw_step: shape mismatch at parameter " +
                                  std::to_string(idx));
    }
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      theta.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                             cfg.weight_decay * theta.data[i]);
    }
  }
}

}  // namespace attnlab
