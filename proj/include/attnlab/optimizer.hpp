#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "attnlab/matcore.hpp"

namespace attnlab {

struct AdamwConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;

  void validate() const;
};

struct ScheduleConfig {
  double lr_max = 6e-4;
  double lr_min = 6e-5;
  std::uint64_t warmup_steps = 2000;
  std::uint64_t decay_steps = 600000;

  void validate() const;
};

// Moment buffers mirror the parameter shapes; t counts completed steps.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(std::span<const Matrix* const> params);
};

// Linear ramp 0 -> lr_max over warmup_steps, cosine lr_max -> lr_min reaching
// lr_min at decay_steps, constant lr_min afterward. Continuous at the
// warmup/cosine boundary.
double lr_at(std::uint64_t step, const ScheduleConfig& sched);

// Scales all gradients in place by clip_norm/norm when the global L2 norm
// exceeds clip_norm. Returns the observed pre-clip norm.
double clip_global_norm(std::span<Matrix* const> grads, double clip_norm);

// One AdamW step with decoupled weight decay:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr (mhat / (sqrt(vhat) + eps) + weight_decay * theta)
// Clipping is the caller's job. Increments state.t by exactly 1.
void adamw_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                AdamState& state, const AdamwConfig& cfg, double lr);

}  // namespace attnlab
