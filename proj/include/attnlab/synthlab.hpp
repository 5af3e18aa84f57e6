#pragma once

#include <cstdint>
#include <vector>

#include "attnlab/attention.hpp"
#include "attnlab/matcore.hpp"
#include "attnlab/optimizer.hpp"

namespace attnlab {

// Banded row-stochastic target: support 0 < i-j <= band, Bernoulli(p) draws
// row-normalized to sum 1. Row 0 has an empty band and gets P[0,0] = 1; a row
// whose band draws all zeros is redrawn until nonzero (both rules keep every
// row stochastic and are stable under the seed).
struct BandedTargetSpec {
  std::size_t n = 2500;
  std::size_t band = 50;
  double bernoulli_p = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

Matrix gen_banded_target(const BandedTargetSpec& spec);

struct SynthLossResult {
  double loss = 0.0;
  Matrix d_query;
  Matrix d_key;
  double max_abs_logit_all = 0.0;       // max |QK^T| over every entry
  double max_abs_logit_unmasked = 0.0;  // max |QK^T| over mask-allowed entries
};

// loss = mean over all n^2 entries of (masked_softmax_rows(QK^T, mask, 1) -
// p_target)^2. Scale is fixed at 1 for this task. The value matrix is the
// identity, so the attention output IS the probability matrix and the
// gradients reduce to the dS = P (.) (dP - rowsum(dP (.) P)) chain without the
// two n^3 products a literal V = I pass would cost. A unit test pins this
// shortcut against attend_backward with an explicit identity V.
SynthLossResult synth_loss_and_grads(const Matrix& q, const Matrix& k,
                                     const AdditiveMask& mask, const Matrix& p_target);

struct SynthRunConfig {
  BandedTargetSpec target;
  std::size_t d_k = 25;
  MaskSpec mask = MaskSpec::global_causal();
  std::size_t steps = 100000;
  std::size_t log_every = 100;
  double init_std = 0.1;
  std::uint64_t init_seed = 0;

  // Plain Adam with a fixed lr, no decay, no clipping by default. Set
  // use_schedule for the full warmup+cosine recipe, clip_norm > 0 to enable
  // clipping.
  double fixed_lr = 1e-3;
  bool use_schedule = false;
  ScheduleConfig schedule;
  AdamwConfig adamw = plain_adam();
  double clip_norm = 0.0;

  static AdamwConfig plain_adam() {
    AdamwConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.0;
    return cfg;
  }

  void validate() const;
};

struct CurveRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double max_abs_logit_all = 0.0;
  double max_abs_logit_unmasked = 0.0;
};

struct SynthRunResult {
  std::vector<CurveRecord> curve;
  Matrix q;  // final (initial when steps == 0)
  Matrix k;
  bool aborted_non_finite = false;
};

// Fits free Q,K against the banded target under cfg.mask. Logs every
// log_every steps plus the final step. A non-finite loss appends one
// diagnostic record and stops. Deterministic given (target.seed, init_seed).
SynthRunResult run_synth(const SynthRunConfig& cfg);

}  // namespace attnlab
