#include "attnlab/synthlab.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "attnlab/rng.hpp"

namespace attnlab {

void BandedTargetSpec::validate() const {
  if (band < 1 || band >= n) {
    throw std::invalid_argument("BandedTargetSpec: need 1 <= band < n, got band=" +
                                std::to_string(band) + " n=" + std::to_string(n));
  }
  if (!(bernoulli_p > 0.0) || bernoulli_p > 1.0) {
    throw std::invalid_argument("BandedTargetSpec: bernoulli_p must be in (0,1]");
  }
}

void SynthRunConfig::validate() const {
  target.validate();
  if (d_k < 1) throw std::invalid_argument("SynthRunConfig: d_k must be >= 1");
  if (log_every < 1) throw std::invalid_argument("SynthRunConfig: log_every must be >= 1");
  if (!(init_std >= 0.0)) throw std::invalid_argument("SynthRunConfig: init_std must be >= 0");
  if (!(fixed_lr > 0.0) && !use_schedule) {
    throw std::invalid_argument("SynthRunConfig: fixed_lr must be > 0");
  }
  adamw.validate();
  if (use_schedule) schedule.validate();
}

Matrix gen_banded_target(const BandedTargetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Matrix p(spec.n, spec.n, 0.0);
  p(0, 0) = 1.0;  // row 0 has no j with 0 < 0-j <= band
  for (std::size_t i = 1; i < spec.n; ++i) {
    const std::size_t lo = i > spec.band ? i - spec.band : 0;  // j in [lo, i-1]
    std::size_t nonzero = 0;
    while (nonzero == 0) {
      nonzero = 0;
      for (std::size_t j = lo; j < i; ++j) {
        const bool hit = rng.bernoulli(spec.bernoulli_p);
        p(i, j) = hit ? 1.0 : 0.0;
        nonzero += hit;
      }
    }
    const double inv = 1.0 / static_cast<double>(nonzero);
    for (std::size_t j = lo; j < i; ++j) p(i, j) *= inv;
  }
  return p;
}

SynthLossResult synth_loss_and_grads(const Matrix& q, const Matrix& k,
                                     const AdditiveMask& mask, const Matrix& p_target) {
  if (q.rows != k.rows || q.cols != k.cols) {
    throw std::invalid_argument("synth_loss_and_grads: Q and K must share shape");
  }
  const std::size_t n = q.rows;
  if (mask.rows != n || mask.cols != n || p_target.rows != n || p_target.cols != n) {
    throw std::invalid_argument("synth_loss_and_grads: mask/target must be n x n");
  }

  Matrix s = matmul_nt(q, k);
  Matrix p = masked_softmax_rows(s, mask, 1.0);

  SynthLossResult out;
  out.max_abs_logit_all = max_abs_entries(s);
  out.max_abs_logit_unmasked = max_abs_entries(s, mask);

  const double inv_n2 = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  double loss = 0.0;
  // dP = 2 (P - P*) / n^2, then dS = P (.) (dP - rowdot) reusing s as dS storage.
  for (std::size_t i = 0; i < n; ++i) {
    const double* pr = p.row(i);
    const double* tr = p_target.row(i);
    double* dsr = s.row(i);
    double rowdot = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double diff = pr[j] - tr[j];
      loss += diff * diff;
      const double dp = 2.0 * inv_n2 * diff;
      dsr[j] = dp;  // stash dP
      rowdot += dp * pr[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      dsr[j] = mask.at(i, j) ? pr[j] * (dsr[j] - rowdot) : 0.0;
    }
  }
  out.loss = loss * inv_n2;
  out.d_query = matmul(s, k);
  out.d_key = matmul_tn(s, q);
  return out;
}

SynthRunResult run_synth(const SynthRunConfig& cfg) {
  cfg.validate();
  const Matrix p_target = gen_banded_target(cfg.target);
  const AdditiveMask mask = build_mask(cfg.mask, cfg.target.n);

  Rng init_rng(cfg.init_seed);
  SynthRunResult out;
  out.q = random_normal(cfg.target.n, cfg.d_k, cfg.init_std, init_rng);
  out.k = random_normal(cfg.target.n, cfg.d_k, cfg.init_std, init_rng);

  std::vector<const Matrix*> param_view{&out.q, &out.k};
  AdamState state = AdamState::zeros_like(param_view);

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    SynthLossResult r = synth_loss_and_grads(out.q, out.k, mask, p_target);
    const bool log_now = step % cfg.log_every == 0 || step + 1 == cfg.steps;
    if (!std::isfinite(r.loss)) {
      out.curve.push_back({step, r.loss, r.max_abs_logit_all, r.max_abs_logit_unmasked});
      out.aborted_non_finite = true;
      break;
    }
    if (log_now) {
      out.curve.push_back({step, r.loss, r.max_abs_logit_all, r.max_abs_logit_unmasked});
    }
    std::vector<Matrix*> grads{&r.d_query, &r.d_key};
    if (cfg.clip_norm > 0.0) clip_global_norm(grads, cfg.clip_norm);
    const double lr = cfg.use_schedule ? lr_at(step, cfg.schedule) : cfg.fixed_lr;
    std::vector<Matrix*> params{&out.q, &out.k};
    std::vector<const Matrix*> grad_view{&r.d_query, &r.d_key};
    adamw_step(params, grad_view, state, cfg.adamw, lr);
  }
  return out;
}

}  // namespace attnlab
