#include "attnlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "attnlab/attention.hpp"
#include "attnlab/microlm.hpp"
#include "attnlab/rng.hpp"
#include "attnlab/synthlab.hpp"

namespace attnlab {

namespace {

constexpr double kStep = 1e-5;
constexpr double kFloor = 1e-4;

double rel_error(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), kFloor});
}

// Central differences of `loss` against analytic gradients, worst entry.
double fd_worst(const std::vector<Matrix*>& params,
                const std::vector<const Matrix*>& analytic,
                const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& m = *params[p];
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      const double saved = m.data[i];
      m.data[i] = saved + kStep;
      const double up = loss();
      m.data[i] = saved - kStep;
      const double down = loss();
      m.data[i] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      worst = std::max(worst, rel_error(analytic[p]->data[i], fd));
    }
  }
  return worst;
}

double probe(const Matrix& y, const Matrix& dy) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * dy.data[i];
  return acc;
}

GradcheckResult suite_attend(std::size_t seeds) {
  GradcheckResult result{"attend_backward", 0.0, seeds};
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    Rng rng(s);
    const std::size_t n = 2 + rng.next_below(7);   // <= 8
    const std::size_t dk = 1 + rng.next_below(8);  // <= 8
    const std::size_t dv = 1 + rng.next_below(8);
    Matrix q = random_normal(n, dk, 0.8, rng);
    Matrix k = random_normal(n, dk, 0.8, rng);
    Matrix v = random_normal(n, dv, 0.8, rng);
    Matrix dy = random_normal(n, dv, 1.0, rng);
    const MaskSpec spec = rng.bernoulli(0.5)
                              ? MaskSpec::global_causal()
                              : MaskSpec::local_causal(1 + rng.next_below(n));
    const AdditiveMask mask = build_mask(spec, n);
    const double scale = std::sqrt(static_cast<double>(dk));

    AttendResult fwd = attend(q, k, v, mask, scale);
    AttentionGrads g = attend_backward(q, k, v, mask, scale, fwd.trace, dy);
    auto loss = [&]() { return probe(attend(q, k, v, mask, scale).output, dy); };
    result.max_rel_error = std::max(
        result.max_rel_error,
        fd_worst({&q, &k, &v}, {&g.d_query, &g.d_key, &g.d_value}, loss));
  }
  return result;
}

GradcheckResult suite_mhsa(std::size_t seeds, bool qk_norm) {
  GradcheckResult result{qk_norm ? "mhsa_backward_qk_norm" : "mhsa_backward", 0.0, seeds};
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    Rng rng(1000 + s);
    const std::size_t h = 2;
    const std::size_t dh = 1 + rng.next_below(3);
    const std::size_t d = h * dh;
    const std::size_t n = 2 + rng.next_below(5);
    Matrix x = random_normal(n, d, 0.7, rng);
    Matrix dy = random_normal(n, d, 1.0, rng);
    MultiHeadWeights w;
    w.heads.resize(h);
    for (HeadWeights& head : w.heads) {
      head.w_query = random_normal(d, dh, 0.7, rng);
      head.w_key = random_normal(d, dh, 0.7, rng);
      head.w_value = random_normal(d, dh, 0.7, rng);
    }
    w.w_out = random_normal(h * dh, d, 0.7, rng);
    w.qk_gains = Matrix(1, h, std::sqrt(static_cast<double>(dh)));
    const LsLayout layout = LsLayout::local_global(1, 1, 1 + rng.next_below(n), qk_norm);
    const double scale = std::sqrt(static_cast<double>(dh));

    MhsaResult fwd = mhsa_forward(x, w, layout, scale);
    MhsaGrads g = mhsa_backward(x, w, layout, scale, fwd.traces, dy);
    auto loss = [&]() { return probe(mhsa_forward(x, w, layout, scale).output, dy); };

    std::vector<Matrix*> params{&x};
    std::vector<const Matrix*> analytic{&g.d_input};
    for (std::size_t head = 0; head < h; ++head) {
      params.push_back(&w.heads[head].w_query);
      analytic.push_back(&g.d_weights.heads[head].w_query);
      params.push_back(&w.heads[head].w_key);
      analytic.push_back(&g.d_weights.heads[head].w_key);
      params.push_back(&w.heads[head].w_value);
      analytic.push_back(&g.d_weights.heads[head].w_value);
    }
    params.push_back(&w.w_out);
    analytic.push_back(&g.d_weights.w_out);
    if (qk_norm) {
      params.push_back(&w.qk_gains);
      analytic.push_back(&g.d_weights.qk_gains);
    }
    result.max_rel_error = std::max(result.max_rel_error, fd_worst(params, analytic, loss));
  }
  return result;
}

GradcheckResult suite_synth(std::size_t seeds) {
  GradcheckResult result{"synth_loss_and_grads", 0.0, seeds};
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    Rng rng(2000 + s);
    const std::size_t n = 3 + rng.next_below(6);   // <= 8
    const std::size_t dk = 1 + rng.next_below(4);
    BandedTargetSpec spec;
    spec.n = n;
    spec.band = 1 + rng.next_below(n - 1);
    spec.seed = s;
    const Matrix target = gen_banded_target(spec);
    const MaskSpec mask_spec = rng.bernoulli(0.5)
                                   ? MaskSpec::global_causal()
                                   : MaskSpec::local_causal(spec.band);
    const AdditiveMask mask = build_mask(mask_spec, n);
    Matrix q = random_normal(n, dk, 0.8, rng);
    Matrix k = random_normal(n, dk, 0.8, rng);

    SynthLossResult g = synth_loss_and_grads(q, k, mask, target);
    auto loss = [&]() { return synth_loss_and_grads(q, k, mask, target).loss; };
    result.max_rel_error =
        std::max(result.max_rel_error, fd_worst({&q, &k}, {&g.d_query, &g.d_key}, loss));
  }
  return result;
}

GradcheckResult suite_lm(std::size_t seeds) {
  GradcheckResult result{"lm_loss_and_grads", 0.0, seeds};
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    Rng rng(3000 + s);
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ffn = 8;
    cfg.vocab = 11;
    cfg.seq_len = 6;
    cfg.init_std = 0.3;
    cfg.seed = 100 + s;
    switch (s % 3) {
      case 0:
        cfg.layout = LsLayout::all_global(2);
        break;
      case 1:
        cfg.layout = LsLayout::local_global(1, 1, 2);
        break;
      default:
        cfg.layout = LsLayout::local_global(1, 1, 2, true);
        break;
    }
    Parameters params = init_params(cfg);
    TokenBatch batch(2, TokenSeq(cfg.seq_len));
    for (TokenSeq& seq : batch) {
      for (std::uint32_t& t : seq) t = static_cast<std::uint32_t>(rng.next_below(cfg.vocab));
    }

    LmLossResult g = lm_loss_and_grads(params, cfg, batch);
    auto loss = [&]() { return lm_loss_and_grads(params, cfg, batch).loss; };
    std::vector<Matrix*> mats = params.param_list();
    std::vector<const Matrix*> analytic =
        static_cast<const Parameters&>(g.grads).param_list();
    result.max_rel_error = std::max(result.max_rel_error, fd_worst(mats, analytic, loss));
  }
  return result;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suites(std::size_t seeds) {
  return {suite_attend(seeds), suite_mhsa(seeds, false), suite_mhsa(seeds, true),
          suite_synth(seeds), suite_lm(seeds)};
}

double gradcheck_worst(const std::vector<GradcheckResult>& results) {
  double worst = 0.0;
  for (const GradcheckResult& r : results) worst = std::max(worst, r.max_rel_error);
  return worst;
}

}  // namespace attnlab
