#include "attnlab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace attnlab {

namespace {

// Allowed key range [lo, hi] for query row i. Every spec kind includes the
// query's own position, so the range is never empty.
void allowed_range(const MaskSpec& spec, std::size_t i, std::size_t n, std::size_t& lo,
                   std::size_t& hi) {
  switch (spec.kind) {
    case MaskKind::full:
      lo = 0;
      hi = n - 1;
      break;
    case MaskKind::global_causal:
      lo = 0;
      hi = i;
      break;
    case MaskKind::local_causal:
      lo = i > spec.span ? i - spec.span : 0;
      hi = i;
      break;
    case MaskKind::two_sided_local:
      lo = i > spec.left_extent ? i - spec.left_extent : 0;
      hi = std::min(n - 1, i + spec.right_extent);
      break;
  }
}

void check_attend_shapes(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols != k.cols) {
    throw std::invalid_argument("attend: Q and K must share d_k (" +
                                std::to_string(q.cols) + " vs " + std::to_string(k.cols) +
                                ")");
  }
  if (k.rows != v.rows) {
    throw std::invalid_argument("attend: K and V must have equal row counts (" +
                                std::to_string(k.rows) + " vs " + std::to_string(v.rows) +
                                ")");
  }
}

void check_mhsa_shapes(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout) {
  if (layout.n_heads() != w.n_heads()) {
    throw std::invalid_argument("mhsa: layout has " + std::to_string(layout.n_heads()) +
                                " heads but weights have " + std::to_string(w.n_heads()));
  }
  if (w.heads.empty()) throw std::invalid_argument("mhsa: no heads");
  if (layout.n_local > 0 && layout.local_span < 1) {
    throw std::invalid_argument("mhsa: local heads require local_span >= 1");
  }
  const std::size_t d = w.d_model();
  const std::size_t dk = w.d_k();
  const std::size_t dv = w.d_v();
  if (x.cols != d) {
    throw std::invalid_argument("mhsa: input width " + std::to_string(x.cols) +
                                " != d " + std::to_string(d));
  }
  for (const HeadWeights& h : w.heads) {
    if (h.w_query.rows != d || h.w_key.rows != d || h.w_value.rows != d ||
        h.w_query.cols != dk || h.w_key.cols != dk || h.w_value.cols != dv) {
      throw std::invalid_argument("mhsa: inconsistent head weight shapes");
    }
  }
  if (w.w_out.rows != w.n_heads() * dv || w.w_out.cols != d) {
    throw std::invalid_argument("mhsa: W_O must be (H*d_v) x d");
  }
  if (layout.qk_norm &&
      (w.qk_gains.rows != 1 || w.qk_gains.cols != w.n_heads())) {
    throw std::invalid_argument("mhsa: qk_norm layout needs a 1 x H gain matrix");
  }
}

}  // namespace

AdditiveMask build_mask(const MaskSpec& spec, std::size_t n) {
  if (n < 1) throw std::invalid_argument("build_mask: n must be >= 1");
  AdditiveMask mask(n, n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t lo = 0, hi = 0;
    allowed_range(spec, i, n, lo, hi);
    for (std::size_t j = lo; j <= hi; ++j) mask.set(i, j, true);
  }
  return mask;
}

AttendResult attend(const Matrix& q, const Matrix& k, const Matrix& v,
                    const AdditiveMask& mask, double scale) {
  check_attend_shapes(q, k, v);
  if (mask.rows != q.rows || mask.cols != k.rows) {
    throw std::invalid_argument("attend: mask must be Q.rows x K.rows");
  }
  Matrix scores = matmul_nt(q, k);
  Matrix probs = masked_softmax_rows(scores, mask, scale);

  // Keep the scaled scores in the trace: these are the values the softmax
  // exponentiates, and the quantity the logit telemetry tracks.
  for (double& s : scores.data) s /= scale;

  AttendResult result;
  result.output = matmul(probs, v);
  result.trace.max_abs_logit = max_abs_entries(scores, mask);
  result.trace.logits = std::move(scores);
  result.trace.probs = std::move(probs);
  return result;
}

StreamingResult attend_streaming(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const MaskSpec& spec, double scale) {
  check_attend_shapes(q, k, v);
  if (q.rows != k.rows) {
    throw std::invalid_argument("attend_streaming: self-attention requires Q.rows == K.rows");
  }
  if (!(scale > 0.0)) {
    throw std::invalid_argument("attend_streaming: scale must be > 0");
  }
  const std::size_t n = q.rows;
  const std::size_t dk = q.cols;
  const std::size_t dv = v.cols;

  StreamingResult result;
  result.output = Matrix(n, dv, 0.0);
  std::vector<double> acc(dv);

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t lo = 0, hi = 0;
    allowed_range(spec, i, n, lo, hi);
    const double* qi = q.row(i);

    double running_max = -std::numeric_limits<double>::infinity();
    double z = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);

    for (std::size_t j = lo; j <= hi; ++j) {
      const double* kj = k.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < dk; ++t) s += qi[t] * kj[t];
      s /= scale;

      const double a = std::fabs(s);
      if (a > result.max_abs_logit) result.max_abs_logit = a;

      const double new_max = std::max(running_max, s);
      const double correction = std::exp(running_max - new_max);  // 0 on first visit
      const double weight = std::exp(s - new_max);
      z = z * correction + weight;
      const double* vj = v.row(j);
      for (std::size_t t = 0; t < dv; ++t) acc[t] = acc[t] * correction + weight * vj[t];
      running_max = new_max;
    }
    result.keys_visited += hi - lo + 1;

    double* out = result.output.row(i);
    for (std::size_t t = 0; t < dv; ++t) out[t] = acc[t] / z;
  }
  return result;
}

AttentionGrads attend_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AdditiveMask& mask, double scale,
                               const AttentionTrace& trace, const Matrix& d_output) {
  if (!trace.probs.has_value()) {
    throw std::invalid_argument("attend_backward: trace must carry P");
  }
  return attend_backward(q, k, v, mask, scale, *trace.probs, d_output);
}

AttentionGrads attend_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AdditiveMask& mask, double scale, const Matrix& probs,
                               const Matrix& d_output) {
  check_attend_shapes(q, k, v);
  if (probs.rows != q.rows || probs.cols != k.rows) {
    throw std::invalid_argument("attend_backward: trace P has wrong shape");
  }
  if (d_output.rows != q.rows || d_output.cols != v.cols) {
    throw std::invalid_argument("attend_backward: dY has wrong shape");
  }

  AttentionGrads grads;
  grads.d_value = matmul_tn(probs, d_output);

  Matrix d_probs = matmul_nt(d_output, v);

  // dS = P .* (dP - rowsum(dP .* P)), zero at disallowed entries. The scaled
  // score matrix is the differentiation variable, so dQ and dK pick up 1/scale.
  Matrix d_scores(probs.rows, probs.cols, 0.0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const double* prow = probs.row(i);
    const double* dprow = d_probs.row(i);
    double rowdot = 0.0;
    for (std::size_t j = 0; j < probs.cols; ++j) rowdot += dprow[j] * prow[j];
    double* dsrow = d_scores.row(i);
    const std::uint8_t* mrow = mask.allowed.data() + i * mask.cols;
    for (std::size_t j = 0; j < probs.cols; ++j) {
      if (mrow[j]) dsrow[j] = prow[j] * (dprow[j] - rowdot);
    }
  }

  grads.d_query = matmul(d_scores, k);
  for (double& g : grads.d_query.data) g /= scale;
  grads.d_key = matmul_tn(d_scores, q);
  for (double& g : grads.d_key.data) g /= scale;
  return grads;
}

std::pair<Matrix, Matrix> qk_normalize(const Matrix& q, const Matrix& k, double gain) {
  if (gain < 0.0) throw std::invalid_argument("qk_normalize: gain must be >= 0");
  auto normalize = [gain](const Matrix& m, const char* name) {
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
      const double* src = m.row(i);
      double sq = 0.0;
      for (std::size_t j = 0; j < m.cols; ++j) sq += src[j] * src[j];
      const double norm = std::sqrt(sq);
      if (norm == 0.0) {
        throw std::domain_error(std::string("qk_normalize: zero-norm ") + name + " row " +
                                std::to_string(i));
      }
      double* dst = out.row(i);
      const double f = gain / norm;
      for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[j] * f;
    }
    return out;
  };
  return {normalize(q, "Q"), normalize(k, "K")};
}

QkNormBackwardResult qk_normalize_backward(const Matrix& q, const Matrix& k, double gain,
                                           const Matrix& d_qhat, const Matrix& d_khat) {
  QkNormBackwardResult result;
  result.d_query = Matrix(q.rows, q.cols);
  result.d_key = Matrix(k.rows, k.cols);

  // qhat_i = gain * q_i / |q_i|.
  // dq_i = (gain/|q_i|) (dqhat_i - u_i (u_i . dqhat_i)), u_i = q_i/|q_i|
  // dgain += u_i . dqhat_i
  auto backprop = [gain](const Matrix& m, const Matrix& d_hat, Matrix& d_m) {
    double d_gain = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
      const double* src = m.row(i);
      const double* dh = d_hat.row(i);
      double sq = 0.0;
      for (std::size_t j = 0; j < m.cols; ++j) sq += src[j] * src[j];
      const double norm = std::sqrt(sq);
      double udot = 0.0;
      for (std::size_t j = 0; j < m.cols; ++j) udot += (src[j] / norm) * dh[j];
      double* dst = d_m.row(i);
      const double f = gain / norm;
      for (std::size_t j = 0; j < m.cols; ++j) {
        dst[j] = f * (dh[j] - (src[j] / norm) * udot);
      }
      d_gain += udot;
    }
    return d_gain;
  };
  result.d_gain = backprop(q, d_qhat, result.d_query) + backprop(k, d_khat, result.d_key);
  return result;
}

MhsaResult mhsa_forward(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout,
                        double scale) {
  check_mhsa_shapes(x, w, layout);
  const std::size_t n = x.rows;
  const std::size_t h = w.n_heads();
  const std::size_t dv = w.d_v();

  AdditiveMask local_mask, global_mask;
  if (layout.n_local > 0) local_mask = build_mask(MaskSpec::local_causal(layout.local_span), n);
  if (layout.n_global > 0) global_mask = build_mask(MaskSpec::global_causal(), n);

  Matrix concat(n, h * dv);
  MhsaResult result;
  result.traces.resize(h);

  for (std::size_t head = 0; head < h; ++head) {
    Matrix qh = matmul(x, w.heads[head].w_query);
    Matrix kh = matmul(x, w.heads[head].w_key);
    Matrix vh = matmul(x, w.heads[head].w_value);
    if (layout.qk_norm) {
      auto [qn, kn] = qk_normalize(qh, kh, w.qk_gains(0, head));
      qh = std::move(qn);
      kh = std::move(kn);
    }
    const AdditiveMask& mask = head < layout.n_local ? local_mask : global_mask;
    AttendResult att = attend(qh, kh, vh, mask, scale);
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = att.output.row(i);
      double* dst = concat.row(i) + head * dv;
      for (std::size_t j = 0; j < dv; ++j) dst[j] = src[j];
    }
    result.traces[head] = std::move(att.trace);
  }
  result.output = matmul(concat, w.w_out);
  return result;
}

MhsaStreamingResult mhsa_forward_streaming(const Matrix& x, const MultiHeadWeights& w,
                                           const LsLayout& layout, double scale) {
  check_mhsa_shapes(x, w, layout);
  const std::size_t n = x.rows;
  const std::size_t h = w.n_heads();
  const std::size_t dv = w.d_v();

  Matrix concat(n, h * dv);
  MhsaStreamingResult result;
  result.max_abs_logits.resize(h, 0.0);

  for (std::size_t head = 0; head < h; ++head) {
    Matrix qh = matmul(x, w.heads[head].w_query);
    Matrix kh = matmul(x, w.heads[head].w_key);
    Matrix vh = matmul(x, w.heads[head].w_value);
    if (layout.qk_norm) {
      auto [qn, kn] = qk_normalize(qh, kh, w.qk_gains(0, head));
      qh = std::move(qn);
      kh = std::move(kn);
    }
    StreamingResult att = attend_streaming(qh, kh, vh, layout.head_mask(head), scale);
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = att.output.row(i);
      double* dst = concat.row(i) + head * dv;
      for (std::size_t j = 0; j < dv; ++j) dst[j] = src[j];
    }
    result.max_abs_logits[head] = att.max_abs_logit;
  }
  result.output = matmul(concat, w.w_out);
  return result;
}

MhsaGrads mhsa_backward(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout,
                        double scale, const std::vector<AttentionTrace>& traces,
                        const Matrix& d_output) {
  check_mhsa_shapes(x, w, layout);
  if (traces.size() != w.n_heads()) {
    throw std::invalid_argument("mhsa_backward: trace count does not match head count");
  }
  const std::size_t n = x.rows;
  const std::size_t h = w.n_heads();
  const std::size_t dv = w.d_v();
  if (d_output.rows != n || d_output.cols != w.d_model()) {
    throw std::invalid_argument("mhsa_backward: dY has wrong shape");
  }

  AdditiveMask local_mask, global_mask;
  if (layout.n_local > 0) local_mask = build_mask(MaskSpec::local_causal(layout.local_span), n);
  if (layout.n_global > 0) global_mask = build_mask(MaskSpec::global_causal(), n);

  MhsaGrads grads;
  grads.d_input = Matrix(x.rows, x.cols, 0.0);
  grads.d_weights.heads.resize(h);
  if (layout.qk_norm) grads.d_weights.qk_gains = Matrix(1, h, 0.0);

  // Rebuild the concatenated head outputs for dW_O. P comes from the trace
  // when the forward kept it; a stripped trace (long-sequence memory saver)
  // makes this pass recompute it with the identical op sequence, so the
  // gradients are bit-for-bit the same either way.
  Matrix concat(n, h * dv);
  std::vector<Matrix> values(h);
  std::vector<Matrix> own_probs(h);
  std::vector<const Matrix*> probs(h, nullptr);
  for (std::size_t head = 0; head < h; ++head) {
    const AdditiveMask& mask = head < layout.n_local ? local_mask : global_mask;
    values[head] = matmul(x, w.heads[head].w_value);
    if (traces[head].probs.has_value()) {
      probs[head] = &*traces[head].probs;
    } else {
      Matrix qh = matmul(x, w.heads[head].w_query);
      Matrix kh = matmul(x, w.heads[head].w_key);
      if (layout.qk_norm) {
        auto [qn, kn] = qk_normalize(qh, kh, w.qk_gains(0, head));
        qh = std::move(qn);
        kh = std::move(kn);
      }
      const Matrix scores = matmul_nt(qh, kh);
      own_probs[head] = masked_softmax_rows(scores, mask, scale);
      probs[head] = &own_probs[head];
    }
    Matrix out = matmul(*probs[head], values[head]);
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = out.row(i);
      double* dst = concat.row(i) + head * dv;
      for (std::size_t j = 0; j < dv; ++j) dst[j] = src[j];
    }
  }
  grads.d_weights.w_out = matmul_tn(concat, d_output);
  Matrix d_concat = matmul_nt(d_output, w.w_out);

  for (std::size_t head = 0; head < h; ++head) {
    Matrix qh = matmul(x, w.heads[head].w_query);
    Matrix kh = matmul(x, w.heads[head].w_key);

    Matrix d_head(n, dv);
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = d_concat.row(i) + head * dv;
      double* dst = d_head.row(i);
      for (std::size_t j = 0; j < dv; ++j) dst[j] = src[j];
    }

    const AdditiveMask& mask = head < layout.n_local ? local_mask : global_mask;
    AttentionGrads att_grads;
    Matrix d_qh, d_kh;
    if (layout.qk_norm) {
      const double gain = w.qk_gains(0, head);
      auto [qn, kn] = qk_normalize(qh, kh, gain);
      att_grads = attend_backward(qn, kn, values[head], mask, scale, *probs[head], d_head);
      QkNormBackwardResult norm_grads =
          qk_normalize_backward(qh, kh, gain, att_grads.d_query, att_grads.d_key);
      d_qh = std::move(norm_grads.d_query);
      d_kh = std::move(norm_grads.d_key);
      grads.d_weights.qk_gains(0, head) = norm_grads.d_gain;
    } else {
      att_grads = attend_backward(qh, kh, values[head], mask, scale, *probs[head], d_head);
      d_qh = std::move(att_grads.d_query);
      d_kh = std::move(att_grads.d_key);
    }

    HeadWeights& dw = grads.d_weights.heads[head];
    dw.w_query = matmul_tn(x, d_qh);
    dw.w_key = matmul_tn(x, d_kh);
    dw.w_value = matmul_tn(x, att_grads.d_value);

    Matrix dx_q = matmul_nt(d_qh, w.heads[head].w_query);
    Matrix dx_k = matmul_nt(d_kh, w.heads[head].w_key);
    Matrix dx_v = matmul_nt(att_grads.d_value, w.heads[head].w_value);
    for (std::size_t idx = 0; idx < grads.d_input.data.size(); ++idx) {
      grads.d_input.data[idx] += dx_q.data[idx] + dx_k.data[idx] + dx_v.data[idx];
    }
  }
  return grads;
}

std::uint64_t causal_pair_count(std::size_t n) {
  const std::uint64_t m = n;
  return m * (m + 1) / 2;
}

std::uint64_t local_pair_count(std::size_t n, std::size_t span) {
  if (n <= span + 1) return causal_pair_count(n);
  const std::uint64_t w = span + 1;  // window size including self
  return w * (w + 1) / 2 + (static_cast<std::uint64_t>(n) - w) * w;
}

FlopsReport attention_flops(const LsLayout& layout, std::size_t n, std::size_t d_k,
                            std::size_t d_v) {
  if (n < 1) throw std::invalid_argument("attention_flops: n must be >= 1");
  const std::uint64_t per_pair = d_k + d_v;
  const std::uint64_t pairs_global = causal_pair_count(n);
  const std::uint64_t pairs_local = local_pair_count(n, layout.local_span);

  FlopsReport report;
  report.ls_flops = (layout.n_local * pairs_local + layout.n_global * pairs_global) * per_pair;
  report.vanilla_flops = layout.n_heads() * pairs_global * per_pair;
  report.ratio = report.ls_flops == 0
                     ? 0.0
                     : static_cast<double>(report.vanilla_flops) /
                           static_cast<double>(report.ls_flops);
  return report;
}

}  // namespace attnlab
