#include "attnlab/kvsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "attnlab/rng.hpp"

namespace attnlab {

DecodeSession::DecodeSession(const LsLayout& layout_in, std::size_t d_k, std::size_t d_v,
                             double scale_in)
    : layout(layout_in), scale(scale_in) {
  if (layout.n_heads() == 0) throw std::invalid_argument("DecodeSession: no heads");
  if (layout.n_local > 0 && layout.local_span < 1) {
    throw std::invalid_argument("DecodeSession: local heads need span >= 1");
  }
  if (!(scale > 0.0)) throw std::invalid_argument("DecodeSession: scale must be > 0");
  caches.resize(layout.n_heads());
  for (std::size_t h = 0; h < caches.size(); ++h) {
    HeadCache& c = caches[h];
    c.d_k = d_k;
    c.d_v = d_v;
    c.ring = h < layout.n_local;
    if (c.ring) {
      c.capacity = layout.local_span + 1;
      c.k_store.assign(c.capacity * d_k, 0.0);
      c.v_store.assign(c.capacity * d_v, 0.0);
    }
  }
}

namespace {

void cache_push(HeadCache& c, const double* k_row, const double* v_row) {
  if (c.ring) {
    std::copy(k_row, k_row + c.d_k, c.k_store.begin() + c.next * c.d_k);
    std::copy(v_row, v_row + c.d_v, c.v_store.begin() + c.next * c.d_v);
    c.next = (c.next + 1) % c.capacity;
    c.count = std::min(c.count + 1, c.capacity);
  } else {
    c.k_store.insert(c.k_store.end(), k_row, k_row + c.d_k);
    c.v_store.insert(c.v_store.end(), v_row, v_row + c.d_v);
    ++c.count;
  }
}

// Softmax attention of one query over the cached rows, visiting them in
// chronological order (two-pass, max-subtracted) to mirror attend().
void cache_attend(const HeadCache& c, const double* q_row, double scale, double* out) {
  const std::size_t count = c.count;
  // Chronological slot order: for a saturated ring the oldest entry lives at
  // `next`, otherwise storage order is already chronological.
  auto slot_of = [&](std::size_t idx) {
    return c.ring ? (c.next + c.capacity - count + idx) % c.capacity : idx;
  };

  std::vector<double> scores(count);
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t idx = 0; idx < count; ++idx) {
    const double* k_row = c.k_store.data() + slot_of(idx) * c.d_k;
    double s = 0.0;
    for (std::size_t t = 0; t < c.d_k; ++t) s += q_row[t] * k_row[t];
    s /= scale;
    scores[idx] = s;
    m = std::max(m, s);
  }
  double z = 0.0;
  for (std::size_t idx = 0; idx < count; ++idx) {
    scores[idx] = std::exp(scores[idx] - m);
    z += scores[idx];
  }
  std::fill(out, out + c.d_v, 0.0);
  for (std::size_t idx = 0; idx < count; ++idx) {
    const double w = scores[idx] / z;
    const double* v_row = c.v_store.data() + slot_of(idx) * c.d_v;
    for (std::size_t t = 0; t < c.d_v; ++t) out[t] += w * v_row[t];
  }
}

}  // namespace

Matrix decode_step(DecodeSession& session, const Matrix& q_rows, const Matrix& k_rows,
                   const Matrix& v_rows) {
  const std::size_t h = session.layout.n_heads();
  const std::size_t dk = session.caches[0].d_k;
  const std::size_t dv = session.caches[0].d_v;
  if (q_rows.rows != h || k_rows.rows != h || v_rows.rows != h) {
    throw std::invalid_argument("decode_step: need one q/k/v row per head");
  }
  if (q_rows.cols != dk || k_rows.cols != dk || v_rows.cols != dv) {
    throw std::invalid_argument("decode_step: q/k/v width mismatch with session");
  }

  Matrix out(h, dv);
  for (std::size_t head = 0; head < h; ++head) {
    HeadCache& c = session.caches[head];
    cache_push(c, k_rows.row(head), v_rows.row(head));
    cache_attend(c, q_rows.row(head), session.scale, out.row(head));
  }
  ++session.tokens_seen;
  return out;
}

Matrix mhsa_decode_row(DecodeSession& session, const MultiHeadWeights& w,
                       const Matrix& x_row) {
  const std::size_t h = session.layout.n_heads();
  if (w.n_heads() != h) throw std::invalid_argument("mhsa_decode_row: head count mismatch");
  if (x_row.rows != 1 || x_row.cols != w.d_model()) {
    throw std::invalid_argument("mhsa_decode_row: x_row must be 1 x d");
  }
  const std::size_t dk = w.d_k();
  const std::size_t dv = w.d_v();

  Matrix q_rows(h, dk), k_rows(h, dk), v_rows(h, dv);
  for (std::size_t head = 0; head < h; ++head) {
    Matrix qh = matmul(x_row, w.heads[head].w_query);
    Matrix kh = matmul(x_row, w.heads[head].w_key);
    Matrix vh = matmul(x_row, w.heads[head].w_value);
    if (session.layout.qk_norm) {
      auto [qn, kn] = qk_normalize(qh, kh, w.qk_gains(0, head));
      qh = std::move(qn);
      kh = std::move(kn);
    }
    std::copy(qh.data.begin(), qh.data.end(), q_rows.row(head));
    std::copy(kh.data.begin(), kh.data.end(), k_rows.row(head));
    std::copy(vh.data.begin(), vh.data.end(), v_rows.row(head));
  }
  Matrix heads_out = decode_step(session, q_rows, k_rows, v_rows);

  Matrix concat(1, h * dv);
  for (std::size_t head = 0; head < h; ++head) {
    std::copy(heads_out.row(head), heads_out.row(head) + dv, concat.row(0) + head * dv);
  }
  return matmul(concat, w.w_out);
}

CacheReport cache_entries(const LsLayout& layout, std::size_t n, std::size_t d_k,
                          std::size_t d_v) {
  if (n < 1) throw std::invalid_argument("cache_entries: n must be >= 1");
  const std::uint64_t per_row = d_k + d_v;
  const std::uint64_t full_rows = n;
  const std::uint64_t ring_rows = std::min<std::uint64_t>(n, layout.local_span + 1);

  CacheReport report;
  report.ls_entries =
      (layout.n_local * ring_rows + layout.n_global * full_rows) * per_row;
  report.vanilla_entries = layout.n_heads() * full_rows * per_row;
  report.ratio = report.ls_entries == 0
                     ? 0.0
                     : static_cast<double>(report.vanilla_entries) /
                           static_cast<double>(report.ls_entries);
  return report;
}

CostReport bench_batch_forward(const LsLayout& arm, const LsLayout& ls_layout,
                               std::size_t n, std::size_t d_model, std::size_t d_k,
                               std::size_t d_v, std::size_t batch, std::size_t repeats,
                               std::uint64_t seed) {
  if (repeats < 3) throw std::invalid_argument("bench_batch_forward: repeats must be >= 3");
  if (batch < 1) throw std::invalid_argument("bench_batch_forward: batch must be >= 1");

  Rng rng(seed);
  const std::size_t h = arm.n_heads();
  MultiHeadWeights w;
  w.heads.resize(h);
  for (HeadWeights& head : w.heads) {
    head.w_query = random_normal(d_model, d_k, 0.02, rng);
    head.w_key = random_normal(d_model, d_k, 0.02, rng);
    head.w_value = random_normal(d_model, d_v, 0.02, rng);
  }
  w.w_out = random_normal(h * d_v, d_model, 0.02, rng);
  std::vector<Matrix> inputs;
  for (std::size_t b = 0; b < batch; ++b) {
    inputs.push_back(random_normal(n, d_model, 1.0, rng));
  }
  const double scale = std::sqrt(static_cast<double>(d_k));

  volatile double sink = 0.0;  // keep the forward passes observable
  auto run_once = [&]() {
    double acc = 0.0;
    for (const Matrix& x : inputs) {
      MhsaStreamingResult r = mhsa_forward_streaming(x, w, arm, scale);
      acc += r.output.data[0];
    }
    sink = sink + acc;
  };

  run_once();  // warmup, untimed
  std::vector<double> wall_ms;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    const auto start = std::chrono::steady_clock::now();
    run_once();
    const auto stop = std::chrono::steady_clock::now();
    wall_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count() /
                      static_cast<double>(batch));
  }
  std::sort(wall_ms.begin(), wall_ms.end());

  const FlopsReport flops = attention_flops(ls_layout, n, d_k, d_v);
  const CacheReport cache = cache_entries(ls_layout, n, d_k, d_v);
  CostReport report;
  report.n = n;
  report.flops_ls = flops.ls_flops;
  report.flops_vanilla = flops.vanilla_flops;
  report.cache_ls = cache.ls_entries;
  report.cache_vanilla = cache.vanilla_entries;
  report.wall_ms_median = wall_ms[wall_ms.size() / 2];
  return report;
}

}  // namespace attnlab
