#pragma once

#include <cstdint>
#include <vector>

#include "attnlab/attention.hpp"
#include "attnlab/matcore.hpp"

namespace attnlab {

// One head's decode-time cache. Global heads append forever; local heads keep
// a ring of the last capacity = span+1 (k,v) rows, the only keys a
// self-inclusive local mask can ever need.
struct HeadCache {
  bool ring = false;
  std::size_t capacity = 0;  // ring only
  std::size_t d_k = 0;
  std::size_t d_v = 0;
  std::vector<double> k_store;  // stored_count() rows of d_k (slot-major for rings)
  std::vector<double> v_store;
  std::size_t count = 0;  // live entries, never exceeds capacity for rings
  std::size_t next = 0;   // ring write slot

  std::size_t stored_count() const { return count; }
};

struct DecodeSession {
  LsLayout layout;
  double scale = 1.0;
  std::vector<HeadCache> caches;  // one per head
  std::size_t tokens_seen = 0;

  DecodeSession(const LsLayout& layout, std::size_t d_k, std::size_t d_v, double scale);
};

// Feeds one new token's per-head q/k/v rows (H x d_k / H x d_v matrices, row
// per head), updates each cache, and returns the per-head attention outputs
// as an H x d_v matrix. Rows are attended in chronological order so the
// result matches the full-sequence forward bit-for-bit up to fp roundoff.
Matrix decode_step(DecodeSession& session, const Matrix& q_rows, const Matrix& k_rows,
                   const Matrix& v_rows);

// Full MHSA decode for one token: project x_row through the head weights,
// run decode_step, concatenate, apply W_O. Equals the matching row of
// mhsa_forward over the whole prefix.
Matrix mhsa_decode_row(DecodeSession& session, const MultiHeadWeights& w,
                       const Matrix& x_row);

struct CacheReport {
  std::uint64_t ls_entries = 0;       // stored scalars: sum over heads of rows*(d_k+d_v)
  std::uint64_t vanilla_entries = 0;  // same layout, every head full
  double ratio = 0.0;                 // vanilla / ls
};

CacheReport cache_entries(const LsLayout& layout, std::size_t n, std::size_t d_k,
                          std::size_t d_v);

struct CostReport {
  std::size_t n = 0;
  std::uint64_t flops_ls = 0;
  std::uint64_t flops_vanilla = 0;
  std::uint64_t cache_ls = 0;
  std::uint64_t cache_vanilla = 0;
  double wall_ms_median = 0.0;  // for the arm actually timed
};

// Times mhsa_forward_streaming for `arm` (batch sequences per repeat, median
// over repeats, one untimed warmup) and attaches the deterministic flop and
// cache numbers for the LS layout vs its all-global counterpart. Weights and
// inputs are seeded, so both arms of a comparison see identical data.
CostReport bench_batch_forward(const LsLayout& arm, const LsLayout& ls_layout,
                               std::size_t n, std::size_t d_model, std::size_t d_k,
                               std::size_t d_v, std::size_t batch, std::size_t repeats,
                               std::uint64_t seed);

}  // namespace attnlab
