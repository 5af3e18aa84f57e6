#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "attnlab/matcore.hpp"

namespace attnlab {

// Which (query, key) pairs may attend. "span" for local-causal counts the
// preceding tokens a query may see, self inclusive: allowed iff 0 <= i-j <= span.
enum class MaskKind { full, global_causal, local_causal, two_sided_local };

struct MaskSpec {
  MaskKind kind = MaskKind::global_causal;
  std::size_t span = 0;          // local_causal
  std::size_t left_extent = 0;   // two_sided_local
  std::size_t right_extent = 0;  // two_sided_local

  static MaskSpec full() { return {MaskKind::full}; }
  static MaskSpec global_causal() { return {MaskKind::global_causal}; }
  static MaskSpec local_causal(std::size_t span) {
    MaskSpec m{MaskKind::local_causal};
    m.span = span;
    return m;
  }
  static MaskSpec two_sided_local(std::size_t left, std::size_t right) {
    MaskSpec m{MaskKind::two_sided_local};
    m.left_extent = left;
    m.right_extent = right;
    return m;
  }
};

AdditiveMask build_mask(const MaskSpec& spec, std::size_t n);

// Per-head diagnostics. "logits" holds the scaled scores that actually feed
// the softmax (QK^T / scale), so max_abs_logit is comparable across scales and
// directly bounded by gain^2/scale under QK-normalization. The streaming
// kernel reports only max_abs_logit; it never materializes the score matrix.
struct AttentionTrace {
  std::optional<Matrix> logits;
  std::optional<Matrix> probs;
  double max_abs_logit = 0.0;
};

struct AttendResult {
  Matrix output;
  AttentionTrace trace;
};

// Exact masked attention: Y = masked_softmax_rows(Q K^T, mask, scale) * V.
AttendResult attend(const Matrix& q, const Matrix& k, const Matrix& v,
                    const AdditiveMask& mask, double scale);

struct StreamingResult {
  Matrix output;
  double max_abs_logit = 0.0;
  std::uint64_t keys_visited = 0;  // allowed (query,key) pairs touched
};

// One pass per query row with an online softmax (running max + running
// normalizer). Takes the mask as a spec so fully-disallowed key ranges are
// skipped entirely: a local-causal span p touches only O(n*p) pairs.
StreamingResult attend_streaming(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const MaskSpec& spec, double scale);

struct AttentionGrads {
  Matrix d_query;
  Matrix d_key;
  Matrix d_value;
};

// Reverse-mode gradients of attend. Needs the forward probabilities, either
// inside the trace or directly (the scaled scores are not read). Gradients at
// disallowed positions are exactly zero.
AttentionGrads attend_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AdditiveMask& mask, double scale,
                               const AttentionTrace& trace, const Matrix& d_output);
AttentionGrads attend_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AdditiveMask& mask, double scale, const Matrix& probs,
                               const Matrix& d_output);

// Each row of q and k divided by its Euclidean norm, then multiplied by gain.
// Afterwards every |q_i . k_j| <= gain^2. Throws on a zero-norm row.
std::pair<Matrix, Matrix> qk_normalize(const Matrix& q, const Matrix& k, double gain);

struct QkNormBackwardResult {
  Matrix d_query;
  Matrix d_key;
  double d_gain = 0.0;
};

// Gradients of qk_normalize given cotangents of the normalized outputs.
QkNormBackwardResult qk_normalize_backward(const Matrix& q, const Matrix& k, double gain,
                                           const Matrix& d_qhat, const Matrix& d_khat);

struct HeadWeights {
  Matrix w_query;  // d x d_k
  Matrix w_key;    // d x d_k
  Matrix w_value;  // d x d_v
};

struct MultiHeadWeights {
  std::vector<HeadWeights> heads;
  Matrix w_out;     // (H * d_v) x d
  Matrix qk_gains;  // 1 x H, only populated when the layout normalizes Q/K

  std::size_t n_heads() const { return heads.size(); }
  std::size_t d_model() const { return heads.empty() ? 0 : heads[0].w_query.rows; }
  std::size_t d_k() const { return heads.empty() ? 0 : heads[0].w_query.cols; }
  std::size_t d_v() const { return heads.empty() ? 0 : heads[0].w_value.cols; }
};

// Head partition: the first n_local heads run local-causal(local_span), the
// remaining n_global heads run global-causal. n_local == 0 is vanilla MHSA.
struct LsLayout {
  std::size_t n_local = 0;
  std::size_t n_global = 0;
  std::size_t local_span = 0;
  bool qk_norm = false;

  std::size_t n_heads() const { return n_local + n_global; }
  MaskSpec head_mask(std::size_t head) const {
    return head < n_local ? MaskSpec::local_causal(local_span)
                          : MaskSpec::global_causal();
  }

  static LsLayout all_global(std::size_t h, bool qk_norm = false) {
    return {0, h, 0, qk_norm};
  }
  static LsLayout local_global(std::size_t n_local, std::size_t n_global,
                               std::size_t span, bool qk_norm = false) {
    return {n_local, n_global, span, qk_norm};
  }
};

struct MhsaResult {
  Matrix output;
  std::vector<AttentionTrace> traces;  // one per head, head order
};

MhsaResult mhsa_forward(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout,
                        double scale);

struct MhsaStreamingResult {
  Matrix output;
  std::vector<double> max_abs_logits;  // one per head
};

// Inference path: per-head streaming kernel, no stored score matrices.
MhsaStreamingResult mhsa_forward_streaming(const Matrix& x, const MultiHeadWeights& w,
                                           const LsLayout& layout, double scale);

struct MhsaGrads {
  Matrix d_input;
  MultiHeadWeights d_weights;
};

MhsaGrads mhsa_backward(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout,
                        double scale, const std::vector<AttentionTrace>& traces,
                        const Matrix& d_output);

struct FlopsReport {
  std::uint64_t ls_flops = 0;
  std::uint64_t vanilla_flops = 0;
  double ratio = 0.0;  // vanilla / ls
};

// Deterministic cost model counting multiply-add pairs of score computation
// (d_k per attended pair) and value aggregation (d_v per attended pair).
// Softmax exponentials are excluded. vanilla_flops prices the same H heads
// all-global.
FlopsReport attention_flops(const LsLayout& layout, std::size_t n, std::size_t d_k,
                            std::size_t d_v);

// Attended (query,key) pair counts behind the flop model.
std::uint64_t causal_pair_count(std::size_t n);
std::uint64_t local_pair_count(std::size_t n, std::size_t span);

}  // namespace attnlab
