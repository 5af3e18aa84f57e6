#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/attention.hpp"
#include "attnlab/matcore.hpp"
#include "attnlab/optimizer.hpp"

namespace attnlab {

// GPT-2-style decoder: pre-norm residual blocks, learned positional
// embeddings, tanh-approximate GELU, tied output embedding. Attention and FFN
// projections carry no biases; only the layer norms have gain + bias.
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t vocab = 257;  // 256 byte values + padding id
  std::size_t seq_len = 128;
  LsLayout layout = LsLayout::all_global(4);  // covers vanilla / ls / qk_norm
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;  // 1 x d
  MultiHeadWeights attn;
  Matrix ln2_gain, ln2_bias;
  Matrix ffn_w1;  // d x d_ffn
  Matrix ffn_w2;  // d_ffn x d
};

struct Parameters {
  Matrix tok_emb;  // vocab x d, also the tied output projection
  Matrix pos_emb;  // seq_len x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;

  // Fixed traversal order shared by the optimizer, checkpoints, and gradient
  // accumulation: tok, pos, then per layer ln1 g/b, per head Wq/Wk/Wv, W_O,
  // qk gains, ln2 g/b, W1, W2; finally final-norm g/b.
  std::vector<Matrix*> param_list();
  std::vector<const Matrix*> param_list() const;
  std::vector<std::string> param_names() const;
  std::size_t count_scalars() const;

  static Parameters zeros_like(const Parameters& other);
};

// Projections and embeddings ~ Normal(0, init_std^2) drawn in param order;
// norm gains start at 1, biases at 0, qk gains at sqrt(d_head).
Parameters init_params(const ModelConfig& cfg);

using TokenSeq = std::vector<std::uint32_t>;
using TokenBatch = std::vector<TokenSeq>;

struct LmForwardResult {
  std::vector<Matrix> logits;           // per batch item, T x vocab
  std::vector<double> max_abs_logits;   // n_layers * H, layer-major, max over batch
};

LmForwardResult lm_forward(const Parameters& params, const ModelConfig& cfg,
                           const TokenBatch& tokens);

struct LmLossResult {
  double loss = 0.0;  // mean next-token cross-entropy in nats
  Parameters grads;
  std::vector<double> max_abs_logits;  // as in LmForwardResult
};

// Loss averages positions 0..T-2 predicting token t+1, uniformly over the
// whole batch. Gradients for every parameter by reverse-mode accumulation.
LmLossResult lm_loss_and_grads(const Parameters& params, const ModelConfig& cfg,
                               const TokenBatch& tokens);

// 256 byte values + reserved padding id; train/validation are disjoint
// contiguous slices of one stream.
struct ByteCorpus {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> valid;
};

// Deterministic English-like filler text: a seeded word vocabulary sampled
// with Zipf weights, arranged into sentences. Stands in for a real corpus so
// runs need no external data.
ByteCorpus make_synthetic_corpus(std::size_t total_bytes, std::uint64_t seed,
                                 double valid_fraction = 0.05);

struct TelemetryRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm_preclip = 0.0;
  std::vector<double> max_abs_logits;  // n_layers * H, layer-major
  std::vector<double> qk_gains;        // gains used this step; empty unless qk_norm
  bool non_finite = false;
};

struct DivergenceConfig {
  std::size_t window = 50;
  double ratio = 1.5;
};

struct TrainLmConfig {
  ModelConfig model;
  AdamwConfig adamw;        // betas 0.9/0.95, eps 1e-8, wd 0.1, clip 1.0
  ScheduleConfig schedule;  // 6e-4 -> 6e-5 cosine after a 2000-step warmup
  std::size_t steps = 2000;
  std::size_t tokens_per_batch = 512;
  std::uint64_t data_seed = 0;
  std::size_t val_every = 0;  // 0 disables validation
  std::size_t val_batches = 8;
  DivergenceConfig divergence;

  void validate() const;
};

struct ValRecord {
  std::uint64_t step = 0;
  double val_loss = 0.0;
};

struct TrainLmResult {
  std::vector<TelemetryRecord> telemetry;  // one per optimizer step
  std::vector<ValRecord> val_curve;
  std::vector<std::uint64_t> divergence_flags;
  Parameters params;
  bool halted_non_finite = false;
};

// Deterministic batches (seeded offsets into corpus.train), one telemetry
// record per step, clip -> lr_at -> adamw_step. A non-finite loss halts with a
// flagged final record: that is the instability signal, not a crash.
TrainLmResult train_lm(const TrainLmConfig& cfg, const ByteCorpus& corpus);

// Flags step t when the window-mean loss exceeds ratio * the best window-mean
// seen so far. Pure function of the stream.
std::vector<std::size_t> detect_divergence(const std::vector<double>& losses,
                                           std::size_t window, double ratio);

// Forward-only mean cross-entropy over deterministic, evenly spaced windows of
// corpus.valid.
double validate_lm(const Parameters& params, const ModelConfig& cfg,
                   const ByteCorpus& corpus, std::size_t batches,
                   std::size_t tokens_per_batch);

}  // namespace attnlab
