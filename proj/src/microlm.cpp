#include "attnlab/microlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "attnlab/rng.hpp"

namespace attnlab {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
constexpr std::size_t kTraceKeepLimit = 512;  // above this, backward recomputes P

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix y(x.rows, x.cols);
  const std::size_t d = x.cols;
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = gain(0, j) * ((xr[j] - mu) * inv) + bias(0, j);
    }
  }
  return y;
}

// Returns dx; accumulates parameter gradients into d_gain / d_bias.
Matrix layer_norm_backward(const Matrix& x, const Matrix& gain, const Matrix& dy,
                           Matrix& d_gain, Matrix& d_bias) {
  Matrix dx(x.rows, x.cols);
  const std::size_t d = x.cols;
  std::vector<double> xhat(d), a(d);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);

    double mean_a = 0.0, mean_ax = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mu) * inv;
      a[j] = dyr[j] * gain(0, j);
      mean_a += a[j];
      mean_ax += a[j] * xhat[j];
      d_gain(0, j) += dyr[j] * xhat[j];
      d_bias(0, j) += dyr[j];
    }
    mean_a /= static_cast<double>(d);
    mean_ax /= static_cast<double>(d);
    double* dxr = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = inv * (a[j] - mean_a - xhat[j] * mean_ax);
    }
  }
  return dx;
}

double gelu_scalar(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_deriv(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

Matrix gelu(const Matrix& x) {
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = gelu_scalar(x.data[i]);
  return y;
}

struct BlockCache {
  Matrix x_in;      // block input
  Matrix ln1_out;   // attention input
  Matrix x_mid;     // after attention residual
  Matrix ln2_out;   // FFN input
  Matrix ffn_pre;   // ln2_out * W1 before GELU
  Matrix ffn_act;   // GELU(ffn_pre)
  std::vector<AttentionTrace> traces;
};

struct SeqCache {
  std::vector<BlockCache> blocks;
  Matrix x_final_in;
  Matrix lnf_out;
  Matrix logits;
};

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

SeqCache forward_seq(const Parameters& p, const ModelConfig& cfg, const TokenSeq& toks) {
  const std::size_t t_len = toks.size();
  if (t_len < 1 || t_len > cfg.seq_len) {
    throw std::invalid_argument("lm_forward: sequence length must be in [1, seq_len]");
  }
  const std::size_t d = cfg.d_model;
  const double scale = std::sqrt(static_cast<double>(cfg.d_head()));

  Matrix x(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    if (toks[t] >= cfg.vocab) {
      throw std::out_of_range("lm_forward: token id " + std::to_string(toks[t]) +
                              " >= vocab " + std::to_string(cfg.vocab));
    }
    const double* te = p.tok_emb.row(toks[t]);
    const double* pe = p.pos_emb.row(t);
    double* xr = x.row(t);
    for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }

  SeqCache cache;
  cache.blocks.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockCache& blk = cache.blocks[l];
    const LayerParams& lp = p.layers[l];
    blk.x_in = x;
    blk.ln1_out = layer_norm(x, lp.ln1_gain, lp.ln1_bias);
    MhsaResult att = mhsa_forward(blk.ln1_out, lp.attn, cfg.layout, scale);
    add_into(x, att.output);
    // The backward pass reads only P from the traces, and for long sequences
    // recomputes even that rather than holding n_layers*H score matrices of
    // t_len^2 doubles. Stripping changes memory, never results.
    for (AttentionTrace& tr : att.traces) {
      tr.logits.reset();
      if (t_len >= kTraceKeepLimit) tr.probs.reset();
    }
    blk.traces = std::move(att.traces);
    blk.x_mid = x;
    blk.ln2_out = layer_norm(x, lp.ln2_gain, lp.ln2_bias);
    blk.ffn_pre = matmul(blk.ln2_out, lp.ffn_w1);
    blk.ffn_act = gelu(blk.ffn_pre);
    Matrix ffn_out = matmul(blk.ffn_act, lp.ffn_w2);
    add_into(x, ffn_out);
  }
  cache.x_final_in = x;
  cache.lnf_out = layer_norm(x, p.lnf_gain, p.lnf_bias);
  cache.logits = matmul_nt(cache.lnf_out, p.tok_emb);  // tied output projection
  return cache;
}

void backward_seq(const Parameters& p, const ModelConfig& cfg, const TokenSeq& toks,
                  const SeqCache& cache, const Matrix& d_logits, Parameters& g) {
  const std::size_t t_len = toks.size();
  const double scale = std::sqrt(static_cast<double>(cfg.d_head()));

  add_into(g.tok_emb, matmul_tn(d_logits, cache.lnf_out));
  Matrix d_lnf_out = matmul(d_logits, p.tok_emb);
  Matrix dx = layer_norm_backward(cache.x_final_in, p.lnf_gain, d_lnf_out, g.lnf_gain,
                                  g.lnf_bias);

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const BlockCache& blk = cache.blocks[l];
    const LayerParams& lp = p.layers[l];
    LayerParams& gl = g.layers[l];

    // FFN residual: dx covers both the skip path and the branch.
    Matrix d_ffn_act = matmul_nt(dx, lp.ffn_w2);
    add_into(gl.ffn_w2, matmul_tn(blk.ffn_act, dx));
    Matrix d_ffn_pre(d_ffn_act.rows, d_ffn_act.cols);
    for (std::size_t i = 0; i < d_ffn_pre.data.size(); ++i) {
      d_ffn_pre.data[i] = d_ffn_act.data[i] * gelu_deriv(blk.ffn_pre.data[i]);
    }
    add_into(gl.ffn_w1, matmul_tn(blk.ln2_out, d_ffn_pre));
    Matrix d_ln2_out = matmul_nt(d_ffn_pre, lp.ffn_w1);
    add_into(dx, layer_norm_backward(blk.x_mid, lp.ln2_gain, d_ln2_out, gl.ln2_gain,
                                     gl.ln2_bias));

    // Attention residual.
    MhsaGrads mg = mhsa_backward(blk.ln1_out, lp.attn, cfg.layout, scale, blk.traces, dx);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      add_into(gl.attn.heads[head].w_query, mg.d_weights.heads[head].w_query);
      add_into(gl.attn.heads[head].w_key, mg.d_weights.heads[head].w_key);
      add_into(gl.attn.heads[head].w_value, mg.d_weights.heads[head].w_value);
    }
    add_into(gl.attn.w_out, mg.d_weights.w_out);
    if (cfg.layout.qk_norm) add_into(gl.attn.qk_gains, mg.d_weights.qk_gains);
    add_into(dx, layer_norm_backward(blk.x_in, lp.ln1_gain, mg.d_input, gl.ln1_gain,
                                     gl.ln1_bias));
  }

  for (std::size_t t = 0; t < t_len; ++t) {
    const double* dxr = dx.row(t);
    double* te = g.tok_emb.row(toks[t]);
    double* pe = g.pos_emb.row(t);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      te[j] += dxr[j];
      pe[j] += dxr[j];
    }
  }
}

void check_batch(const TokenBatch& tokens) {
  if (tokens.empty()) throw std::invalid_argument("lm: empty batch");
  for (const TokenSeq& seq : tokens) {
    if (seq.size() != tokens[0].size()) {
      throw std::invalid_argument("lm: ragged batch (all sequences must share length)");
    }
  }
}

// Mean cross-entropy (positions 0..T-2 predict t+1) and, when d_logits is
// given, its gradient scaled by 1/total_positions.
double cross_entropy(const Matrix& logits, const TokenSeq& toks, double inv_count,
                     Matrix* d_logits) {
  const std::size_t t_len = toks.size();
  const std::size_t vocab = logits.cols;
  double nats = 0.0;
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    const double* lr = logits.row(t);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) m = std::max(m, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(lr[j] - m);
    const std::uint32_t target = toks[t + 1];
    nats -= lr[target] - m - std::log(z);
    if (d_logits != nullptr) {
      double* dr = d_logits->row(t);
      for (std::size_t j = 0; j < vocab; ++j) {
        dr[j] = (std::exp(lr[j] - m) / z - (j == target ? 1.0 : 0.0)) * inv_count;
      }
    }
  }
  return nats;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: need n_layers >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }
  if (d_ffn < d_model) throw std::invalid_argument("ModelConfig: need d_ffn >= d_model");
  if (vocab < 2) throw std::invalid_argument("ModelConfig: need vocab >= 2");
  if (seq_len < 2) throw std::invalid_argument("ModelConfig: need seq_len >= 2");
  if (layout.n_heads() != n_heads) {
    throw std::invalid_argument("ModelConfig: layout heads (" +
                                std::to_string(layout.n_heads()) + ") != n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (layout.n_local > 0 && layout.local_span < 1) {
    throw std::invalid_argument("ModelConfig: local heads need local_span >= 1");
  }
  if (!(init_std >= 0.0)) throw std::invalid_argument("ModelConfig: init_std must be >= 0");
}

std::vector<Matrix*> Parameters::param_list() {
  std::vector<Matrix*> out{&tok_emb, &pos_emb};
  for (LayerParams& l : layers) {
    out.push_back(&l.ln1_gain);
    out.push_back(&l.ln1_bias);
    for (HeadWeights& h : l.attn.heads) {
      out.push_back(&h.w_query);
      out.push_back(&h.w_key);
      out.push_back(&h.w_value);
    }
    out.push_back(&l.attn.w_out);
    out.push_back(&l.attn.qk_gains);
    out.push_back(&l.ln2_gain);
    out.push_back(&l.ln2_bias);
    out.push_back(&l.ffn_w1);
    out.push_back(&l.ffn_w2);
  }
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  return out;
}

std::vector<const Matrix*> Parameters::param_list() const {
  auto mutable_list = const_cast<Parameters*>(this)->param_list();
  return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::string> Parameters::param_names() const {
  std::vector<std::string> out{"tok_emb", "pos_emb"};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = "L" + std::to_string(l) + ".";
    out.push_back(base + "ln1_gain");
    out.push_back(base + "ln1_bias");
    for (std::size_t h = 0; h < layers[l].attn.heads.size(); ++h) {
      const std::string hb = base + "h" + std::to_string(h) + ".";
      out.push_back(hb + "w_query");
      out.push_back(hb + "w_key");
      out.push_back(hb + "w_value");
    }
    out.push_back(base + "w_out");
    out.push_back(base + "qk_gains");
    out.push_back(base + "ln2_gain");
    out.push_back(base + "ln2_bias");
    out.push_back(base + "ffn_w1");
    out.push_back(base + "ffn_w2");
  }
  out.push_back("lnf_gain");
  out.push_back("lnf_bias");
  return out;
}

std::size_t Parameters::count_scalars() const {
  std::size_t total = 0;
  for (const Matrix* m : param_list()) total += m->data.size();
  return total;
}

Parameters Parameters::zeros_like(const Parameters& other) {
  Parameters z = other;
  for (Matrix* m : z.param_list()) std::fill(m->data.begin(), m->data.end(), 0.0);
  return z;
}

Parameters init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.d_head();

  Parameters p;
  p.tok_emb = random_normal(cfg.vocab, d, cfg.init_std, rng);
  p.pos_emb = random_normal(cfg.seq_len, d, cfg.init_std, rng);
  p.layers.resize(cfg.n_layers);
  for (LayerParams& l : p.layers) {
    l.ln1_gain = Matrix(1, d, 1.0);
    l.ln1_bias = Matrix(1, d, 0.0);
    l.attn.heads.resize(cfg.n_heads);
    for (HeadWeights& h : l.attn.heads) {
      h.w_query = random_normal(d, dh, cfg.init_std, rng);
      h.w_key = random_normal(d, dh, cfg.init_std, rng);
      h.w_value = random_normal(d, dh, cfg.init_std, rng);
    }
    l.attn.w_out = random_normal(cfg.n_heads * dh, d, cfg.init_std, rng);
    l.attn.qk_gains = Matrix(1, cfg.n_heads, std::sqrt(static_cast<double>(dh)));
    l.ln2_gain = Matrix(1, d, 1.0);
    l.ln2_bias = Matrix(1, d, 0.0);
    l.ffn_w1 = random_normal(d, cfg.d_ffn, cfg.init_std, rng);
    l.ffn_w2 = random_normal(cfg.d_ffn, d, cfg.init_std, rng);
  }
  p.lnf_gain = Matrix(1, d, 1.0);
  p.lnf_bias = Matrix(1, d, 0.0);
  return p;
}

LmForwardResult lm_forward(const Parameters& params, const ModelConfig& cfg,
                           const TokenBatch& tokens) {
  check_batch(tokens);
  LmForwardResult out;
  out.max_abs_logits.assign(cfg.n_layers * cfg.n_heads, 0.0);
  for (const TokenSeq& seq : tokens) {
    SeqCache cache = forward_seq(params, cfg, seq);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        double& slot = out.max_abs_logits[l * cfg.n_heads + h];
        slot = std::max(slot, cache.blocks[l].traces[h].max_abs_logit);
      }
    }
    out.logits.push_back(std::move(cache.logits));
  }
  return out;
}

LmLossResult lm_loss_and_grads(const Parameters& params, const ModelConfig& cfg,
                               const TokenBatch& tokens) {
  check_batch(tokens);
  const std::size_t t_len = tokens[0].size();
  if (t_len < 2) throw std::invalid_argument("lm_loss_and_grads: need sequence length >= 2");

  LmLossResult out;
  out.grads = Parameters::zeros_like(params);
  out.max_abs_logits.assign(cfg.n_layers * cfg.n_heads, 0.0);
  const double inv_count = 1.0 / (static_cast<double>(tokens.size()) *
                                  static_cast<double>(t_len - 1));
  double nats = 0.0;
  for (const TokenSeq& seq : tokens) {
    SeqCache cache = forward_seq(params, cfg, seq);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        double& slot = out.max_abs_logits[l * cfg.n_heads + h];
        slot = std::max(slot, cache.blocks[l].traces[h].max_abs_logit);
      }
    }
    Matrix d_logits(t_len, cfg.vocab, 0.0);
    nats += cross_entropy(cache.logits, seq, inv_count, &d_logits);
    backward_seq(params, cfg, seq, cache, d_logits, out.grads);
  }
  out.loss = nats * inv_count;
  return out;
}

ByteCorpus make_synthetic_corpus(std::size_t total_bytes, std::uint64_t seed,
                                 double valid_fraction) {
  if (total_bytes < 64) throw std::invalid_argument("make_synthetic_corpus: too small");
  if (!(valid_fraction > 0.0) || valid_fraction >= 1.0) {
    throw std::invalid_argument("make_synthetic_corpus: valid_fraction must be in (0,1)");
  }
  Rng rng(seed);
  static const char* kConsonants = "bcdfghjklmnprstvwz";
  static const char* kVowels = "aeiou";
  const std::size_t nc = 18, nv = 5;

  std::vector<std::string> vocab;
  vocab.reserve(420);
  for (std::size_t w = 0; w < 420; ++w) {
    std::string word;
    const std::size_t syllables = 1 + rng.next_below(3);
    for (std::size_t s = 0; s < syllables; ++s) {
      word += kConsonants[rng.next_below(nc)];
      word += kVowels[rng.next_below(nv)];
    }
    if (rng.bernoulli(0.4)) word += kConsonants[rng.next_below(nc)];
    vocab.push_back(word);
  }
  // Zipf weights 1/rank, sampled through the cumulative table.
  std::vector<double> cum(vocab.size());
  double total = 0.0;
  for (std::size_t r = 0; r < vocab.size(); ++r) {
    total += 1.0 / static_cast<double>(r + 1);
    cum[r] = total;
  }

  std::string text;
  text.reserve(total_bytes + 128);
  while (text.size() < total_bytes) {
    const std::size_t words = 4 + rng.next_below(9);
    for (std::size_t w = 0; w < words; ++w) {
      const double u = rng.uniform01() * total;
      const std::size_t idx =
          std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
      std::string word = vocab[std::min(idx, vocab.size() - 1)];
      if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
      if (w > 0) text += ' ';
      text += word;
    }
    text += ". ";
  }

  ByteCorpus corpus;
  const std::size_t valid_len = static_cast<std::size_t>(
      static_cast<double>(text.size()) * valid_fraction);
  const std::size_t train_len = text.size() - valid_len;
  corpus.train.assign(text.begin(), text.begin() + train_len);
  corpus.valid.assign(text.begin() + train_len, text.end());
  return corpus;
}

void TrainLmConfig::validate() const {
  model.validate();
  adamw.validate();
  schedule.validate();
  if (tokens_per_batch < model.seq_len) {
    throw std::invalid_argument("TrainLmConfig: tokens_per_batch must cover one sequence");
  }
  if (divergence.window < 1) throw std::invalid_argument("TrainLmConfig: window >= 1");
  if (!(divergence.ratio > 1.0)) {
    throw std::invalid_argument("TrainLmConfig: divergence ratio must be > 1");
  }
}

TrainLmResult train_lm(const TrainLmConfig& cfg, const ByteCorpus& corpus) {
  cfg.validate();
  const std::size_t t_len = cfg.model.seq_len;
  if (corpus.train.size() < t_len + 1) {
    throw std::invalid_argument("train_lm: training corpus smaller than one batch");
  }
  const std::size_t batch_size = std::max<std::size_t>(1, cfg.tokens_per_batch / t_len);

  TrainLmResult out;
  out.params = init_params(cfg.model);
  std::vector<Matrix*> params = out.params.param_list();
  std::vector<const Matrix*> param_view(params.begin(), params.end());
  AdamState state = AdamState::zeros_like(param_view);

  Rng data_rng(cfg.data_seed);
  std::vector<double> losses;
  losses.reserve(cfg.steps);

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    TokenBatch batch(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::uint64_t off = data_rng.next_below(corpus.train.size() - t_len + 1);
      TokenSeq& seq = batch[b];
      seq.resize(t_len);
      for (std::size_t t = 0; t < t_len; ++t) seq[t] = corpus.train[off + t];
    }
    LmLossResult r = lm_loss_and_grads(out.params, cfg.model, batch);

    TelemetryRecord rec;
    rec.step = step;
    rec.loss = r.loss;
    rec.max_abs_logits = std::move(r.max_abs_logits);
    if (cfg.model.layout.qk_norm) {
      rec.qk_gains.reserve(cfg.model.n_layers * cfg.model.n_heads);
      for (const LayerParams& l : out.params.layers) {
        for (std::size_t h = 0; h < cfg.model.n_heads; ++h) {
          rec.qk_gains.push_back(l.attn.qk_gains(0, h));
        }
      }
    }
    if (!std::isfinite(r.loss)) {
      rec.non_finite = true;
      out.telemetry.push_back(std::move(rec));
      out.halted_non_finite = true;
      break;
    }

    std::vector<Matrix*> grads = r.grads.param_list();
    if (cfg.adamw.clip_norm > 0.0) {
      rec.grad_norm_preclip = clip_global_norm(grads, cfg.adamw.clip_norm);
    } else {
      std::vector<const Matrix*> grad_view(grads.begin(), grads.end());
      rec.grad_norm_preclip = global_l2_norm(grad_view);
    }
    rec.lr = lr_at(step, cfg.schedule);
    std::vector<const Matrix*> grad_view(grads.begin(), grads.end());
    adamw_step(params, grad_view, state, cfg.adamw, rec.lr);

    losses.push_back(rec.loss);
    out.telemetry.push_back(std::move(rec));

    if (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0) {
      out.val_curve.push_back(
          {step, validate_lm(out.params, cfg.model, corpus, cfg.val_batches,
                             cfg.tokens_per_batch)});
    }
  }

  for (std::size_t t : detect_divergence(losses, cfg.divergence.window, cfg.divergence.ratio)) {
    out.divergence_flags.push_back(static_cast<std::uint64_t>(t));
  }
  return out;
}

std::vector<std::size_t> detect_divergence(const std::vector<double>& losses,
                                           std::size_t window, double ratio) {
  if (window < 1) throw std::invalid_argument("detect_divergence: window must be >= 1");
  if (!(ratio > 1.0)) throw std::invalid_argument("detect_divergence: ratio must be > 1");
  std::vector<std::size_t> flags;
  if (losses.size() < window) return flags;

  double window_sum = 0.0;
  for (std::size_t t = 0; t < window; ++t) window_sum += losses[t];
  double best = std::numeric_limits<double>::infinity();
  const double inv_w = 1.0 / static_cast<double>(window);
  for (std::size_t t = window - 1; t < losses.size(); ++t) {
    if (t >= window) window_sum += losses[t] - losses[t - window];
    const double smoothed = window_sum * inv_w;
    if (smoothed > ratio * best) flags.push_back(t);
    best = std::min(best, smoothed);
  }
  return flags;
}

double validate_lm(const Parameters& params, const ModelConfig& cfg,
                   const ByteCorpus& corpus, std::size_t batches,
                   std::size_t tokens_per_batch) {
  const std::size_t t_len = cfg.seq_len;
  if (corpus.valid.size() < t_len + 1) {
    throw std::invalid_argument("validate_lm: validation slice smaller than one window");
  }
  const std::size_t batch_size = std::max<std::size_t>(1, tokens_per_batch / t_len);
  const std::size_t windows = std::max<std::size_t>(1, batches * batch_size);
  const std::size_t usable = corpus.valid.size() - t_len;

  double nats = 0.0;
  std::size_t positions = 0;
  TokenBatch batch;
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t off =
        windows == 1 ? 0 : (w * usable) / (windows - 1);  // evenly spaced, deterministic
    TokenSeq seq(t_len);
    for (std::size_t t = 0; t < t_len; ++t) seq[t] = corpus.valid[off + t];
    batch.push_back(std::move(seq));
    if (batch.size() == batch_size || w + 1 == windows) {
      LmForwardResult fwd = lm_forward(params, cfg, batch);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        nats += cross_entropy(fwd.logits[b], batch[b], 1.0, nullptr);
        positions += t_len - 1;
      }
      batch.clear();
    }
  }
  return nats / static_cast<double>(positions);
}

}  // namespace attnlab
