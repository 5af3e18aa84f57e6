#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "attnlab/attention.hpp"
#include "attnlab/rng.hpp"
#include "testutil.hpp"

using namespace attnlab;

TEST_CASE("build_mask global causal n=3 is the lower triangle") {
  AdditiveMask m = build_mask(MaskSpec::global_causal(), 3);
  CHECK(m.count_allowed() == 6);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == (j <= i));
  }
}

TEST_CASE("build_mask local span 2 n=6 allows 15 pairs") {
  AdditiveMask m = build_mask(MaskSpec::local_causal(2), 6);
  CHECK(m.count_allowed() == 15);
  // row i has min(i, span) + 1 allowed entries
  for (std::size_t i = 0; i < 6; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < 6; ++j) count += m.at(i, j);
    CHECK(count == std::min<std::size_t>(i, 2) + 1);
  }
}

TEST_CASE("build_mask local span >= n-1 equals global causal") {
  for (std::size_t span : {5ul, 7ul, 100ul}) {
    AdditiveMask local = build_mask(MaskSpec::local_causal(span), 6);
    AdditiveMask global = build_mask(MaskSpec::global_causal(), 6);
    CHECK(local.allowed == global.allowed);
  }
}

TEST_CASE("build_mask two-sided window") {
  AdditiveMask m = build_mask(MaskSpec::two_sided_local(1, 2), 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const bool expect = (j + 1 >= i) && (j <= i + 2);
      CHECK(m.at(i, j) == expect);
    }
  }
}

TEST_CASE("attend uniform over prefix averages values") {
  Matrix q(2, 1, 0.0), k(2, 1, 0.0);
  Matrix v(2, 1);
  v(0, 0) = 1.0;
  v(1, 0) = 3.0;
  AdditiveMask mask = build_mask(MaskSpec::global_causal(), 2);
  AttendResult r = attend(q, k, v, mask, 1.0);
  CHECK(r.output(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.output(1, 0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("attend first row equals first value row under causality") {
  Rng rng(3);
  Matrix q = random_normal(5, 3, 1.0, rng);
  Matrix k = random_normal(5, 3, 1.0, rng);
  Matrix v = random_normal(5, 4, 1.0, rng);
  AdditiveMask mask = build_mask(MaskSpec::global_causal(), 5);
  AttendResult r = attend(q, k, v, mask, std::sqrt(3.0));
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(r.output(0, j) == doctest::Approx(v(0, j)).epsilon(1e-14));
  }
}

TEST_CASE("attend matches the naive reference within 1e-12") {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    Matrix q = random_normal(5, 3, 1.0, rng);
    Matrix k = random_normal(5, 3, 1.0, rng);
    Matrix v = random_normal(5, 2, 1.0, rng);
    AdditiveMask mask = build_mask(MaskSpec::global_causal(), 5);
    AttendResult r = attend(q, k, v, mask, std::sqrt(3.0));
    Matrix expect = testutil::reference_attend(q, k, v, mask, std::sqrt(3.0));
    CHECK(testutil::max_abs_diff(r.output, expect) < 1e-12);
  }
}

TEST_CASE("attend trace carries scaled logits, P rows sum to 1") {
  Rng rng(5);
  Matrix q = random_normal(4, 3, 1.0, rng);
  Matrix k = random_normal(4, 3, 1.0, rng);
  Matrix v = random_normal(4, 3, 1.0, rng);
  const double scale = 2.0;
  AdditiveMask mask = build_mask(MaskSpec::global_causal(), 4);
  AttendResult r = attend(q, k, v, mask, scale);
  REQUIRE(r.trace.logits.has_value());
  REQUIRE(r.trace.probs.has_value());
  // logits are QK^T / scale
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < 3; ++t) s += q(i, t) * k(j, t);
      CHECK((*r.trace.logits)(i, j) == doctest::Approx(s / scale).epsilon(1e-14));
    }
  }
  CHECK(r.trace.max_abs_logit == max_abs_entries(*r.trace.logits, mask));
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      sum += (*r.trace.probs)(i, j);
      if (!mask.at(i, j)) CHECK((*r.trace.probs)(i, j) == 0.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("attend rejects degenerate mask rows") {
  Matrix q(2, 1, 1.0), k(2, 1, 1.0), v(2, 1, 1.0);
  AdditiveMask mask(2, 2, false);
  mask.set(0, 0, true);
  CHECK_THROWS_AS(attend(q, k, v, mask, 1.0), DegenerateRowError);
}

TEST_CASE("attend_streaming equals attend for every mask kind") {
  Rng rng(6);
  const std::vector<MaskSpec> specs = {
      MaskSpec::full(), MaskSpec::global_causal(), MaskSpec::local_causal(3),
      MaskSpec::local_causal(1), MaskSpec::two_sided_local(2, 3)};
  for (int rep = 0; rep < 25; ++rep) {
    const std::size_t n = 1 + rng.next_below(64);
    Matrix q = random_normal(n, 4, 1.0, rng);
    Matrix k = random_normal(n, 4, 1.0, rng);
    Matrix v = random_normal(n, 3, 1.0, rng);
    for (const MaskSpec& spec : specs) {
      AdditiveMask mask = build_mask(spec, n);
      AttendResult exact = attend(q, k, v, mask, 2.0);
      StreamingResult streamed = attend_streaming(q, k, v, spec, 2.0);
      CHECK(testutil::max_abs_diff(exact.output, streamed.output) < 1e-10);
      CHECK(streamed.max_abs_logit ==
            doctest::Approx(exact.trace.max_abs_logit).epsilon(1e-12));
    }
  }
}

TEST_CASE("attend_streaming visits exactly the allowed pairs of a local mask") {
  Rng rng(7);
  const std::size_t n = 17, span = 4;
  Matrix q = random_normal(n, 3, 1.0, rng);
  Matrix k = random_normal(n, 3, 1.0, rng);
  Matrix v = random_normal(n, 3, 1.0, rng);
  StreamingResult r = attend_streaming(q, k, v, MaskSpec::local_causal(span), 1.0);
  std::uint64_t expect = 0;
  for (std::size_t i = 0; i < n; ++i) expect += std::min(i, span) + 1;
  CHECK(r.keys_visited == expect);
  CHECK(r.keys_visited == local_pair_count(n, span));
}

TEST_CASE("attend_streaming single token returns V row 0") {
  Matrix q(1, 2, 0.5), k(1, 2, 0.25), v(1, 3);
  v(0, 0) = 1.0;
  v(0, 1) = -2.0;
  v(0, 2) = 0.5;
  StreamingResult r = attend_streaming(q, k, v, MaskSpec::global_causal(), 1.0);
  for (std::size_t j = 0; j < 3; ++j) CHECK(r.output(0, j) == v(0, j));
}

TEST_CASE("attend_backward zero cotangent gives zero gradients") {
  Rng rng(8);
  Matrix q = random_normal(4, 3, 1.0, rng);
  Matrix k = random_normal(4, 3, 1.0, rng);
  Matrix v = random_normal(4, 2, 1.0, rng);
  AdditiveMask mask = build_mask(MaskSpec::global_causal(), 4);
  AttendResult fwd = attend(q, k, v, mask, 1.0);
  Matrix zero(4, 2, 0.0);
  AttentionGrads g = attend_backward(q, k, v, mask, 1.0, fwd.trace, zero);
  for (double x : g.d_query.data) CHECK(x == 0.0);
  for (double x : g.d_key.data) CHECK(x == 0.0);
  for (double x : g.d_value.data) CHECK(x == 0.0);
}

TEST_CASE("attend_backward matches central finite differences") {
  Rng rng(9);
  const std::size_t n = 6, dk = 4, dv = 3;
  Matrix q = random_normal(n, dk, 0.8, rng);
  Matrix k = random_normal(n, dk, 0.8, rng);
  Matrix v = random_normal(n, dv, 0.8, rng);
  Matrix dy = random_normal(n, dv, 1.0, rng);
  const double scale = std::sqrt(static_cast<double>(dk));
  AdditiveMask mask = build_mask(MaskSpec::local_causal(2), n);

  auto loss = [&]() {
    AttendResult r = attend(q, k, v, mask, scale);
    double acc = 0.0;
    for (std::size_t i = 0; i < r.output.data.size(); ++i) {
      acc += r.output.data[i] * dy.data[i];
    }
    return acc;
  };
  AttendResult fwd = attend(q, k, v, mask, scale);
  AttentionGrads g = attend_backward(q, k, v, mask, scale, fwd.trace, dy);
  const double err = testutil::max_grad_rel_error(
      {&q, &k, &v}, {&g.d_query, &g.d_key, &g.d_value}, loss);
  CHECK(err < 1e-6);
}

TEST_CASE("attend_backward missing trace fields throws") {
  Matrix q(2, 2, 0.1), k(2, 2, 0.1), v(2, 2, 0.1), dy(2, 2, 1.0);
  AdditiveMask mask = build_mask(MaskSpec::global_causal(), 2);
  AttentionTrace empty;
  CHECK_THROWS_AS(attend_backward(q, k, v, mask, 1.0, empty, dy), std::invalid_argument);
}

TEST_CASE("qk_normalize unit example and idempotence") {
  Matrix q(1, 2);
  q(0, 0) = 3.0;
  q(0, 1) = 4.0;
  Matrix k(1, 2, 1.0);
  auto [qn, kn] = qk_normalize(q, k, 1.0);
  CHECK(qn(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(qn(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
  auto [qn2, kn2] = qk_normalize(qn, kn, 1.0);
  CHECK(testutil::max_abs_diff(qn, qn2) < 1e-12);
  CHECK(testutil::max_abs_diff(kn, kn2) < 1e-12);
}

TEST_CASE("qk_normalize bounds every logit by gain^2") {
  Rng rng(10);
  for (double gain : {0.5, 1.0, 2.5}) {
    Matrix q = random_normal(8, 5, 3.0, rng);
    Matrix k = random_normal(8, 5, 3.0, rng);
    auto [qn, kn] = qk_normalize(q, k, gain);
    Matrix s = matmul_nt(qn, kn);
    CHECK(max_abs_entries(s) <= gain * gain + 1e-12);
  }
}

TEST_CASE("qk_normalize rejects zero rows") {
  Matrix q(2, 2, 0.0), k(2, 2, 1.0);
  CHECK_THROWS_AS(qk_normalize(q, k, 1.0), std::domain_error);
}

TEST_CASE("mhsa_forward all-global equals independent vanilla reference") {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t n = 7, d = 6, h = 2, dk = 3, dv = 3;
    Matrix x = random_normal(n, d, 1.0, rng);
    MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng);
    const double scale = std::sqrt(static_cast<double>(dk));
    MhsaResult got = mhsa_forward(x, w, LsLayout::all_global(h), scale);
    Matrix expect = testutil::reference_vanilla_mhsa(x, w, scale);
    CHECK(testutil::max_abs_diff(got.output, expect) < 1e-12);
  }
}

TEST_CASE("mhsa_forward all-local layout runs and differs from all-global") {
  Rng rng(12);
  const std::size_t n = 10, d = 6, h = 6, dk = 1, dv = 1;
  Matrix x = random_normal(n, d, 1.0, rng);
  MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng);
  const double scale = 1.0;
  MhsaResult all_local = mhsa_forward(x, w, LsLayout::local_global(h, 0, 2), scale);
  MhsaResult all_global = mhsa_forward(x, w, LsLayout::all_global(h), scale);
  CHECK(all_local.output.rows == n);
  CHECK(testutil::max_abs_diff(all_local.output, all_global.output) > 1e-8);
}

TEST_CASE("mhsa_forward H=1 with identity W_O reduces to attend") {
  Rng rng(13);
  const std::size_t n = 5, d = 4;
  Matrix x = random_normal(n, d, 1.0, rng);
  MultiHeadWeights w = testutil::random_mhsa_weights(1, d, d, d, rng);
  w.w_out = Matrix::identity(d);
  const double scale = 2.0;
  MhsaResult got = mhsa_forward(x, w, LsLayout::all_global(1), scale);
  Matrix q = matmul(x, w.heads[0].w_query);
  Matrix k = matmul(x, w.heads[0].w_key);
  Matrix v = matmul(x, w.heads[0].w_value);
  AttendResult expect = attend(q, k, v, build_mask(MaskSpec::global_causal(), n), scale);
  CHECK(testutil::max_abs_diff(got.output, expect.output) < 1e-14);
}

TEST_CASE("mhsa_forward local span >= n-1 equals all-global output") {
  Rng rng(14);
  const std::size_t n = 6, d = 6, h = 3, dk = 2, dv = 2;
  Matrix x = random_normal(n, d, 1.0, rng);
  MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng);
  MhsaResult wide = mhsa_forward(x, w, LsLayout::local_global(h, 0, n - 1), 1.0);
  MhsaResult global = mhsa_forward(x, w, LsLayout::all_global(h), 1.0);
  CHECK(testutil::max_abs_diff(wide.output, global.output) < 1e-12);
}

TEST_CASE("mhsa_forward_streaming equals exact forward") {
  Rng rng(15);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 2 + rng.next_below(30);
    const std::size_t d = 6, h = 3, dk = 2, dv = 2;
    Matrix x = random_normal(n, d, 1.0, rng);
    MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng);
    LsLayout layout = LsLayout::local_global(2, 1, 3);
    const double scale = std::sqrt(2.0);
    MhsaResult exact = mhsa_forward(x, w, layout, scale);
    MhsaStreamingResult streamed = mhsa_forward_streaming(x, w, layout, scale);
    CHECK(testutil::max_abs_diff(exact.output, streamed.output) < 1e-10);
    for (std::size_t head = 0; head < h; ++head) {
      CHECK(streamed.max_abs_logits[head] ==
            doctest::Approx(exact.traces[head].max_abs_logit).epsilon(1e-12));
    }
  }
}

TEST_CASE("mhsa qk_norm bounds every traced logit by gain^2/scale") {
  Rng rng(16);
  const std::size_t n = 12, d = 8, h = 2, dk = 4, dv = 4;
  Matrix x = random_normal(n, d, 2.0, rng);
  const double gain = 1.7;
  MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng, 1.5, true, gain);
  const double scale = std::sqrt(static_cast<double>(dk));
  LsLayout layout = LsLayout::local_global(1, 1, 3, true);
  MhsaResult r = mhsa_forward(x, w, layout, scale);
  for (const AttentionTrace& t : r.traces) {
    CHECK(t.max_abs_logit <= gain * gain / scale + 1e-9);
  }
}

TEST_CASE("mhsa_backward zero cotangent gives zero gradients") {
  Rng rng(17);
  const std::size_t n = 5, d = 6, h = 2, dk = 3, dv = 3;
  Matrix x = random_normal(n, d, 1.0, rng);
  MultiHeadWeights w = testutil::random_mhsa_weights(h, d, dk, dv, rng);
  LsLayout layout = LsLayout::local_global(1, 1, 2);
  MhsaResult fwd = mhsa_forward(x, w, layout, 1.0);
  Matrix zero(n, d, 0.0);
  MhsaGrads g = mhsa_backward(x, w, layout, 1.0, fwd.traces, zero);
  for (double v : g.d_input.data) CHECK(v == 0.0);
  for (const HeadWeights& hw : g.d_weights.heads) {
    for (double v : hw.w_query.data) CHECK(v == 0.0);
    for (double v : hw.w_key.data) CHECK(v == 0.0);
    for (double v : hw.w_value.data) CHECK(v == 0.0);
  }
  for (double v : g.d_weights.w_out.data) CHECK(v == 0.0);
}

namespace {

// Scalar probe loss sum(Y .* dY) for finite-difference checks of the MHSA path.
double mhsa_probe_loss(const Matrix& x, const MultiHeadWeights& w, const LsLayout& layout,
                       double scale, const Matrix& dy) {
  MhsaResult r = mhsa_forward(x, w, layout, scale);
  double acc = 0.0;
  for (std::size_t i = 0; i < r.output.data.size(); ++i) acc += r.output.data[i] * dy.data[i];
  return acc;
}

}  // namespace

TEST_CASE("mhsa_backward matches finite differences on every weight") {
  Rng rng(18);
  const std::size_t n = 5, d = 6, h = 2, dk = 3, dv = 3;
  Matrix x = random_normal(n, d, 0.6, rng);
  const double scale = std::sqrt(static_cast<double>(dk));
  Matrix dy = random_normal(n, d, 1.0, rng);

  for (bool qk_norm : {false, true}) {
    MultiHeadWeights w =
        testutil::random_mhsa_weights(h, d, dk, dv, rng, 0.6, qk_norm, std::sqrt(3.0));
    LsLayout layout = LsLayout::local_global(1, 1, 2, qk_norm);
    MhsaResult fwd = mhsa_forward(x, w, layout, scale);
    MhsaGrads g = mhsa_backward(x, w, layout, scale, fwd.traces, dy);

    auto loss = [&]() { return mhsa_probe_loss(x, w, layout, scale, dy); };
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
    CHECK(testutil::max_grad_rel_error(params, analytic, loss) < 1e-6);
  }
}

TEST_CASE("local head W_K gets no gradient from keys outside every window") {
  // Perturbing a K row that no query can see must leave the loss unchanged.
  Rng rng(19);
  const std::size_t n = 6, d = 4, dk = 2, dv = 2;
  Matrix x = random_normal(n, d, 0.7, rng);
  MultiHeadWeights w = testutil::random_mhsa_weights(1, d, dk, dv, rng, 0.7);
  LsLayout layout = LsLayout::local_global(1, 0, 1);  // span 1: row i sees {i-1, i}
  const double scale = 1.0;
  Matrix dy = random_normal(n, d, 1.0, rng);

  // Direct K perturbation is hidden behind the projection, so probe at the
  // attention layer: gradients dK rows are nonzero only where some query
  // attends; here every key is inside some window, so instead check dS
  // structure via attend_backward.
  Matrix q = matmul(x, w.heads[0].w_query);
  Matrix k = matmul(x, w.heads[0].w_key);
  Matrix v = matmul(x, w.heads[0].w_value);
  AdditiveMask mask = build_mask(MaskSpec::local_causal(1), n);
  AttendResult fwd = attend(q, k, v, mask, scale);
  Matrix d_head = random_normal(n, dv, 1.0, rng);

  // Finite differences on a masked score entry: force Q,K so that moving a
  // disallowed pair's interaction does not move the loss.
  auto loss = [&]() {
    AttendResult r = attend(q, k, v, mask, scale);
    double acc = 0.0;
    for (std::size_t i = 0; i < r.output.data.size(); ++i) {
      acc += r.output.data[i] * d_head.data[i];
    }
    return acc;
  };
  // K row j only matters through queries i with 0 <= i-j <= 1. Zero that
  // window's cotangent and the FD gradient of K row j must vanish.
  const std::size_t target_row = 2;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == target_row || i == target_row + 1) {
      for (std::size_t t = 0; t < dv; ++t) d_head(i, t) = 0.0;
    }
  }
  AttentionGrads g = attend_backward(q, k, v, mask, scale, fwd.trace, d_head);
  const double h = 1e-5;
  for (std::size_t t = 0; t < dk; ++t) {
    const double saved = k(target_row, t);
    k(target_row, t) = saved + h;
    const double up = loss();
    k(target_row, t) = saved - h;
    const double down = loss();
    k(target_row, t) = saved;
    CHECK(std::fabs((up - down) / (2 * h)) < 1e-8);
    CHECK(std::fabs(g.d_key(target_row, t)) < 1e-12);
  }
}

TEST_CASE("disallowed score gradients are exactly zero") {
  Rng rng(20);
  const std::size_t n = 6;
  Matrix q = random_normal(n, 3, 1.0, rng);
  Matrix k = random_normal(n, 3, 1.0, rng);
  Matrix v = random_normal(n, 2, 1.0, rng);
  AdditiveMask mask = build_mask(MaskSpec::local_causal(2), n);
  AttendResult fwd = attend(q, k, v, mask, 1.0);
  // dS is internal; observable through dQ = dS K: rebuild dS from its pieces
  // by checking P is exactly zero at disallowed entries (the dS factor).
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.at(i, j)) CHECK((*fwd.trace.probs)(i, j) == 0.0);
    }
  }
}

TEST_CASE("attention_flops hand-checked pair counts") {
  CHECK(causal_pair_count(6) == 21);
  CHECK(local_pair_count(6, 2) == 15);
  CHECK(local_pair_count(6, 5) == 21);   // window covers the whole prefix
  CHECK(local_pair_count(6, 100) == 21);
}

TEST_CASE("attention_flops all-global layout has ratio exactly 1") {
  FlopsReport r = attention_flops(LsLayout::all_global(6), 512, 32, 32);
  CHECK(r.ls_flops == r.vanilla_flops);
  CHECK(r.ratio == 1.0);
}

TEST_CASE("attention_flops ratio approaches (s+l)/l for large n") {
  const LsLayout layout = LsLayout::local_global(5, 1, 100);
  // ratio = 6 / (1 + 5 pairs_p / pairs_g) climbs toward 6 as n grows;
  // crosses within-5% around n = 200 (p+1)
  double prev = 0.0;
  for (std::size_t n : {1024ul, 4096ul, 16384ul, 32768ul}) {
    FlopsReport r = attention_flops(layout, n, 32, 32);
    CHECK(r.ratio > prev);
    prev = r.ratio;
  }
  FlopsReport far = attention_flops(layout, 210 * 101, 32, 32);
  CHECK(far.ratio >= 6.0 * 0.95);
  CHECK(far.ratio <= 6.0);
}

TEST_CASE("attention_flops n=6 span=2 example costs") {
  const std::size_t dk = 3, dv = 2;
  FlopsReport r = attention_flops(LsLayout::local_global(1, 1, 2), 6, dk, dv);
  CHECK(r.ls_flops == (15 + 21) * (dk + dv));
  CHECK(r.vanilla_flops == 2 * 21 * (dk + dv));
}
