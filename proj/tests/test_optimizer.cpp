#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "attnlab/optimizer.hpp"
#include "attnlab/rng.hpp"
#include "testutil.hpp"

using namespace attnlab;

namespace {

ScheduleConfig recipe_schedule() {
  ScheduleConfig s;
  s.lr_max = 6e-4;
  s.lr_min = 6e-5;
  s.warmup_steps = 2000;
  s.decay_steps = 600000;
  return s;
}

}  // namespace

TEST_CASE("lr_at warmup is linear from zero") {
  ScheduleConfig s = recipe_schedule();
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(500, s) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(lr_at(1000, s) == doctest::Approx(3.0e-4).epsilon(1e-12));
  CHECK(lr_at(2000, s) == doctest::Approx(6.0e-4).epsilon(1e-12));
}

TEST_CASE("lr_at cosine midpoint and endpoints") {
  ScheduleConfig s = recipe_schedule();
  // midpoint of the cosine leg: warmup + (decay - warmup)/2
  const std::uint64_t mid = 2000 + (600000 - 2000) / 2;
  CHECK(lr_at(mid, s) == doctest::Approx(3.3e-4).epsilon(1e-10));
  CHECK(lr_at(600000, s) == doctest::Approx(6.0e-5).epsilon(1e-12));
  CHECK(lr_at(10'000'000, s) == doctest::Approx(6.0e-5).epsilon(1e-12));
}

TEST_CASE("lr_at is continuous and monotone after warmup") {
  ScheduleConfig s = recipe_schedule();
  double prev = lr_at(2000, s);
  CHECK(prev == doctest::Approx(s.lr_max).epsilon(1e-12));
  for (std::uint64_t step = 2100; step <= 601000; step += 100) {
    const double lr = lr_at(step, s);
    CHECK(lr <= prev + 1e-15);
    CHECK(lr >= s.lr_min - 1e-15);
    prev = lr;
  }
}

TEST_CASE("lr_at degenerate zero warmup starts at lr_max") {
  ScheduleConfig s = recipe_schedule();
  s.warmup_steps = 0;
  CHECK(lr_at(0, s) == doctest::Approx(s.lr_max).epsilon(1e-12));
}

TEST_CASE("schedule and adamw config validation") {
  ScheduleConfig s = recipe_schedule();
  s.decay_steps = s.warmup_steps;  // empty cosine leg is invalid
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  AdamwConfig a;
  a.beta1 = 1.0;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a = AdamwConfig{};
  a.eps = 0.0;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
}

TEST_CASE("clip_global_norm scales a 3-4 gradient down to the threshold") {
  Matrix a(1, 1, 3.0);
  Matrix b(1, 1, 4.0);
  std::vector<Matrix*> grads{&a, &b};
  const double pre = clip_global_norm(grads, 1.0);
  CHECK(pre == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(a(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  const double post = global_l2_norm(std::vector<const Matrix*>{&a, &b});
  CHECK(post == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("clip_global_norm leaves small gradients untouched") {
  Matrix a(2, 2, 0.1);
  std::vector<Matrix*> grads{&a};
  const double pre = clip_global_norm(grads, 1.0);
  CHECK(pre == doctest::Approx(0.2).epsilon(1e-15));
  for (double v : a.data) CHECK(v == 0.1);
}

TEST_CASE("adam state zeros match parameter shapes") {
  Matrix p1(2, 3, 1.0), p2(1, 4, 2.0);
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p1, &p2});
  CHECK(st.t == 0);
  REQUIRE(st.m.size() == 2);
  REQUIRE(st.v.size() == 2);
  CHECK(st.m[0].rows == 2);
  CHECK(st.m[0].cols == 3);
  CHECK(st.v[1].cols == 4);
  for (double x : st.m[0].data) CHECK(x == 0.0);
}

TEST_CASE("adamw first step moves by about lr in the sign direction") {
  // With bias correction, step 1 has m_hat = g and v_hat = g^2, so the Adam
  // term is g/|g| up to eps.
  Rng rng(31);
  AdamwConfig cfg;
  cfg.weight_decay = 0.0;
  Matrix p(3, 2);
  Matrix g(3, 2);
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    p.data[i] = rng.normal(0.0, 1.0);
    g.data[i] = rng.normal(0.0, 2.0);
  }
  Matrix before = p;
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
  adamw_step(std::vector<Matrix*>{&p}, std::vector<const Matrix*>{&g}, st, cfg, 0.01);
  CHECK(st.t == 1);
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double moved = before.data[i] - p.data[i];
    const double expect = 0.01 * (g.data[i] > 0 ? 1.0 : -1.0);
    CHECK(moved == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("adamw decoupled decay shrinks weights with zero gradient") {
  AdamwConfig cfg;
  cfg.weight_decay = 0.1;
  Matrix p(1, 1, 2.0);
  Matrix g(1, 1, 0.0);
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
  double expect = 2.0;
  for (int step = 0; step < 5; ++step) {
    adamw_step(std::vector<Matrix*>{&p}, std::vector<const Matrix*>{&g}, st, cfg, 0.05);
    expect *= 1.0 - 0.05 * 0.1;
  }
  CHECK(p(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw agrees with an independent scalar trace") {
  // Mirror the update rule with plain doubles and compare trajectories.
  Rng rng(32);
  AdamwConfig cfg;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.95;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.1;
  Matrix p(1, 1, 0.7);
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
  double theta = 0.7, m = 0.0, v = 0.0;
  for (int step = 1; step <= 50; ++step) {
    const double grad = rng.normal(0.0, 1.0);
    Matrix g(1, 1, grad);
    const double lr = 0.003;
    adamw_step(std::vector<Matrix*>{&p}, std::vector<const Matrix*>{&g}, st, cfg, lr);

    m = 0.9 * m + 0.1 * grad;
    v = 0.95 * v + 0.05 * grad * grad;
    const double m_hat = m / (1.0 - std::pow(0.9, step));
    const double v_hat = v / (1.0 - std::pow(0.95, step));
    theta -= lr * (m_hat / (std::sqrt(v_hat) + 1e-8) + 0.1 * theta);
    CHECK(p(0, 0) == doctest::Approx(theta).epsilon(1e-14));
  }
  CHECK(st.t == 50);
}

TEST_CASE("adamw with clipping drives a quadratic to its minimum") {
  // f(theta) = (theta - 3)^2 summed over entries; no decay so the true
  // minimum is reachable.
  AdamwConfig cfg;
  cfg.weight_decay = 0.0;
  Matrix p(2, 2, 0.0);
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
  for (int step = 0; step < 4000; ++step) {
    Matrix g(2, 2);
    for (std::size_t i = 0; i < 4; ++i) g.data[i] = 2.0 * (p.data[i] - 3.0);
    std::vector<Matrix*> gptr{&g};
    clip_global_norm(gptr, 1.0);
    adamw_step(std::vector<Matrix*>{&p}, std::vector<const Matrix*>{&g}, st, cfg, 0.01);
  }
  for (double x : p.data) CHECK(x == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("adamw update is deterministic across identical runs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    AdamwConfig cfg;
    Matrix p = random_normal(3, 3, 1.0, rng);
    AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
    for (int step = 0; step < 20; ++step) {
      Matrix g = random_normal(3, 3, 1.0, rng);
      adamw_step(std::vector<Matrix*>{&p}, std::vector<const Matrix*>{&g}, st, cfg,
                 lr_at(static_cast<std::uint64_t>(step), ScheduleConfig{}));
    }
    return p;
  };
  Matrix a = run(77);
  Matrix b = run(77);
  CHECK(a.data == b.data);
}

TEST_CASE("adamw rejects mismatched parameter and gradient lists") {
  Matrix p(1, 1, 0.0), g1(1, 1, 0.0), g2(2, 1, 0.0);
  AdamState st = AdamState::zeros_like(std::vector<const Matrix*>{&p});
  AdamwConfig cfg;
  CHECK_THROWS_AS(adamw_step(std::vector<Matrix*>{&p},
                             std::vector<const Matrix*>{&g1, &g2}, st, cfg, 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(adamw_step(std::vector<Matrix*>{&p},
                             std::vector<const Matrix*>{&g2}, st, cfg, 0.1),
                  std::invalid_argument);
}
