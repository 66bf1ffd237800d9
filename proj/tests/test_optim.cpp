#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ar/optim.hpp"
#include "ar/rng.hpp"

using namespace ar;

namespace {

std::vector<std::pair<std::string, Tensor<double>>> scalar_param(double value) {
  auto p = Tensor<double>::from({1}, {value}, true);
  return {{"p", p}};
}

}  // namespace

TEST_CASE("adamw: hand-computed single step") {
  // p=1, g=1, lr=0.1, wd=0, t=1 -> m_hat=1, v_hat=1, p' = 1 - 0.1/(1+1e-8)
  auto params = scalar_param(1.0);
  params[0].second.grad()[0] = 1.0;
  AdamW<double> opt(params, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step();
  double m_hat = (0.1 * 1.0) / (1.0 - 0.9);
  double v_hat = (0.001 * 1.0) / (1.0 - 0.999);
  double expect = 1.0 - 0.1 * (m_hat / (std::sqrt(v_hat) + 1e-8));
  CHECK(params[0].second.values()[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(params[0].second.values()[0] - 0.9) < 1e-8);
}

TEST_CASE("adamw: zero gradient with zero decay is a fixed point") {
  auto params = scalar_param(3.25);
  params[0].second.grad()[0] = 0.0;
  AdamW<double> opt(params, {0.1, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) opt.step();
  CHECK(params[0].second.values()[0] == 3.25);
}

TEST_CASE("adamw: decoupled decay moves p even at zero gradient") {
  // wd=0.05, g=0, lr=0.1, p=1 -> p' = 1 - 0.1*0.05 = 0.995
  auto params = scalar_param(1.0);
  params[0].second.grad()[0] = 0.0;
  AdamW<double> opt(params, {0.1, 0.9, 0.999, 1e-8, 0.05});
  opt.step();
  CHECK(params[0].second.values()[0] == doctest::Approx(0.995).epsilon(1e-12));
}

TEST_CASE("adamw: refuses non-finite gradients") {
  auto params = scalar_param(1.0);
  params[0].second.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamW<double> opt(params, {});
  CHECK_THROWS_AS(opt.step(), NumericError);
  CHECK(params[0].second.values()[0] == 1.0);  // untouched
  CHECK(opt.step_count() == 0);
}

TEST_CASE("adamw: per-parameter independence under reordering") {
  auto a = Tensor<double>::from({1}, {1.0}, true);
  auto b = Tensor<double>::from({1}, {2.0}, true);
  a.grad()[0] = 0.3;
  b.grad()[0] = -0.7;
  std::vector<std::pair<std::string, Tensor<double>>> fwd{{"a", a}, {"b", b}};
  AdamW<double> o1(fwd, {0.01, 0.9, 0.999, 1e-8, 0.05});
  o1.step();

  auto a2 = Tensor<double>::from({1}, {1.0}, true);
  auto b2 = Tensor<double>::from({1}, {2.0}, true);
  a2.grad()[0] = 0.3;
  b2.grad()[0] = -0.7;
  std::vector<std::pair<std::string, Tensor<double>>> rev{{"b", b2}, {"a", a2}};
  AdamW<double> o2(rev, {0.01, 0.9, 0.999, 1e-8, 0.05});
  o2.step();

  CHECK(a.values()[0] == a2.values()[0]);
  CHECK(b.values()[0] == b2.values()[0]);
}

TEST_CASE("clip: scales only above the threshold, norm formula exact") {
  auto a = Tensor<double>::from({2}, {1.2, -0.9}, true);
  auto b = Tensor<double>::from({1}, {0.4}, true);
  std::vector<std::pair<std::string, Tensor<double>>> params{{"a", a}, {"b", b}};

  a.grad() = {1.2, -1.6};  // norm 2.0
  b.grad() = {0.0};
  double pre = clip_global_norm(params, 1.0);
  CHECK(pre == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(a.grad()[1] == doctest::Approx(-0.8).epsilon(1e-12));
  CHECK(global_grad_norm(params) == doctest::Approx(1.0).epsilon(1e-6));

  a.grad() = {0.3, -0.4};  // norm 0.5, below threshold
  b.grad() = {0.0};
  clip_global_norm(params, 1.0);
  CHECK(a.grad()[0] == 0.3);
  CHECK(a.grad()[1] == -0.4);

  // clipping never increases a single gradient's magnitude
  RngStream rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    a.grad()[0] = rng.uniform_range(-3, 3);
    a.grad()[1] = rng.uniform_range(-3, 3);
    b.grad()[0] = rng.uniform_range(-3, 3);
    auto before_a = a.grad();
    auto before_b = b.grad();
    double n = clip_global_norm(params, 1.0);
    CHECK(global_grad_norm(params) == doctest::Approx(std::min(n, 1.0)).epsilon(1e-6));
    for (size_t i = 0; i < before_a.size(); ++i) CHECK(std::abs(a.grad()[i]) <= std::abs(before_a[i]) + 1e-15);
    CHECK(std::abs(b.grad()[0]) <= std::abs(before_b[0]) + 1e-15);
  }
}

TEST_CASE("plateau: 61 identical metrics halve the lr on the 61st call") {
  PlateauScheduler sched(0.2e-2);
  bool reduced = false;
  for (int call = 1; call <= 61; ++call) {
    reduced = sched.step(5.0);
    if (call < 61) CHECK(!reduced);
  }
  CHECK(reduced);
  CHECK(sched.lr() == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("plateau: monotone improvement never reduces") {
  PlateauScheduler sched(0.2e-2);
  double metric = 10.0;
  for (int i = 0; i < 300; ++i) {
    CHECK(!sched.step(metric));
    metric -= 0.01;
  }
  CHECK(sched.lr() == 0.2e-2);
}

TEST_CASE("plateau: repeated plateaus clamp at the floor") {
  PlateauScheduler sched(2e-3);
  sched.step(1.0);  // first call improves on +inf
  std::vector<double> lrs;
  for (int round = 0; round < 6; ++round) {
    for (int i = 0; i < 60; ++i) sched.step(1.0);
    lrs.push_back(sched.lr());
  }
  CHECK(lrs[0] == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lrs[1] == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lrs[2] == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(lrs[3] == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(lrs[4] == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(lrs[5] == doctest::Approx(1.5e-4).epsilon(1e-12));
}

TEST_CASE("lr range test: exponential schedule hits the documented formula") {
  std::vector<double> seen;
  auto step = [&](double lr) {
    seen.push_back(lr);
    return 1.0;
  };
  auto result = lr_range_test(step, 1e-7, 1.0, 100);
  REQUIRE(seen.size() == 100);
  for (int k = 0; k < 100; ++k) {
    double expect = 1e-7 * std::pow(1e7, static_cast<double>(k) / 99.0);
    CHECK(seen[static_cast<size_t>(k)] == doctest::Approx(expect).epsilon(1e-9));
  }
  CHECK(result.curve.size() == 100);

  // constant loss: the minimum ties at the first index, suggestion = lr_min/10
  CHECK(result.suggestion_min_loss == doctest::Approx(1e-8).epsilon(1e-9));
}

TEST_CASE("lr range test: convex quadratic, suggestion below the divergence lr") {
  // gradient descent on f(p) = p^2; diverges once lr > 1
  double p = 1.0;
  auto step = [&](double lr) {
    double loss = p * p;
    p -= lr * 2.0 * p;
    return loss;
  };
  auto result = lr_range_test(step, 1e-4, 10.0, 200);
  CHECK(result.diverged);
  CHECK(result.suggestion_min_loss < result.divergence_lr);
  CHECK(result.curve.size() < 200);

  auto explode = [](double) { return std::numeric_limits<double>::infinity(); };
  CHECK_THROWS_AS(lr_range_test(explode, 1e-4, 1.0, 50), NumericError);
}
