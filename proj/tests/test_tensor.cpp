#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ar/gradcheck.hpp"
#include "ar/ops.hpp"
#include "ar/rng.hpp"
#include "ar/tensor.hpp"

using namespace ar;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, bool requires_grad = true,
                             double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform_range(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

// Reduces an op output to a scalar with fixed random weights so the checked
// gradients are non-trivial.
Tensor<double> weighted_sum(const Tensor<double>& x, uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> w(static_cast<size_t>(x.numel()));
  for (auto& v : w) v = rng.uniform_range(-1.0, 1.0);
  return sum_all(mul(x, Tensor<double>::from(x.shape(), std::move(w))));
}

void expect_fd_ok(const std::function<Tensor<double>()>& f,
                  const std::vector<std::pair<std::string, Tensor<double>>>& params,
                  double tol = 1e-6) {
  auto report = finite_difference_check<double>(f, params, 1e-5, tol);
  INFO("worst param=", report.worst.param, " idx=", report.worst.index, " ad=", report.worst.autodiff,
       " fd=", report.worst.numeric);
  CHECK(report.max_rel_err <= tol);
}

}  // namespace

TEST_CASE("rng: same seed, same draws") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: purpose streams are independent") {
  Rng root(7);
  auto s1 = root.stream("sampling");
  // Consuming the dropout stream must not shift the sampling stream.
  auto d = root.stream("dropout");
  for (int i = 0; i < 1000; ++i) d.uniform();
  auto s2 = root.stream("sampling");
  for (int i = 0; i < 100; ++i) CHECK(s1.next_u64() == s2.next_u64());
  CHECK(root.stream("dropout").next_u64() != root.stream("sampling").next_u64());
  CHECK(root.stream("x", 0).next_u64() != root.stream("x", 1).next_u64());
}

TEST_CASE("rng: uniform mean over 1e5 draws") {
  RngStream s(123);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) acc += s.uniform();
  CHECK(std::abs(acc / n - 0.5) < 0.01);
}

TEST_CASE("tensor: shape/value invariant") {
  CHECK_THROWS(Tensor<double>::from({2, 3}, {1.0, 2.0}));
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.id() > 0);
}

TEST_CASE("matmul: identity case") {
  auto eye = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RngStream rng(1);
  auto a = random_tensor({3, 3}, rng, false);
  auto out = matmul(eye, a);
  for (int i = 0; i < 9; ++i) CHECK(out.values()[i] == a.values()[i]);
}

TEST_CASE("softmax: symmetry and normalization") {
  auto x = Tensor<double>::from({1, 2}, {0.0, 0.0});
  auto y = softmax_lastdim(x);
  CHECK(y.values()[0] == doctest::Approx(0.5));
  CHECK(y.values()[1] == doctest::Approx(0.5));

  RngStream rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_tensor({4, 7}, rng, false, -5.0, 5.0);
    auto s = softmax_lastdim(z);
    for (int r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (int j = 0; j < 7; ++j) {
        double v = s.values()[static_cast<size_t>(r * 7 + j)];
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("masked fill: -inf positions get weight < 1e-30") {
  RngStream rng(9);
  auto scores = random_tensor({2, 5}, rng, false, -2.0, 2.0);
  std::vector<uint8_t> valid{1, 1, 0, 1, 0, 0, 1, 1, 1, 1};
  auto w = softmax_lastdim(masked_fill_keypad(scores, valid));
  for (int i = 0; i < 10; ++i) {
    if (!valid[static_cast<size_t>(i)]) CHECK(w.values()[static_cast<size_t>(i)] < 1e-30);
  }
}

TEST_CASE("dropout: rate 0 is the identity") {
  RngStream rng(3);
  auto x = random_tensor({4, 4}, rng, false);
  auto y = dropout(x, 0.0, rng, true);
  CHECK(y.id() == x.id());
  CHECK_THROWS(dropout(x, 1.0, rng, true));
}

TEST_CASE("backward: linear and quadratic analytic gradients") {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  auto loss = sum_all(x);
  loss.backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = Tensor<double>::from({2}, {1, 2}, true);
  auto loss2 = sum_all(mul(y, y));
  loss2.backward();
  CHECK(y.grad()[0] == doctest::Approx(2.0));
  CHECK(y.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward: rejects non-scalar loss") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(y.backward(), std::invalid_argument);
}

TEST_CASE("backward: grads accumulate additively to zero-initialized buffers") {
  auto x = Tensor<double>::from({2}, {3, 4}, true);
  auto loss = sum_all(add(mul(x, x), x));  // x appears twice
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));
  CHECK(x.grad()[1] == doctest::Approx(9.0));
}

TEST_CASE("unreachable parameter keeps zero grad") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto z = Tensor<double>::from({2}, {5, 6}, true);
  sum_all(x).backward();
  for (double g : z.grad()) CHECK(g == 0.0);
}

TEST_CASE("graph replay under a fixed seed is bitwise reproducible") {
  auto build = [](uint64_t seed) {
    RngStream rng(seed);
    auto x = random_tensor({3, 8}, rng, false);
    RngStream drop(seed ^ 77);
    auto y = dropout(gelu(x), 0.3, drop, true);
    return softmax_lastdim(y);
  };
  auto a = build(11);
  auto b = build(11);
  REQUIRE(a.numel() == b.numel());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.values()[static_cast<size_t>(i)] == b.values()[static_cast<size_t>(i)]);
}

TEST_CASE("primitive_forward: dispatch, unknown op, shape mismatch") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto direct = add(a, b);
  auto routed = primitive_forward<double>("add", {a, b});
  for (int i = 0; i < 4; ++i) CHECK(routed.values()[i] == direct.values()[i]);

  CHECK_THROWS_WITH_AS(primitive_forward<double>("frobnicate", {a}),
                       doctest::Contains("unknown primitive op"), std::invalid_argument);

  auto c = Tensor<double>::from({3}, {1, 2, 3});
  try {
    primitive_forward<double>("add", {a, c});
    FAIL("expected shape mismatch");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
  }
}

TEST_CASE("finite differences: constant builder has zero gradients") {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  auto f = []() { return Tensor<double>::scalar(4.0); };
  auto report = finite_difference_check<double>(f, {{"x", x}}, 1e-5, 1e-6);
  CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("finite differences: non-deterministic builder rejected") {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  auto shared = std::make_shared<RngStream>(1);
  auto f = [shared]() { return Tensor<double>::scalar(shared->uniform()); };
  CHECK_THROWS_AS((finite_difference_check<double>(f, {{"x", x}}, 1e-5, 1e-6)),
                  std::runtime_error);
}

TEST_CASE("finite differences: every primitive backward rule") {
  RngStream rng(2024);

  SUBCASE("add / scale / mul / bias / broadcast-rows") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto bias = random_tensor({4}, rng);
    auto rows = random_tensor({4}, rng);
    auto g = random_tensor({1}, rng);
    auto f = [&]() {
      auto t = add(a, b);
      t = add_bias(t, bias);
      t = mul(t, scale(a, 0.7));
      t = mul_scalar_tensor(t, g);
      auto r2 = add_broadcast_rows(reshape(t, {3, 4}), rows);
      return weighted_sum(r2, 1);
    };
    expect_fd_ok(f, {{"a", a}, {"b", b}, {"bias", bias}, {"rows", rows}, {"gate", g}});
  }

  SUBCASE("matmul variants") {
    auto a2 = random_tensor({3, 5}, rng);
    auto b2 = random_tensor({5, 4}, rng);
    auto a3 = random_tensor({2, 3, 5}, rng);
    auto a4 = random_tensor({2, 2, 3, 4}, rng);
    auto b4 = random_tensor({2, 2, 4, 3}, rng);
    auto f = [&]() {
      auto x = matmul(a2, b2);                    // 2D x 2D
      auto y = matmul(a3, b2);                    // 3D x 2D
      auto z = matmul(a4, b4);                    // 4D x 4D
      return add(add(weighted_sum(x, 2), weighted_sum(y, 3)), weighted_sum(z, 4));
    };
    expect_fd_ok(f, {{"a2", a2}, {"b2", b2}, {"a3", a3}, {"a4", a4}, {"b4", b4}});
  }

  SUBCASE("permute / reshape / concat / slice") {
    auto x = random_tensor({2, 3, 4}, rng);
    auto y = random_tensor({2, 3, 4}, rng);
    auto f = [&]() {
      auto p = permute(x, {2, 0, 1});
      auto r = reshape(p, {4, 6});
      auto c = concat<double>({x, y}, 1);
      auto s = slice(c, 1, 2, 3);
      return add(weighted_sum(r, 5), weighted_sum(s, 6));
    };
    expect_fd_ok(f, {{"x", x}, {"y", y}});
  }

  SUBCASE("embedding / group mean / gather") {
    auto table = random_tensor({7, 3}, rng);
    auto seqs = random_tensor({2, 4, 3}, rng);
    std::vector<int32_t> ids{0, 3, 3, 6, 2, 1};
    std::vector<std::vector<int32_t>> groups{{1, 2}, {0}, {5, 5, 6}};
    std::vector<int32_t> gidx{0, 2, 1, 3, 3, 0};
    auto f = [&]() {
      auto e = embedding(table, ids, {2, 3});
      auto gm = group_mean_embedding(table, groups);
      auto ga = gather_axis1(seqs, gidx, 3);
      return add(add(weighted_sum(e, 7), weighted_sum(gm, 8)), weighted_sum(ga, 9));
    };
    expect_fd_ok(f, {{"table", table}, {"seqs", seqs}});
  }

  SUBCASE("relu away from the kink, gelu, softmax, layer norm") {
    auto x = random_tensor({3, 6}, rng, true, 0.2, 1.5);
    auto x2 = random_tensor({3, 6}, rng, true, -2.0, 2.0);
    auto gamma = random_tensor({6}, rng, true, 0.5, 1.5);
    auto beta = random_tensor({6}, rng);
    auto f = [&]() {
      auto a = relu(x);
      auto b = gelu(x2);
      auto s = softmax_lastdim(x2);
      auto n = layer_norm(x2, gamma, beta);
      return add(add(weighted_sum(a, 10), weighted_sum(b, 11)),
                 add(weighted_sum(s, 12), weighted_sum(n, 13)));
    };
    expect_fd_ok(f, {{"x", x}, {"x2", x2}, {"gamma", gamma}, {"beta", beta}});
  }

  SUBCASE("masked fills and masked mean") {
    auto scores = random_tensor({2, 2, 3, 3}, rng);
    auto seq = random_tensor({2, 3, 4}, rng);
    std::vector<uint8_t> valid{1, 1, 0, 1, 1, 1};
    auto f = [&]() {
      auto c = softmax_lastdim(causal_mask_fill(scores));
      auto k = softmax_lastdim(masked_fill_keypad(scores, valid));
      auto m = masked_mean_seq(seq, valid);
      return add(add(weighted_sum(c, 14), weighted_sum(k, 15)), weighted_sum(m, 16));
    };
    expect_fd_ok(f, {{"scores", scores}, {"seq", seq}});
  }

  SUBCASE("dropout with frozen mask") {
    auto x = random_tensor({4, 5}, rng);
    auto f = [&]() {
      RngStream frozen(99);  // same mask on every evaluation
      return weighted_sum(dropout(x, 0.4, frozen, true), 17);
    };
    expect_fd_ok(f, {{"x", x}});
  }

  SUBCASE("cross entropy from logits") {
    auto logits = random_tensor({5, 7}, rng, true, -2.0, 2.0);
    std::vector<int32_t> targets{1, 0, 6, 3, 3};
    std::vector<uint8_t> include{1, 1, 0, 1, 1};
    auto f = [&]() { return cross_entropy_from_logits(logits, targets, include); };
    expect_fd_ok(f, {{"logits", logits}});
  }

  SUBCASE("softmax cross entropy composite at 64-bit") {
    auto logits = random_tensor({6, 9}, rng, true, -3.0, 3.0);
    std::vector<int32_t> targets{0, 1, 2, 3, 4, 5};
    std::vector<uint8_t> include(6, 1);
    auto f = [&]() { return cross_entropy_from_logits(logits, targets, include); };
    expect_fd_ok(f, {{"logits", logits}});
  }
}

TEST_CASE("cross entropy: rejects empty inclusion and bad targets") {
  auto logits = Tensor<double>::from({2, 3}, {0, 0, 0, 0, 0, 0}, true);
  CHECK_THROWS(cross_entropy_from_logits(logits, {0, 1}, {0, 0}));
  CHECK_THROWS(cross_entropy_from_logits(logits, {0, 5}, {1, 1}));
}
