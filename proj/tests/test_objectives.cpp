#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ar/objectives.hpp"

using namespace ar;

namespace {

Batch logits_batch(int64_t b, int64_t lt, std::vector<int32_t> targets, std::vector<uint8_t> mask) {
  Batch batch;
  batch.size = b;
  batch.tgt_len = lt;
  batch.ctx_len = 1;
  batch.dec_target = std::move(targets);
  batch.dec_mask = std::move(mask);
  return batch;
}

}  // namespace

TEST_CASE("dialogue loss: uniform logits give ln V") {
  const int64_t v = 50;
  auto logits = Tensor<double>::zeros({1, 4, v});
  auto batch = logits_batch(1, 4, {1, 2, 3, 4}, {1, 1, 1, 1});
  auto loss = dialogue_loss(logits, batch);
  CHECK(loss.item() == doctest::Approx(std::log(50.0)).epsilon(1e-12));
  CHECK(loss.item() == doctest::Approx(3.9120230054281461).epsilon(1e-12));
}

TEST_CASE("dialogue loss: huge correct margin drives the loss to zero") {
  const int64_t v = 8;
  std::vector<double> z(static_cast<size_t>(2 * v), 0.0);
  z[3] = 50.0;       // position 0 target 3
  z[v + 5] = 50.0;   // position 1 target 5
  auto logits = Tensor<double>::from({1, 2, v}, std::move(z));
  auto batch = logits_batch(1, 2, {3, 5}, {1, 1});
  CHECK(dialogue_loss(logits, batch).item() < 1e-12);
}

TEST_CASE("dialogue loss: all-pad batch rejected") {
  auto logits = Tensor<double>::zeros({1, 2, 4});
  auto batch = logits_batch(1, 2, {0, 0}, {0, 0});
  CHECK_THROWS_AS(dialogue_loss(logits, batch), std::invalid_argument);
}

TEST_CASE("dialogue loss: invariant to extra padding columns") {
  RngStream rng(5);
  std::vector<double> z(2 * 3 * 7);
  for (auto& x : z) x = rng.uniform_range(-2.0, 2.0);
  auto logits = Tensor<double>::from({2, 3, 7}, std::move(z));
  auto batch = logits_batch(2, 3, {1, 2, 0, 3, 4, 0}, {1, 1, 0, 1, 1, 0});
  double base = dialogue_loss(logits, batch).item();

  // widen Lt by two pad columns of arbitrary logits
  std::vector<double> z2(2 * 5 * 7, 9.0);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t c = 0; c < 7; ++c)
        z2[static_cast<size_t>((i * 5 + t) * 7 + c)] = logits.values()[static_cast<size_t>((i * 3 + t) * 7 + c)];
  auto wide = Tensor<double>::from({2, 5, 7}, std::move(z2));
  auto batch2 = logits_batch(2, 5, {1, 2, 0, 0, 0, 3, 4, 0, 0, 0}, {1, 1, 0, 0, 0, 1, 1, 0, 0, 0});
  CHECK(dialogue_loss(wide, batch2).item() == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("mlm loss: labeled positions only; empty label set contributes zero") {
  Batch batch;
  batch.size = 1;
  batch.ctx_len = 3;
  batch.mlm_labels = {-1, 4, -1};
  batch.mlm_label_count = 1;
  std::vector<double> z(3 * 6, 0.0);
  auto logits = Tensor<double>::from({1, 3, 6}, std::move(z));
  CHECK(mlm_loss(logits, batch).item() == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  // perfect reconstruction
  std::vector<double> zp(3 * 6, 0.0);
  zp[6 + 4] = 60.0;
  auto perfect = Tensor<double>::from({1, 3, 6}, std::move(zp));
  CHECK(mlm_loss(perfect, batch).item() < 1e-12);

  Batch none = batch;
  none.mlm_labels = {-1, -1, -1};
  none.mlm_label_count = 0;
  CHECK(mlm_loss(logits, none).item() == 0.0);
}

TEST_CASE("combined loss: arithmetic and validation") {
  auto ld = Tensor<double>::scalar(2.0);
  auto llm = Tensor<double>::scalar(1.0);
  CHECK(combined_loss(ld, llm, 0.5).item() == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(combined_loss(ld, llm, 0.0).item() == 2.0);
  CHECK_THROWS_AS(combined_loss(ld, llm, -0.1), std::invalid_argument);
}

TEST_CASE("combined loss: gradient is grad(L_D) + lambda * grad(L_LM)") {
  RngStream rng(7);
  std::vector<double> z(4 * 5);
  for (auto& x : z) x = rng.uniform_range(-1.0, 1.0);

  auto make_logits = [&]() { return Tensor<double>::from({1, 4, 5}, z, true); };
  auto batch = logits_batch(1, 4, {1, 2, 3, 0}, {1, 1, 1, 0});
  Batch mbatch;
  mbatch.size = 1;
  mbatch.ctx_len = 4;
  mbatch.mlm_labels = {2, -1, 4, -1};
  mbatch.mlm_label_count = 2;

  // combined gradient
  auto logits = make_logits();
  combined_loss(dialogue_loss(logits, batch), mlm_loss(logits, mbatch), 0.5).backward();
  auto combined_grad = logits.grad();

  // separate gradients
  auto l1 = make_logits();
  dialogue_loss(l1, batch).backward();
  auto l2 = make_logits();
  mlm_loss(l2, mbatch).backward();

  for (size_t i = 0; i < combined_grad.size(); ++i) {
    CHECK(combined_grad[i] == doctest::Approx(l1.grad()[i] + 0.5 * l2.grad()[i]).epsilon(1e-9));
  }
}

TEST_CASE("causal lm loss: next-character targets over real positions") {
  Batch batch;
  batch.size = 1;
  batch.ctx_len = 4;
  batch.ctx_ids = {6, 7, 8, 0};
  batch.ctx_mask = {1, 1, 1, 0};
  // logits that put all mass on the true next token at every position
  std::vector<double> z(4 * 10, 0.0);
  z[0 * 10 + 7] = 60.0;
  z[1 * 10 + 8] = 60.0;
  auto logits = Tensor<double>::from({1, 4, 10}, std::move(z));
  CHECK(causal_lm_loss(logits, batch).item() < 1e-12);

  // uniform logits: ln V over the two supervised transitions
  auto uniform = Tensor<double>::zeros({1, 4, 10});
  CHECK(causal_lm_loss(uniform, batch).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}
