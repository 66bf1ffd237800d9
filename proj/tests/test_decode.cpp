#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "ar/decode.hpp"

using namespace ar;

TEST_CASE("nucleus filter: reference case keeps three tokens renormalized") {
  auto kept = nucleus_filter({0.5, 0.3, 0.15, 0.05}, 0.9, 0);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].id == 0);
  CHECK(kept[1].id == 1);
  CHECK(kept[2].id == 2);
  CHECK(std::abs(kept[0].prob - 10.0 / 19.0) < 1e-9);
  CHECK(std::abs(kept[1].prob - 6.0 / 19.0) < 1e-9);
  CHECK(std::abs(kept[2].prob - 3.0 / 19.0) < 1e-9);
}

TEST_CASE("nucleus filter: p=1 keeps everything, p->0 keeps the argmax") {
  auto all = nucleus_filter({0.4, 0.3, 0.2, 0.1}, 1.0, 0);
  CHECK(all.size() == 4);
  for (size_t i = 0; i < 4; ++i) CHECK(std::abs(all[i].prob - std::vector<double>{0.4, 0.3, 0.2, 0.1}[i]) < 1e-12);

  auto one = nucleus_filter({0.4, 0.3, 0.2, 0.1}, 1e-12, 0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].id == 0);
  CHECK(one[0].prob == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("nucleus filter: top_k caps the prefix; ties break by id") {
  auto capped = nucleus_filter({0.4, 0.3, 0.2, 0.1}, 1.0, 2);
  REQUIRE(capped.size() == 2);
  CHECK(capped[0].id == 0);
  CHECK(capped[1].id == 1);

  auto tied = nucleus_filter({0.25, 0.25, 0.25, 0.25}, 0.5, 0);
  REQUIRE(tied.size() == 2);
  CHECK(tied[0].id == 0);
  CHECK(tied[1].id == 1);
}

TEST_CASE("nucleus filter: support is a prefix and mass renormalizes to 1") {
  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> probs(8);
    double sum = 0.0;
    for (auto& p : probs) {
      p = rng.uniform() + 1e-3;
      sum += p;
    }
    for (auto& p : probs) p /= sum;
    double top_p = rng.uniform_range(0.1, 1.0);
    auto kept = nucleus_filter(probs, top_p, 0);

    double mass = 0.0;
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& e : kept) {
      mass += e.prob;
      CHECK(probs[static_cast<size_t>(e.id)] <= prev + 1e-15);
      prev = probs[static_cast<size_t>(e.id)];
    }
    CHECK(std::abs(mass - 1.0) < 1e-9);

    // monotonicity: a larger top_p never shrinks the nucleus
    auto bigger = nucleus_filter(probs, std::min(1.0, top_p + 0.2), 0);
    CHECK(bigger.size() >= kept.size());
  }
}

TEST_CASE("sample_next: temperature -> 0 acts like argmax") {
  std::vector<double> logits{0.1, 2.0, -1.0, 0.5};
  SamplerConfig cfg;
  cfg.temperature = 1e-6;
  cfg.top_p = 0.9;
  RngStream rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_next(logits, cfg, rng) == 1);
}

TEST_CASE("sample_next: empirical frequencies match the filtered distribution") {
  std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
  std::vector<double> logits(4);
  for (int i = 0; i < 4; ++i) logits[static_cast<size_t>(i)] = std::log(probs[static_cast<size_t>(i)]);
  SamplerConfig cfg;
  cfg.temperature = 1.0;
  cfg.top_p = 0.9;

  auto expected = nucleus_filter(probs, 0.9, 0);
  std::map<int32_t, double> expect;
  for (const auto& e : expected) expect[e.id] = e.prob;

  RngStream rng(42);
  std::map<int32_t, int64_t> counts;
  const int64_t n = 10000;
  for (int64_t i = 0; i < n; ++i) ++counts[sample_next(logits, cfg, rng)];

  double tv = 0.0;
  for (const auto& [id, p] : expect) {
    tv += 0.5 * std::abs(p - static_cast<double>(counts[id]) / static_cast<double>(n));
  }
  CHECK(tv <= 0.02);
  for (const auto& [id, c] : counts) CHECK(expect.count(id) == 1);  // support restriction
}

TEST_CASE("sample_next: banned ids never emitted") {
  std::vector<double> logits{5.0, 4.0, 3.0, 2.0};
  SamplerConfig cfg;
  cfg.top_p = 1.0;
  RngStream rng(7);
  for (int i = 0; i < 200; ++i) {
    int32_t id = sample_next(logits, cfg, rng, {0, 2});
    CHECK(id != 0);
    CHECK(id != 2);
  }
}

namespace {

struct GenWorld {
  CharVocab chars;
  WordVocab words;
  Session session;
};

GenWorld gen_world() {
  GenWorld w;
  w.session.turns = {Turn{"A", "abba"}, Turn{"B", "baab"}};
  w.session.profiles["A"] = PersonaProfile{"male", "x", {"y"}};
  w.session.profiles["B"] = PersonaProfile{"female", "z", {}};
  w.session.responder = "B";
  w.session.response = "ab";
  w.chars = CharVocab::build({"abbaab x y z male female gender address interests"}, 40);
  w.words = WordVocab::build({"gender male female address x z interests y"}, 30);
  return w;
}

ModelConfig gen_config(int64_t vocab, int64_t words) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.word_vocab_size = words;
  cfg.embed_size = 8;
  cfg.hidden_size = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ff_size = 24;
  cfg.ff_rank = 4;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("generate: forced EOS gives an empty string") {
  auto w = gen_world();
  auto cfg = gen_config(w.chars.size(), w.words.size());
  Model<float> model(cfg, Rng(3).stream("init"));
  // a huge EOS bias dominates every step
  auto& hb = model.param("head.b");
  hb.values()[static_cast<size_t>(specials::kEos)] = 1e4f;

  auto rng = Rng(5).stream("sampling", 0);
  CHECK(generate_response(model, w.session, w.chars, w.words, SamplerConfig{}, rng).empty());
}

TEST_CASE("generate: never-EOS model emits exactly 15 characters") {
  auto w = gen_world();
  auto cfg = gen_config(w.chars.size(), w.words.size());
  Model<float> model(cfg, Rng(3).stream("init"));
  auto& hb = model.param("head.b");
  hb.values()[static_cast<size_t>(specials::kEos)] = -1e4f;

  auto rng = Rng(5).stream("sampling", 0);
  auto text = generate_response(model, w.session, w.chars, w.words, SamplerConfig{}, rng);
  CHECK(utf8_length(text) == 15);
}

TEST_CASE("generate: deterministic under a fixed sampling stream") {
  auto w = gen_world();
  auto cfg = gen_config(w.chars.size(), w.words.size());
  Model<float> model(cfg, Rng(3).stream("init"));

  auto r1 = Rng(9).stream("sampling", 0);
  auto r2 = Rng(9).stream("sampling", 0);
  auto a = generate_response(model, w.session, w.chars, w.words, SamplerConfig{}, r1);
  auto b = generate_response(model, w.session, w.chars, w.words, SamplerConfig{}, r2);
  CHECK(a == b);
}
