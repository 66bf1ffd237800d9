#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ar/gradcheck.hpp"
#include "ar/model.hpp"
#include "ar/objectives.hpp"

using namespace ar;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 50;
  cfg.word_vocab_size = 30;
  cfg.embed_size = 8;
  cfg.hidden_size = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ff_size = 32;
  cfg.ff_rank = 4;
  cfg.dropout = 0.0;
  cfg.memory_hops = 3;
  return cfg;
}

std::vector<Session> tiny_sessions() {
  Session a;
  a.turns = {Turn{"A", "hello"}, Turn{"B", "hi you"}};
  a.profiles["A"] = PersonaProfile{"male", "beijing", {"movies"}};
  a.profiles["B"] = PersonaProfile{"female", "shanghai", {"music", "travel"}};
  a.responder = "B";
  a.response = "fine ok";  // 7 chars -> Lt = 8 with EOS

  Session b;
  b.turns = {Turn{"C", "what now"}, Turn{"D", "go home"}, Turn{"C", "why"}};
  b.profiles["C"] = PersonaProfile{"male", "chengdu", {}};
  b.profiles["D"] = PersonaProfile{"", "", {}};
  b.responder = "C";
  b.response = "because";
  return {a, b};
}

struct World {
  CharVocab chars;
  WordVocab words;
  Batch batch;
};

World tiny_world() {
  World w;
  std::vector<std::string> texts;
  for (const auto& s : tiny_sessions()) {
    for (const auto& t : s.turns) texts.push_back(t.text);
    texts.push_back(s.response);
    for (const auto& [sp, p] : s.profiles) {
      for (const auto& item : render_persona_items(p)) texts.push_back(item);
    }
  }
  w.chars = CharVocab::build(texts, 50);
  w.words = WordVocab::build(texts, 30);
  w.batch = collate_batch(tiny_sessions(), w.chars, w.words);
  return w;
}

template <typename T>
Model<T> make_model(const ModelConfig& cfg, uint64_t seed = 7) {
  return Model<T>(cfg, Rng(seed).stream("init"));
}

}  // namespace

TEST_CASE("embedding: zero persona tables reduce to char+position embedding") {
  auto w = tiny_world();
  auto cfg = tiny_config();
  auto model = make_model<double>(cfg);
  // zero the persona word table; speaker vectors become exactly zero
  auto& a1 = model.param("memory.A1");
  std::fill(a1.values().begin(), a1.values().end(), 0.0);

  auto with_persona = model.embed_context(w.batch, w.batch.ctx_ids);
  auto plain = model.embed_tokens(w.batch.ctx_ids, w.batch.size, w.batch.ctx_len);
  REQUIRE(with_persona.numel() == plain.numel());
  for (int64_t i = 0; i < plain.numel(); ++i) {
    CHECK(with_persona.values()[static_cast<size_t>(i)] ==
          doctest::Approx(plain.values()[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("embedding: same char and position, different speakers differ by persona vectors") {
  auto w = tiny_world();
  auto model = make_model<double>(tiny_config());

  Batch b = w.batch;
  // two batch rows with identical chars but swapped speaker ownership at position 0
  b.ctx_speaker[0] = 0;
  b.ctx_speaker[static_cast<size_t>(b.ctx_len)] = 1;
  b.ctx_ids[static_cast<size_t>(b.ctx_len)] = b.ctx_ids[0];
  b.speaker_words[1] = b.speaker_words[0];
  b.speaker_chars[1] = b.speaker_chars[0];

  auto embedded = model.embed_context(b, b.ctx_ids);
  auto vecs = model.speaker_persona_vectors(b);
  int64_t h = tiny_config().hidden_size;
  for (int64_t c = 0; c < h; ++c) {
    double lhs = embedded.values()[static_cast<size_t>(c)] -
                 embedded.values()[static_cast<size_t>(b.ctx_len * h + c)];
    double rhs = vecs.values()[static_cast<size_t>(c)] - vecs.values()[static_cast<size_t>(1 * h + c)];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
  }
}

TEST_CASE("factorized embedding cuts the table exactly as computed") {
  ModelConfig cfg;  // defaults: V=9489, E=200, H=512
  auto factored = count_parameters(cfg);
  CHECK(factored.embedding == 2000200);
  cfg.use_albert = false;
  CHECK(count_parameters(cfg).embedding == 4858368);
}

TEST_CASE("encoder: pad positions never leak into real positions") {
  auto w = tiny_world();
  auto model = make_model<double>(tiny_config());
  auto out1 = model.encode_context(w.batch, w.batch.ctx_ids, false, nullptr);

  // poison every pad id; ctx row 0 is shorter than row 1
  Batch poisoned = w.batch;
  for (size_t i = 0; i < poisoned.ctx_ids.size(); ++i) {
    if (!poisoned.ctx_mask[i]) poisoned.ctx_ids[i] = 49;
  }
  auto out2 = model.encode_context(poisoned, poisoned.ctx_ids, false, nullptr);
  int64_t h = tiny_config().hidden_size;
  for (int64_t j = 0; j < w.batch.ctx_len; ++j) {
    if (!w.batch.ctx_mask[static_cast<size_t>(j)]) continue;
    for (int64_t c = 0; c < h; ++c) {
      CHECK(out1.values()[static_cast<size_t>(j * h + c)] == out2.values()[static_cast<size_t>(j * h + c)]);
    }
  }
}

TEST_CASE("layer sharing: single physical copy independent of depth") {
  auto cfg = tiny_config();
  auto m2 = make_model<float>(cfg);
  cfg.layers = 6;
  auto m6 = make_model<float>(cfg);
  CHECK(m2.parameter_count() == m6.parameter_count());
  bool has_shared = false, has_indexed = false;
  for (const auto& n : m6.parameter_names()) {
    has_shared = has_shared || n.rfind("layer.shared.", 0) == 0;
    has_indexed = has_indexed || n.rfind("layer.0.", 0) == 0;
  }
  CHECK(has_shared);
  CHECK(!has_indexed);

  cfg.use_albert = false;
  auto unshared2 = [&] {
    auto c = cfg;
    c.layers = 2;
    return make_model<float>(c).parameter_count();
  }();
  auto unshared6 = make_model<float>(cfg).parameter_count();
  auto block = count_parameters(cfg).layer_block;
  CHECK(unshared6 - unshared2 == 4 * block);
}

TEST_CASE("rezero: zero gates make the whole encoder the identity") {
  auto w = tiny_world();
  auto model = make_model<double>(tiny_config());
  auto x = model.embed_context(w.batch, w.batch.ctx_ids);
  auto y = model.encode(x, w.batch.ctx_mask, false, false, nullptr);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(y.values()[static_cast<size_t>(i)] - x.values()[static_cast<size_t>(i)]) <= 1e-12);
  }
}

TEST_CASE("routing merge algebra") {
  RngStream rng(3);
  auto rand3 = [&](Shape s) {
    std::vector<double> v(static_cast<size_t>(shape_numel(s)));
    for (auto& x : v) x = rng.uniform_range(-2.0, 2.0);
    return Tensor<double>::from(s, std::move(v));
  };
  for (int trial = 0; trial < 50; ++trial) {
    auto o_t = rand3({2, 3, 4}), o_c = rand3({2, 3, 4}), o_prev = rand3({2, 3, 4});

    auto merged1 = Model<double>::routing_merge(o_t, o_c, o_prev, 1.0);
    auto eq2 = add(add(o_t, o_c), o_prev);
    for (int64_t i = 0; i < merged1.numel(); ++i) {
      CHECK(merged1.values()[static_cast<size_t>(i)] == eq2.values()[static_cast<size_t>(i)]);
    }

    auto merged0 = Model<double>::routing_merge(o_t, o_c, o_prev, 0.0);
    auto twice = add(scale(o_c, 2.0), o_prev);
    for (int64_t i = 0; i < merged0.numel(); ++i) {
      CHECK(merged0.values()[static_cast<size_t>(i)] == twice.values()[static_cast<size_t>(i)]);
    }
  }
}

TEST_CASE("routing: zero persona representation with zero value bias kills O_T") {
  auto w = tiny_world();
  auto model = make_model<double>(tiny_config());
  auto ctx_enc = model.encode_context(w.batch, w.batch.ctx_ids, false, nullptr);
  auto hidden = model.embed_tokens(w.batch.dec_input, w.batch.size, w.batch.tgt_len);

  PersonaRepr<double> persona;
  persona.seq = Tensor<double>::zeros({w.batch.size, 1, 16});
  auto r = model.attention_routing(hidden, ctx_enc, persona, w.batch.ctx_mask, 0);
  for (double v : r.o_t.values()) CHECK(v == 0.0);

  // a defaults to 1: merge must equal O_C + O_prev bitwise
  auto expect = add(r.o_c, r.o_prev);
  for (int64_t i = 0; i < expect.numel(); ++i) {
    CHECK(r.o_merge.values()[static_cast<size_t>(i)] == expect.values()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("rezero residual: direct arithmetic cases") {
  auto cfg = tiny_config();
  auto model = make_model<double>(cfg);

  // scalar toy: E=1, O_T=2, O_C=3, O_merge=6, b=0.1, r=0.5 -> 4.5
  typename Model<double>::RoutingOutputs r;
  auto one = [](double v) { return Tensor<double>::from({1, 1, 1}, {v}); };
  r.o_t = one(2.0);
  r.o_c = one(3.0);
  r.o_prev = one(0.0);
  r.o_merge = one(6.0);
  auto gate = Tensor<double>::from({1}, {0.5});
  auto g1 = Tensor<double>::from({1}, {1.0});
  auto b0 = Tensor<double>::from({1}, {0.0});
  auto out = model.rezero_routing_residual(one(1.0), r, gate, g1, b0, false, nullptr);
  CHECK(out.values()[0] == doctest::Approx(4.5).epsilon(1e-15));

  // r = 0: E_prev + b*(O_T + O_C)
  auto zero_gate = Tensor<double>::from({1}, {0.0});
  auto out0 = model.rezero_routing_residual(one(1.0), r, zero_gate, g1, b0, false, nullptr);
  CHECK(out0.values()[0] == doctest::Approx(1.0 + 0.1 * 2.0 + 0.1 * 3.0).epsilon(1e-15));

  // r = 0 and b = 0: exact identity
  auto cfg_b0 = cfg;
  cfg_b0.fix_attention_b = 0.0;
  auto model_b0 = make_model<double>(cfg_b0);
  auto id = model_b0.rezero_routing_residual(one(1.0), r, zero_gate, g1, b0, false, nullptr);
  CHECK(id.values()[0] == 1.0);
}

TEST_CASE("factored feed-forward: parameter arithmetic at paper scale") {
  ModelConfig cfg;  // H=512, F=2048, R=128
  auto factored = count_parameters(cfg);
  cfg.use_factor_ff = false;
  auto plain = count_parameters(cfg);
  // weight matrices only: 2(HR + RF) vs 2HF
  int64_t factored_w = 2 * (512 * 128 + 128 * 2048);
  int64_t plain_w = 2 * 512 * 2048;
  CHECK(factored_w == 655360);
  CHECK(plain_w == 2097152);
  // the block delta equals the weight delta plus the extra rank biases
  CHECK(plain.layer_block - factored.layer_block == (plain_w + 2048 + 512) - (factored_w + 128 + 2048 + 128 + 512));
}

TEST_CASE("decoder: logits shape contract and causality") {
  auto w = tiny_world();
  auto cfg = tiny_config();
  auto model = make_model<double>(cfg);
  REQUIRE(w.batch.tgt_len == 8);

  auto ctx_enc = model.encode_context(w.batch, w.batch.ctx_ids, false, nullptr);
  auto persona = model.persona_representation(w.batch, ctx_enc, false, nullptr);
  auto logits = model.decode_logits(w.batch, ctx_enc, persona, false, nullptr);
  CHECK(logits.shape() == Shape{2, 8, 50});

  RngStream rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t t = rng.uniform_int(w.batch.tgt_len - 1);
    Batch perturbed = w.batch;
    for (int64_t j = t + 1; j < perturbed.tgt_len; ++j) {
      for (int64_t i = 0; i < perturbed.size; ++i) {
        perturbed.dec_input[static_cast<size_t>(i * perturbed.tgt_len + j)] =
            static_cast<int32_t>(6 + rng.uniform_int(40));
      }
    }
    auto logits2 = model.decode_logits(perturbed, ctx_enc, persona, false, nullptr);
    for (int64_t i = 0; i < w.batch.size; ++i) {
      for (int64_t j = 0; j <= t; ++j) {
        for (int64_t c = 0; c < 50; ++c) {
          size_t at = static_cast<size_t>((i * 8 + j) * 50 + c);
          REQUIRE(logits.values()[at] == logits2.values()[at]);
        }
      }
    }
  }
}

TEST_CASE("analytic parameter counts reproduce the reference table") {
  ModelConfig cfg;  // paper defaults, all improvements on
  auto base = count_parameters(cfg);
  CHECK(base.persona_memory == 20488192);  // (K+1) * W * H
  CHECK(std::abs(static_cast<double>(base.total) - 31e6) / 31e6 < 0.15);

  auto no_albert = cfg;
  no_albert.use_albert = false;
  CHECK(std::abs(static_cast<double>(count_parameters(no_albert).total) - 45e6) / 45e6 < 0.15);

  auto no_ff = cfg;
  no_ff.use_factor_ff = false;
  CHECK(std::abs(static_cast<double>(count_parameters(no_ff).total) - 33e6) / 33e6 < 0.15);

  auto no_mem = cfg;
  no_mem.use_memn2n = false;
  CHECK(std::abs(static_cast<double>(count_parameters(no_mem).total) - 9e6) / 9e6 < 0.20);

  // ablation directions
  CHECK(count_parameters(no_albert).total > base.total);
  CHECK(count_parameters(no_mem).total < base.total);
}

TEST_CASE("analytic count equals instantiated count for every toggle combination (tiny)") {
  for (int bits = 0; bits < 32; ++bits) {
    auto cfg = tiny_config();
    cfg.use_rezero = bits & 1;
    cfg.use_albert = bits & 2;
    cfg.use_factor_ff = bits & 4;
    cfg.use_memn2n = bits & 8;
    cfg.use_bart_mlm = bits & 16;
    auto model = make_model<float>(cfg);
    CAPTURE(bits);
    CHECK(count_parameters(cfg).total == model.parameter_count());
  }
  // memory without adjacent sharing: 2K physical matrices
  auto cfg = tiny_config();
  cfg.memory_adjacent_share = false;
  CHECK(count_parameters(cfg).persona_memory == 2 * 3 * 30 * 16);
  CHECK(count_parameters(cfg).total == make_model<float>(cfg).parameter_count());
}

TEST_CASE("full model gradient fidelity on the tiny config") {
  auto w = tiny_world();
  auto cfg = tiny_config();
  auto model = make_model<double>(cfg);
  auto rng = Rng(13).stream("mlm", 0);
  apply_mlm_corruption(w.batch, 0.3, w.chars, rng);

  auto f = [&]() { return model_loss(model, w.batch, 0.5, false, nullptr).total; };
  auto report = finite_difference_check<double>(f, model.parameters(), 1e-5, 1e-4, 4);
  INFO("worst ", report.worst.param, "[", report.worst.index, "] ad=", report.worst.autodiff,
       " fd=", report.worst.numeric, " rel=", report.max_rel_err);
  CHECK(report.ok());
}
