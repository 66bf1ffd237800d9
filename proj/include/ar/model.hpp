#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ar/config.hpp"
#include "ar/dataset.hpp"
#include "ar/memory.hpp"
#include "ar/ops.hpp"
#include "ar/rng.hpp"
#include "ar/tensor.hpp"

namespace ar {

// Analytic parameter counts per component; must equal the instantiated
// count exactly for every toggle combination.
struct ParamCountBreakdown {
  int64_t embedding = 0;       // char table (+ E->H projection when factorized)
  int64_t layer_block = 0;     // one physical transformer layer copy
  int64_t physical_layers = 0;
  int64_t layer_total = 0;
  int64_t final_norm = 0;
  int64_t head = 0;
  int64_t persona_memory = 0;
  int64_t total = 0;
};

ParamCountBreakdown count_parameters(const ModelConfig& config);

// Per-layer routing capture for tests: raw value snapshots of the decoder
// routing terms and the stream before/after each layer.
template <typename T>
struct DecoderLayerTrace {
  std::vector<T> input, o_prev, o_c, o_t, o_merge, output;
};
template <typename T>
struct DecoderTrace {
  std::vector<DecoderLayerTrace<T>> layers;
};

template <typename T>
struct PersonaRepr {
  Tensor<T> seq;               // B x Lp x H (Lp = 1 on the memory path)
  std::vector<uint8_t> mask;   // empty = every position attendable
};

// The persona-aware encoder/decoder network: factorized embeddings with
// speaker persona summation, a weight-shared transformer stack, the
// three-way attention-routing decoder merge, ReZero-gated residuals,
// low-rank feed-forward, and the output head.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, RngStream init) : cfg_(std::move(config)) {
    cfg_.validate();
    build_parameters(init);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const { return params_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.numel();
    return n;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& [name, p] : params_) names.push_back(name);
    return names;
  }

  void zero_grads() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  Tensor<T>& param(const std::string& name) {
    for (auto& [n, p] : params_) {
      if (n == name) return p;
    }
    throw std::logic_error("model: no parameter named " + name);
  }

  // --- embedding -----------------------------------------------------------

  // char ids -> E -> H (identity skip when factorization is off) -> + fixed
  // sinusoidal position -> optionally + the H-sized persona embedding of the
  // speaker owning each position.
  Tensor<T> embed_tokens(const std::vector<int32_t>& ids, int64_t batch, int64_t len) const {
    auto e = embedding(char_embed_, ids, {batch, len});
    Tensor<T> x = cfg_.use_albert ? matmul(e, embed_proj_) : e;
    return add_broadcast_rows(x, positional(len));
  }

  Tensor<T> embed_context(const Batch& batch, const std::vector<int32_t>& ids) const {
    auto x = embed_tokens(ids, batch.size, batch.ctx_len);
    auto vecs = speaker_persona_vectors(batch);  // [B, S, H]
    auto per_pos = gather_axis1(vecs, batch.ctx_speaker, batch.ctx_len);
    return add(x, per_pos);
  }

  // One H-vector per local speaker: mean of the speaker's persona word
  // embeddings (bag of words over the first memory matrix), or of the
  // embedded persona characters when the memory module is off. Speakers
  // without profile words use the PAD row as a learned null-persona
  // embedding.
  Tensor<T> speaker_persona_vectors(const Batch& batch) const {
    const auto& source = cfg_.use_memn2n ? batch.speaker_words : batch.speaker_chars;
    int64_t s_max = 1;
    for (const auto& sw : source) {
      s_max = std::max(s_max, static_cast<int64_t>(sw.size()));
    }
    std::vector<std::vector<int32_t>> groups;
    groups.reserve(static_cast<size_t>(batch.size * s_max));
    for (const auto& sw : source) {
      for (int64_t s = 0; s < s_max; ++s) {
        if (s < static_cast<int64_t>(sw.size()) && !sw[static_cast<size_t>(s)].empty()) {
          auto ids = sw[static_cast<size_t>(s)];
          if (cfg_.use_memn2n) std::sort(ids.begin(), ids.end());  // bag sum in canonical order
          groups.push_back(std::move(ids));
        } else {
          groups.push_back({0});  // PAD row = null persona
        }
      }
    }
    if (cfg_.use_memn2n) {
      auto flat = group_mean_embedding(memory_.input_mats[0], groups);
      return reshape(flat, {batch.size, s_max, cfg_.hidden_size});
    }
    auto flat = group_mean_embedding(char_embed_, groups);  // [B*S, E or H]
    Tensor<T> projected = cfg_.use_albert ? matmul(flat, embed_proj_) : flat;
    return reshape(projected, {batch.size, s_max, cfg_.hidden_size});
  }

  // --- transformer stack ---------------------------------------------------

  // N applications of the (possibly single shared) layer with
  // self-attention only. `causal` selects the left-to-right LM mask;
  // otherwise `pad_mask` guards the keys.
  Tensor<T> encode(const Tensor<T>& x_in, const std::vector<uint8_t>& pad_mask, bool causal,
                   bool train, RngStream* drop) const {
    Tensor<T> x = x_in;
    for (int64_t n = 0; n < cfg_.layers; ++n) {
      const LayerRefs& l = layer(n);
      Tensor<T> h = cfg_.use_rezero ? layer_norm(x, l.norm1_g, l.norm1_b) : x;
      auto o = attend(h, h, l, SourceKind::kSelf, causal, causal ? nullptr : &pad_mask);
      x = residual(x, o, l.gate_attn, l.norm1_g, l.norm1_b, train, drop);
      x = ff_sublayer(x, l, train, drop);
    }
    return x;
  }

  Tensor<T> encode_context(const Batch& batch, const std::vector<int32_t>& ids, bool train,
                           RngStream* drop) const {
    return encode(embed_context(batch, ids), batch.ctx_mask, false, train, drop);
  }

  // --- persona representation ---------------------------------------------

  // Memory path: K-hop read queried by the masked mean of the context
  // encoding, exposed as a length-1 sequence. Ablation path: the
  // char-spliced persona sequence run through the shared encoder.
  PersonaRepr<T> persona_representation(const Batch& batch, const Tensor<T>& ctx_enc, bool train,
                                        RngStream* drop) const {
    PersonaRepr<T> out;
    if (cfg_.use_memn2n) {
      auto query = masked_mean_seq(ctx_enc, batch.ctx_mask);
      out.seq = memn2n_read(query, batch.target_items, memory_, cfg_.memory_hops);
      return out;
    }
    auto embedded = embed_tokens(batch.persona_ids, batch.size, batch.persona_len);
    out.seq = encode(embedded, batch.persona_mask, false, train, drop);
    out.mask = batch.persona_mask;
    return out;
  }

  // --- decoder -------------------------------------------------------------

  struct RoutingOutputs {
    Tensor<T> o_prev, o_c, o_t, o_merge;
  };

  RoutingOutputs attention_routing(const Tensor<T>& target_hidden, const Tensor<T>& ctx_enc,
                                   const PersonaRepr<T>& persona,
                                   const std::vector<uint8_t>& ctx_mask, int64_t layer_idx) const {
    const LayerRefs& l = layer(layer_idx);
    RoutingOutputs r;
    r.o_prev = attend(target_hidden, target_hidden, l, SourceKind::kSelf, true, nullptr);
    r.o_c = attend(target_hidden, ctx_enc, l, SourceKind::kContext, false, &ctx_mask);
    r.o_t = attend(target_hidden, persona.seq, l, SourceKind::kPersona, false,
                   persona.mask.empty() ? nullptr : &persona.mask);
    r.o_merge = routing_merge(r.o_t, r.o_c, r.o_prev, cfg_.routing_weight_a);
    return r;
  }

  // a*O_T + (1-a)*O_C + O_C + O_prev; at a = 1 this is bitwise
  // O_T + O_C + O_prev.
  static Tensor<T> routing_merge(const Tensor<T>& o_t, const Tensor<T>& o_c,
                                 const Tensor<T>& o_prev, double a) {
    return add(add(add(scale(o_t, a), scale(o_c, 1.0 - a)), o_c), o_prev);
  }

  // E_prev + b*O_T + b*O_C + dropout(O_merge) * r  (gated residual);
  // without the gate: post-norm LayerNorm(E_prev + dropout(O_merge)).
  Tensor<T> rezero_routing_residual(const Tensor<T>& e_prev, const RoutingOutputs& r,
                                    const Tensor<T>& gate, const Tensor<T>& norm_g,
                                    const Tensor<T>& norm_b, bool train, RngStream* drop) const {
    if (cfg_.use_rezero) {
      auto fixed = add(add(e_prev, scale(r.o_t, cfg_.fix_attention_b)),
                       scale(r.o_c, cfg_.fix_attention_b));
      return add(fixed, mul_scalar_tensor(apply_dropout(r.o_merge, train, drop), gate));
    }
    return layer_norm(add(e_prev, apply_dropout(r.o_merge, train, drop)), norm_g, norm_b);
  }

  Tensor<T> decode_logits(const Batch& batch, const Tensor<T>& ctx_enc, const PersonaRepr<T>& persona,
                          bool train, RngStream* drop, DecoderTrace<T>* trace = nullptr) const {
    Tensor<T> x = embed_tokens(batch.dec_input, batch.size, batch.tgt_len);
    for (int64_t n = 0; n < cfg_.layers; ++n) {
      const LayerRefs& l = layer(n);
      Tensor<T> h = cfg_.use_rezero ? layer_norm(x, l.norm1_g, l.norm1_b) : x;
      auto r = attention_routing(h, ctx_enc, persona, batch.ctx_mask, n);
      Tensor<T> next = rezero_routing_residual(x, r, l.gate_attn, l.norm1_g, l.norm1_b, train, drop);
      if (trace) {
        DecoderLayerTrace<T> t;
        t.input = x.values();
        t.o_prev = r.o_prev.values();
        t.o_c = r.o_c.values();
        t.o_t = r.o_t.values();
        t.o_merge = r.o_merge.values();
        t.output = next.values();
        trace->layers.push_back(std::move(t));
      }
      x = ff_sublayer(next, l, train, drop);
    }
    return head_logits(x);
  }

  // --- heads ---------------------------------------------------------------

  // final hidden -> (final pre-head norm when gated residuals are on) ->
  // output head.
  Tensor<T> head_logits(const Tensor<T>& hidden) const {
    Tensor<T> h = cfg_.use_rezero ? layer_norm(hidden, final_norm_g_, final_norm_b_) : hidden;
    if (cfg_.tie_head) return add_bias(matmul(h, transpose_last2(char_embed_)), head_b_);
    return linear(h, head_w_, head_b_);
  }

  // Encoder-side LM logits over the (corrupted) context; shares the head.
  Tensor<T> encoder_lm_logits(const Batch& batch, const std::vector<int32_t>& ids, bool train,
                              RngStream* drop) const {
    return head_logits(encode_context(batch, ids, train, drop));
  }

  // Left-to-right LM logits over the clean context (auxiliary-task ablation).
  Tensor<T> causal_lm_logits(const Batch& batch, bool train, RngStream* drop) const {
    auto x = embed_context(batch, batch.ctx_ids);
    return head_logits(encode(x, batch.ctx_mask, true, train, drop));
  }

 private:
  enum class SourceKind { kSelf, kContext, kPersona };

  struct LayerRefs {
    Tensor<T> wq, bq, wk_self, bk_self, wv_self, bv_self;
    Tensor<T> wk_ctx, bk_ctx, wv_ctx, bv_ctx, wk_per, bk_per, wv_per, bv_per;
    Tensor<T> wo, bo;
    Tensor<T> norm1_g, norm1_b, norm2_g, norm2_b;
    Tensor<T> gate_attn, gate_ff;
    Tensor<T> ff_w1, ff_b1, ff_w2, ff_b2, ff_w3, ff_b3, ff_w4, ff_b4;
  };

  const LayerRefs& layer(int64_t n) const {
    return layers_[cfg_.use_albert ? 0 : static_cast<size_t>(n)];
  }

  Tensor<T> apply_dropout(const Tensor<T>& x, bool train, RngStream* drop) const {
    if (!train || cfg_.dropout == 0.0) return x;
    if (!drop) throw std::logic_error("model: training forward needs a dropout stream");
    return dropout(x, cfg_.dropout, *drop, true);
  }

  Tensor<T> activation(const Tensor<T>& x) const {
    return cfg_.activation == "relu" ? relu(x) : gelu(x);
  }

  // One attention module per layer: shared queries and output projection,
  // separate key/value projections per source.
  Tensor<T> attend(const Tensor<T>& q_in, const Tensor<T>& kv_in, const LayerRefs& l,
                   SourceKind source, bool causal, const std::vector<uint8_t>* keypad) const {
    const Tensor<T>*wk, *bk, *wv, *bv;
    switch (source) {
      case SourceKind::kSelf: wk = &l.wk_self; bk = &l.bk_self; wv = &l.wv_self; bv = &l.bv_self; break;
      case SourceKind::kContext: wk = &l.wk_ctx; bk = &l.bk_ctx; wv = &l.wv_ctx; bv = &l.bv_ctx; break;
      default: wk = &l.wk_per; bk = &l.bk_per; wv = &l.wv_per; bv = &l.bv_per; break;
    }
    int64_t b = q_in.dim(0), lq = q_in.dim(1), lk = kv_in.dim(1);
    int64_t heads = cfg_.heads, dh = cfg_.hidden_size / heads;

    auto split = [&](const Tensor<T>& t, int64_t len) {
      return permute(reshape(t, {b, len, heads, dh}), {0, 2, 1, 3});  // [B,h,L,Dh]
    };
    auto q = split(linear(q_in, l.wq, l.bq), lq);
    auto k = split(linear(kv_in, *wk, *bk), lk);
    auto v = split(linear(kv_in, *wv, *bv), lk);

    auto scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) {
      scores = causal_mask_fill(scores);
    } else if (keypad) {
      scores = masked_fill_keypad(scores, *keypad);
    }
    auto ctx = matmul(softmax_lastdim(scores), v);  // [B,h,Lq,Dh]
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, lq, cfg_.hidden_size});
    return linear(merged, l.wo, l.bo);
  }

  // Sublayer residual without routing terms: E_prev + dropout(sub) * r, or
  // the post-norm rule when the gate is off.
  Tensor<T> residual(const Tensor<T>& e_prev, const Tensor<T>& sub, const Tensor<T>& gate,
                     const Tensor<T>& norm_g, const Tensor<T>& norm_b, bool train,
                     RngStream* drop) const {
    if (cfg_.use_rezero) return add(e_prev, mul_scalar_tensor(apply_dropout(sub, train, drop), gate));
    return layer_norm(add(e_prev, apply_dropout(sub, train, drop)), norm_g, norm_b);
  }

  Tensor<T> feed_forward(const Tensor<T>& x, const LayerRefs& l) const {
    if (cfg_.use_factor_ff) {
      auto up = linear(linear(x, l.ff_w1, l.ff_b1), l.ff_w2, l.ff_b2);
      return linear(linear(activation(up), l.ff_w3, l.ff_b3), l.ff_w4, l.ff_b4);
    }
    return linear(activation(linear(x, l.ff_w1, l.ff_b1)), l.ff_w2, l.ff_b2);
  }

  Tensor<T> ff_sublayer(const Tensor<T>& x, const LayerRefs& l, bool train, RngStream* drop) const {
    Tensor<T> h = cfg_.use_rezero ? layer_norm(x, l.norm2_g, l.norm2_b) : x;
    return residual(x, feed_forward(h, l), l.gate_ff, l.norm2_g, l.norm2_b, train, drop);
  }

  Tensor<T> positional(int64_t len) const {
    int64_t h = cfg_.hidden_size;
    std::vector<T> pe(static_cast<size_t>(len * h));
    for (int64_t pos = 0; pos < len; ++pos) {
      for (int64_t i = 0; i < h; i += 2) {
        double angle = static_cast<double>(pos) * std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                                           static_cast<double>(h));
        pe[static_cast<size_t>(pos * h + i)] = static_cast<T>(std::sin(angle));
        if (i + 1 < h) pe[static_cast<size_t>(pos * h + i + 1)] = static_cast<T>(std::cos(angle));
      }
    }
    return Tensor<T>::from({len, h}, std::move(pe));
  }

  // --- construction --------------------------------------------------------

  Tensor<T> register_param(const std::string& name, Shape shape, RngStream& init,
                           const char* kind) {
    int64_t n = shape_numel(shape);
    std::vector<T> v(static_cast<size_t>(n), T(0));
    if (std::string_view(kind) == "embedding") {
      for (auto& x : v) x = static_cast<T>(init.normal() * 0.02);
    } else if (std::string_view(kind) == "dense") {
      double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& x : v) x = static_cast<T>(init.uniform_range(-bound, bound));
    } else if (std::string_view(kind) == "ones") {
      for (auto& x : v) x = T(1);
    }  // "zeros": already zero (biases, gates)
    auto t = Tensor<T>::from(std::move(shape), std::move(v), true);
    params_.emplace_back(name, t);
    return t;
  }

  void build_parameters(RngStream& init) {
    int64_t v = cfg_.vocab_size, e = cfg_.embed_size, h = cfg_.hidden_size;
    int64_t f = cfg_.ff_size, r = cfg_.ff_rank, w = cfg_.word_vocab_size;

    char_embed_ = register_param("embed.char", {v, cfg_.use_albert ? e : h}, init, "embedding");
    if (cfg_.use_albert) embed_proj_ = register_param("embed.proj", {e, h}, init, "dense");

    int64_t physical = cfg_.use_albert ? 1 : cfg_.layers;
    for (int64_t i = 0; i < physical; ++i) {
      std::string prefix = cfg_.use_albert ? "layer.shared." : "layer." + std::to_string(i) + ".";
      LayerRefs l;
      auto dense = [&](const std::string& n, Shape s) { return register_param(prefix + n, std::move(s), init, "dense"); };
      auto zeros = [&](const std::string& n, Shape s) { return register_param(prefix + n, std::move(s), init, "zeros"); };
      auto ones = [&](const std::string& n, Shape s) { return register_param(prefix + n, std::move(s), init, "ones"); };
      l.wq = dense("attn.wq", {h, h});           l.bq = zeros("attn.bq", {h});
      l.wk_self = dense("attn.wk_self", {h, h}); l.bk_self = zeros("attn.bk_self", {h});
      l.wv_self = dense("attn.wv_self", {h, h}); l.bv_self = zeros("attn.bv_self", {h});
      l.wk_ctx = dense("attn.wk_ctx", {h, h});   l.bk_ctx = zeros("attn.bk_ctx", {h});
      l.wv_ctx = dense("attn.wv_ctx", {h, h});   l.bv_ctx = zeros("attn.bv_ctx", {h});
      l.wk_per = dense("attn.wk_per", {h, h});   l.bk_per = zeros("attn.bk_per", {h});
      l.wv_per = dense("attn.wv_per", {h, h});   l.bv_per = zeros("attn.bv_per", {h});
      l.wo = dense("attn.wo", {h, h});           l.bo = zeros("attn.bo", {h});
      l.norm1_g = ones("norm1.gamma", {h});      l.norm1_b = zeros("norm1.beta", {h});
      l.norm2_g = ones("norm2.gamma", {h});      l.norm2_b = zeros("norm2.beta", {h});
      if (cfg_.use_factor_ff) {
        l.ff_w1 = dense("ff.w1", {h, r}); l.ff_b1 = zeros("ff.b1", {r});
        l.ff_w2 = dense("ff.w2", {r, f}); l.ff_b2 = zeros("ff.b2", {f});
        l.ff_w3 = dense("ff.w3", {f, r}); l.ff_b3 = zeros("ff.b3", {r});
        l.ff_w4 = dense("ff.w4", {r, h}); l.ff_b4 = zeros("ff.b4", {h});
      } else {
        l.ff_w1 = dense("ff.w1", {h, f}); l.ff_b1 = zeros("ff.b1", {f});
        l.ff_w2 = dense("ff.w2", {f, h}); l.ff_b2 = zeros("ff.b2", {h});
      }
      if (cfg_.use_rezero) {
        l.gate_attn = zeros("gate.attn", {1});
        l.gate_ff = zeros("gate.ff", {1});
      }
      layers_.push_back(std::move(l));
    }

    if (cfg_.use_rezero) {
      final_norm_g_ = register_param("final_norm.gamma", {h}, init, "ones");
      final_norm_b_ = register_param("final_norm.beta", {h}, init, "zeros");
    }

    if (!cfg_.tie_head) head_w_ = register_param("head.w", {h, v}, init, "dense");
    head_b_ = register_param("head.b", {v}, init, "zeros");

    if (cfg_.use_memn2n) {
      int64_t k = cfg_.memory_hops;
      if (cfg_.memory_adjacent_share) {
        // physical matrices A^1, C^1..C^K; A^{k+1} aliases C^k
        auto a1 = register_param("memory.A1", {w, h}, init, "embedding");
        memory_.input_mats.push_back(a1);
        for (int64_t i = 1; i <= k; ++i) {
          auto c = register_param("memory.C" + std::to_string(i), {w, h}, init, "embedding");
          memory_.output_mats.push_back(c);
          if (i < k) memory_.input_mats.push_back(c);  // aliased node
        }
      } else {
        for (int64_t i = 1; i <= k; ++i) {
          memory_.input_mats.push_back(register_param("memory.A" + std::to_string(i), {w, h}, init, "embedding"));
        }
        for (int64_t i = 1; i <= k; ++i) {
          memory_.output_mats.push_back(register_param("memory.C" + std::to_string(i), {w, h}, init, "embedding"));
        }
      }
    }
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Tensor<T> char_embed_, embed_proj_;
  std::vector<LayerRefs> layers_;
  Tensor<T> final_norm_g_, final_norm_b_;
  Tensor<T> head_w_, head_b_;
  MemoryWeights<T> memory_;

 public:
  const MemoryWeights<T>& memory_weights() const { return memory_; }
};

}  // namespace ar
