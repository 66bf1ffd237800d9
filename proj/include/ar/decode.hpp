#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ar/model.hpp"
#include "ar/rng.hpp"
#include "ar/vocab.hpp"

namespace ar {

struct SamplerConfig {
  double temperature = 0.7;
  int64_t top_k = 0;  // 0 disables the cap
  double top_p = 0.9;
  int64_t max_chars = 15;
};

struct NucleusEntry {
  int32_t id;
  double prob;  // renormalized
};

// Keeps the smallest descending-probability prefix with cumulative mass
// >= top_p (always at least one token), optionally capped at top_k, and
// renormalizes. Ties break by ascending token id, so membership is
// deterministic.
inline std::vector<NucleusEntry> nucleus_filter(const std::vector<double>& probs, double top_p,
                                                int64_t top_k) {
  if (probs.empty()) throw std::invalid_argument("nucleus_filter: empty distribution");
  double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("nucleus_filter: probabilities sum to " + std::to_string(total));
  }
  std::vector<int32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)]) {
      return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
    }
    return a < b;
  });
  size_t keep = 0;
  double mass = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    mass += probs[static_cast<size_t>(order[i])];
    keep = i + 1;
    if (mass >= top_p) break;
  }
  if (top_k > 0) keep = std::min(keep, static_cast<size_t>(top_k));
  double kept_mass = 0.0;
  for (size_t i = 0; i < keep; ++i) kept_mass += probs[static_cast<size_t>(order[i])];
  std::vector<NucleusEntry> out;
  out.reserve(keep);
  for (size_t i = 0; i < keep; ++i) {
    out.push_back({order[i], probs[static_cast<size_t>(order[i])] / kept_mass});
  }
  return out;
}

// softmax(logits / temperature) restricted to non-banned ids, then the
// nucleus filter and one multinomial draw.
inline int32_t sample_next(const std::vector<double>& logits, const SamplerConfig& cfg,
                           RngStream& rng, const std::vector<int32_t>& banned = {}) {
  if (cfg.temperature <= 0.0) throw std::invalid_argument("sample_next: temperature must be positive");
  std::vector<double> z(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < logits.size(); ++i) {
    z[i] = logits[i] / cfg.temperature;
    bool is_banned = std::find(banned.begin(), banned.end(), static_cast<int32_t>(i)) != banned.end();
    if (is_banned) z[i] = -std::numeric_limits<double>::infinity();
    mx = std::max(mx, z[i]);
  }
  double sum = 0.0;
  std::vector<double> probs(z.size());
  for (size_t i = 0; i < z.size(); ++i) {
    probs[i] = std::exp(z[i] - mx);
    sum += probs[i];
  }
  for (auto& p : probs) p /= sum;

  auto kept = nucleus_filter(probs, cfg.top_p, cfg.top_k);
  double u = rng.uniform();
  double acc = 0.0;
  for (const auto& e : kept) {
    acc += e.prob;
    if (u < acc) return e.id;
  }
  return kept.back().id;
}

// Specials other than EOS can never be emitted.
inline std::vector<int32_t> banned_generation_ids() {
  return {specials::kPad, specials::kUnk, specials::kBos, specials::kSep, specials::kMask};
}

// Autoregressive sampling from BOS until EOS or the character cap; returns
// the decoded string without specials. Deterministic given the rng state.
template <typename T>
std::string generate_response(Model<T>& model, const Session& session, const CharVocab& chars,
                              const WordVocab& words, const SamplerConfig& cfg, RngStream& rng) {
  NoGradGuard no_grad;
  Session trimmed = truncate_session(session, model.config().limits);
  trimmed.response.clear();
  Batch base = collate_batch({trimmed}, chars, words, model.config().limits);

  auto ctx_enc = model.encode_context(base, base.ctx_ids, false, nullptr);
  auto persona = model.persona_representation(base, ctx_enc, false, nullptr);
  auto banned = banned_generation_ids();

  std::vector<int32_t> generated;
  for (int64_t step = 0; step < cfg.max_chars; ++step) {
    Batch b = base;
    b.tgt_len = static_cast<int64_t>(generated.size()) + 1;
    b.dec_input.assign(1, specials::kBos);
    b.dec_input.insert(b.dec_input.end(), generated.begin(), generated.end());
    b.dec_target.assign(static_cast<size_t>(b.tgt_len), specials::kPad);
    b.dec_mask.assign(static_cast<size_t>(b.tgt_len), 1);

    auto logits = model.decode_logits(b, ctx_enc, persona, false, nullptr);
    int64_t v = logits.dim(2);
    std::vector<double> last(static_cast<size_t>(v));
    for (int64_t c = 0; c < v; ++c) {
      last[static_cast<size_t>(c)] =
          static_cast<double>(logits.values()[static_cast<size_t>(((b.tgt_len - 1) * v) + c)]);
    }
    int32_t next = sample_next(last, cfg, rng, banned);
    if (next == specials::kEos) break;
    generated.push_back(next);
  }
  return chars.decode(generated);
}

}  // namespace ar
