#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ar/rng.hpp"
#include "ar/vocab.hpp"

namespace ar {

struct Turn {
  std::string speaker;
  std::string text;
  bool operator==(const Turn&) const = default;
};

// One multi-turn dialogue with persona profiles and a target response.
struct Session {
  std::vector<Turn> turns;                          // context utterances, oldest first
  std::map<std::string, PersonaProfile> profiles;   // speaker -> profile
  std::string responder;
  std::string response;
  bool operator==(const Session&) const = default;
};

struct DatasetLimits {
  int64_t max_turn_chars = 15;
  int64_t max_context_turns = 3;  // exchanges; utterance cap is 2*turns+1
  int64_t max_response_chars = 15;

  int64_t max_context_utterances() const { return 2 * max_context_turns + 1; }
  int64_t max_context_content_chars() const { return max_turn_chars * max_context_utterances(); }
  // SEP tokens between utterances sit on top of the content budget.
  int64_t max_context_ids() const { return max_context_content_chars() + max_context_utterances() - 1; }
};

// Line-delimited session records; malformed lines are reported with their
// line number.
std::vector<Session> load_sessions(const std::string& path);
void save_sessions(const std::string& path, const std::vector<Session>& sessions);

// Exact duplicates removed (full record: turns, profiles, responder,
// response); first occurrence kept, order stable.
std::vector<Session> dedup_sessions(const std::vector<Session>& sessions);

struct SplitSizes {
  int64_t train = 0;
  int64_t valid = 0;
  int64_t test = 0;
  int64_t total() const { return train + valid + test; }
};

void check_split_sizes(int64_t available, const SplitSizes& sizes);

struct Splits {
  std::vector<Session> train, valid, test;
};

// Disjoint random subsets of exactly the requested sizes, deterministic
// under the seed.
Splits sample_splits(const std::vector<Session>& sessions, const SplitSizes& sizes, uint64_t seed);

// Keeps the most recent utterances (up to 2*turns+1), cuts every utterance
// and the response to their first max chars. Idempotent.
Session truncate_session(const Session& session, const DatasetLimits& limits = {});

struct Batch {
  int64_t size = 0;      // B
  int64_t ctx_len = 0;   // Lc, padded
  int64_t tgt_len = 0;   // Lt, padded
  int64_t persona_len = 0;  // Lp, padded (char-spliced persona path)

  std::vector<int32_t> ctx_ids;      // B*Lc
  std::vector<uint8_t> ctx_mask;     // 1 = real token
  std::vector<int32_t> ctx_speaker;  // local speaker index per position, 0 for pads

  // Per batch element: flattened persona words per local speaker (for the
  // speaker persona-embedding sum) and the target speaker's items (for the
  // memory module). Word ids as produced by encode_persona_words;
  // speaker_chars carries the same profile text as character ids for the
  // memory-free path.
  std::vector<std::vector<std::vector<int32_t>>> speaker_words;  // [B][speaker][words]
  std::vector<std::vector<std::vector<int32_t>>> speaker_chars;  // [B][speaker][chars]
  std::vector<std::vector<std::vector<int32_t>>> target_items;   // [B][item][words]
  std::vector<int32_t> responder_index;                          // [B] local speaker index

  // Char-spliced target persona (encoder-encoded persona ablation path).
  std::vector<int32_t> persona_ids;   // B*Lp
  std::vector<uint8_t> persona_mask;  // 1 = real token

  std::vector<int32_t> dec_input;   // B*Lt, BOS ++ response
  std::vector<int32_t> dec_target;  // B*Lt, response ++ EOS
  std::vector<uint8_t> dec_mask;    // 1 = supervised position

  // Masked-LM corruption of the encoder input; labels hold original ids at
  // sampled positions and -1 elsewhere.
  std::vector<int32_t> mlm_ids;
  std::vector<int32_t> mlm_labels;
  int64_t mlm_label_count = 0;
};

Batch collate_batch(const std::vector<Session>& sessions, const CharVocab& chars,
                    const WordVocab& words, const DatasetLimits& limits = {});

// BERT-style single-token corruption: each non-special encoder position is
// sampled with probability rate; sampled positions become MASK (80%), a
// random in-vocab character (10%) or stay (10%). Labels record the original
// ids at exactly the sampled positions.
void apply_mlm_corruption(Batch& batch, double rate, const CharVocab& chars, RngStream& rng);

}  // namespace ar
