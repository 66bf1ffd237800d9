#include "ar/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include <json.hpp>

#include "ar/errors.hpp"

namespace ar {

namespace {

using nlohmann::json;

json profile_to_json(const PersonaProfile& p) {
  return json{{"gender", p.gender}, {"address", p.address}, {"interests", p.interests}};
}

json session_to_json(const Session& s) {
  json turns = json::array();
  for (const auto& t : s.turns) turns.push_back(json{{"speaker", t.speaker}, {"text", t.text}});
  json profiles = json::object();
  for (const auto& [speaker, p] : s.profiles) profiles[speaker] = profile_to_json(p);
  return json{{"turns", turns}, {"profiles", profiles}, {"responder", s.responder},
              {"response", s.response}};
}

PersonaProfile profile_from_json(const json& j) {
  PersonaProfile p;
  p.gender = j.value("gender", "");
  p.address = j.value("address", "");
  if (j.contains("interests")) {
    for (const auto& v : j.at("interests")) p.interests.push_back(v.get<std::string>());
  }
  return p;
}

Session session_from_json(const json& j, int64_t line_no) {
  auto fail = [line_no](const std::string& what) -> DataError {
    return DataError("session file line " + std::to_string(line_no) + ": " + what);
  };
  if (!j.is_object()) throw fail("record is not an object");
  if (!j.contains("turns") || !j.at("turns").is_array() || j.at("turns").empty()) {
    throw fail("missing or empty \"turns\"");
  }
  if (!j.contains("responder")) throw fail("missing \"responder\"");
  if (!j.contains("response")) throw fail("missing \"response\"");
  if (!j.contains("profiles") || !j.at("profiles").is_object()) throw fail("missing \"profiles\"");

  Session s;
  for (const auto& t : j.at("turns")) {
    if (!t.contains("speaker") || !t.contains("text")) throw fail("turn missing speaker/text");
    s.turns.push_back(Turn{t.at("speaker").get<std::string>(), t.at("text").get<std::string>()});
  }
  for (auto it = j.at("profiles").begin(); it != j.at("profiles").end(); ++it) {
    s.profiles[it.key()] = profile_from_json(it.value());
  }
  s.responder = j.at("responder").get<std::string>();
  s.response = j.at("response").get<std::string>();
  if (s.profiles.find(s.responder) == s.profiles.end()) {
    throw fail("responder \"" + s.responder + "\" has no profile");
  }
  return s;
}

}  // namespace

std::vector<Session> load_sessions(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read session file: " + path);
  std::vector<Session> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("session file line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(session_from_json(j, line_no));
  }
  if (out.empty()) {
    std::cerr << "warning: session file " << path << " contains no records\n";
  }
  return out;
}

void save_sessions(const std::string& path, const std::vector<Session>& sessions) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write session file: " + path);
  for (const auto& s : sessions) f << session_to_json(s).dump() << "\n";
}

std::vector<Session> dedup_sessions(const std::vector<Session>& sessions) {
  std::vector<Session> out;
  std::unordered_set<std::string> seen;
  for (const auto& s : sessions) {
    if (seen.insert(session_to_json(s).dump()).second) out.push_back(s);
  }
  return out;
}

void check_split_sizes(int64_t available, const SplitSizes& sizes) {
  if (sizes.train < 0 || sizes.valid < 0 || sizes.test < 0) {
    throw DataError("split sizes must be non-negative");
  }
  if (sizes.total() > available) {
    throw DataError("split sizes " + std::to_string(sizes.total()) + " exceed available sessions " +
                    std::to_string(available));
  }
}

Splits sample_splits(const std::vector<Session>& sessions, const SplitSizes& sizes, uint64_t seed) {
  check_split_sizes(static_cast<int64_t>(sessions.size()), sizes);
  std::vector<int64_t> idx(sessions.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  auto stream = Rng(seed).stream("split");
  shuffle(idx, stream);
  Splits out;
  int64_t at = 0;
  auto take = [&](int64_t n) {
    std::vector<Session> part;
    part.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) part.push_back(sessions[static_cast<size_t>(idx[static_cast<size_t>(at++)])]);
    return part;
  };
  out.train = take(sizes.train);
  out.valid = take(sizes.valid);
  out.test = take(sizes.test);
  return out;
}

Session truncate_session(const Session& session, const DatasetLimits& limits) {
  Session out = session;
  int64_t max_utt = limits.max_context_utterances();
  if (static_cast<int64_t>(out.turns.size()) > max_utt) {
    out.turns.erase(out.turns.begin(), out.turns.end() - max_utt);
  }
  for (auto& t : out.turns) t.text = utf8_truncate(t.text, limits.max_turn_chars);
  out.response = utf8_truncate(out.response, limits.max_response_chars);
  return out;
}

Batch collate_batch(const std::vector<Session>& sessions, const CharVocab& chars,
                    const WordVocab& words, const DatasetLimits& limits) {
  if (sessions.empty()) throw DataError("collate_batch: empty session list");
  Batch b;
  b.size = static_cast<int64_t>(sessions.size());

  struct Encoded {
    std::vector<int32_t> ctx;
    std::vector<int32_t> speaker_of_pos;
    std::vector<int32_t> persona;
    std::vector<int32_t> dec_in, dec_tgt;
  };
  std::vector<Encoded> enc(sessions.size());

  for (size_t si = 0; si < sessions.size(); ++si) {
    const Session& s = sessions[si];
    Encoded& e = enc[si];

    // local speaker indices in order of first appearance; responder included
    std::vector<std::string> speakers;
    auto speaker_index = [&](const std::string& name) -> int32_t {
      for (size_t i = 0; i < speakers.size(); ++i) {
        if (speakers[i] == name) return static_cast<int32_t>(i);
      }
      speakers.push_back(name);
      return static_cast<int32_t>(speakers.size() - 1);
    };

    for (size_t ti = 0; ti < s.turns.size(); ++ti) {
      int32_t sp = speaker_index(s.turns[ti].speaker);
      if (ti) {
        e.ctx.push_back(specials::kSep);
        // separators belong to the preceding utterance's speaker
        e.speaker_of_pos.push_back(e.speaker_of_pos.back());
      }
      for (int32_t id : chars.encode_text(s.turns[ti].text)) {
        e.ctx.push_back(id);
        e.speaker_of_pos.push_back(sp);
      }
    }
    if (e.ctx.empty()) throw DataError("collate_batch: session " + std::to_string(si) + " has empty context");
    if (static_cast<int64_t>(e.ctx.size()) > limits.max_context_ids()) {
      throw DataError("collate_batch: context of session " + std::to_string(si) + " has " +
                      std::to_string(e.ctx.size()) + " ids, exceeding the limit " +
                      std::to_string(limits.max_context_ids()) + " (sessions must be truncated first)");
    }

    int32_t responder = speaker_index(s.responder);
    b.responder_index.push_back(responder);

    // per-speaker flattened persona words and characters
    std::vector<std::vector<int32_t>> per_speaker(speakers.size());
    std::vector<std::vector<int32_t>> per_speaker_chars(speakers.size());
    for (size_t spi = 0; spi < speakers.size(); ++spi) {
      auto it = s.profiles.find(speakers[spi]);
      if (it == s.profiles.end()) continue;
      for (auto& item : encode_persona_words(it->second, words)) {
        per_speaker[spi].insert(per_speaker[spi].end(), item.begin(), item.end());
      }
      for (auto& item : render_persona_items(it->second)) {
        auto ids = chars.encode_text(item);
        per_speaker_chars[spi].insert(per_speaker_chars[spi].end(), ids.begin(), ids.end());
      }
    }
    b.speaker_words.push_back(std::move(per_speaker));
    b.speaker_chars.push_back(std::move(per_speaker_chars));

    const PersonaProfile& target_profile = s.profiles.at(s.responder);
    b.target_items.push_back(encode_persona_words(target_profile, words));

    // char-spliced persona sequence for the transformer-encoded persona path
    auto items = render_persona_items(target_profile);
    if (!items.empty()) {
      e.persona = chars.encode_dialogue(items);
    }

    auto resp = chars.encode_text(s.response);
    if (static_cast<int64_t>(resp.size()) > limits.max_response_chars) {
      throw DataError("collate_batch: response of session " + std::to_string(si) +
                      " exceeds the character limit (sessions must be truncated first)");
    }
    e.dec_in.push_back(specials::kBos);
    e.dec_in.insert(e.dec_in.end(), resp.begin(), resp.end());
    e.dec_tgt = resp;
    e.dec_tgt.push_back(specials::kEos);
  }

  for (const auto& e : enc) {
    b.ctx_len = std::max(b.ctx_len, static_cast<int64_t>(e.ctx.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int64_t>(e.dec_in.size()));
    b.persona_len = std::max(b.persona_len, static_cast<int64_t>(e.persona.size()));
  }
  b.persona_len = std::max<int64_t>(b.persona_len, 1);

  b.ctx_ids.assign(static_cast<size_t>(b.size * b.ctx_len), specials::kPad);
  b.ctx_mask.assign(static_cast<size_t>(b.size * b.ctx_len), 0);
  b.ctx_speaker.assign(static_cast<size_t>(b.size * b.ctx_len), 0);
  b.persona_ids.assign(static_cast<size_t>(b.size * b.persona_len), specials::kPad);
  b.persona_mask.assign(static_cast<size_t>(b.size * b.persona_len), 0);
  b.dec_input.assign(static_cast<size_t>(b.size * b.tgt_len), specials::kPad);
  b.dec_target.assign(static_cast<size_t>(b.size * b.tgt_len), specials::kPad);
  b.dec_mask.assign(static_cast<size_t>(b.size * b.tgt_len), 0);

  for (int64_t i = 0; i < b.size; ++i) {
    const Encoded& e = enc[static_cast<size_t>(i)];
    for (size_t j = 0; j < e.ctx.size(); ++j) {
      b.ctx_ids[static_cast<size_t>(i * b.ctx_len) + j] = e.ctx[j];
      b.ctx_mask[static_cast<size_t>(i * b.ctx_len) + j] = 1;
      b.ctx_speaker[static_cast<size_t>(i * b.ctx_len) + j] = e.speaker_of_pos[j];
    }
    for (size_t j = 0; j < e.persona.size(); ++j) {
      b.persona_ids[static_cast<size_t>(i * b.persona_len) + j] = e.persona[j];
      b.persona_mask[static_cast<size_t>(i * b.persona_len) + j] = 1;
    }
    for (size_t j = 0; j < e.dec_in.size(); ++j) {
      b.dec_input[static_cast<size_t>(i * b.tgt_len) + j] = e.dec_in[j];
      b.dec_target[static_cast<size_t>(i * b.tgt_len) + j] = e.dec_tgt[j];
      b.dec_mask[static_cast<size_t>(i * b.tgt_len) + j] = 1;
    }
  }

  b.mlm_ids = b.ctx_ids;
  b.mlm_labels.assign(b.ctx_ids.size(), -1);
  b.mlm_label_count = 0;
  return b;
}

void apply_mlm_corruption(Batch& batch, double rate, const CharVocab& chars, RngStream& rng) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw std::invalid_argument("apply_mlm_corruption: rate must be in (0,1), got " + std::to_string(rate));
  }
  batch.mlm_ids = batch.ctx_ids;
  batch.mlm_labels.assign(batch.ctx_ids.size(), -1);
  batch.mlm_label_count = 0;
  const int64_t vocab = chars.size();
  const int64_t normal_tokens = vocab - specials::kCount;
  for (size_t i = 0; i < batch.ctx_ids.size(); ++i) {
    if (!batch.ctx_mask[i]) continue;
    int32_t id = batch.ctx_ids[i];
    if (id < specials::kCount) continue;  // separators and other specials stay intact
    if (rng.uniform() >= rate) continue;
    batch.mlm_labels[i] = id;
    ++batch.mlm_label_count;
    double u = rng.uniform();
    if (u < 0.8) {
      batch.mlm_ids[i] = specials::kMask;
    } else if (u < 0.9 && normal_tokens > 0) {
      batch.mlm_ids[i] = static_cast<int32_t>(specials::kCount + rng.uniform_int(normal_tokens));
    }  // else keep the original token; it still carries a label
  }
}

}  // namespace ar
