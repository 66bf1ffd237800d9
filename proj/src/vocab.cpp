#include "ar/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include "ar/errors.hpp"

namespace ar {

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > text.size()) len = text.size() - i;  // tolerate truncated tail bytes
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

int64_t utf8_length(std::string_view text) {
  return static_cast<int64_t>(utf8_chars(text).size());
}

std::string utf8_truncate(std::string_view text, int64_t max_chars) {
  auto chars = utf8_chars(text);
  if (static_cast<int64_t>(chars.size()) <= max_chars) return std::string(text);
  std::string out;
  for (int64_t i = 0; i < max_chars; ++i) out += chars[static_cast<size_t>(i)];
  return out;
}

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> toks{"_PAD", "_UNK", "_BOS", "_EOS", "_SEP", "_MASK"};
  return toks;
}

// Descending frequency, ties by ascending token (code-point order for single
// characters, byte order for words).
std::vector<std::string> rank_by_frequency(const std::map<std::string, int64_t>& freq, int64_t keep) {
  std::vector<std::pair<std::string, int64_t>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (const auto& [tok, n] : entries) {
    if (static_cast<int64_t>(out.size()) >= keep) break;
    out.push_back(tok);
  }
  return out;
}

void save_token_file(const std::string& path, const std::vector<std::string>& tokens) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write vocabulary file: " + path);
  for (const auto& t : tokens) f << t << "\n";
}

std::vector<std::string> load_token_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(f, line)) tokens.push_back(line);
  return tokens;
}

}  // namespace

CharVocab CharVocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<size_t>(specials::kCount)) {
    throw DataError("char vocabulary must contain the special block");
  }
  for (int32_t i = 0; i < specials::kCount; ++i) {
    if (tokens[static_cast<size_t>(i)] != special_tokens()[static_cast<size_t>(i)]) {
      throw DataError("char vocabulary specials malformed at id " + std::to_string(i));
    }
  }
  CharVocab v;
  v.tokens_ = std::move(tokens);
  for (size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int32_t>(i)).second) {
      throw DataError("char vocabulary has duplicate token at id " + std::to_string(i));
    }
  }
  return v;
}

CharVocab CharVocab::build(const std::vector<std::string>& texts, int64_t max_size) {
  if (texts.empty()) throw DataError("build_char_vocab: empty corpus");
  if (max_size < specials::kCount) throw DataError("build_char_vocab: max size below special count");
  std::map<std::string, int64_t> freq;
  for (const auto& t : texts) {
    for (auto& ch : utf8_chars(t)) ++freq[ch];
  }
  std::vector<std::string> tokens = special_tokens();
  for (auto& ch : rank_by_frequency(freq, max_size - specials::kCount)) tokens.push_back(std::move(ch));
  return from_tokens(std::move(tokens));
}

int32_t CharVocab::id_of(std::string_view ch) const {
  auto it = index_.find(std::string(ch));
  return it == index_.end() ? specials::kUnk : it->second;
}

const std::string& CharVocab::token(int32_t id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("char vocab: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(size()) + ")");
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int32_t> CharVocab::encode_text(std::string_view text) const {
  std::vector<int32_t> ids;
  for (auto& ch : utf8_chars(text)) ids.push_back(id_of(ch));
  return ids;
}

std::vector<int32_t> CharVocab::encode_dialogue(const std::vector<std::string>& turns) const {
  if (turns.empty()) throw DataError("encode_dialogue: empty turn list");
  std::vector<int32_t> ids;
  for (size_t i = 0; i < turns.size(); ++i) {
    if (i) ids.push_back(specials::kSep);
    auto t = encode_text(turns[i]);
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return ids;
}

std::string CharVocab::decode(const std::vector<int32_t>& ids) const {
  std::string out;
  for (int32_t id : ids) {
    const std::string& t = token(id);  // range check
    if (is_special(id)) continue;
    out += t;
  }
  return out;
}

void CharVocab::save(const std::string& path) const { save_token_file(path, tokens_); }

CharVocab CharVocab::load(const std::string& path) { return from_tokens(load_token_file(path)); }

std::vector<std::string> default_word_segmenter(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&]() {
    if (!current.empty()) {
      words.push_back(current);
      current.clear();
    }
  };
  for (auto& ch : utf8_chars(text)) {
    if (ch.size() == 1) {
      unsigned char c = static_cast<unsigned char>(ch[0]);
      if (std::isspace(c) || std::ispunct(c)) {
        flush();
        continue;
      }
    }
    current += ch;
  }
  flush();
  return words;
}

WordVocab WordVocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != "_PAD" || tokens[1] != "_UNK") {
    throw DataError("word vocabulary specials malformed (expect _PAD, _UNK first)");
  }
  WordVocab v;
  v.tokens_ = std::move(tokens);
  for (size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int32_t>(i)).second) {
      throw DataError("word vocabulary has duplicate token at id " + std::to_string(i));
    }
  }
  return v;
}

WordVocab WordVocab::build(const std::vector<std::string>& texts, int64_t max_size,
                           const WordSegmenter& seg) {
  if (texts.empty()) throw DataError("build_word_vocab: empty corpus");
  if (max_size < 2) throw DataError("build_word_vocab: max size below special count");
  std::map<std::string, int64_t> freq;
  for (const auto& t : texts) {
    for (auto& w : seg(t)) ++freq[w];
  }
  std::vector<std::string> tokens{"_PAD", "_UNK"};
  for (auto& w : rank_by_frequency(freq, max_size - 2)) tokens.push_back(std::move(w));
  return from_tokens(std::move(tokens));
}

int32_t WordVocab::id_of(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& WordVocab::token(int32_t id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("word vocab: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(size()) + ")");
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int32_t> WordVocab::encode_words(const std::vector<std::string>& words) const {
  std::vector<int32_t> ids;
  for (const auto& w : words) ids.push_back(id_of(w));
  return ids;
}

void WordVocab::save(const std::string& path) const { save_token_file(path, tokens_); }

WordVocab WordVocab::load(const std::string& path) { return from_tokens(load_token_file(path)); }

std::vector<std::string> render_persona_items(const PersonaProfile& profile) {
  std::vector<std::string> items;
  if (!profile.gender.empty()) items.push_back("gender " + profile.gender);
  if (!profile.address.empty()) items.push_back("address " + profile.address);
  for (const auto& interest : profile.interests) {
    if (!interest.empty()) items.push_back("interests " + interest);
  }
  return items;
}

std::vector<std::vector<int32_t>> encode_persona_words(const PersonaProfile& profile,
                                                       const WordVocab& vocab,
                                                       const WordSegmenter& seg) {
  std::vector<std::vector<int32_t>> out;
  for (const auto& item : render_persona_items(profile)) {
    out.push_back(vocab.encode_words(seg(item)));
  }
  return out;
}

}  // namespace ar
