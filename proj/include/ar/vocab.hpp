#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ar {

// Splits a UTF-8 string into code points (each returned as a UTF-8 string).
std::vector<std::string> utf8_chars(std::string_view text);

// First n code points of a UTF-8 string.
std::string utf8_truncate(std::string_view text, int64_t max_chars);
int64_t utf8_length(std::string_view text);

struct PersonaProfile {
  std::string gender;
  std::string address;
  std::vector<std::string> interests;

  bool empty() const { return gender.empty() && address.empty() && interests.empty(); }
  bool operator==(const PersonaProfile&) const = default;
};

// Fixed special-token block shared by both vocabularies.
namespace specials {
constexpr int32_t kPad = 0;
constexpr int32_t kUnk = 1;
constexpr int32_t kBos = 2;
constexpr int32_t kEos = 3;
constexpr int32_t kSep = 4;
constexpr int32_t kMask = 5;
constexpr int32_t kCount = 6;
}  // namespace specials

// Character-level vocabulary over dialogue text. Ids 0-5 are the specials
// in fixed order PAD, UNK, BOS, EOS, SEP, MASK; characters follow by
// descending corpus frequency with code-point order breaking ties.
class CharVocab {
 public:
  CharVocab() = default;

  // token list must start with the six specials.
  static CharVocab from_tokens(std::vector<std::string> tokens);

  // texts: every string whose characters should count toward the frequency
  // table. max_size bounds the total entry count, specials included.
  static CharVocab build(const std::vector<std::string>& texts, int64_t max_size);

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  int32_t id_of(std::string_view ch) const;  // UNK for unknown characters
  const std::string& token(int32_t id) const;
  bool is_special(int32_t id) const { return id >= 0 && id < specials::kCount; }

  std::vector<int32_t> encode_text(std::string_view text) const;

  // turns spliced with SEP between adjacent turns, no trailing SEP.
  std::vector<int32_t> encode_dialogue(const std::vector<std::string>& turns) const;

  // Specials dropped, characters concatenated; out-of-range ids rejected.
  std::string decode(const std::vector<int32_t>& ids) const;

  void save(const std::string& path) const;
  static CharVocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> index_;
};

using WordSegmenter = std::function<std::vector<std::string>(std::string_view)>;

// Whitespace plus punctuation segmentation; persona values are short tags,
// so this is the default segmenter hook.
std::vector<std::string> default_word_segmenter(std::string_view text);

// Word-level vocabulary for persona fields. Specials: PAD = 0, UNK = 1.
class WordVocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;

  WordVocab() = default;
  static WordVocab from_tokens(std::vector<std::string> tokens);
  static WordVocab build(const std::vector<std::string>& texts, int64_t max_size,
                         const WordSegmenter& seg = default_word_segmenter);

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  int32_t id_of(std::string_view word) const;
  const std::string& token(int32_t id) const;

  std::vector<int32_t> encode_words(const std::vector<std::string>& words) const;

  void save(const std::string& path) const;
  static WordVocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> index_;
};

// One "key value" item per persona entry, in profile order (gender, address,
// then one item per interest). The items themselves are semantically
// unordered downstream.
std::vector<std::string> render_persona_items(const PersonaProfile& profile);

// Word-id lists per persona item.
std::vector<std::vector<int32_t>> encode_persona_words(const PersonaProfile& profile,
                                                       const WordVocab& vocab,
                                                       const WordSegmenter& seg = default_word_segmenter);

}  // namespace ar
