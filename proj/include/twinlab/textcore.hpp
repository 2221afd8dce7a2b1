#pragma once

// Tokenization, syllable counting and the id vocabulary.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "twinlab/error.hpp"

namespace twinlab::textcore {

// Lowercase tokens with no whitespace; non-empty for any admitted sentence.
using TokenSeq = std::vector<std::string>;

namespace detail {
inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
inline bool is_vowel(char c) {
  switch (c) {
    case 'a': case 'e': case 'i': case 'o': case 'u': case 'y':
      return true;
    default:
      return false;
  }
}
}  // namespace detail

// Splits on whitespace, lowercases ASCII letters, and emits every ASCII
// punctuation character as a token of its own. Bytes >= 0x80 (UTF-8
// sequences) are kept verbatim inside words.
//
//   "The cat sat."  -> the cat sat .
//   "don't"         -> don ' t
inline TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (detail::is_space(c)) {
      flush();
    } else if (detail::is_ascii_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  if (out.empty()) throw EmptySentence();
  return out;
}

inline std::string detokenize(const TokenSeq& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out.push_back(' ');
    out += s[i];
  }
  return out;
}

// A token counts as a word unless it is a single punctuation character.
inline bool is_word(std::string_view token) {
  return !(token.size() == 1 && detail::is_ascii_punct(static_cast<unsigned char>(token[0])));
}

inline std::size_t word_count(const TokenSeq& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](const std::string& t) { return is_word(t); }));
}

// Deterministic syllable estimate:
//   1. lowercase, keep ASCII letters only (no letters -> 1);
//   2. count maximal runs of vowels, with y treated as a vowel;
//   3. subtract one if the word ends in 'e', unless it ends in "le" with a
//      consonant before the 'l' (table, simple);
//   4. floor at 1.
inline int count_syllables(std::string_view word) {
  std::string w;
  for (char ch : word) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isalpha(c)) w.push_back(static_cast<char>(std::tolower(c)));
  }
  if (w.empty()) return 1;
  int groups = 0;
  bool in_group = false;
  for (char c : w) {
    const bool v = detail::is_vowel(c);
    if (v && !in_group) ++groups;
    in_group = v;
  }
  const std::size_t n = w.size();
  if (w[n - 1] == 'e') {
    const bool consonant_le = n >= 3 && w[n - 2] == 'l' && !detail::is_vowel(w[n - 3]);
    if (!consonant_le) --groups;
  }
  return std::max(groups, 1);
}

inline std::size_t syllable_count(const TokenSeq& s) {
  std::size_t total = 0;
  for (const auto& t : s)
    if (is_word(t)) total += static_cast<std::size_t>(count_syllables(t));
  return total;
}

enum class Task { Upper, Lower };

inline const char* task_name(Task t) { return t == Task::Upper ? "upper" : "lower"; }

// Token <-> id map. Ids 0..5 are reserved control tokens; corpus text can
// never produce them because tokenize splits '<' and '>' off as punctuation.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kUnk = 3;
  static constexpr std::size_t kTaskUpper = 4;
  static constexpr std::size_t kTaskLower = 5;
  static constexpr std::size_t kReserved = 6;

  static constexpr std::string_view kReservedNames[kReserved] = {"<pad>", "<bos>", "<eos>",
                                                                "<unk>", "<2upper>", "<2lower>"};

  Vocabulary() {
    for (auto name : kReservedNames) id_to_token_.emplace_back(name);
  }

  // Most frequent tokens first (ties broken lexicographically) until
  // max_size entries, reserved ids included.
  static Vocabulary build(std::span<const TokenSeq> corpus, std::size_t max_size) {
    if (max_size < kReserved) throw std::invalid_argument("vocabulary max size must be at least 6");
    std::map<std::string, std::size_t> counts;
    for (const auto& s : corpus)
      for (const auto& t : s) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
      if (v.size() >= max_size) break;
      v.add(tok);
    }
    return v;
  }

  // Rebuilds from a full id-ordered token list (as stored in checkpoints).
  static Vocabulary from_tokens(std::span<const std::string> tokens) {
    if (tokens.size() < kReserved) throw ConfigError("vocabulary is missing reserved tokens");
    for (std::size_t i = 0; i < kReserved; ++i)
      if (tokens[i] != kReservedNames[i]) throw ConfigError("vocabulary reserved token mismatch at id " + std::to_string(i));
    Vocabulary v;
    for (std::size_t i = kReserved; i < tokens.size(); ++i) {
      if (v.token_to_id_.count(tokens[i])) throw ConfigError("duplicate vocabulary token '" + tokens[i] + "'");
      v.add(tokens[i]);
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  std::size_t id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(std::size_t id) const { return id_to_token_.at(id); }
  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

 private:
  void add(const std::string& tok) {
    token_to_id_.emplace(tok, id_to_token_.size());
    id_to_token_.push_back(tok);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::size_t> token_to_id_;
};

inline std::size_t task_id(Task t) { return t == Task::Upper ? Vocabulary::kTaskUpper : Vocabulary::kTaskLower; }

// [task, ids..., EOS]
inline std::vector<std::size_t> encode_ids(const Vocabulary& v, const TokenSeq& s, Task task) {
  std::vector<std::size_t> ids;
  ids.reserve(s.size() + 2);
  ids.push_back(task_id(task));
  for (const auto& t : s) ids.push_back(v.id(t));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

// [BOS, ids..., EOS]: decoder target layout.
inline std::vector<std::size_t> encode_target(const Vocabulary& v, const TokenSeq& s) {
  std::vector<std::size_t> ids;
  ids.reserve(s.size() + 2);
  ids.push_back(Vocabulary::kBos);
  for (const auto& t : s) ids.push_back(v.id(t));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

// Inverse of encode_ids / encode_target: stops at EOS, drops PAD, BOS and
// task markers. UNK decodes to "<unk>".
inline TokenSeq decode_ids(const Vocabulary& v, std::span<const std::size_t> ids) {
  TokenSeq out;
  for (std::size_t id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kTaskUpper ||
        id == Vocabulary::kTaskLower)
      continue;
    out.push_back(v.token(id));
  }
  return out;
}

}  // namespace twinlab::textcore
