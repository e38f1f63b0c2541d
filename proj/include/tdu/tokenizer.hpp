#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tdu/errors.hpp"

namespace tdu {

// Subword vocabulary. Ids are dense 0..V-1 with the three specials pinned
// to the lowest ids; continuation pieces carry a "##" prefix.
struct Vocab {
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr int kMaskId = 2;
  static constexpr const char* kPad = "[PAD]";
  static constexpr const char* kUnk = "[UNK]";
  static constexpr const char* kMask = "[MASK]";
  static constexpr int kNumSpecials = 3;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }

  // -1 when absent.
  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? -1 : it->second;
  }

  bool contains(const std::string& token) const { return id_of(token) >= 0; }

  // Builds from an ordered token list; validates specials and uniqueness.
  static Vocab from_tokens(std::vector<std::string> tokens);
};

struct EncodedInstruction {
  std::vector<int> ids;
  std::vector<int> positions;  // positions[i] == i

  std::size_t length() const { return ids.size(); }
};

// Lowercases, maps punctuation to spaces, splits on whitespace.
std::vector<std::string> normalize_words(const std::string& text);

// Greedy longest-match subword split of one already-normalized word.
// Returns {"[UNK]"} when no prefix matches.
std::vector<std::string> wordpiece_word(const std::string& word, const Vocab& vocab);

// Whole-text tokenization: normalize, then wordpiece each word.
std::vector<std::string> wordpiece(const std::string& text, const Vocab& vocab);

// Token ids plus 0-based positions, truncated to max_len.
EncodedInstruction encode(const std::string& text, const Vocab& vocab, int max_len);

// Specials + whole words by descending frequency (ties lexicographic) up to
// target_size, then single-character fallbacks so every corpus word stays
// coverable.
Vocab build_vocab(const std::vector<std::string>& corpus, int target_size);

void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace tdu
