#include "tdu/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

namespace tdu {

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  static const char* specials[] = {kPad, kUnk, kMask};
  if (tokens.size() < static_cast<std::size_t>(kNumSpecials)) {
    throw ValueError("vocab: fewer tokens than the " +
                     std::to_string(kNumSpecials) + " specials");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != specials[i]) {
      throw ValueError("vocab: token " + std::to_string(i) + " must be " +
                       specials[i] + ", got '" + tokens[static_cast<std::size_t>(i)] +
                       "'");
    }
  }
  Vocab v;
  v.id_to_token = std::move(tokens);
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    const std::string& tok = v.id_to_token[i];
    if (tok.empty()) throw ValueError("vocab: empty token at id " + std::to_string(i));
    auto [it, inserted] = v.token_to_id.emplace(tok, static_cast<int>(i));
    (void)it;
    if (!inserted) throw ValueError("vocab: duplicate token '" + tok + "'");
  }
  return v;
}

std::vector<std::string> normalize_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!current.empty()) {
        words.push_back(current);
        current.clear();
      }
    }
  }
  if (!current.empty()) words.push_back(current);
  return words;
}

std::vector<std::string> wordpiece_word(const std::string& word, const Vocab& vocab) {
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::string match;
    while (end > start) {
      std::string candidate = word.substr(start, end - start);
      if (start > 0) candidate = "##" + candidate;
      if (vocab.contains(candidate)) {
        match = std::move(candidate);
        break;
      }
      --end;
    }
    if (match.empty()) return {Vocab::kUnk};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

std::vector<std::string> wordpiece(const std::string& text, const Vocab& vocab) {
  std::vector<std::string> out;
  for (const std::string& word : normalize_words(text)) {
    for (std::string& piece : wordpiece_word(word, vocab)) {
      out.push_back(std::move(piece));
    }
  }
  return out;
}

EncodedInstruction encode(const std::string& text, const Vocab& vocab, int max_len) {
  if (max_len < 1) {
    throw ValueError("encode: max_len must be >= 1, got " + std::to_string(max_len));
  }
  EncodedInstruction enc;
  for (const std::string& piece : wordpiece(text, vocab)) {
    if (static_cast<int>(enc.ids.size()) == max_len) break;
    int id = vocab.id_of(piece);
    enc.ids.push_back(id < 0 ? Vocab::kUnkId : id);
    enc.positions.push_back(static_cast<int>(enc.positions.size()));
  }
  return enc;
}

Vocab build_vocab(const std::vector<std::string>& corpus, int target_size) {
  if (corpus.empty()) throw ValueError("build_vocab: empty corpus");
  if (target_size < Vocab::kNumSpecials) {
    throw ValueError("build_vocab: target size " + std::to_string(target_size) +
                     " below the " + std::to_string(Vocab::kNumSpecials) +
                     " specials");
  }
  std::map<std::string, long long> freq;
  for (const std::string& text : corpus) {
    for (const std::string& word : normalize_words(text)) ++freq[word];
  }

  std::vector<std::pair<std::string, long long>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens = {Vocab::kPad, Vocab::kUnk, Vocab::kMask};
  std::set<std::string> chosen;
  for (const auto& [word, count] : ranked) {
    (void)count;
    if (static_cast<int>(tokens.size()) >= target_size) break;
    tokens.push_back(word);
    chosen.insert(word);
  }

  // Single-character fallbacks for every word that missed the whole-word cut,
  // so greedy matching can always cover it.
  std::set<std::string> lead_chars, cont_chars;
  for (const auto& [word, count] : ranked) {
    (void)count;
    if (chosen.count(word)) continue;
    lead_chars.insert(word.substr(0, 1));
    for (std::size_t i = 1; i < word.size(); ++i) {
      cont_chars.insert("##" + word.substr(i, 1));
    }
  }
  std::set<std::string> present(tokens.begin(), tokens.end());
  for (const std::string& c : lead_chars) {
    if (present.insert(c).second) tokens.push_back(c);
  }
  for (const std::string& c : cont_chars) {
    if (present.insert(c).second) tokens.push_back(c);
  }
  return Vocab::from_tokens(std::move(tokens));
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("save_vocab: cannot open '" + path + "' for writing");
  for (const std::string& tok : vocab.id_to_token) out << tok << '\n';
  if (!out) throw ValueError("save_vocab: write failed for '" + path + "'");
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("load_vocab: cannot open '" + path + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab::from_tokens(std::move(tokens));
}

}  // namespace tdu
