#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "epo/common.hpp"
#include "epo/core.hpp"

namespace epo {

inline constexpr const char* kBosToken = "<bos>";

// ----------------------------------------------------------------------------
// Toy tokenizers. Byte-level: ids 0..255 are the raw bytes (printable ASCII
// displays as itself, everything else as \xNN), id 256 is <bos>. Word-level:
// whitespace-separated words of a corpus, sorted, plus <bos>.
// ----------------------------------------------------------------------------

inline std::string byte_display(unsigned char b) {
  if (b >= 0x20 && b < 0x7f) return std::string(1, static_cast<char>(b));
  static const char* hex = "0123456789abcdef";
  std::string s = "\\x00";
  s[2] = hex[b >> 4];
  s[3] = hex[b & 0xf];
  return s;
}

inline Vocabulary byte_vocabulary() {
  std::vector<std::string> tokens;
  tokens.reserve(257);
  for (int b = 0; b < 256; ++b) tokens.push_back(byte_display(static_cast<unsigned char>(b)));
  tokens.push_back(kBosToken);
  return Vocabulary(std::move(tokens), 256, "");
}

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

inline Vocabulary word_vocabulary(const std::string& corpus_text) {
  std::set<std::string> unique;
  for (const std::string& w : split_whitespace(corpus_text)) unique.insert(w);
  if (unique.empty()) throw InputError("corpus has no tokens");
  std::vector<std::string> tokens(unique.begin(), unique.end());
  TokenId bos = static_cast<TokenId>(tokens.size());
  tokens.push_back(kBosToken);
  return Vocabulary(std::move(tokens), bos, " ");
}

inline std::vector<TokenId> tokenize_bytes(const std::string& text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

inline std::vector<TokenId> tokenize_words(const std::string& text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const std::string& w : split_whitespace(text)) {
    auto id = vocab.encode(w);
    if (!id) throw InputError("word not in vocabulary: '" + w + "'");
    ids.push_back(*id);
  }
  return ids;
}

// ----------------------------------------------------------------------------
// Corpus files: UTF-8 text, or a raw little-endian u32 token-id stream.
// ----------------------------------------------------------------------------

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline std::vector<TokenId> read_u32_token_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open file: " + path);
  std::vector<TokenId> ids;
  unsigned char buf[4];
  while (in.read(reinterpret_cast<char*>(buf), 4)) {
    uint32_t v = static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
                 (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
    ids.push_back(static_cast<TokenId>(v));
  }
  if (in.gcount() != 0) throw InputError("token file length is not a multiple of 4: " + path);
  return ids;
}

// ----------------------------------------------------------------------------
// Synthetic corpus: seeded template sentences over a small closed word bank.
// Gives the toy trainer something with real structure to fit and gives tests
// a deterministic text source.
// ----------------------------------------------------------------------------

inline std::string synthetic_corpus(uint64_t seed, int approx_tokens) {
  static const std::vector<std::string> dets = {"the", "a", "every", "some"};
  static const std::vector<std::string> adjs = {"quick", "lazy",  "small", "big",   "red",
                                                "blue",  "old",   "young", "happy", "quiet"};
  static const std::vector<std::string> nouns = {"dog",   "cat",    "fox",    "bird",  "horse",
                                                 "mouse", "wolf",   "bear",   "fish",  "tree",
                                                 "river", "stone",  "house",  "garden", "child",
                                                 "farmer", "teacher", "doctor"};
  static const std::vector<std::string> verbs = {"sees",    "likes", "chases", "finds", "follows",
                                                 "helps",   "watches", "feeds", "greets", "knows"};
  static const std::vector<std::string> advs = {"quickly", "slowly", "quietly",
                                                "happily", "often",  "rarely"};

  CounterRng rng{seed, rng_tag::sample};
  auto pick = [&](const std::vector<std::string>& bank) {
    return bank[rng.next_below(bank.size())];
  };

  std::vector<std::string> words;
  words.reserve(static_cast<std::size_t>(approx_tokens) + 16);
  while (static_cast<int>(words.size()) < approx_tokens) {
    words.push_back(pick(dets));
    if (rng.next_double() < 0.6) words.push_back(pick(adjs));
    words.push_back(pick(nouns));
    words.push_back(pick(verbs));
    words.push_back(pick(dets));
    if (rng.next_double() < 0.4) words.push_back(pick(adjs));
    words.push_back(pick(nouns));
    if (rng.next_double() < 0.3) words.push_back(pick(advs));
    if (rng.next_double() < 0.2) {
      words.push_back("and");
      words.push_back(pick(verbs));
      words.push_back(pick(dets));
      words.push_back(pick(nouns));
    }
    words.push_back(".");
  }

  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  out += '\n';
  return out;
}

}  // namespace epo
