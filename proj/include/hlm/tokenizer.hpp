#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/error.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/utf8.hpp"

namespace hlm {

namespace special {
inline constexpr int pad = 0;
inline constexpr int unk = 1;
inline constexpr int cls = 2;
inline constexpr int sep = 3;
inline constexpr int mask = 4;
inline constexpr int count = 5;
inline const std::vector<std::string>& names() {
  static const std::vector<std::string> n{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return n;
}
}  // namespace special

/// U+2581, prefixed to the first symbol of every word.
inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";

/// Token ids, their surface pieces, and which pieces open a word.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::string> pieces;
  std::vector<bool> word_starts;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const noexcept {
    const std::size_t h1 = std::hash<std::string>{}(p.first);
    const std::size_t h2 = std::hash<std::string>{}(p.second);
    return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
  }
};

class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;

  Vocabulary() {
    for (const auto& name : special::names()) add_token(name);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  std::optional<int> find(const std::string& token) const {
    const auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  static bool is_special(int id) { return id >= 0 && id < special::count; }

  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::string& word_marker() const { return word_marker_; }
  const NormalizationConfig& normalizer() const { return normalizer_; }
  void set_normalizer(const NormalizationConfig& n) { normalizer_ = n; }

  /// Returns the id, adding the token if new.
  int add_token(const std::string& token) {
    const auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  void add_merge(const std::string& left, const std::string& right) {
    ranks_.emplace(std::make_pair(left, right), static_cast<int>(merges_.size()));
    merges_.emplace_back(left, right);
    add_token(left + right);
  }

  std::optional<int> merge_rank(const std::string& left, const std::string& right) const {
    const auto it = ranks_.find({left, right});
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["normalizer"] = nlohmann::json(normalizer_);
    nlohmann::ordered_json specials = nlohmann::ordered_json::object();
    for (int i = 0; i < special::count; ++i) specials[special::names()[static_cast<std::size_t>(i)]] = i;
    j["specials"] = specials;
    j["word_marker"] = word_marker_;
    nlohmann::ordered_json merges = nlohmann::ordered_json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    j["merges"] = merges;
    nlohmann::ordered_json tokens = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) tokens[tokens_[i]] = i;
    j["tokens"] = tokens;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (j.value("format_version", -1) != kFormatVersion) throw DataError("unsupported vocabulary format_version");
    Vocabulary v;
    v.normalizer_ = j.at("normalizer").get<NormalizationConfig>();
    v.word_marker_ = j.at("word_marker").get<std::string>();
    const auto& specials = j.at("specials");
    for (int i = 0; i < special::count; ++i) {
      if (specials.at(special::names()[static_cast<std::size_t>(i)]).get<int>() != i) {
        throw DataError("vocabulary special token ids must be PAD=0 UNK=1 CLS=2 SEP=3 MASK=4");
      }
    }
    const auto& tokens = j.at("tokens");
    std::vector<std::string> by_id(tokens.size());
    std::vector<bool> seen(tokens.size(), false);
    for (const auto& [token, id_json] : tokens.items()) {
      const auto id = id_json.get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= by_id.size() || seen[static_cast<std::size_t>(id)]) {
        throw DataError("vocabulary ids must be dense 0..|V|-1; bad id for '" + token + "'");
      }
      seen[static_cast<std::size_t>(id)] = true;
      by_id[static_cast<std::size_t>(id)] = token;
    }
    for (int i = 0; i < special::count; ++i) {
      if (static_cast<std::size_t>(i) >= by_id.size() || by_id[static_cast<std::size_t>(i)] != special::names()[static_cast<std::size_t>(i)]) {
        throw DataError("vocabulary is missing special token " + special::names()[static_cast<std::size_t>(i)]);
      }
    }
    for (std::size_t i = special::count; i < by_id.size(); ++i) v.add_token(by_id[i]);
    for (const auto& m : j.at("merges")) {
      const auto l = m.at(0).get<std::string>();
      const auto r = m.at(1).get<std::string>();
      if (!v.contains(l + r)) throw DataError("merge output '" + l + r + "' missing from tokens");
      v.ranks_.emplace(std::make_pair(l, r), static_cast<int>(v.merges_.size()));
      v.merges_.emplace_back(l, r);
    }
    return v;
  }

  std::string serialize() const { return to_json().dump(1) + "\n"; }
  void save(const std::string& path) const { write_file(path, serialize()); }
  static Vocabulary load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("invalid vocabulary file '" + path + "': " + e.what());
    }
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::pair<std::string, std::string>, int, PairHash> ranks_;
  std::string word_marker_{kWordMarker};
  NormalizationConfig normalizer_{};
};

namespace detail {

/// Initial symbols of a word: one per code point, the first carrying the marker.
inline std::vector<std::string> word_symbols(std::string_view word, std::string_view marker) {
  const std::u32string cps = utf8::decode(word);
  std::vector<std::string> out;
  out.reserve(cps.size());
  for (std::size_t i = 0; i < cps.size(); ++i) {
    std::string s = i == 0 ? std::string(marker) : std::string();
    utf8::append(s, cps[i]);
    out.push_back(std::move(s));
  }
  return out;
}

/// Merges every non-overlapping occurrence of (left, right), scanning left to right.
template <typename Sym>
bool merge_pair(std::vector<Sym>& symbols, const Sym& left, const Sym& right, const Sym& merged) {
  bool changed = false;
  std::vector<Sym> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(merged);
      i += 2;
      changed = true;
    } else {
      out.push_back(symbols[i]);
      ++i;
    }
  }
  symbols = std::move(out);
  return changed;
}

/// Splits a word into runs of known base symbols, separated by unknown runs
/// (represented as empty vectors).
struct WordSegment {
  bool unknown = false;
  bool word_start = false;
  std::vector<std::string> symbols;
};

template <typename IsKnown>
std::vector<WordSegment> segment_word(std::string_view word, std::string_view marker, IsKnown&& is_known) {
  std::vector<WordSegment> segments;
  const auto symbols = word_symbols(word, marker);
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const bool known = is_known(symbols[i]);
    if (segments.empty() || segments.back().unknown == known) {
      segments.push_back(WordSegment{!known, i == 0, {}});
    }
    segments.back().symbols.push_back(symbols[i]);
  }
  return segments;
}

}  // namespace detail

/// Greedy BPE. Pair counts are maintained incrementally; each round merges the
/// most frequent pair (ties: lexicographically smallest (left, right)) until
/// the vocabulary reaches `vocab_size` or no pair occurs at least twice.
inline Vocabulary train_bpe(const std::vector<Document>& corpus, std::size_t vocab_size,
                            std::size_t min_char_freq = 1, const NormalizationConfig& normalizer = {}) {
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& doc : corpus)
    for (const auto& sentence : doc.sentences)
      for (auto& w : split_words(sentence)) ++word_counts[w];
  if (word_counts.empty()) throw EmptyCorpusError();

  std::map<char32_t, std::int64_t> char_counts;
  for (const auto& [w, c] : word_counts)
    for (char32_t cp : utf8::decode(w)) char_counts[cp] += c;
  const auto char_known = [&](const std::string& symbol) {
    std::string_view s = symbol;
    if (s.starts_with(kWordMarker)) s.remove_prefix(kWordMarker.size());
    const auto cps = utf8::decode(s);
    return char_counts.at(cps.front()) >= static_cast<std::int64_t>(min_char_freq);
  };

  // Symbol interning; training works on integer ids.
  std::vector<std::string> sym_str;
  std::unordered_map<std::string, int> sym_id;
  const auto intern = [&](const std::string& s) {
    const auto it = sym_id.find(s);
    if (it != sym_id.end()) return it->second;
    const int id = static_cast<int>(sym_str.size());
    sym_str.push_back(s);
    sym_id.emplace(s, id);
    return id;
  };

  std::vector<std::vector<int>> words;
  std::vector<std::int64_t> counts;
  std::set<std::string> base;
  for (const auto& [w, c] : word_counts) {
    for (auto& seg : detail::segment_word(w, kWordMarker, char_known)) {
      if (seg.unknown) continue;
      std::vector<int> ids;
      for (auto& s : seg.symbols) {
        base.insert(s);
        ids.push_back(intern(s));
      }
      words.push_back(std::move(ids));
      counts.push_back(c);
    }
  }

  const std::size_t minimum = special::count + base.size() + 1;
  if (vocab_size < minimum) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is too small; minimum feasible size is " +
                      std::to_string(minimum) + " (5 specials + " + std::to_string(base.size()) +
                      " base symbols + 1 merge)");
  }

  Vocabulary vocab;
  vocab.set_normalizer(normalizer);
  for (const auto& s : base) vocab.add_token(s);

  using Key = std::uint64_t;
  const auto key = [](int a, int b) { return (static_cast<Key>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b); };
  std::unordered_map<Key, std::int64_t> pair_counts;
  std::unordered_map<Key, std::set<std::size_t>> pair_words;
  const auto add_pairs = [&](std::size_t w, int sign) {
    const auto& s = words[w];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const Key k = key(s[i], s[i + 1]);
      pair_counts[k] += sign * counts[w];
      if (sign > 0) pair_words[k].insert(w);
    }
  };
  for (std::size_t w = 0; w < words.size(); ++w) add_pairs(w, +1);

  while (vocab.size() < vocab_size) {
    Key best = 0;
    std::int64_t best_count = 0;
    for (const auto& [k, c] : pair_counts) {
      if (c < 2) continue;
      if (c > best_count) {
        best = k, best_count = c;
        continue;
      }
      if (c < best_count) continue;
      const auto& bl = sym_str[static_cast<std::size_t>(best >> 32)];
      const auto& br = sym_str[static_cast<std::size_t>(best & 0xffffffffu)];
      const auto& l = sym_str[static_cast<std::size_t>(k >> 32)];
      const auto& r = sym_str[static_cast<std::size_t>(k & 0xffffffffu)];
      if (std::tie(l, r) < std::tie(bl, br)) best = k;
    }
    if (best_count < 2) break;
    const int left = static_cast<int>(best >> 32);
    const int right = static_cast<int>(best & 0xffffffffu);
    const std::string left_str = sym_str[static_cast<std::size_t>(left)];
    const std::string right_str = sym_str[static_cast<std::size_t>(right)];
    const int merged = intern(left_str + right_str);
    vocab.add_merge(left_str, right_str);

    const auto affected = pair_words[best];
    for (std::size_t w : affected) {
      add_pairs(w, -1);
      detail::merge_pair(words[w], left, right, merged);
      add_pairs(w, +1);
    }
    for (auto it = pair_counts.begin(); it != pair_counts.end();) {
      if (it->second == 0) {
        pair_words.erase(it->first);
        it = pair_counts.erase(it);
      } else {
        ++it;
      }
    }
  }
  return vocab;
}

namespace detail {

/// Applies merges by rank: repeatedly merge the adjacent pair with the lowest
/// rank. Equivalent to replaying the merge list in training order.
inline void apply_merges(std::vector<std::string>& symbols, const Vocabulary& vocab) {
  while (symbols.size() > 1) {
    int best_rank = -1;
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const auto rank = vocab.merge_rank(symbols[i], symbols[i + 1]);
      if (rank && (best_rank < 0 || *rank < best_rank)) best_rank = *rank, best_at = i;
    }
    if (best_rank < 0) break;
    const std::string left = symbols[best_at];
    const std::string right = symbols[best_at + 1];
    merge_pair(symbols, left, right, left + right);
  }
}

inline void encode_word(std::string_view word, const Vocabulary& vocab, TokenSequence& out) {
  const auto known = [&](const std::string& s) { return vocab.contains(s); };
  for (auto& seg : segment_word(word, vocab.word_marker(), known)) {
    if (seg.unknown) {
      out.ids.push_back(special::unk);
      out.pieces.push_back(special::names()[special::unk]);
      out.word_starts.push_back(seg.word_start);
      continue;
    }
    apply_merges(seg.symbols, vocab);
    for (auto& s : seg.symbols) {
      out.ids.push_back(*vocab.find(s));
      out.word_starts.push_back(std::string_view(s).starts_with(vocab.word_marker()));
      out.pieces.push_back(std::move(s));
    }
  }
}

}  // namespace detail

/// Encodes text into sub-word pieces. No [CLS]/[SEP] are added.
inline TokenSequence encode(std::string_view text, const Vocabulary& vocab) {
  TokenSequence out;
  const std::string norm = normalize(text, vocab.normalizer());
  for (const auto& w : split_words(norm)) detail::encode_word(w, vocab, out);
  return out;
}

/// Encodes an already normalized, whitespace-separated word list.
inline TokenSequence encode_words(const std::vector<std::string>& words, const Vocabulary& vocab) {
  TokenSequence out;
  for (const auto& w : words) detail::encode_word(w, vocab, out);
  return out;
}

inline std::string decode(const TokenSequence& tokens, const Vocabulary& vocab) {
  std::string out;
  const std::string& marker = vocab.word_marker();
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const int id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw InvalidTokenError(i, id, "out of range for vocabulary of size " + std::to_string(vocab.size()));
    }
    if (id == special::unk) {
      const bool starts = i < tokens.word_starts.size() && tokens.word_starts[i];
      if (starts && !out.empty()) out += ' ';
      out += special::names()[special::unk];
      continue;
    }
    if (Vocabulary::is_special(id)) throw InvalidTokenError(i, id, "special token cannot be decoded");
    std::string_view piece = vocab.token(id);
    if (piece.starts_with(marker)) {
      if (!out.empty()) out += ' ';
      piece.remove_prefix(marker.size());
    }
    out += piece;
  }
  return out;
}

struct FragmentationStats {
  std::size_t pieces = 0;
  std::size_t words = 0;
  double ratio() const { return static_cast<double>(pieces) / static_cast<double>(words); }
};

/// Average number of sub-word pieces per whitespace word.
inline FragmentationStats fragmentation_ratio(const std::vector<Document>& corpus, const Vocabulary& vocab) {
  FragmentationStats stats;
  for (const auto& doc : corpus) {
    for (const auto& sentence : doc.sentences) {
      const auto words = split_words(normalize(sentence, vocab.normalizer()));
      stats.words += words.size();
      stats.pieces += encode_words(words, vocab).size();
    }
  }
  if (stats.words == 0) throw EmptyCorpusError("no words to measure fragmentation on");
  return stats;
}

}  // namespace hlm
