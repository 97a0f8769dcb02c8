#pragma once

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/error.hpp"
#include "hlm/utf8.hpp"

namespace hlm {

enum class UnicodeForm { composed, decomposed };

struct NormalizationConfig {
  bool strip_diacritics = true;
  bool lowercase = true;
  UnicodeForm unicode_form = UnicodeForm::composed;

  friend bool operator==(const NormalizationConfig&, const NormalizationConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NormalizationConfig& c) {
  j = nlohmann::json{{"strip_diacritics", c.strip_diacritics},
                     {"lowercase", c.lowercase},
                     {"unicode_form", c.unicode_form == UnicodeForm::composed ? "composed" : "decomposed"}};
}

inline void from_json(const nlohmann::json& j, NormalizationConfig& c) {
  c.strip_diacritics = j.at("strip_diacritics").get<bool>();
  c.lowercase = j.at("lowercase").get<bool>();
  const auto form = j.at("unicode_form").get<std::string>();
  if (form == "composed") {
    c.unicode_form = UnicodeForm::composed;
  } else if (form == "decomposed") {
    c.unicode_form = UnicodeForm::decomposed;
  } else {
    throw DataError("unknown unicode_form '" + form + "'");
  }
}

/// A document of normalized, non-empty sentences in source order.
struct Document {
  std::vector<std::string> sentences;
  std::string source_id;
};

namespace detail {

inline const icu::Normalizer2& nfd() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFDInstance(status);
  if (U_FAILURE(status)) throw Error(std::string("ICU NFD unavailable: ") + u_errorName(status));
  return *n;
}

inline const icu::Normalizer2& nfc() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error(std::string("ICU NFC unavailable: ") + u_errorName(status));
  return *n;
}

inline icu::UnicodeString apply(const icu::Normalizer2& form, const icu::UnicodeString& s) {
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString out = form.normalize(s, status);
  if (U_FAILURE(status)) throw Error(std::string("ICU normalization failed: ") + u_errorName(status));
  return out;
}

inline bool is_combining_mark(UChar32 c) {
  const auto type = u_charType(c);
  return type == U_NON_SPACING_MARK || type == U_ENCLOSING_MARK;
}

inline icu::UnicodeString strip_marks(const icu::UnicodeString& s) {
  icu::UnicodeString out;
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    if (!is_combining_mark(c)) out.append(c);
    i = s.moveIndex32(i, 1);
  }
  return out;
}

inline bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v';
}

}  // namespace detail

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && detail::is_ascii_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && detail::is_ascii_space(s.back())) s.remove_suffix(1);
  return s;
}

/// Decompose, drop combining marks, lowercase (root locale, so Greek capital
/// sigma becomes final sigma at word end), recompose. Idempotent for every
/// configuration.
inline std::string normalize(std::string_view text, const NormalizationConfig& config = {}) {
  utf8::validate(text);
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = detail::apply(detail::nfd(), s);
  if (config.strip_diacritics) s = detail::strip_marks(s);
  if (config.lowercase) {
    s.toLower(icu::Locale::getRoot());
    // full lowercase mappings can introduce marks (U+0130 -> i + U+0307)
    s = detail::apply(detail::nfd(), s);
    if (config.strip_diacritics) s = detail::strip_marks(s);
  }
  const auto& out_form = config.unicode_form == UnicodeForm::composed ? detail::nfc() : detail::nfd();
  s = detail::apply(out_form, s);
  std::string out;
  s.toUTF8String(out);
  return out;
}

/// Optional helper for corpora that are not already one sentence per line:
/// breaks after '.', ';' (Greek question mark), U+037E and U+0387 (ano teleia).
inline std::vector<std::string> split_sentences(std::string_view text) {
  const std::u32string cps = utf8::decode(text);
  std::vector<std::string> out;
  std::u32string current;
  auto flush = [&] {
    const std::string s = utf8::encode(current);
    const auto t = trim(s);
    if (!t.empty()) out.emplace_back(t);
    current.clear();
  };
  for (char32_t c : cps) {
    if (c == U'\n') {
      flush();
      continue;
    }
    current.push_back(c);
    if (c == U'.' || c == U';' || c == 0x037E || c == 0x0387 || c == 0x00B7) flush();
  }
  flush();
  return out;
}

/// Parses the corpus format: UTF-8, one sentence per line, blank line between
/// documents. Lines are normalized; lines empty after normalization are dropped,
/// as are empty documents.
inline std::vector<Document> segment_corpus(std::string_view raw, const NormalizationConfig& config = {},
                                            std::string_view source_prefix = "doc") {
  utf8::validate(raw);
  std::vector<Document> docs;
  Document current;
  auto close = [&] {
    if (!current.sentences.empty()) {
      current.source_id = std::string(source_prefix) + "-" + std::to_string(docs.size());
      docs.push_back(std::move(current));
    }
    current = Document{};
  };
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    std::size_t end = raw.find('\n', pos);
    if (end == std::string_view::npos) end = raw.size();
    const std::string_view line = raw.substr(pos, end - pos);
    if (trim(line).empty()) {
      close();
    } else {
      const std::string norm = normalize(line, config);
      const auto t = trim(norm);
      if (!t.empty()) current.sentences.emplace_back(t);
    }
    if (end == raw.size()) break;
    pos = end + 1;
  }
  close();
  if (docs.empty()) throw EmptyCorpusError();
  return docs;
}

inline std::string serialize_corpus(const std::vector<Document>& docs) {
  std::string out;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d > 0) out += '\n';
    for (const auto& s : docs[d].sentences) {
      out += s;
      out += '\n';
    }
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

inline std::vector<Document> read_corpus(const std::string& path, const NormalizationConfig& config = {}) {
  return segment_corpus(read_file(path), config, path);
}

/// Whitespace split used everywhere a "word" is meant.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && detail::is_ascii_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !detail::is_ascii_space(text[j])) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

}  // namespace hlm
