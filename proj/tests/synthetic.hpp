#pragma once

// Generators for synthetic corpora shared by the unit and acceptance suites.

#include <algorithm>
#include <string>
#include <vector>

#include "hlm/finetune.hpp"

#include "hlm/rng.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/utf8.hpp"

namespace hlm::synthetic {

inline const std::u32string& greek_letters() {
  static const std::u32string letters = U"αβγδεζηθικλμνξοπρστυφχψως";
  return letters;
}

inline std::string random_word(Rng& rng, std::size_t min_len, std::size_t max_len,
                               const std::u32string& alphabet = greek_letters()) {
  const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
  std::u32string w;
  for (std::size_t i = 0; i < len; ++i) w.push_back(alphabet[rng.uniform_index(alphabet.size())]);
  return utf8::encode(w);
}

/// Random sentences over a Zipf-ish lexicon; every letter of the alphabet is
/// guaranteed to occur both word-initially and word-medially.
inline std::vector<Document> random_corpus(Rng& rng, std::size_t sentences, std::size_t per_doc) {
  std::vector<std::string> lexicon;
  for (int i = 0; i < 300; ++i) lexicon.push_back(random_word(rng, 2, 9));
  const auto& letters = greek_letters();
  for (char32_t c : letters) lexicon.push_back(utf8::encode(std::u32string{c, c}));
  std::vector<Document> docs;
  for (std::size_t s = 0; s < sentences; ++s) {
    if (s % per_doc == 0) docs.emplace_back();
    std::string sentence;
    const std::size_t n = 3 + rng.uniform_index(10);
    for (std::size_t k = 0; k < n; ++k) {
      const double u = rng.uniform();
      const std::size_t idx = static_cast<std::size_t>(u * u * static_cast<double>(lexicon.size()));
      if (k) sentence += ' ';
      sentence += lexicon[idx];
    }
    if (s < lexicon.size()) sentence += " " + lexicon[lexicon.size() - 1 - s];
    docs.back().sentences.push_back(sentence);
  }
  for (std::size_t i = 0; i < docs.size(); ++i) docs[i].source_id = "synthetic-" + std::to_string(i);
  return docs;
}

/// A toy language in which each article agrees with the suffix class of the
/// following noun. Nouns are consonant-epsilon stems plus one suffix letter.
struct AgreementGrammar {
  std::vector<std::string> articles{"μια", "ενα", "δυο"};
  std::vector<std::vector<std::string>> suffixes{{"α", "η"}, {"ο", "ω"}, {"ι", "υ"}};
  std::vector<std::string> verbs{"βλεπουν", "θελουν", "παιρνουν", "εχουν", "φερνουν"};
  std::string conjunction = "κατ";
  std::vector<std::string> stems;

  explicit AgreementGrammar(std::size_t stem_count = 60, std::uint64_t seed = 77) {
    Rng rng(seed);
    const std::u32string consonants = U"βγδζθκλμνξπρστφχψ";
    while (stems.size() < stem_count) {
      std::u32string s;
      const std::size_t syllables = 1 + rng.uniform_index(2);
      for (std::size_t k = 0; k < syllables; ++k) {
        s.push_back(consonants[rng.uniform_index(consonants.size())]);
        s.push_back(U'ε');
      }
      s.push_back(consonants[rng.uniform_index(consonants.size())]);
      const auto w = utf8::encode(s);
      if (std::find(stems.begin(), stems.end(), w) == stems.end()) stems.push_back(w);
    }
  }

  /// Each stem admits two of the three suffix classes.
  std::size_t stem_class(std::size_t stem, Rng& rng) const {
    return (stem + rng.uniform_index(2)) % suffixes.size();
  }

  std::string noun_phrase(Rng& rng, const std::vector<std::size_t>& topic) const {
    const std::size_t stem = topic[rng.uniform_index(topic.size())];
    const std::size_t cls = stem_class(stem, rng);
    return articles[cls] + " " + stems[stem] + suffixes[cls][rng.uniform_index(suffixes[cls].size())];
  }

  std::string sentence(Rng& rng, const std::vector<std::size_t>& topic) const {
    std::string s = noun_phrase(rng, topic) + " " + verbs[rng.uniform_index(verbs.size())] + " " + noun_phrase(rng, topic);
    if (rng.bernoulli(0.5)) s += " " + conjunction + " " + noun_phrase(rng, topic);
    return s;
  }

  std::vector<std::size_t> topic(Rng& rng, std::size_t size) const {
    std::vector<std::size_t> idx(stems.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(std::min(size, idx.size()));
    return idx;
  }

  /// Documents that each draw their nouns from a small stem subset.
  std::vector<Document> corpus(Rng& rng, std::size_t documents, std::size_t sentences_per_doc,
                               std::size_t topic_size = 6) const {
    std::vector<Document> docs;
    for (std::size_t d = 0; d < documents; ++d) {
      Document doc;
      const auto t = topic(rng, topic_size);
      for (std::size_t i = 0; i < sentences_per_doc; ++i) doc.sentences.push_back(sentence(rng, t));
      doc.source_id = "agreement-" + std::to_string(d);
      docs.push_back(std::move(doc));
    }
    return docs;
  }

  /// Tag of a word by its final letter: the suffix class (A, B, C) or O.
  std::string suffix_tag(const std::string& word) const {
    const auto cps = utf8::decode(word);
    const std::string last = utf8::encode(cps.back());
    for (std::size_t c = 0; c < suffixes.size(); ++c)
      for (const auto& s : suffixes[c])
        if (s == last) return std::string(1, static_cast<char>('A' + c));
    return "O";
  }

  /// Sentences tagged by suffix class, nouns drawn from stems [0, stem_limit).
  std::vector<finetune::TaggedSentence> suffix_tagging(Rng& rng, std::size_t n, std::size_t stem_limit = SIZE_MAX) const {
    std::vector<std::size_t> allowed;
    for (std::size_t i = 0; i < std::min(stem_limit, stems.size()); ++i) allowed.push_back(i);
    std::vector<finetune::TaggedSentence> out;
    for (std::size_t i = 0; i < n; ++i) {
      finetune::TaggedSentence s;
      s.words = split_words(sentence(rng, allowed));
      for (const auto& w : s.words) s.labels.push_back(suffix_tag(w));
      out.push_back(std::move(s));
    }
    return out;
  }

  static std::vector<std::string> suffix_labels() { return {"O", "A", "B", "C"}; }
};

inline std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

/// Order-sensitive NLI: copy => entailment, shuffled copy => neutral,
/// negated copy => contradiction.
inline std::vector<finetune::NliPair> copy_nli(Rng& rng, const AgreementGrammar& g, std::size_t n) {
  std::vector<finetune::NliPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto premise = g.sentence(rng, g.topic(rng, 60));
    auto words = split_words(premise);
    finetune::NliPair p{premise, premise, static_cast<finetune::NliLabel>(i % 3)};
    if (p.label == finetune::NliLabel::neutral) {
      auto shuffled = words;
      while (shuffled.front() == words.front()) rng.shuffle(shuffled.begin(), shuffled.end());
      p.hypothesis = join(shuffled);
    } else if (p.label == finetune::NliLabel::contradiction) {
      words.insert(words.begin() + 2, "δεν");
      p.hypothesis = join(words);
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Order-free NLI over word sets: the hypothesis is a subset of the premise
/// (entailment), that subset plus a negation word (contradiction), or the
/// subset plus words absent from the premise (neutral).
inline std::vector<finetune::NliPair> bag_nli(Rng& rng, std::size_t n, std::size_t lexicon_size = 40) {
  std::vector<std::string> lexicon;
  while (lexicon.size() < lexicon_size) {
    const auto w = random_word(rng, 3, 6, U"βγδζθκλμνπρστφχ");
    if (std::find(lexicon.begin(), lexicon.end(), w) == lexicon.end()) lexicon.push_back(w);
  }
  std::vector<finetune::NliPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto idx = std::vector<std::size_t>(lexicon.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t plen = 4 + rng.uniform_index(4), hlen = 2 + rng.uniform_index(2);
    std::vector<std::string> premise, hypothesis;
    for (std::size_t k = 0; k < plen; ++k) premise.push_back(lexicon[idx[k]]);
    for (std::size_t k = 0; k < hlen; ++k) hypothesis.push_back(premise[rng.uniform_index(plen)]);
    const auto label = static_cast<finetune::NliLabel>(i % 3);
    if (label == finetune::NliLabel::contradiction) hypothesis.push_back("δεν");
    if (label == finetune::NliLabel::neutral) {
      hypothesis.push_back(lexicon[idx[plen]]);
      hypothesis.push_back(lexicon[idx[plen + 1]]);
    }
    rng.shuffle(hypothesis.begin(), hypothesis.end());
    out.push_back({join(premise), join(hypothesis), label});
  }
  return out;
}

}  // namespace hlm::synthetic
