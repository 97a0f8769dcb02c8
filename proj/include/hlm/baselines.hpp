#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/autodiff.hpp"
#include "hlm/bert.hpp"
#include "hlm/crf.hpp"
#include "hlm/error.hpp"
#include "hlm/finetune.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/utf8.hpp"

namespace hlm::baselines {

template <typename Real>
using ParamMap = bert::ParamMap<Real>;

// ---- word vectors ----------------------------------------------------------

struct WordVectors {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<float>> table;

  bool contains(const std::string& w) const { return table.count(w) > 0; }

  /// Zero vector for unknown words.
  std::vector<float> lookup(const std::string& w) const {
    const auto it = table.find(w);
    return it == table.end() ? std::vector<float>(dim, 0.0f) : it->second;
  }
};

/// "count dim" header, then "word v1 ... v_dim" per line.
inline WordVectors parse_word_vectors(std::string_view text) {
  WordVectors wv;
  std::size_t pos = 0, line_no = 0, expected = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    for (std::size_t i = 0; i < line.size();) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
      if (j > i) fields.push_back(line.substr(i, j - i));
      i = j;
    }
    const auto number = [&](std::string_view f, auto& out) {
      const auto r = std::from_chars(f.data(), f.data() + f.size(), out);
      if (r.ec != std::errc() || r.ptr != f.data() + f.size())
        throw ParseError(line_no, "not a number: '" + std::string(f) + "'");
    };
    if (header) {
      if (fields.size() != 2) throw ParseError(line_no, "expected header 'count dim'");
      number(fields[0], expected);
      number(fields[1], wv.dim);
      if (wv.dim == 0) throw ParseError(line_no, "dimension must be positive");
      header = false;
      continue;
    }
    if (fields.size() != wv.dim + 1)
      throw ParseError(line_no, "expected " + std::to_string(wv.dim) + " values, got " +
                                    std::to_string(fields.size() - 1));
    std::vector<float> v(wv.dim);
    for (std::size_t k = 0; k < wv.dim; ++k) number(fields[k + 1], v[k]);
    wv.table[std::string(fields[0])] = std::move(v);
  }
  if (header) throw ParseError(1, "missing header");
  if (wv.table.size() != expected)
    throw ParseError(line_no, "header declares " + std::to_string(expected) + " words, found " +
                                  std::to_string(wv.table.size()));
  return wv;
}

inline WordVectors read_word_vectors(const std::string& path) { return parse_word_vectors(read_file(path)); }

/// Shortest round-trip decimal form; words in sorted order.
inline std::string word_vectors_string(const WordVectors& wv) {
  std::map<std::string, const std::vector<float>*> sorted;
  for (const auto& [w, v] : wv.table) sorted[w] = &v;
  std::string out = std::to_string(wv.table.size()) + " " + std::to_string(wv.dim) + "\n";
  char buf[32];
  for (const auto& [w, v] : sorted) {
    out += w;
    for (float x : *v) {
      out += ' ';
      out.append(buf, std::to_chars(buf, buf + sizeof buf, x).ptr);
    }
    out += '\n';
  }
  return out;
}

inline void write_word_vectors(const std::string& path, const WordVectors& wv) {
  write_file(path, word_vectors_string(wv));
}

// ---- vocabularies ----------------------------------------------------------

/// Word and character ids; id 0 is unknown, id 1 pads.
class Lexicon {
 public:
  static constexpr int unknown = 0;
  static constexpr int pad = 1;

  Lexicon() = default;

  explicit Lexicon(const std::vector<std::vector<std::string>>& sentences) {
    for (const auto& s : sentences)
      for (const auto& w : s) {
        words_.try_emplace(w, static_cast<int>(words_.size()) + 2);
        for (char32_t c : utf8::decode(w)) chars_.try_emplace(c, static_cast<int>(chars_.size()) + 2);
      }
  }

  int word(const std::string& w) const {
    const auto it = words_.find(w);
    return it == words_.end() ? unknown : it->second;
  }

  std::vector<int> chars(const std::string& w) const {
    std::vector<int> out;
    for (char32_t c : utf8::decode(w)) {
      const auto it = chars_.find(c);
      out.push_back(it == chars_.end() ? unknown : it->second);
    }
    return out;
  }

  std::size_t word_count() const { return words_.size() + 2; }
  std::size_t char_count() const { return chars_.size() + 2; }

  /// Words in id order, specials excluded.
  std::vector<std::string> words() const {
    std::vector<std::string> out(words_.size());
    for (const auto& [w, id] : words_) out[static_cast<std::size_t>(id) - 2] = w;
    return out;
  }

  friend void to_json(nlohmann::json& j, const Lexicon& l) {
    std::vector<std::string> chars(l.chars_.size());
    for (const auto& [c, id] : l.chars_) chars[static_cast<std::size_t>(id) - 2] = utf8::encode(c);
    j = {{"words", l.words()}, {"chars", chars}};
  }

  friend void from_json(const nlohmann::json& j, Lexicon& l) {
    l = Lexicon();
    for (const auto& w : j.at("words")) l.words_.try_emplace(w.get<std::string>(), static_cast<int>(l.words_.size()) + 2);
    for (const auto& c : j.at("chars")) {
      const auto cp = utf8::decode(c.get<std::string>());
      if (cp.size() != 1) throw DataError("lexicon character entry must be one code point");
      l.chars_.try_emplace(cp[0], static_cast<int>(l.chars_.size()) + 2);
    }
  }

 private:
  std::unordered_map<std::string, int> words_;
  std::map<char32_t, int> chars_;
};

/// Word embedding table [words, dim]: rows of words found in `vectors` are
/// copied, other rows drawn small; the unknown and padding rows are zero.
template <typename Real>
ad::Tensor<Real> embedding_table(const Lexicon& lex, std::size_t dim, Rng& rng, const WordVectors* vectors = nullptr) {
  if (vectors && vectors->dim != dim)
    throw ConfigError("word vectors have dimension " + std::to_string(vectors->dim) + ", model expects " +
                      std::to_string(dim));
  std::vector<Real> v(lex.word_count() * dim, Real(0));
  const auto words = lex.words();
  for (std::size_t i = 0; i < words.size(); ++i) {
    Real* row = v.data() + (i + 2) * dim;
    if (vectors && vectors->contains(words[i])) {
      const auto& src = vectors->table.at(words[i]);
      for (std::size_t k = 0; k < dim; ++k) row[k] = static_cast<Real>(src[k]);
    } else {
      for (std::size_t k = 0; k < dim; ++k) row[k] = static_cast<Real>(0.1 * rng.normal());
    }
  }
  return ad::Tensor<Real>::from({lex.word_count(), dim}, std::move(v), true);
}

/// Embedding rows for `ids`; unknown ids always give zero rows.
template <typename Real>
ad::Tensor<Real> embed_words(const ad::Tensor<Real>& table, std::span<const int> ids) {
  const auto rows = ad::embedding_lookup(table, ids);
  if (std::find(ids.begin(), ids.end(), Lexicon::unknown) == ids.end()) return rows;
  const std::size_t d = table.cols();
  std::vector<Real> mask(ids.size() * d, Real(1));
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == Lexicon::unknown) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i * d), d, Real(0));
  return ad::mul(rows, ad::Tensor<Real>::from({ids.size(), d}, std::move(mask), false));
}

// ---- character CNN ---------------------------------------------------------

struct CharCnnConfig {
  std::size_t char_dim = 30;
  std::size_t filters = 30;
  std::size_t width = 3;
};

template <typename Real>
void add_char_cnn(ParamMap<Real>& p, const std::string& name, std::size_t chars, const CharCnnConfig& c, Rng& rng) {
  if (c.width % 2 == 0) throw ConfigError("char CNN width must be odd");
  std::vector<Real> e(chars * c.char_dim);
  const double scale = std::sqrt(3.0 / static_cast<double>(c.char_dim));
  for (auto& x : e) x = static_cast<Real>(scale * (2.0 * rng.uniform() - 1.0));
  p[name + "/embed"] = ad::Tensor<Real>::from({chars, c.char_dim}, std::move(e), true);
  bert::add_dense(p, name + "/conv", c.width * c.char_dim, c.filters, rng, 0.1);
}

/// Max over positions of a width-w convolution across the word's character
/// embeddings, padded by (w-1)/2 pad characters on each side. Shape [1, filters].
template <typename Real>
ad::Tensor<Real> char_cnn(std::span<const int> chars, const ParamMap<Real>& p, const std::string& name) {
  if (chars.empty()) throw ContractError("char_cnn: empty word");
  const auto& embed = bert::param(p, name + "/embed");
  const std::size_t width = bert::param(p, name + "/conv/w").rows() / embed.cols();
  const std::size_t half = (width - 1) / 2;
  std::vector<int> padded(half, Lexicon::pad);
  padded.insert(padded.end(), chars.begin(), chars.end());
  padded.insert(padded.end(), half, Lexicon::pad);
  const auto e = ad::embedding_lookup(embed, padded);
  std::vector<ad::Tensor<Real>> shifted;
  for (std::size_t k = 0; k < width; ++k) shifted.push_back(ad::slice(e, 0, k, chars.size()));
  const auto windows = width == 1 ? shifted[0] : ad::concat(shifted, 1);
  return ad::max_rows(bert::dense(p, name + "/conv", windows));
}

// ---- LSTM ------------------------------------------------------------------

/// Gate order i, f, g, o; forget-gate bias starts at 1.
template <typename Real>
void add_lstm(ParamMap<Real>& p, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(hidden));
  const auto uniform = [&](std::size_t r, std::size_t c) {
    std::vector<Real> v(r * c);
    for (auto& x : v) x = static_cast<Real>(s * (2.0 * rng.uniform() - 1.0));
    return ad::Tensor<Real>::from({r, c}, std::move(v), true);
  };
  p[name + "/w"] = uniform(in, 4 * hidden);
  p[name + "/u"] = uniform(hidden, 4 * hidden);
  std::vector<Real> b(4 * hidden, Real(0));
  std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden), b.begin() + static_cast<std::ptrdiff_t>(2 * hidden), Real(1));
  p[name + "/b"] = ad::Tensor<Real>::from({1, 4 * hidden}, std::move(b), true);
}

/// Hidden states [T, hidden] of one direction over x [T, in].
template <typename Real>
ad::Tensor<Real> lstm(const ad::Tensor<Real>& x, const ParamMap<Real>& p, const std::string& name, bool reverse) {
  const auto& u = bert::param(p, name + "/u");
  const std::size_t T = x.rows(), H = u.rows();
  const auto xw = ad::add(ad::matmul(x, bert::param(p, name + "/w")), bert::param(p, name + "/b"));
  auto h = ad::Tensor<Real>::zeros({1, H}, false);
  auto c = ad::Tensor<Real>::zeros({1, H}, false);
  std::vector<ad::Tensor<Real>> out(T);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    const auto z = ad::add(ad::slice(xw, 0, t, 1), ad::matmul(h, u));
    const auto i = ad::sigmoid(ad::slice(z, 1, 0, H));
    const auto f = ad::sigmoid(ad::slice(z, 1, H, H));
    const auto g = ad::tanh(ad::slice(z, 1, 2 * H, H));
    const auto o = ad::sigmoid(ad::slice(z, 1, 3 * H, H));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh(c));
    out[t] = h;
  }
  return T == 1 ? out[0] : ad::concat(out, 0);
}

template <typename Real>
ad::Tensor<Real> bilstm(const ad::Tensor<Real>& x, const ParamMap<Real>& p, const std::string& name) {
  return ad::concat<Real>({lstm(x, p, name + "/fw", false), lstm(x, p, name + "/bw", true)}, 1);
}

// ---- BiLSTM-CNN-CRF tagger -------------------------------------------------

struct TaggerConfig {
  std::size_t word_dim = 300;
  CharCnnConfig chars;
  std::size_t hidden = 100;
  std::size_t layers = 2;
  double dropout = 0.0;
  bool use_crf = true;

  void validate() const {
    if (word_dim == 0 || hidden == 0 || layers == 0) throw ConfigError("tagger sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TaggerConfig& c) {
  j = {{"word_dim", c.word_dim}, {"char_dim", c.chars.char_dim}, {"char_filters", c.chars.filters},
       {"char_width", c.chars.width}, {"hidden", c.hidden}, {"layers", c.layers},
       {"dropout", c.dropout}, {"use_crf", c.use_crf}};
}

inline void from_json(const nlohmann::json& j, TaggerConfig& c) {
  c = TaggerConfig();
  c.word_dim = j.value("word_dim", c.word_dim);
  c.chars.char_dim = j.value("char_dim", c.chars.char_dim);
  c.chars.filters = j.value("char_filters", c.chars.filters);
  c.chars.width = j.value("char_width", c.chars.width);
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.dropout = j.value("dropout", c.dropout);
  c.use_crf = j.value("use_crf", c.use_crf);
  c.validate();
}

struct TaggedWords {
  std::vector<int> words;
  std::vector<std::vector<int>> chars;
  std::vector<int> labels;
};

inline TaggedWords encode_tagged(const finetune::TaggedSentence& s, const Lexicon& lex, const finetune::LabelSet& labels) {
  if (s.words.empty()) throw ContractError("cannot tag an empty sentence");
  TaggedWords t;
  for (std::size_t i = 0; i < s.words.size(); ++i) {
    t.words.push_back(lex.word(s.words[i]));
    t.chars.push_back(lex.chars(s.words[i]));
    t.labels.push_back(labels.id(s.labels[i]));
  }
  return t;
}

template <typename Real>
ParamMap<Real> init_tagger(const TaggerConfig& c, const Lexicon& lex, std::size_t labels, std::uint64_t seed,
                           const WordVectors* vectors = nullptr) {
  c.validate();
  Rng rng(seed);
  ParamMap<Real> p;
  p["word/embed"] = embedding_table<Real>(lex, c.word_dim, rng, vectors);
  add_char_cnn(p, "char", lex.char_count(), c.chars, rng);
  std::size_t in = c.word_dim + c.chars.filters;
  for (std::size_t l = 0; l < c.layers; ++l) {
    add_lstm(p, "lstm" + std::to_string(l) + "/fw", in, c.hidden, rng);
    add_lstm(p, "lstm" + std::to_string(l) + "/bw", in, c.hidden, rng);
    in = 2 * c.hidden;
  }
  bert::add_dense(p, "tagger", in, labels, rng, 0.1);
  if (c.use_crf) p["crf/transitions"] = crf::CrfParams<Real>::zeros(labels).transitions;
  return p;
}

/// w_i = [e_i; c_i] for every word, shape [T, word_dim + filters].
template <typename Real>
ad::Tensor<Real> word_representations(const TaggedWords& s, const ParamMap<Real>& p) {
  std::vector<ad::Tensor<Real>> c;
  for (const auto& w : s.chars) c.push_back(char_cnn(std::span<const int>(w), p, "char"));
  const auto chars = c.size() == 1 ? c[0] : ad::concat(c, 0);
  return ad::concat<Real>({embed_words(bert::param(p, "word/embed"), s.words), chars}, 1);
}

/// Emission scores [T, labels].
template <typename Real>
ad::Tensor<Real> tagger_emissions(const TaggedWords& s, const ParamMap<Real>& p, double dropout = 0.0,
                                  Rng* rng = nullptr) {
  if (s.words.empty()) throw ContractError("cannot tag an empty sentence");
  const bool train = rng != nullptr && dropout > 0.0;
  auto x = ad::dropout(word_representations(s, p), dropout, rng, train);
  for (std::size_t l = 0; p.count("lstm" + std::to_string(l) + "/fw/w"); ++l)
    x = ad::dropout(bilstm(x, p, "lstm" + std::to_string(l)), dropout, rng, train);
  return bert::dense(p, "tagger", x);
}

/// Mean per-sentence CRF negative log-likelihood, or mean per-word
/// cross-entropy without a CRF.
template <typename Real>
ad::Tensor<Real> tagger_loss(std::span<const TaggedWords> batch, const ParamMap<Real>& p, double dropout = 0.0,
                             Rng* rng = nullptr) {
  if (batch.empty()) throw ContractError("empty batch");
  if (!p.count("crf/transitions")) {
    std::vector<ad::Tensor<Real>> em;
    std::vector<int> labels;
    for (const auto& s : batch) {
      em.push_back(tagger_emissions(s, p, dropout, rng));
      labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    }
    return ad::cross_entropy<Real>(em.size() == 1 ? em[0] : ad::concat(em, 0), labels);
  }
  const auto params = finetune::crf_of(p);
  std::vector<ad::Tensor<Real>> nll;
  for (const auto& s : batch) nll.push_back(crf::log_likelihood(tagger_emissions(s, p, dropout, rng), s.labels, params));
  return ad::scale(ad::reduce_sum(nll.size() == 1 ? nll[0] : ad::concat(nll, 0)), Real(-1) / static_cast<Real>(batch.size()));
}

template <typename Real>
std::vector<int> tag(const TaggedWords& s, const ParamMap<Real>& p) {
  const auto e = tagger_emissions(s, p);
  return p.count("crf/transitions") ? crf::viterbi(e, finetune::crf_of(p)).path : bert::argmax_rows(e);
}

template <typename Real>
finetune::LossFn<Real, TaggedWords> tagger_objective(double dropout) {
  return [dropout](std::span<const TaggedWords> b, const ParamMap<Real>& p, Rng* rng) {
    return tagger_loss<Real>(b, p, dropout, rng);
  };
}

// ---- decomposable attention ------------------------------------------------

struct DamConfig {
  std::size_t word_dim = 300;
  std::size_t hidden = 200;
  std::size_t classes = 3;
  double dropout = 0.0;

  void validate() const {
    if (word_dim == 0 || hidden == 0 || classes == 0) throw ConfigError("DAM sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const DamConfig& c) {
  j = {{"word_dim", c.word_dim}, {"hidden", c.hidden}, {"classes", c.classes}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, DamConfig& c) {
  c = DamConfig();
  c.word_dim = j.value("word_dim", c.word_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.classes = j.value("classes", c.classes);
  c.dropout = j.value("dropout", c.dropout);
  c.validate();
}

struct WordPair {
  std::vector<int> premise, hypothesis;
  int label = 0;
};

inline WordPair encode_words(const finetune::NliPair& p, const Lexicon& lex) {
  WordPair w;
  for (const auto& t : split_words(p.premise)) w.premise.push_back(lex.word(t));
  for (const auto& t : split_words(p.hypothesis)) w.hypothesis.push_back(lex.word(t));
  w.label = static_cast<int>(p.label);
  return w;
}

template <typename Real>
ParamMap<Real> init_dam(const DamConfig& c, const Lexicon& lex, std::uint64_t seed, const WordVectors* vectors = nullptr) {
  c.validate();
  Rng rng(seed);
  ParamMap<Real> p;
  p["word/embed"] = embedding_table<Real>(lex, c.word_dim, rng, vectors);
  const auto he = [](std::size_t in) { return std::sqrt(2.0 / static_cast<double>(in)); };
  bert::add_dense(p, "dam/attend", c.word_dim, c.hidden, rng, he(c.word_dim));
  bert::add_dense(p, "dam/compare", 2 * c.word_dim, c.hidden, rng, he(2 * c.word_dim));
  bert::add_dense(p, "dam/aggregate", 2 * c.hidden, c.hidden, rng, he(2 * c.hidden));
  bert::add_dense(p, "dam/output", c.hidden, c.classes, rng, he(c.hidden));
  return p;
}

template <typename Real>
struct DamForward {
  ad::Tensor<Real> scores;        // e_ij, [m, n]
  ad::Tensor<Real> premise_attn;  // row i: weights over hypothesis words
  ad::Tensor<Real> hypothesis_attn;
  ad::Tensor<Real> premise_aligned;  // a_i for premise words, [m, d]
  ad::Tensor<Real> hypothesis_aligned;
  ad::Tensor<Real> v, u;
  ad::Tensor<Real> s_p, s_q;
  ad::Tensor<Real> logits;  // [1, classes]
};

template <typename Real>
DamForward<Real> dam_forward(const WordPair& x, const ParamMap<Real>& p, double dropout = 0.0, Rng* rng = nullptr) {
  if (x.premise.empty() || x.hypothesis.empty()) throw ContractError("DAM needs a non-empty premise and hypothesis");
  const bool train = rng != nullptr && dropout > 0.0;
  const auto mlp = [&](const std::string& name, const ad::Tensor<Real>& in) {
    return ad::relu(bert::dense(p, name, ad::dropout(in, dropout, rng, train)));
  };
  const auto& table = bert::param(p, "word/embed");
  const auto a = embed_words(table, x.premise);
  const auto b = embed_words(table, x.hypothesis);
  DamForward<Real> f;
  f.scores = ad::matmul(mlp("dam/attend", a), ad::transpose(mlp("dam/attend", b)));
  f.premise_attn = ad::softmax(f.scores);
  f.hypothesis_attn = ad::softmax(ad::transpose(f.scores));
  f.premise_aligned = ad::matmul(f.premise_attn, b);
  f.hypothesis_aligned = ad::matmul(f.hypothesis_attn, a);
  f.v = mlp("dam/compare", ad::concat<Real>({a, f.premise_aligned}, 1));
  f.u = mlp("dam/compare", ad::concat<Real>({b, f.hypothesis_aligned}, 1));
  f.s_p = ad::sum_rows_unordered(f.v);
  f.s_q = ad::sum_rows_unordered(f.u);
  f.logits = bert::dense(p, "dam/output", mlp("dam/aggregate", ad::concat<Real>({f.s_p, f.s_q}, 1)));
  return f;
}

template <typename Real>
ad::Tensor<Real> dam_loss(std::span<const WordPair> batch, const ParamMap<Real>& p, double dropout = 0.0,
                          Rng* rng = nullptr) {
  if (batch.empty()) throw ContractError("empty batch");
  std::vector<ad::Tensor<Real>> logits;
  std::vector<int> labels;
  for (const auto& x : batch) {
    logits.push_back(dam_forward(x, p, dropout, rng).logits);
    labels.push_back(x.label);
  }
  return ad::cross_entropy<Real>(logits.size() == 1 ? logits[0] : ad::concat(logits, 0), labels);
}

template <typename Real>
int dam_predict(const WordPair& x, const ParamMap<Real>& p) {
  return bert::argmax_rows(dam_forward(x, p).logits)[0];
}

template <typename Real>
finetune::LossFn<Real, WordPair> dam_objective(double dropout) {
  return [dropout](std::span<const WordPair> b, const ParamMap<Real>& p, Rng* rng) {
    return dam_loss<Real>(b, p, dropout, rng);
  };
}

}  // namespace hlm::baselines
