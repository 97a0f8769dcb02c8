#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/autodiff.hpp"
#include "hlm/bert.hpp"
#include "hlm/crf.hpp"
#include "hlm/error.hpp"
#include "hlm/metrics.hpp"
#include "hlm/pretrain_data.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/tokenizer.hpp"
#include "hlm/trainer.hpp"

namespace hlm::finetune {

// ---- data ---------------------------------------------------------------------

struct TaggedSentence {
  std::vector<std::string> words;
  std::vector<std::string> labels;

  friend bool operator==(const TaggedSentence&, const TaggedSentence&) = default;
};

enum class NliLabel { entailment, contradiction, neutral };

inline const std::vector<std::string>& nli_label_names() {
  static const std::vector<std::string> n{"entailment", "contradiction", "neutral"};
  return n;
}

inline const char* to_string(NliLabel l) { return nli_label_names()[static_cast<std::size_t>(l)].c_str(); }

inline std::optional<NliLabel> parse_nli_label(const std::string& s) {
  const auto& n = nli_label_names();
  for (std::size_t i = 0; i < n.size(); ++i)
    if (n[i] == s) return static_cast<NliLabel>(i);
  return std::nullopt;
}

struct NliPair {
  std::string premise;
  std::string hypothesis;
  NliLabel label = NliLabel::neutral;

  friend bool operator==(const NliPair&, const NliPair&) = default;
};

inline const std::vector<std::string>& upos_tags() {
  static const std::vector<std::string> t{"ADJ",  "ADP",   "ADV",  "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
                                          "PART", "PRON",  "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"};
  return t;
}

inline const std::vector<std::string>& ner_tags() {
  static const std::vector<std::string> t{"O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"};
  return t;
}

/// Ordered label inventory with reverse lookup.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], static_cast<int>(i)).second)
        throw ConfigError("duplicate label '" + names_[i] + "'");
    }
  }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& label) const {
    const auto it = index_.find(label);
    if (it == index_.end()) throw DataError("unknown label '" + label + "'");
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> index_;
};

/// CoNLL-style "token<TAB>label" lines, blank line between sentences. With
/// `bio2` the label sequences must be well-formed BIO2.
inline std::vector<TaggedSentence> read_conll_string(std::string_view text, bool bio2 = false) {
  std::vector<TaggedSentence> out;
  TaggedSentence cur;
  std::size_t first_line = 1;
  const auto close = [&] {
    if (cur.words.empty()) return;
    if (bio2) {
      try {
        metrics::validate_bio2(cur.labels);
      } catch (const DataError& e) {
        throw ParseError(first_line, e.what());
      }
    }
    out.push_back(std::move(cur));
    cur = {};
  };
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) {
      close();
      continue;
    }
    if (cur.words.empty()) first_line = line_no;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0 || tab + 1 == line.size())
      throw ParseError(line_no, "expected 'token<TAB>label'");
    const auto label = trim(line.substr(tab + 1));
    if (label.find('\t') != std::string_view::npos) throw ParseError(line_no, "more than two columns");
    cur.words.emplace_back(line.substr(0, tab));
    cur.labels.emplace_back(label);
  }
  close();
  return out;
}

inline std::vector<TaggedSentence> read_conll(const std::string& path, bool bio2 = false) {
  try {
    return read_conll_string(read_file(path), bio2);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + e.what());
  }
}

inline std::string conll_string(const std::vector<TaggedSentence>& sentences) {
  std::string out;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (s > 0) out += '\n';
    for (std::size_t i = 0; i < sentences[s].words.size(); ++i)
      out += sentences[s].words[i] + '\t' + sentences[s].labels[i] + '\n';
  }
  return out;
}

inline NliPair nli_from_json(const nlohmann::json& j) {
  NliPair p;
  p.premise = j.at("premise").get<std::string>();
  p.hypothesis = j.at("hypothesis").get<std::string>();
  const auto label = j.at("label").get<std::string>();
  const auto parsed = parse_nli_label(label);
  if (!parsed) throw DataError("unknown NLI label '" + label + "'");
  p.label = *parsed;
  return p;
}

inline nlohmann::ordered_json to_json(const NliPair& p) {
  return {{"premise", p.premise}, {"hypothesis", p.hypothesis}, {"label", to_string(p.label)}};
}

/// JSONL records; `raw`, when given, receives each record as parsed.
inline std::vector<NliPair> read_nli(const std::string& path, std::vector<nlohmann::ordered_json>* raw = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<NliPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::ordered_json::parse(line);
      out.push_back(nli_from_json(nlohmann::json::parse(line)));
      if (raw) raw->push_back(std::move(j));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, path + ": record " + std::to_string(out.size() + 1) + ": " + e.what());
    } catch (const DataError& e) {
      throw ParseError(line_no, path + ": record " + std::to_string(out.size() + 1) + ": " + e.what());
    }
  }
  return out;
}

inline void write_nli(const std::string& path, const std::vector<NliPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += to_json(p).dump() + '\n';
  write_file(path, out);
}

// ---- alignment ------------------------------------------------------------------

/// A tagged sentence as model input: ⟨CLS, pieces..., SEP⟩ with the label of
/// each word attached to its first piece.
struct AlignedSentence {
  std::vector<int> ids;
  std::vector<int> segments;
  /// Position of each kept word's first piece.
  std::vector<int> active;
  std::vector<int> labels;
  std::size_t dropped_words = 0;

  std::size_t words() const { return active.size(); }
};

/// Pieces of one word after normalization; never empty.
inline std::vector<int> word_pieces(const std::string& word, const Vocabulary& vocab) {
  const auto enc = encode(word, vocab);
  if (enc.empty()) return {special::unk};
  return enc.ids;
}

/// Whole words are dropped from the end when the pieces do not fit.
inline AlignedSentence align_labels(const TaggedSentence& s, const Vocabulary& vocab, const LabelSet& labels,
                                    std::size_t max_positions) {
  if (s.words.empty()) throw ContractError("align_labels: empty sentence");
  if (s.words.size() != s.labels.size()) throw ContractError("align_labels: words and labels differ in length");
  if (max_positions < 3) throw ConfigError("align_labels: max_positions must be at least 3");
  AlignedSentence a;
  a.ids.push_back(special::cls);
  for (std::size_t w = 0; w < s.words.size(); ++w) {
    const auto pieces = word_pieces(s.words[w], vocab);
    if (a.ids.size() + pieces.size() + 1 > max_positions) {
      a.dropped_words = s.words.size() - w;
      break;
    }
    a.active.push_back(static_cast<int>(a.ids.size()));
    a.labels.push_back(labels.id(s.labels[w]));
    a.ids.insert(a.ids.end(), pieces.begin(), pieces.end());
  }
  if (a.active.empty()) throw DataError("align_labels: first word alone exceeds max_positions");
  a.ids.push_back(special::sep);
  a.segments.assign(a.ids.size(), 0);
  return a;
}

/// Aligns every sentence; `warn` hears about truncations.
inline std::vector<AlignedSentence> align_all(const std::vector<TaggedSentence>& data, const Vocabulary& vocab,
                                              const LabelSet& labels, std::size_t max_positions,
                                              const std::function<void(const std::string&)>& warn = {}) {
  std::vector<AlignedSentence> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.push_back(align_labels(data[i], vocab, labels, max_positions));
    if (out.back().dropped_words > 0 && warn)
      warn("sentence " + std::to_string(i + 1) + ": dropped " + std::to_string(out.back().dropped_words) +
           " trailing words to fit max_positions");
  }
  return out;
}

struct EncodedPair {
  std::vector<int> ids;
  std::vector<int> segments;
  int label = 0;
};

/// ⟨CLS, premise, SEP, hypothesis, SEP⟩, longer segment truncated first.
inline EncodedPair encode_pair(const NliPair& p, const Vocabulary& vocab, std::size_t max_positions) {
  if (max_positions < 5) throw ConfigError("encode_pair: max_positions must be at least 5");
  auto a = encode(p.premise, vocab).ids, b = encode(p.hypothesis, vocab).ids;
  truncate_pair(a, b, max_positions - 3);
  EncodedPair e;
  e.ids.push_back(special::cls);
  e.ids.insert(e.ids.end(), a.begin(), a.end());
  e.ids.push_back(special::sep);
  e.segments.assign(e.ids.size(), 0);
  e.ids.insert(e.ids.end(), b.begin(), b.end());
  e.ids.push_back(special::sep);
  e.segments.resize(e.ids.size(), 1);
  e.label = static_cast<int>(p.label);
  return e;
}

// ---- heads ------------------------------------------------------------------------

/// Encoder and pooler parameters only (pre-training heads removed).
template <typename Real>
ParamMap<Real> encoder_params(const ParamMap<Real>& all) {
  ParamMap<Real> out;
  for (const auto& [name, t] : all)
    if (!name.starts_with("mlm/") && !name.starts_with("nsp/")) out.emplace(name, t.detach(true));
  return out;
}

template <typename Real>
void add_tagging_head(ParamMap<Real>& p, std::size_t hidden, std::size_t labels, bool use_crf, std::uint64_t seed) {
  Rng rng(seed);
  bert::add_dense(p, "tagger", hidden, labels, rng);
  if (use_crf) p["crf/transitions"] = ad::Tensor<Real>::zeros({labels + 2, labels + 2}, true);
}

template <typename Real>
void add_pair_head(ParamMap<Real>& p, std::size_t hidden, std::uint64_t seed, std::size_t classes = 3) {
  Rng rng(seed);
  bert::add_dense(p, "classifier", hidden, classes, rng);
}

template <typename Real>
std::vector<bert::SequenceView> views_of(std::span<const AlignedSentence> batch) {
  std::vector<bert::SequenceView> v;
  for (const auto& s : batch) v.push_back({s.ids, s.segments, s.ids.size()});
  return v;
}

template <typename Real>
bool has_crf(const ParamMap<Real>& p) {
  return p.count("crf/transitions") > 0;
}

template <typename Real>
crf::CrfParams<Real> crf_of(const ParamMap<Real>& p) {
  const auto& t = bert::param(p, "crf/transitions");
  return {t, t.rows() - 2};
}

/// Per-word emission scores [words, K] of every sentence in the batch.
template <typename Real>
std::vector<ad::Tensor<Real>> tagging_emissions(std::span<const AlignedSentence> batch, const ParamMap<Real>& p,
                                                const bert::BertConfig& c, const bert::ForwardOptions& opt) {
  const auto views = views_of<Real>(batch);
  const auto enc = bert::encode_batch<Real>(views, p, c, opt);
  std::vector<int> rows;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (int a : batch[b].active) rows.push_back(static_cast<int>(enc.offsets[b]) + a);
  const auto all = bert::dense(p, "tagger", ad::embedding_lookup<Real>(enc.hidden, rows));
  std::vector<ad::Tensor<Real>> out;
  std::size_t at = 0;
  for (const auto& s : batch) {
    out.push_back(batch.size() == 1 ? all : ad::slice(all, 0, at, s.words()));
    at += s.words();
  }
  return out;
}

/// Mean cross-entropy over every word of the batch, or the mean CRF negative
/// log-likelihood per sentence when the head has a CRF.
template <typename Real>
ad::Tensor<Real> tagging_loss(std::span<const AlignedSentence> batch, const ParamMap<Real>& p,
                              const bert::BertConfig& c, const bert::ForwardOptions& opt = {}) {
  const auto em = tagging_emissions(batch, p, c, opt);
  if (!has_crf(p)) {
    std::vector<int> labels;
    for (const auto& s : batch) labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    return ad::cross_entropy<Real>(em.size() == 1 ? em[0] : ad::concat(em, 0), labels);
  }
  const auto params = crf_of(p);
  std::vector<ad::Tensor<Real>> nll;
  for (std::size_t b = 0; b < batch.size(); ++b) nll.push_back(crf::log_likelihood(em[b], batch[b].labels, params));
  return ad::scale(ad::reduce_sum(ad::concat(nll, 0)), Real(-1) / static_cast<Real>(batch.size()));
}

/// Greedy per-word argmax, or Viterbi with a CRF head.
template <typename Real>
std::vector<std::vector<int>> predict_tags(std::span<const AlignedSentence> data, const ParamMap<Real>& p,
                                           const bert::BertConfig& c, std::size_t batch_size = 16) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const auto batch = data.subspan(i, std::min(batch_size, data.size() - i));
    for (const auto& e : tagging_emissions(batch, p, c, {})) {
      out.push_back(has_crf(p) ? crf::viterbi(e, crf_of(p)).path : bert::argmax_rows(e));
    }
  }
  return out;
}

template <typename Real>
ad::Tensor<Real> pair_logits(std::span<const EncodedPair> batch, const ParamMap<Real>& p, const bert::BertConfig& c,
                             const bert::ForwardOptions& opt = {}) {
  std::vector<bert::SequenceView> views;
  for (const auto& e : batch) views.push_back({e.ids, e.segments, e.ids.size()});
  const auto enc = bert::encode_batch<Real>(views, p, c, opt);
  std::vector<int> cls;
  for (std::size_t b = 0; b < batch.size(); ++b) cls.push_back(static_cast<int>(enc.offsets[b]));
  auto pooled = bert::pooled(enc.hidden, cls, p);
  pooled = ad::dropout(pooled, c.dropout, opt.dropout_rng, opt.mode == bert::Mode::train);
  return bert::dense(p, "classifier", pooled);
}

template <typename Real>
ad::Tensor<Real> pair_loss(std::span<const EncodedPair> batch, const ParamMap<Real>& p, const bert::BertConfig& c,
                           const bert::ForwardOptions& opt = {}) {
  std::vector<int> labels;
  for (const auto& e : batch) labels.push_back(e.label);
  return ad::cross_entropy<Real>(pair_logits(batch, p, c, opt), labels);
}

template <typename Real>
std::vector<int> predict_pairs(std::span<const EncodedPair> data, const ParamMap<Real>& p, const bert::BertConfig& c,
                               std::size_t batch_size = 16) {
  std::vector<int> out;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const auto pred = bert::argmax_rows(pair_logits(data.subspan(i, std::min(batch_size, data.size() - i)), p, c));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

// ---- supervised training loop --------------------------------------------------------

struct FitConfig {
  double lr = 3e-5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t patience = 3;
  /// 0 means no epoch limit (early stopping decides).
  std::size_t max_epochs = 0;
  double clip_norm = 0.0;
};

inline void to_json(nlohmann::json& j, const FitConfig& c) {
  j = nlohmann::json{{"lr", c.lr},           {"batch_size", c.batch_size}, {"seed", c.seed},
                     {"patience", c.patience}, {"max_epochs", c.max_epochs}, {"clip_norm", c.clip_norm}};
}

/// Batch loss; a null generator means evaluation mode.
template <typename Real, typename Example>
using LossFn = std::function<ad::Tensor<Real>(std::span<const Example>, const ParamMap<Real>&, Rng*)>;

template <typename Real, typename Example>
double mean_loss(const std::vector<Example>& data, const ParamMap<Real>& p, const LossFn<Real, Example>& loss,
                 std::size_t batch_size = 32) {
  if (data.empty()) throw DataError("no evaluation examples");
  double total = 0;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - i);
    total += static_cast<double>(loss(std::span<const Example>(data.data() + i, n), p, nullptr).item()) *
             static_cast<double>(n);
  }
  return total / static_cast<double>(data.size());
}

/// Adam over seeded shuffled batches.
template <typename Real, typename Example>
class Fitter {
 public:
  Fitter(const std::vector<Example>& train, ParamMap<Real>& params, LossFn<Real, Example> loss, const FitConfig& cfg)
      : train_(train), params_(params), loss_(std::move(loss)), cfg_(cfg),
        sampler_(train.size(), cfg.batch_size, Rng(cfg.seed).derive(0)), dropout_(Rng(cfg.seed).derive(1)) {}

  double step() {
    std::vector<Example> batch;
    for (auto i : sampler_.next()) batch.push_back(train_[i]);
    zero_grads(params_);
    const auto loss = loss_(batch, params_, &dropout_);
    ad::backward(loss);
    adam_step(params_, state_, {cfg_.lr, 0.9, 0.999, 1e-8, cfg_.clip_norm});
    ++steps_;
    return static_cast<double>(loss.item());
  }

  /// One pass worth of steps (ceil(n / batch)).
  void epoch() {
    const std::size_t n = (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    for (std::size_t i = 0; i < n; ++i) step();
  }

  std::size_t steps() const { return steps_; }

 private:
  const std::vector<Example>& train_;
  ParamMap<Real>& params_;
  LossFn<Real, Example> loss_;
  FitConfig cfg_;
  BatchSampler sampler_;
  Rng dropout_;
  AdamState state_;
  std::size_t steps_ = 0;
};

/// Epochs with early stopping on the development loss; best weights restored.
template <typename Real, typename Example>
EarlyStoppingResult fit(const std::vector<Example>& train, const std::vector<Example>& dev, ParamMap<Real>& params,
                        const LossFn<Real, Example>& loss, const FitConfig& cfg) {
  Fitter<Real, Example> fitter(train, params, loss, cfg);
  return train_until_stopped<ParamMap<Real>>(
      [&](std::size_t) {
        fitter.epoch();
        return mean_loss(dev, params, loss, cfg.batch_size);
      },
      [&] { return bert::clone(params); },
      [&](const ParamMap<Real>& best) {
        for (auto& [name, t] : params) {
          const auto src = best.at(name).data();
          std::copy(src.begin(), src.end(), t.mutable_data().begin());
        }
      },
      cfg.patience, cfg.max_epochs);
}

/// Steps until `reached()` holds, checked every `check_every` steps; returns
/// the step count or nullopt when `max_steps` runs out.
template <typename Real, typename Example>
std::optional<std::size_t> steps_until(const std::vector<Example>& train, ParamMap<Real>& params,
                                       const LossFn<Real, Example>& loss, const FitConfig& cfg,
                                       const std::function<bool()>& reached, std::size_t max_steps,
                                       std::size_t check_every = 1) {
  Fitter<Real, Example> fitter(train, params, loss, cfg);
  while (fitter.steps() < max_steps) {
    fitter.step();
    if (fitter.steps() % check_every == 0 && reached()) return fitter.steps();
  }
  return std::nullopt;
}

template <typename Real>
LossFn<Real, AlignedSentence> tagging_objective(const bert::BertConfig& c) {
  return [c](std::span<const AlignedSentence> b, const ParamMap<Real>& p, Rng* rng) {
    return tagging_loss<Real>(b, p, c, {rng ? bert::Mode::train : bert::Mode::eval, rng, nullptr});
  };
}

template <typename Real>
LossFn<Real, EncodedPair> pair_objective(const bert::BertConfig& c) {
  return [c](std::span<const EncodedPair> b, const ParamMap<Real>& p, Rng* rng) {
    return pair_loss<Real>(b, p, c, {rng ? bert::Mode::train : bert::Mode::eval, rng, nullptr});
  };
}

/// Word accuracy of predicted tags against the aligned gold labels.
inline double word_accuracy(std::span<const AlignedSentence> data, const std::vector<std::vector<int>>& pred) {
  std::vector<std::vector<int>> gold;
  for (const auto& s : data) gold.push_back(s.labels);
  return metrics::accuracy(gold, pred);
}

}  // namespace hlm::finetune
