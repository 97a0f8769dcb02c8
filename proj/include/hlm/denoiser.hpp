#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/bert.hpp"
#include "hlm/error.hpp"
#include "hlm/finetune.hpp"
#include "hlm/tokenizer.hpp"

namespace hlm::denoiser {

/// One masked copy of a sequence: `position` holds MASK, `label` is the
/// original token there.
struct MaskedQuery {
  std::vector<int> ids;
  std::vector<int> segments;
  int position = 0;
  int label = 0;
};

/// A BERT encoder with its MLM head as a masked-token scorer.
template <typename Real>
class BertScorer {
 public:
  BertScorer(const ParamMap<Real>& params, const bert::BertConfig& config) : params_(params), config_(config) {}

  /// Cross-entropy of each query's label at its masked position, all queries
  /// encoded as one batch.
  std::vector<double> cross_entropy(std::span<const MaskedQuery> queries) const {
    std::vector<bert::SequenceView> views;
    for (const auto& q : queries) views.push_back({q.ids, q.segments, q.ids.size()});
    const auto enc = bert::encode_batch<Real>(views, params_, config_);
    std::vector<int> rows;
    for (std::size_t b = 0; b < queries.size(); ++b) rows.push_back(static_cast<int>(enc.offsets[b]) + queries[b].position);
    const auto logits = bert::mlm_logits(enc.hidden, rows, params_);
    std::vector<double> out;
    const std::size_t V = logits.cols();
    for (std::size_t b = 0; b < queries.size(); ++b) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(logits.at(b, j)));
      double s = 0;
      for (std::size_t j = 0; j < V; ++j) s += std::exp(static_cast<double>(logits.at(b, j)) - mx);
      out.push_back(mx + std::log(s) - static_cast<double>(logits.at(b, static_cast<std::size_t>(queries[b].label))));
    }
    return out;
  }

 private:
  const ParamMap<Real>& params_;
  bert::BertConfig config_;
};

struct ScoredPair {
  finetune::NliPair pair;
  std::size_t token_count = 0;
  double ppl = 0.0;
};

/// Every non-special position of ⟨CLS, premise, SEP, hypothesis, SEP⟩ masked
/// in turn.
inline std::vector<MaskedQuery> masked_copies(const finetune::EncodedPair& e) {
  std::vector<MaskedQuery> out;
  for (std::size_t i = 0; i < e.ids.size(); ++i) {
    if (e.ids[i] == special::cls || e.ids[i] == special::sep) continue;
    MaskedQuery q{e.ids, e.segments, static_cast<int>(i), e.ids[i]};
    q.ids[i] = special::mask;
    out.push_back(std::move(q));
  }
  return out;
}

/// exp of the mean masked-position cross-entropy. `Scorer` provides
/// cross_entropy(span<const MaskedQuery>) -> vector<double>. With `batched`
/// false each copy runs as its own forward pass.
template <typename Scorer>
ScoredPair pseudo_perplexity(const finetune::NliPair& pair, const Scorer& scorer, const Vocabulary& vocab,
                             std::size_t max_positions, bool batched = true) {
  const auto queries = masked_copies(finetune::encode_pair(pair, vocab, max_positions));
  if (queries.empty()) throw DataError("cannot score a pair with no tokens: '" + pair.premise + "' / '" + pair.hypothesis + "'");
  std::vector<double> ce;
  if (batched) {
    ce = scorer.cross_entropy(queries);
  } else {
    for (const auto& q : queries) ce.push_back(scorer.cross_entropy(std::span<const MaskedQuery>(&q, 1)).at(0));
  }
  double sum = 0;
  for (double v : ce) sum += v;
  return {pair, queries.size(), std::exp(sum / static_cast<double>(ce.size()))};
}

struct Selection {
  std::vector<ScoredPair> retained;
  nlohmann::json report;
};

/// Lowest-ppl ceil(fraction * n) pairs, ascending; ties keep input order.
inline Selection select_top_fraction(const std::vector<ScoredPair>& scored, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("keep fraction must lie in (0, 1]");
  if (scored.empty()) throw DataError("no scored pairs to select from");
  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scored[a].ppl < scored[b].ppl; });
  const double want = fraction * static_cast<double>(scored.size());
  auto keep = static_cast<std::size_t>(std::ceil(want - 1e-9 * want));
  keep = std::clamp<std::size_t>(keep, 1, scored.size());
  Selection s;
  for (std::size_t i = 0; i < keep; ++i) s.retained.push_back(scored[order[i]]);
  std::vector<double> ppl;
  for (const auto& p : scored) ppl.push_back(p.ppl);
  std::sort(ppl.begin(), ppl.end());
  s.report = {{"total", scored.size()},
              {"retained", keep},
              {"fraction", fraction},
              {"threshold_ppl", s.retained.back().ppl},
              {"min_ppl", ppl.front()},
              {"median_ppl", ppl[ppl.size() / 2]},
              {"max_ppl", ppl.back()}};
  return s;
}

}  // namespace hlm::denoiser
