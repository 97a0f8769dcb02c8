#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hlm/error.hpp"

namespace hlm::metrics {

template <typename T>
double accuracy(const std::vector<T>& gold, const std::vector<T>& pred) {
  if (gold.size() != pred.size())
    throw ContractError("accuracy: " + std::to_string(gold.size()) + " gold vs " + std::to_string(pred.size()) +
                        " predicted labels");
  if (gold.empty()) throw ContractError("accuracy: no labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += gold[i] == pred[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

/// Token-level accuracy pooled over sentences.
template <typename T>
double accuracy(const std::vector<std::vector<T>>& gold, const std::vector<std::vector<T>>& pred) {
  if (gold.size() != pred.size()) throw ContractError("accuracy: sentence counts differ");
  std::vector<T> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != pred[i].size())
      throw ContractError("accuracy: sentence " + std::to_string(i) + " lengths differ");
    g.insert(g.end(), gold[i].begin(), gold[i].end());
    p.insert(p.end(), pred[i].begin(), pred[i].end());
  }
  return accuracy(g, p);
}

struct ClassScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  /// Neither predicted nor present in gold.
  bool absent = false;

  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

/// One-vs-rest counts per class, in the order of `classes`.
inline std::vector<std::pair<std::string, ClassScore>> per_class_f1(const std::vector<std::string>& gold,
                                                                    const std::vector<std::string>& pred,
                                                                    const std::vector<std::string>& classes) {
  if (gold.size() != pred.size()) throw ContractError("per_class_f1: gold and predicted lengths differ");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
  std::vector<std::pair<std::string, ClassScore>> out;
  for (const auto& c : classes) out.emplace_back(c, ClassScore{});
  const auto find = [&](const std::string& label, const char* side, std::size_t i) {
    const auto it = index.find(label);
    if (it == index.end())
      throw DataError(std::string("unknown ") + side + " label '" + label + "' at position " + std::to_string(i));
    return it->second;
  };
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = find(gold[i], "gold", i), p = find(pred[i], "predicted", i);
    if (g == p) {
      ++out[g].second.tp;
    } else {
      ++out[g].second.fn;
      ++out[p].second.fp;
    }
  }
  for (auto& [c, s] : out) s.absent = s.tp + s.fp + s.fn == 0;
  return out;
}

// ---- BIO2 entities -----------------------------------------------------------

struct EntitySpan {
  std::string type;
  std::size_t start = 0;  ///< inclusive word index
  std::size_t end = 0;    ///< inclusive word index

  friend auto operator<=>(const EntitySpan&, const EntitySpan&) = default;
};

namespace detail {

struct Bio {
  char kind;  // 'O', 'B' or 'I'
  std::string_view type;
};

inline Bio parse_bio(std::string_view tag, std::size_t position) {
  if (tag == "O") return {'O', {}};
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') return {tag[0], tag.substr(2)};
  throw DataError("malformed BIO2 tag '" + std::string(tag) + "' at position " + std::to_string(position));
}

}  // namespace detail

/// Throws DataError on the first I-X that does not follow B-X or I-X.
inline void validate_bio2(const std::vector<std::string>& tags) {
  std::string_view open;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto t = detail::parse_bio(tags[i], i);
    if (t.kind == 'I' && t.type != open)
      throw DataError("BIO2 violation: '" + tags[i] + "' at position " + std::to_string(i) + " does not continue an " +
                      std::string(t.type) + " entity");
    open = t.kind == 'O' ? std::string_view{} : t.type;
  }
}

/// Spans of a BIO2 sequence. With `repair`, an I-X without a matching head is
/// read as B-X; without it such input is rejected.
inline std::vector<EntitySpan> decode_spans(const std::vector<std::string>& tags, bool repair = false) {
  if (!repair) validate_bio2(tags);
  std::vector<EntitySpan> spans;
  bool open = false;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto t = detail::parse_bio(tags[i], i);
    if (t.kind == 'I' && open && spans.back().type == t.type) {
      spans.back().end = i;
      continue;
    }
    open = t.kind != 'O';
    if (open) spans.push_back({std::string(t.type), i, i});
  }
  return spans;
}

/// Rewrites a predicted sequence into valid BIO2 by the repair rule.
inline std::vector<std::string> repair_bio2(const std::vector<std::string>& tags) {
  std::vector<std::string> out(tags.size(), "O");
  for (const auto& s : decode_spans(tags, true)) {
    out[s.start] = "B-" + s.type;
    for (std::size_t i = s.start + 1; i <= s.end; ++i) out[i] = "I-" + s.type;
  }
  return out;
}

struct EntityScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  /// No entities on either side; F1 is 1 by convention.
  bool degenerate = false;

  double precision() const { return tp + fp == 0 ? (degenerate ? 1.0 : 0.0) : double(tp) / double(tp + fp); }
  double recall() const { return tp + fn == 0 ? (degenerate ? 1.0 : 0.0) : double(tp) / double(tp + fn); }
  double f1() const {
    if (degenerate) return 1.0;
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

/// Exact (type, start, end) matches pooled over sentences; gold must be valid
/// BIO2, predictions are repaired. A non-empty `only_type` restricts scoring
/// to that entity type.
inline EntityScore entity_micro_f1(const std::vector<std::vector<std::string>>& gold,
                                   const std::vector<std::vector<std::string>>& pred,
                                   const std::string& only_type = {}) {
  if (gold.size() != pred.size()) throw ContractError("entity_micro_f1: sentence counts differ");
  EntityScore s;
  for (std::size_t k = 0; k < gold.size(); ++k) {
    if (gold[k].size() != pred[k].size())
      throw ContractError("entity_micro_f1: sentence " + std::to_string(k) + " lengths differ");
    std::set<EntitySpan> g, p;
    for (auto& e : decode_spans(gold[k], false))
      if (only_type.empty() || e.type == only_type) g.insert(std::move(e));
    for (auto& e : decode_spans(pred[k], true))
      if (only_type.empty() || e.type == only_type) p.insert(std::move(e));
    for (const auto& e : p) (g.count(e) ? s.tp : s.fp) += 1;
    for (const auto& e : g) s.fn += p.count(e) ? 0 : 1;
  }
  s.degenerate = s.tp + s.fp + s.fn == 0;
  return s;
}

inline EntityScore entity_micro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred) {
  return entity_micro_f1(std::vector<std::vector<std::string>>{gold}, std::vector<std::vector<std::string>>{pred});
}

/// Entity types seen in gold or (repaired) predictions, sorted.
inline std::vector<std::string> entity_types(const std::vector<std::vector<std::string>>& gold,
                                             const std::vector<std::vector<std::string>>& pred) {
  std::set<std::string> types;
  for (const auto& s : gold)
    for (const auto& e : decode_spans(s, false)) types.insert(e.type);
  for (const auto& s : pred)
    for (const auto& e : decode_spans(s, true)) types.insert(e.type);
  return {types.begin(), types.end()};
}

}  // namespace hlm::metrics
