#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/error.hpp"
#include "hlm/rng.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/tokenizer.hpp"

namespace hlm {

enum class NspLabel { is_next, not_next };

inline const char* to_string(NspLabel l) { return l == NspLabel::is_next ? "IsNext" : "NotNext"; }

/// One packed <CLS, S1, SEP, S2, SEP, PAD...> example.
struct PretrainInstance {
  std::vector<int> ids;
  std::vector<int> segment_ids;
  std::vector<int> mlm_positions;
  std::vector<int> mlm_labels;
  NspLabel nsp_label = NspLabel::is_next;
  int attention_length = 0;

  friend bool operator==(const PretrainInstance&, const PretrainInstance&) = default;
};

struct MaskingPolicy {
  double select_prob = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;
  std::uint64_t rng_seed = 0;
  /// Select one eligible position when the coin flips select none.
  bool force_minimum = true;

  void validate() const {
    if (!(select_prob > 0.0 && select_prob < 1.0)) throw ConfigError("select_prob must lie in (0, 1)");
    if (mask_frac < 0 || random_frac < 0 || keep_frac < 0 ||
        std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) {
      throw ConfigError("mask_frac + random_frac + keep_frac must equal 1");
    }
  }
};

/// Truncates the longer segment from its end, one token at a time, until the
/// pair fits `budget`. On equal lengths the first segment is trimmed.
inline void truncate_pair(std::vector<int>& first, std::vector<int>& second, std::size_t budget) {
  while (first.size() + second.size() > budget) {
    if (first.size() >= second.size()) {
      first.pop_back();
    } else {
      second.pop_back();
    }
  }
}

/// Lays out <CLS, a, SEP, b, SEP> padded to max_len; truncates as needed.
inline PretrainInstance pack_pair(std::vector<int> first, std::vector<int> second, std::size_t max_len,
                                  NspLabel label = NspLabel::is_next) {
  if (max_len < 8) throw ConfigError("max_len must be at least 8, got " + std::to_string(max_len));
  truncate_pair(first, second, max_len - 3);
  PretrainInstance inst;
  inst.nsp_label = label;
  inst.ids.reserve(max_len);
  inst.ids.push_back(special::cls);
  inst.ids.insert(inst.ids.end(), first.begin(), first.end());
  inst.ids.push_back(special::sep);
  inst.segment_ids.assign(inst.ids.size(), 0);
  inst.ids.insert(inst.ids.end(), second.begin(), second.end());
  inst.ids.push_back(special::sep);
  inst.segment_ids.resize(inst.ids.size(), 1);
  inst.attention_length = static_cast<int>(inst.ids.size());
  inst.ids.resize(max_len, special::pad);
  inst.segment_ids.resize(max_len, 0);
  return inst;
}

/// Sentence pairs for next-sentence prediction. With probability
/// 1 - negative_prob the second segment is the following sentence of the same
/// document; otherwise a uniformly drawn sentence from another document.
inline std::vector<PretrainInstance> build_sentence_pairs(const std::vector<Document>& documents,
                                                          const Vocabulary& vocab, std::size_t max_len,
                                                          double negative_prob, std::uint64_t rng_seed) {
  if (max_len < 8) throw ConfigError("max_len must be at least 8, got " + std::to_string(max_len));
  if (negative_prob < 0.0 || negative_prob > 1.0) throw ConfigError("negative_prob must lie in [0, 1]");
  if (negative_prob > 0.0 && documents.size() < 2) {
    throw ConfigError("negative sampling needs at least 2 documents, got " + std::to_string(documents.size()));
  }
  std::vector<std::vector<std::vector<int>>> encoded(documents.size());
  std::vector<std::size_t> offsets{0};
  for (std::size_t d = 0; d < documents.size(); ++d) {
    for (const auto& s : documents[d].sentences) encoded[d].push_back(encode(s, vocab).ids);
    offsets.push_back(offsets.back() + encoded[d].size());
  }
  const std::size_t total = offsets.back();

  Rng rng(rng_seed);
  std::vector<PretrainInstance> out;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    const std::size_t own = encoded[d].size();
    for (std::size_t i = 0; i + 1 < own; ++i) {
      const bool negative = negative_prob > 0.0 && total > own && rng.bernoulli(negative_prob);
      if (!negative) {
        out.push_back(pack_pair(encoded[d][i], encoded[d][i + 1], max_len, NspLabel::is_next));
        continue;
      }
      std::size_t k = rng.uniform_index(total - own);
      if (k >= offsets[d]) k += own;  // skip the current document
      const auto doc = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), k) - offsets.begin() - 1);
      out.push_back(pack_pair(encoded[d][i], encoded[doc][k - offsets[doc]], max_len, NspLabel::not_next));
    }
  }
  return out;
}

inline bool mlm_eligible(int id) { return id != special::cls && id != special::sep && id != special::pad; }

/// 80/10/10 masking over positions other than CLS, SEP and PAD.
inline PretrainInstance apply_mlm_masking(const PretrainInstance& instance, const MaskingPolicy& policy,
                                          std::size_t vocab_size, Rng& rng) {
  if (!instance.mlm_positions.empty()) throw ContractError("instance is already masked");
  if (vocab_size <= special::count) throw ConfigError("vocabulary has no non-special tokens");
  PretrainInstance out = instance;
  std::vector<int> eligible;
  for (int i = 0; i < instance.attention_length; ++i)
    if (mlm_eligible(instance.ids[static_cast<std::size_t>(i)])) eligible.push_back(i);
  std::vector<int> selected;
  for (int p : eligible)
    if (rng.bernoulli(policy.select_prob)) selected.push_back(p);
  if (selected.empty() && policy.force_minimum && !eligible.empty()) {
    selected.push_back(eligible[rng.uniform_index(eligible.size())]);
  }
  const auto random_span = static_cast<std::uint64_t>(vocab_size - special::count);
  for (int p : selected) {
    const auto pos = static_cast<std::size_t>(p);
    out.mlm_positions.push_back(p);
    out.mlm_labels.push_back(instance.ids[pos]);
    const double u = rng.uniform();
    if (u < policy.mask_frac) {
      out.ids[pos] = special::mask;
    } else if (u < policy.mask_frac + policy.random_frac) {
      out.ids[pos] = special::count + static_cast<int>(rng.uniform_index(random_span));
    }
  }
  return out;
}

/// Masks a stream of instances with one generator seeded from the policy.
inline std::vector<PretrainInstance> mask_instances(const std::vector<PretrainInstance>& instances,
                                                    const MaskingPolicy& policy, std::size_t vocab_size) {
  policy.validate();
  Rng rng(policy.rng_seed);
  std::vector<PretrainInstance> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(apply_mlm_masking(inst, policy, vocab_size, rng));
  return out;
}

/// Throws ContractError describing the first violated invariant.
inline void validate_instance(const PretrainInstance& inst, std::size_t max_len, std::size_t vocab_size) {
  const auto fail = [](const std::string& why) { throw ContractError("invalid pretraining instance: " + why); };
  if (inst.ids.size() != max_len || inst.segment_ids.size() != max_len) fail("length differs from max_len");
  const auto n = static_cast<std::size_t>(inst.attention_length);
  if (n < 3 || n > max_len) fail("attention_length out of range");
  if (inst.ids[0] != special::cls) fail("first token is not CLS");
  if (inst.ids[n - 1] != special::sep) fail("last real token is not SEP");
  std::size_t seps = 0, first_sep = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (inst.ids[i] == special::pad) fail("PAD inside the real span");
    if (inst.ids[i] < 0 || static_cast<std::size_t>(inst.ids[i]) >= vocab_size) fail("token id out of range");
    if (inst.ids[i] == special::sep && seps++ == 0) first_sep = i;
  }
  if (seps != 2) fail("expected exactly two SEP tokens");
  for (std::size_t i = 0; i < max_len; ++i) {
    const int expect = i < n && i > first_sep ? 1 : 0;
    if (inst.segment_ids[i] != expect) fail("segment ids do not follow the layout");
    if (i >= n && inst.ids[i] != special::pad) fail("padding is not PAD");
  }
  if (inst.mlm_positions.size() != inst.mlm_labels.size()) fail("mlm positions/labels length mismatch");
  for (std::size_t k = 0; k < inst.mlm_positions.size(); ++k) {
    const int p = inst.mlm_positions[k];
    if (p <= 0 || static_cast<std::size_t>(p) >= n) fail("mlm position outside the real span");
    if (k > 0 && p <= inst.mlm_positions[k - 1]) fail("mlm positions not strictly increasing");
    const int label = inst.mlm_labels[k];
    if (!mlm_eligible(label) || label >= static_cast<int>(vocab_size)) fail("mlm label is special or out of range");
    const int shown = inst.ids[static_cast<std::size_t>(p)];
    if (!mlm_eligible(shown)) fail("mlm position is CLS/SEP/PAD");
  }
}

inline nlohmann::ordered_json to_json(const PretrainInstance& inst) {
  nlohmann::ordered_json j;
  j["ids"] = inst.ids;
  j["segment_ids"] = inst.segment_ids;
  j["mlm_positions"] = inst.mlm_positions;
  j["mlm_labels"] = inst.mlm_labels;
  j["nsp_label"] = to_string(inst.nsp_label);
  j["attention_length"] = inst.attention_length;
  return j;
}

inline PretrainInstance instance_from_json(const nlohmann::json& j) {
  PretrainInstance inst;
  inst.ids = j.at("ids").get<std::vector<int>>();
  inst.segment_ids = j.at("segment_ids").get<std::vector<int>>();
  inst.mlm_positions = j.at("mlm_positions").get<std::vector<int>>();
  inst.mlm_labels = j.at("mlm_labels").get<std::vector<int>>();
  const auto label = j.at("nsp_label").get<std::string>();
  if (label == "IsNext") {
    inst.nsp_label = NspLabel::is_next;
  } else if (label == "NotNext") {
    inst.nsp_label = NspLabel::not_next;
  } else {
    throw DataError("unknown nsp_label '" + label + "'");
  }
  inst.attention_length = j.at("attention_length").get<int>();
  return inst;
}

inline void write_instances(const std::vector<PretrainInstance>& instances, const std::string& path) {
  std::string out;
  for (const auto& inst : instances) {
    out += to_json(inst).dump();
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<PretrainInstance> read_instances(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<PretrainInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("malformed instance: ") + e.what());
    } catch (const DataError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

}  // namespace hlm
