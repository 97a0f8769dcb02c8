#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/autodiff.hpp"
#include "hlm/error.hpp"
#include "hlm/pretrain_data.hpp"
#include "hlm/rng.hpp"

namespace hlm::bert {

struct BertConfig {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 2;
  std::size_t intermediate = 256;
  std::size_t max_positions = 128;
  std::size_t vocab_size = 200;
  double dropout = 0.1;
  std::size_t type_vocab = 2;

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || intermediate == 0 || max_positions == 0)
      throw ConfigError("bert: layers, hidden, heads, intermediate and max_positions must be positive");
    if (hidden % heads != 0)
      throw ConfigError("bert: hidden size " + std::to_string(hidden) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    if (vocab_size <= special::count) throw ConfigError("bert: vocab_size must exceed the special tokens");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("bert: dropout must lie in [0, 1)");
    if (type_vocab != 2) throw ConfigError("bert: type_vocab must be 2");
  }

  /// BERT-BASE geometry.
  static BertConfig base(std::size_t vocab_size) {
    return {12, 768, 12, 3072, 512, vocab_size, 0.1, 2};
  }

  friend bool operator==(const BertConfig&, const BertConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BertConfig& c) {
  j = nlohmann::json{{"layers", c.layers},         {"hidden", c.hidden},
                     {"heads", c.heads},           {"intermediate", c.intermediate},
                     {"max_positions", c.max_positions}, {"vocab_size", c.vocab_size},
                     {"dropout", c.dropout},       {"type_vocab", c.type_vocab}};
}

/// Missing keys keep their defaults; intermediate defaults to 4 * hidden.
inline void from_json(const nlohmann::json& j, BertConfig& c) {
  const BertConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.intermediate = j.value("intermediate", 4 * c.hidden);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.dropout = j.value("dropout", d.dropout);
  c.type_vocab = j.value("type_vocab", d.type_vocab);
}

template <typename Real>
using ParamMap = std::map<std::string, ad::Tensor<Real>>;

template <typename Real>
const ad::Tensor<Real>& param(const ParamMap<Real>& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

/// Deep copy with fresh leaves.
template <typename Real>
ParamMap<Real> clone(const ParamMap<Real>& p) {
  ParamMap<Real> out;
  for (const auto& [name, t] : p) out.emplace(name, t.detach(t.requires_grad()));
  return out;
}

template <typename Real>
std::size_t parameter_count(const ParamMap<Real>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.numel();
  return n;
}

/// Standard-normal draws truncated to [-2, 2], via rejection.
inline double truncated_normal(Rng& rng) {
  for (;;) {
    const double z = rng.normal();
    if (std::abs(z) <= 2.0) return z;
  }
}

/// Std of a standard normal truncated to [-2, 2]: sqrt(1 - 2*2*phi(2)/(2*Phi(2)-1)).
inline double truncated_normal_std() {
  const double phi = std::exp(-2.0) / std::sqrt(2.0 * std::acos(-1.0));
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  return std::sqrt(1.0 - 4.0 * phi / mass);
}

template <typename Real>
ad::Tensor<Real> init_matrix(ad::Shape shape, Rng& rng, double std) {
  std::vector<Real> v(ad::numel(shape));
  const double k = std / truncated_normal_std();
  for (auto& x : v) x = static_cast<Real>(k * truncated_normal(rng));
  return ad::Tensor<Real>::from(std::move(shape), std::move(v), true);
}

template <typename Real>
void add_dense(ParamMap<Real>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               double std = 0.02) {
  p[name + "/w"] = init_matrix<Real>({in, out}, rng, std);
  p[name + "/b"] = ad::Tensor<Real>::zeros({out}, true);
}

template <typename Real>
void add_layer_norm(ParamMap<Real>& p, const std::string& name, std::size_t n) {
  p[name + "/gain"] = ad::Tensor<Real>::full({n}, Real(1), true);
  p[name + "/bias"] = ad::Tensor<Real>::zeros({n}, true);
}

/// Encoder, MLM and NSP parameters. Matrices are [in, out].
template <typename Real>
ParamMap<Real> init_weights(const BertConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ParamMap<Real> p;
  const std::size_t H = c.hidden;
  p["embeddings/token"] = init_matrix<Real>({c.vocab_size, H}, rng, 0.02);
  p["embeddings/position"] = init_matrix<Real>({c.max_positions, H}, rng, 0.02);
  p["embeddings/segment"] = init_matrix<Real>({c.type_vocab, H}, rng, 0.02);
  add_layer_norm(p, "embeddings/ln", H);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + "/";
    for (const char* m : {"query", "key", "value", "output"}) add_dense(p, pre + "attn/" + m, H, H, rng);
    add_layer_norm(p, pre + "attn_ln", H);
    add_dense(p, pre + "ffn/in", H, c.intermediate, rng);
    add_dense(p, pre + "ffn/out", c.intermediate, H, rng);
    add_layer_norm(p, pre + "ffn_ln", H);
  }
  add_dense(p, "mlm/transform", H, H, rng);
  add_layer_norm(p, "mlm/ln", H);
  p["mlm/bias"] = ad::Tensor<Real>::zeros({c.vocab_size}, true);
  add_dense(p, "pooler", H, H, rng);
  add_dense(p, "nsp", H, 2, rng);
  return p;
}

template <typename Real>
ad::Tensor<Real> dense(const ParamMap<Real>& p, const std::string& name, const ad::Tensor<Real>& x) {
  return ad::add(ad::matmul(x, param(p, name + "/w")), param(p, name + "/b"));
}

template <typename Real>
ad::Tensor<Real> layer_norm(const ParamMap<Real>& p, const std::string& name, const ad::Tensor<Real>& x) {
  return ad::layer_norm(x, param(p, name + "/gain"), param(p, name + "/bias"));
}

enum class Mode { train, eval };

/// One input sequence. Positions at or after attention_length are padding.
struct SequenceView {
  std::span<const int> ids;
  std::span<const int> segments;
  std::size_t attention_length = 0;
};

inline SequenceView view(const PretrainInstance& inst) {
  return {inst.ids, inst.segment_ids, static_cast<std::size_t>(inst.attention_length)};
}

/// Same instance restricted to its real positions.
inline SequenceView real_view(const PretrainInstance& inst) {
  const auto n = static_cast<std::size_t>(inst.attention_length);
  return {std::span<const int>(inst.ids).first(n), std::span<const int>(inst.segment_ids).first(n), n};
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* dropout_rng = nullptr;
  /// When set, receives softmax weights per (sequence, layer, head).
  std::vector<ad::Tensor<double>>* attention_trace = nullptr;
};

/// Hidden states of a batch, rows stacked sequence after sequence.
template <typename Real>
struct Encoded {
  ad::Tensor<Real> hidden;
  std::vector<std::size_t> offsets;  ///< first row of each sequence, plus the total
  std::size_t length(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
};

template <typename Real>
Encoded<Real> encode_batch(std::span<const SequenceView> batch, const ParamMap<Real>& p, const BertConfig& c,
                           const ForwardOptions& opt = {}) {
  if (batch.empty()) throw ContractError("encode: empty batch");
  const bool train = opt.mode == Mode::train && c.dropout > 0.0;
  if (train && opt.dropout_rng == nullptr) throw ContractError("encode: train mode needs a dropout generator");
  Encoded<Real> out;
  out.offsets.push_back(0);
  std::vector<int> ids, segs, positions;
  for (const auto& s : batch) {
    if (s.ids.empty()) throw ContractError("encode: empty sequence");
    if (s.ids.size() > c.max_positions)
      throw ContractError("encode: sequence of " + std::to_string(s.ids.size()) + " exceeds max_positions " +
                          std::to_string(c.max_positions));
    if (s.segments.size() != s.ids.size()) throw ContractError("encode: segment ids do not match token ids");
    if (s.attention_length == 0 || s.attention_length > s.ids.size())
      throw ContractError("encode: attention_length out of range");
    ids.insert(ids.end(), s.ids.begin(), s.ids.end());
    segs.insert(segs.end(), s.segments.begin(), s.segments.end());
    for (std::size_t i = 0; i < s.ids.size(); ++i) positions.push_back(static_cast<int>(i));
    out.offsets.push_back(out.offsets.back() + s.ids.size());
  }
  const auto drop = [&](const ad::Tensor<Real>& x) { return ad::dropout(x, c.dropout, opt.dropout_rng, train); };

  auto x = ad::add(ad::add(ad::embedding_lookup<Real>(param(p, "embeddings/token"), ids),
                           ad::embedding_lookup<Real>(param(p, "embeddings/position"), positions)),
                   ad::embedding_lookup<Real>(param(p, "embeddings/segment"), segs));
  x = drop(layer_norm(p, "embeddings/ln", x));

  const std::size_t d = c.head_dim();
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(d));
  std::vector<ad::Tensor<Real>> masks(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t S = batch[b].ids.size(), n = batch[b].attention_length;
    if (n == S) continue;
    std::vector<Real> m(S * S, Real(0));
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = n; j < S; ++j) m[i * S + j] = -std::numeric_limits<Real>::infinity();
    masks[b] = ad::Tensor<Real>::from({S, S}, std::move(m));
  }

  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + "/";
    const auto q = dense(p, pre + "attn/query", x);
    const auto k = dense(p, pre + "attn/key", x);
    const auto v = dense(p, pre + "attn/value", x);
    std::vector<ad::Tensor<Real>> contexts;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t off = out.offsets[b], S = out.length(b);
      const auto qb = ad::slice(q, 0, off, S), kb = ad::slice(k, 0, off, S), vb = ad::slice(v, 0, off, S);
      std::vector<ad::Tensor<Real>> heads;
      for (std::size_t h = 0; h < c.heads; ++h) {
        const auto qh = ad::slice(qb, 1, h * d, d), kh = ad::slice(kb, 1, h * d, d), vh = ad::slice(vb, 1, h * d, d);
        auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_d);
        if (masks[b].defined()) scores = ad::add(scores, masks[b]);
        const auto probs = ad::softmax(scores);
        if (opt.attention_trace != nullptr) {
          opt.attention_trace->push_back(
              ad::Tensor<double>::from(probs.shape(), std::vector<double>(probs.data().begin(), probs.data().end())));
        }
        heads.push_back(ad::matmul(drop(probs), vh));
      }
      contexts.push_back(heads.size() == 1 ? heads[0] : ad::concat(heads, 1));
    }
    const auto context = contexts.size() == 1 ? contexts[0] : ad::concat(contexts, 0);
    x = layer_norm(p, pre + "attn_ln", ad::add(x, drop(dense(p, pre + "attn/output", context))));
    const auto ffn = dense(p, pre + "ffn/out", ad::gelu(dense(p, pre + "ffn/in", x)));
    x = layer_norm(p, pre + "ffn_ln", ad::add(x, drop(ffn)));
  }
  out.hidden = x;
  return out;
}

/// Hidden states [seq, H] of one sequence.
template <typename Real>
ad::Tensor<Real> encode(std::span<const int> ids, std::span<const int> segment_ids, std::size_t attention_length,
                        const ParamMap<Real>& p, const BertConfig& c, const ForwardOptions& opt = {}) {
  const SequenceView s{ids, segment_ids, attention_length};
  return encode_batch<Real>(std::span<const SequenceView>(&s, 1), p, c, opt).hidden;
}

/// Vocabulary logits [n, V] for selected hidden rows (tied output projection).
template <typename Real>
ad::Tensor<Real> mlm_logits(const ad::Tensor<Real>& hidden, std::span<const int> rows, const ParamMap<Real>& p) {
  const auto gathered = ad::embedding_lookup<Real>(hidden, rows);
  const auto h = layer_norm(p, "mlm/ln", ad::gelu(dense(p, "mlm/transform", gathered)));
  return ad::add(ad::matmul(h, ad::transpose(param(p, "embeddings/token"))), param(p, "mlm/bias"));
}

/// Pooled [CLS] representation: tanh(dense(cls)).
template <typename Real>
ad::Tensor<Real> pooled(const ad::Tensor<Real>& hidden, std::span<const int> cls_rows, const ParamMap<Real>& p) {
  return ad::tanh(dense(p, "pooler", ad::embedding_lookup<Real>(hidden, cls_rows)));
}

template <typename Real>
std::vector<int> argmax_rows(const ad::Tensor<Real>& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename Real>
struct PretrainLoss {
  ad::Tensor<Real> total;
  ad::Tensor<Real> mlm;
  ad::Tensor<Real> nsp;
  std::size_t mlm_correct = 0;
  std::size_t mlm_count = 0;
  std::size_t nsp_correct = 0;
  std::size_t nsp_count = 0;
};

/// MLM cross-entropy averaged over every masked position of the batch plus
/// NSP cross-entropy averaged over the batch.
template <typename Real>
PretrainLoss<Real> mlm_nsp_loss(const Encoded<Real>& enc, std::span<const PretrainInstance> batch,
                                const ParamMap<Real>& p) {
  if (batch.size() + 1 != enc.offsets.size()) throw ContractError("mlm_nsp_loss: batch does not match encoding");
  std::vector<int> rows, labels, cls, nsp_labels;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& inst = batch[b];
    if (inst.mlm_positions.empty()) throw ContractError("mlm_nsp_loss: instance has no masked positions");
    for (std::size_t k = 0; k < inst.mlm_positions.size(); ++k) {
      const auto pos = static_cast<std::size_t>(inst.mlm_positions[k]);
      if (pos >= enc.length(b)) throw ContractError("mlm_nsp_loss: masked position beyond the encoded sequence");
      rows.push_back(static_cast<int>(enc.offsets[b] + pos));
      labels.push_back(inst.mlm_labels[k]);
    }
    cls.push_back(static_cast<int>(enc.offsets[b]));
    nsp_labels.push_back(inst.nsp_label == NspLabel::is_next ? 0 : 1);
  }
  PretrainLoss<Real> out;
  const auto logits = mlm_logits(enc.hidden, rows, p);
  out.mlm = ad::cross_entropy<Real>(logits, labels);
  const auto nsp_logits = dense(p, "nsp", pooled(enc.hidden, cls, p));
  out.nsp = ad::cross_entropy<Real>(nsp_logits, nsp_labels);
  out.total = ad::add(out.mlm, out.nsp);
  const auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < pred.size(); ++i) out.mlm_correct += pred[i] == labels[i] ? 1 : 0;
  out.mlm_count = pred.size();
  const auto nsp_pred = argmax_rows(nsp_logits);
  for (std::size_t i = 0; i < nsp_pred.size(); ++i) out.nsp_correct += nsp_pred[i] == nsp_labels[i] ? 1 : 0;
  out.nsp_count = nsp_pred.size();
  return out;
}

/// Encodes the real positions of each instance and scores MLM + NSP.
template <typename Real>
PretrainLoss<Real> pretrain_loss(std::span<const PretrainInstance> batch, const ParamMap<Real>& p,
                                 const BertConfig& c, const ForwardOptions& opt = {}) {
  std::vector<SequenceView> views;
  for (const auto& inst : batch) views.push_back(real_view(inst));
  return mlm_nsp_loss(encode_batch<Real>(views, p, c, opt), batch, p);
}

}  // namespace hlm::bert
