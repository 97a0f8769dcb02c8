#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlm/autodiff.hpp"
#include "hlm/bert.hpp"
#include "hlm/error.hpp"
#include "hlm/pretrain_data.hpp"
#include "hlm/rng.hpp"
#include "hlm/textnorm.hpp"

namespace hlm {

template <typename Real>
using ParamMap = bert::ParamMap<Real>;

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clipping threshold; 0 disables it.
  double clip_norm = 0.0;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t t = 0;
};

template <typename Real>
void zero_grads(ParamMap<Real>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

template <typename Real>
double grad_norm(const ParamMap<Real>& params) {
  double sq = 0;
  for (const auto& [name, t] : params)
    for (Real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// One bias-corrected Adam update from the gradients stored on each parameter.
template <typename Real>
void adam_step(ParamMap<Real>& params, AdamState& state, const AdamConfig& config) {
  for (const auto& [name, t] : params) {
    for (Real g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in parameter '" + name + "'");
    }
  }
  double clip = 1.0;
  if (config.clip_norm > 0.0) {
    const double norm = grad_norm(params);
    if (norm > config.clip_norm) clip = config.clip_norm / norm;
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(config.beta1, t), c2 = 1.0 - std::pow(config.beta2, t);
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.numel()) {
      if (!m.empty()) throw ContractError("adam: moment shape differs for '" + name + "'");
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = clip * static_cast<double>(g[i]);
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = static_cast<Real>(static_cast<double>(w[i]) - config.lr * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

// ---- checkpoints ------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'H', 'L', 'M', '1'};

template <typename Real>
struct Checkpoint {
  nlohmann::json config;
  ParamMap<Real> params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace detail

/// Container bytes: "HLM1", LE u32 metadata length, JSON metadata, then
/// little-endian float32 tensors in name order.
template <typename Real>
std::string serialize_checkpoint(const nlohmann::json& config, const ParamMap<Real>& params) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string data;
  for (const auto& [name, t] : params) {  // std::map iterates in lexicographic order
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", data.size()}});
    for (Real v : t.data()) detail::put_f32(data, static_cast<float>(v));
  }
  const std::string meta = nlohmann::json{{"config", config}, {"tensors", tensors}}.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  out += data;
  return out;
}

template <typename Real>
Checkpoint<Real> parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const auto fail = [&](const std::string& why) { throw DataError(origin + ": " + why); };
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) fail("not an HLM1 checkpoint");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t meta_len = detail::get_u32(raw + 4);
  if (8 + meta_len > bytes.size()) fail("truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(8, meta_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad metadata: ") + e.what());
  }
  const std::size_t base = 8 + meta_len;
  Checkpoint<Real> ck;
  ck.config = meta.value("config", nlohmann::json::object());
  for (const auto& entry : meta.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto shape = entry.at("shape").get<ad::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = ad::numel(shape);
    if (base + offset + 4 * n > bytes.size()) fail("tensor '" + name + "' runs past the end of the file");
    std::vector<Real> values(n);
    for (std::size_t i = 0; i < n; ++i)
      values[i] = static_cast<Real>(std::bit_cast<float>(detail::get_u32(raw + base + offset + 4 * i)));
    ck.params.emplace(name, ad::Tensor<Real>::from(std::move(shape), std::move(values), true));
  }
  return ck;
}

/// Writes via a temporary file and rename; the temporary is removed on failure.
template <typename Real>
void save_checkpoint(const std::string& path, const nlohmann::json& config, const ParamMap<Real>& params) {
  const std::string tmp = path + ".tmp";
  try {
    write_file(tmp, serialize_checkpoint(config, params));
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  return parse_checkpoint<Real>(read_file(path), path);
}

// ---- pre-training -----------------------------------------------------------

struct PretrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  /// Emit a checkpoint every this many steps; 0 only at the end.
  std::size_t checkpoint_every = 0;
  double clip_norm = 0.0;
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"seed", c.seed},   {"checkpoint_every", c.checkpoint_every}, {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
}

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
};

/// Cycles through shuffled epochs of [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, Rng rng) : n_(n), batch_(batch_size), rng_(rng) {
    if (n == 0) throw DataError("no training examples");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < std::min(batch_, n_)) {
      if (cursor_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_.begin(), order_.end());
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// MLM + NSP training with Adam at a constant rate. `on_checkpoint` is called
/// every checkpoint_every steps.
template <typename Real>
std::vector<CurvePoint> pretrain(const std::vector<PretrainInstance>& data, ParamMap<Real>& params,
                                 const bert::BertConfig& model, const PretrainConfig& config,
                                 const std::function<void(std::size_t, const ParamMap<Real>&)>& on_checkpoint = {}) {
  if (data.empty()) throw DataError("pretrain: no instances");
  model.validate();
  Rng root(config.seed);
  BatchSampler sampler(data.size(), config.batch_size, root.derive(0));
  Rng dropout_rng = root.derive(1);
  AdamState state;
  const AdamConfig adam{config.lr, 0.9, 0.999, 1e-8, config.clip_norm};
  std::vector<CurvePoint> curve;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<PretrainInstance> batch;
    for (auto i : sampler.next()) batch.push_back(data[i]);
    zero_grads(params);
    const auto loss = bert::pretrain_loss<Real>(batch, params, model, {bert::Mode::train, &dropout_rng, nullptr});
    ad::backward(loss.total);
    adam_step(params, state, adam);
    curve.push_back({step, static_cast<double>(loss.total.item())});
    if (on_checkpoint && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) on_checkpoint(step, params);
  }
  return curve;
}

struct PretrainAccuracy {
  double mlm = 0.0;
  double nsp = 0.0;
  double loss = 0.0;
};

/// Eval-mode accuracy on the instances' own masked positions and NSP labels.
template <typename Real>
PretrainAccuracy evaluate_pretraining(const std::vector<PretrainInstance>& data, const ParamMap<Real>& params,
                                      const bert::BertConfig& model, std::size_t batch_size = 16) {
  std::size_t mc = 0, mn = 0, nc = 0, nn = 0;
  double loss = 0;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const std::size_t end = std::min(data.size(), i + batch_size);
    const std::span<const PretrainInstance> batch(data.data() + i, end - i);
    const auto r = bert::pretrain_loss<Real>(batch, params, model);
    mc += r.mlm_correct;
    mn += r.mlm_count;
    nc += r.nsp_correct;
    nn += r.nsp_count;
    loss += static_cast<double>(r.total.item()) * static_cast<double>(end - i);
  }
  if (nn == 0) throw DataError("evaluate_pretraining: no instances");
  return {static_cast<double>(mc) / static_cast<double>(mn), static_cast<double>(nc) / static_cast<double>(nn),
          loss / static_cast<double>(nn)};
}

inline std::string loss_curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,loss\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", p.step, p.loss);
    out += buf;
  }
  return out;
}

// ---- early stopping and grid search ------------------------------------------

/// Stops once the dev loss has failed to improve on the best value for
/// `patience` consecutive evaluations.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 3) : patience_(patience) {
    if (patience == 0) throw ConfigError("patience must be positive");
  }

  /// Records one evaluation; true when it is a new best.
  bool observe(double dev_loss) {
    history_.push_back(dev_loss);
    if (history_.size() == 1 || dev_loss < best_) {
      best_ = dev_loss;
      best_epoch_ = history_.size();
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }

  bool should_stop() const { return bad_ >= patience_; }
  /// 1-based index of the best evaluation.
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  const std::vector<double>& history() const { return history_; }

 private:
  std::size_t patience_;
  std::vector<double> history_;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
};

struct EarlyStoppingResult {
  std::vector<double> history;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;
  bool stopped = false;
};

/// Runs epochs until early stopping fires and restores the best snapshot.
/// `max_epochs` = 0 means no limit.
template <typename Snapshot>
EarlyStoppingResult train_until_stopped(const std::function<double(std::size_t)>& epoch_then_dev_loss,
                                        const std::function<Snapshot()>& snapshot,
                                        const std::function<void(const Snapshot&)>& restore,
                                        std::size_t patience = 3, std::size_t max_epochs = 0) {
  EarlyStopping es(patience);
  std::optional<Snapshot> best;
  for (std::size_t epoch = 1; max_epochs == 0 || epoch <= max_epochs; ++epoch) {
    if (es.observe(epoch_then_dev_loss(epoch))) best = snapshot();
    if (es.should_stop()) break;
  }
  if (best) restore(*best);
  return {es.history(), es.best_epoch(), es.best_loss(), es.should_stop()};
}

/// Named axes, each a finite list of values. Points are enumerated with the
/// last axis varying fastest.
struct GridSpec {
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;

  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& [name, values] : axes) n *= values.size();
    return n;
  }

  nlohmann::ordered_json point(std::size_t index) const {
    nlohmann::ordered_json p = nlohmann::ordered_json::object();
    std::vector<std::size_t> digits(axes.size());
    for (std::size_t a = axes.size(); a-- > 0;) {
      digits[a] = index % axes[a].second.size();
      index /= axes[a].second.size();
    }
    for (std::size_t a = 0; a < axes.size(); ++a) p[axes[a].first] = axes[a].second[digits[a]];
    return p;
  }

  /// {"axis": [values...], ...}; key order of the document is kept.
  static GridSpec from_json(const nlohmann::ordered_json& j) {
    if (!j.is_object() || j.empty()) throw ConfigError("grid must be a non-empty object of axis -> values");
    GridSpec g;
    for (const auto& [name, values] : j.items()) {
      if (!values.is_array() || values.empty()) throw ConfigError("grid axis '" + name + "' needs a non-empty list");
      std::vector<nlohmann::json> vs;
      for (const auto& v : values) vs.push_back(nlohmann::json::parse(v.dump()));
      g.axes.emplace_back(name, std::move(vs));
    }
    return g;
  }
};

struct GridRow {
  nlohmann::ordered_json point;
  std::optional<double> dev_loss;
  std::string error;
};

struct GridResult {
  nlohmann::ordered_json best;
  double best_loss = 0.0;
  std::size_t best_index = 0;
  std::vector<GridRow> table;
};

/// Evaluates every grid point; the minimum dev loss wins, earlier points on ties.
inline GridResult grid_search(const GridSpec& spec,
                              const std::function<double(const nlohmann::ordered_json&)>& train_and_eval) {
  const std::size_t n = spec.size();
  if (n == 0) throw ConfigError("grid has no points");
  GridResult r;
  bool found = false;
  std::string failures;
  for (std::size_t i = 0; i < n; ++i) {
    GridRow row{spec.point(i), std::nullopt, {}};
    try {
      const double loss = train_and_eval(row.point);
      if (!std::isfinite(loss)) throw NumericalError("dev loss is not finite");
      row.dev_loss = loss;
      if (!found || loss < r.best_loss) {
        found = true;
        r.best = row.point;
        r.best_loss = loss;
        r.best_index = i;
      }
    } catch (const std::exception& e) {
      row.error = e.what();
      failures += "\n  " + row.point.dump() + ": " + e.what();
    }
    r.table.push_back(std::move(row));
  }
  if (!found) throw Error("every grid point failed:" + failures);
  return r;
}

// ---- seed repetition -----------------------------------------------------------

struct RunReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;
  double mean = 0.0;
  /// Sample standard deviation (n - 1 denominator).
  double std = 0.0;
  std::size_t n() const { return values.size(); }
};

inline RunReport summarize(std::vector<double> values, std::vector<std::uint64_t> seeds = {}) {
  if (values.size() < 2) throw ConfigError("a standard deviation needs at least 2 runs");
  RunReport r;
  r.values = std::move(values);
  r.seeds = std::move(seeds);
  const double n = static_cast<double>(r.values.size());
  for (double v : r.values) r.mean += v;
  r.mean /= n;
  double ss = 0;
  for (double v : r.values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / (n - 1.0));
  return r;
}

inline RunReport repeat_with_seeds(const std::function<double(std::uint64_t)>& run,
                                   const std::vector<std::uint64_t>& seeds = {1, 2, 3}) {
  std::vector<double> values;
  for (auto s : seeds) values.push_back(run(s));
  return summarize(std::move(values), seeds);
}

inline nlohmann::json to_json(const RunReport& r) {
  return {{"seeds", r.seeds}, {"values", r.values}, {"mean", r.mean}, {"std", r.std}, {"n", r.n()}};
}

}  // namespace hlm
