#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hlm/autodiff.hpp"
#include "hlm/error.hpp"
#include "hlm/rng.hpp"

namespace hlm::crf {

/// Transition scores over K labels plus a virtual start (row K) and stop
/// (column K+1). trans[i, j] scores moving from i to j.
template <typename Real>
struct CrfParams {
  ad::Tensor<Real> transitions;
  std::size_t labels = 0;

  std::size_t start() const { return labels; }
  std::size_t stop() const { return labels + 1; }
  std::size_t width() const { return labels + 2; }
  Real trans(std::size_t from, std::size_t to) const { return transitions.data()[from * width() + to]; }

  static CrfParams zeros(std::size_t k, bool requires_grad = true) {
    if (k == 0) throw ConfigError("a CRF needs at least one label");
    return {ad::Tensor<Real>::zeros({k + 2, k + 2}, requires_grad), k};
  }
  static CrfParams random(std::size_t k, Rng& rng, double scale = 1.0, bool requires_grad = true) {
    auto p = zeros(k, requires_grad);
    for (auto& v : p.transitions.mutable_data()) v = static_cast<Real>(scale * rng.normal());
    return p;
  }
};

struct Decoded {
  std::vector<int> path;
  double score = 0.0;
};

namespace detail {

template <typename Real>
Real logsumexp(std::span<const Real> xs) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  Real s = 0;
  for (Real x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

template <typename Real>
void check_shapes(const ad::Tensor<Real>& emissions, const CrfParams<Real>& params) {
  ad::detail::require_rank2("crf", emissions);
  if (emissions.cols() != params.labels) throw ad::ShapeError("crf", emissions.shape(), params.transitions.shape());
  if (params.transitions.shape() != ad::Shape{params.width(), params.width()}) {
    throw ad::ShapeError("crf", params.transitions.shape(), "is not [K+2, K+2]");
  }
}

/// Forward (alpha) and backward (beta) log-space tables, [T, K] each.
template <typename Real>
struct Lattice {
  std::vector<Real> alpha, beta;
  Real log_z = 0;
};

template <typename Real>
Lattice<Real> lattice(std::span<const Real> e, std::size_t T, const CrfParams<Real>& p) {
  const std::size_t K = p.labels;
  Lattice<Real> L;
  L.alpha.assign(T * K, 0);
  L.beta.assign(T * K, 0);
  std::vector<Real> buf(K);
  for (std::size_t j = 0; j < K; ++j) L.alpha[j] = p.trans(p.start(), j) + e[j];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t i = 0; i < K; ++i) buf[i] = L.alpha[(t - 1) * K + i] + p.trans(i, j);
      L.alpha[t * K + j] = logsumexp<Real>(buf) + e[t * K + j];
    }
  }
  for (std::size_t i = 0; i < K; ++i) L.beta[(T - 1) * K + i] = p.trans(i, p.stop());
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) buf[j] = p.trans(i, j) + e[(t + 1) * K + j] + L.beta[(t + 1) * K + j];
      L.beta[t * K + i] = logsumexp<Real>(buf);
    }
  }
  for (std::size_t j = 0; j < K; ++j) buf[j] = L.alpha[(T - 1) * K + j] + p.trans(j, p.stop());
  L.log_z = logsumexp<Real>(buf);
  return L;
}

template <typename Real>
void check_labels(std::span<const int> labels, std::size_t T, std::size_t K) {
  if (labels.size() != T) {
    throw ContractError("crf: " + std::to_string(labels.size()) + " labels for " + std::to_string(T) + " positions");
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= K) {
      throw ContractError("crf: label " + std::to_string(labels[t]) + " at position " + std::to_string(t) +
                          " outside " + std::to_string(K) + " labels");
    }
  }
}

}  // namespace detail

/// Unnormalized score of one path, summed left to right.
template <typename Real>
Real path_score(std::span<const Real> e, std::span<const int> y, const CrfParams<Real>& p) {
  const std::size_t K = p.labels;
  const auto at = [](int v) { return static_cast<std::size_t>(v); };
  Real s = p.trans(p.start(), at(y[0]));
  s += e[at(y[0])];
  for (std::size_t t = 1; t < y.size(); ++t) {
    s += p.trans(at(y[t - 1]), at(y[t]));
    s += e[t * K + at(y[t])];
  }
  s += p.trans(at(y.back()), p.stop());
  return s;
}

template <typename Real>
Real log_partition(const ad::Tensor<Real>& emissions, const CrfParams<Real>& params) {
  detail::check_shapes(emissions, params);
  return detail::lattice(emissions.data(), emissions.rows(), params).log_z;
}

/// log p(labels | emissions), differentiable in emissions and transitions.
template <typename Real>
ad::Tensor<Real> log_likelihood(const ad::Tensor<Real>& emissions, std::span<const int> labels,
                                const CrfParams<Real>& params) {
  detail::check_shapes(emissions, params);
  const std::size_t T = emissions.rows(), K = params.labels, W = params.width();
  detail::check_labels<Real>(labels, T, K);
  const auto e = emissions.data();
  auto L = detail::lattice(e, T, params);
  const Real value = path_score(e, labels, params) - L.log_z;
  std::vector<int> y(labels.begin(), labels.end());
  std::vector<Real> trans(params.transitions.data().begin(), params.transitions.data().end());
  std::vector<Real> em(e.begin(), e.end());
  return ad::make_result<Real>(
      "crf_log_likelihood", {1, 1}, {value}, {emissions, params.transitions},
      [T, K, W, y = std::move(y), trans = std::move(trans), em = std::move(em), L = std::move(L)](ad::Node<Real>& self) {
        const Real g = self.grad[0];
        const std::size_t S = K, E = K + 1;
        const auto tr = [&](std::size_t i, std::size_t j) { return trans[i * W + j]; };
        const auto marginal = [&](std::size_t t, std::size_t j) {
          return std::exp(L.alpha[t * K + j] + L.beta[t * K + j] - L.log_z);
        };
        auto& pe = self.parent(0);
        if (pe.requires_grad) {
          pe.ensure_grad();
          for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < K; ++j) pe.grad[t * K + j] -= g * marginal(t, j);
            pe.grad[t * K + static_cast<std::size_t>(y[t])] += g;
          }
        }
        auto& pt = self.parent(1);
        if (pt.requires_grad) {
          pt.ensure_grad();
          for (std::size_t j = 0; j < K; ++j) {
            pt.grad[S * W + j] -= g * marginal(0, j);
            pt.grad[j * W + E] -= g * marginal(T - 1, j);
          }
          for (std::size_t t = 1; t < T; ++t) {
            for (std::size_t i = 0; i < K; ++i) {
              for (std::size_t j = 0; j < K; ++j) {
                const Real lp = L.alpha[(t - 1) * K + i] + tr(i, j) + em[t * K + j] + L.beta[t * K + j] - L.log_z;
                pt.grad[i * W + j] -= g * std::exp(lp);
              }
            }
          }
          const auto at = [](int v) { return static_cast<std::size_t>(v); };
          pt.grad[S * W + at(y[0])] += g;
          for (std::size_t t = 1; t < T; ++t) pt.grad[at(y[t - 1]) * W + at(y[t])] += g;
          pt.grad[at(y[T - 1]) * W + E] += g;
        }
      });
}

/// Best path by max-sum dynamic programming. Among equal-scoring paths the
/// lexicographically smallest label sequence wins.
template <typename Real>
Decoded viterbi(const ad::Tensor<Real>& emissions, const CrfParams<Real>& params) {
  detail::check_shapes(emissions, params);
  const std::size_t T = emissions.rows(), K = params.labels;
  const auto e = emissions.data();
  // best[t][i]: best score of positions t+1.. given label i at t, stop included
  std::vector<Real> best(T * K);
  for (std::size_t i = 0; i < K; ++i) best[(T - 1) * K + i] = params.trans(i, params.stop());
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t i = 0; i < K; ++i) {
      Real m = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < K; ++j)
        m = std::max(m, params.trans(i, j) + e[(t + 1) * K + j] + best[(t + 1) * K + j]);
      best[t * K + i] = m;
    }
  }
  Decoded out;
  std::size_t prev = params.start();
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t arg = 0;
    Real m = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < K; ++j) {
      const Real v = params.trans(prev, j) + e[t * K + j] + best[t * K + j];
      if (v > m) {
        m = v;
        arg = j;
      }
    }
    out.path.push_back(static_cast<int>(arg));
    prev = arg;
  }
  out.score = static_cast<double>(path_score<Real>(e, out.path, params));
  return out;
}

struct OracleResult {
  double log_z = 0.0;
  Decoded best;
  /// Sum over all paths of exp(score - log_z).
  double total_probability = 0.0;
};

/// Exhaustive enumeration of all K^T label sequences.
template <typename Real>
OracleResult brute_force_oracle(const ad::Tensor<Real>& emissions, const CrfParams<Real>& params,
                                std::size_t max_paths = 1000000) {
  detail::check_shapes(emissions, params);
  const std::size_t T = emissions.rows(), K = params.labels;
  std::size_t paths = 1;
  for (std::size_t t = 0; t < T; ++t) {
    if (paths > max_paths / K) {
      throw ContractError("brute_force_oracle: " + std::to_string(K) + "^" + std::to_string(T) +
                          " paths exceed the limit of " + std::to_string(max_paths));
    }
    paths *= K;
  }
  const auto e = emissions.data();
  std::vector<int> y(T, 0);
  std::vector<Real> scores;
  scores.reserve(paths);
  OracleResult r;
  r.best.score = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < paths; ++n) {
    const Real s = path_score<Real>(e, y, params);
    scores.push_back(s);
    // enumeration is in lexicographic order, so strict improvement keeps the smallest on ties
    if (static_cast<double>(s) > r.best.score) {
      r.best.score = static_cast<double>(s);
      r.best.path = y;
    }
    for (std::size_t t = T; t-- > 0;) {
      if (static_cast<std::size_t>(++y[t]) < K) break;
      y[t] = 0;
    }
  }
  r.log_z = static_cast<double>(detail::logsumexp<Real>(scores));
  for (Real s : scores) r.total_probability += std::exp(static_cast<double>(s) - r.log_z);
  return r;
}

}  // namespace hlm::crf
