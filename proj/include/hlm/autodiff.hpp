#pragma once

// Dense tensors with reverse-mode differentiation over the small operation set
// the encoder, CRF and baseline models need. Tensors are handles to graph
// nodes; an op's result keeps its inputs alive until the loss is dropped.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hlm/error.hpp"
#include "hlm/rng.hpp"

namespace hlm::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class ShapeError : public ContractError {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : ContractError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b)) {}
  ShapeError(const std::string& op, const Shape& a, const std::string& why)
      : ContractError(op + ": shape " + to_string(a) + " " + why) {}
};

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", shape, "has a zero dimension");
    if (values.size() != ad::numel(shape)) throw ShapeError("tensor", shape, "does not match " + std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = ad::numel(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }
  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = ad::numel(shape);
    return from(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }
  static Tensor scalar(Real v) { return from({1, 1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  Real item() const {
    if (numel() != 1) throw ShapeError("item", shape(), "is not a single element");
    return node_->value[0];
  }
  Real at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  std::span<const Real> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), Real(0)); }

  /// Copy of the value with no graph history.
  Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

  Node<Real>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Real>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<Real>> node_;
};

/// Builds an op result. Nodes whose inputs need no gradient record nothing.
template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::initializer_list<Tensor<Real>> parents, std::function<void(Node<Real>&)> backward) {
  auto n = std::make_shared<Node<Real>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<Real>(std::move(n));
}

template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value, const std::vector<Tensor<Real>>& parents,
                         std::function<void(Node<Real>&)> backward) {
  auto n = std::make_shared<Node<Real>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<Real>(std::move(n));
}

/// Operation records reachable from a root, in topological order (inputs first).
template <typename Real>
struct Tape {
  std::vector<Node<Real>*> nodes;

  static Tape record(const Tensor<Real>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<Node<Real>*> visited;
    std::vector<std::pair<Node<Real>*, std::size_t>> stack{{root.node(), 0}};
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<Real>* p = node->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        continue;
      }
      tape.nodes.push_back(node);
      stack.pop_back();
    }
    return tape;
  }
};

/// Reverse pass from a scalar. Leaf gradients accumulate across calls; call
/// zero_grad on parameters between steps.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward", loss.shape(), "is not a scalar loss");
  const auto tape = Tape<Real>::record(loss);
  for (auto* n : tape.nodes)
    if (n->backward) n->grad.assign(n->value.size(), Real(0));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += Real(1);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace detail {

template <typename Real>
void require_rank2(const char* op, const Tensor<Real>& t) {
  if (t.rank() != 2) throw ShapeError(op, t.shape(), "must be rank 2");
}

/// Bias-style operand: shape [n] or [1, n] against a [m, n] tensor.
template <typename Real>
bool is_row_broadcast(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2) return false;
  if (b.rank() == 1) return b.dim(0) == a.cols();
  return b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols() && a.rows() != 1;
}

template <typename Real>
void accumulate(Node<Real>& node, std::size_t i, Real g) {
  node.grad[i] += g;
}

}  // namespace detail

// ---- linear algebra -------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<Real> out(m * n, Real(0));
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      const Real* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result<Real>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<Real>& self) {
    Node<Real>& pa = self.parent(0);
    Node<Real>& pb = self.parent(1);
    const Real* G = self.grad.data();
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA = G * B^T, accumulated row by row over a transposed copy of B
      std::vector<Real> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = pb.value[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        Real* ga = pa.grad.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const Real g = G[i * n + j];
          const Real* brow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) ga[p] += g * brow[p];
        }
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      const Real* A = pa.value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = A[i * k + p];
          Real* gb = pb.grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += av * G[i * n + j];
        }
    }
  });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  detail::require_rank2("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result<Real>("transpose", {n, m}, std::move(out), {a}, [m, n](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
  });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<Real> out(a.data().begin(), a.data().end());
  return make_result<Real>("reshape", std::move(shape), std::move(out), {a}, [](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// ---- elementwise ----------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() == b.shape()) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<Real>("add", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        Node<Real>& p = self.parent(k);
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
      }
    });
  }
  if (!detail::is_row_broadcast(a, b)) throw ShapeError("add", a.shape(), b.shape());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
  return make_result<Real>("add_bias", a.shape(), std::move(out), {a, b}, [m, n](Node<Real>& self) {
    Node<Real>& pa = self.parent(0);
    Node<Real>& pb = self.parent(1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pb.grad[j] += self.grad[i * n + j];
    }
  });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<Real>("mul", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    Node<Real>& pa = self.parent(0);
    Node<Real>& pb = self.parent(1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<Real>("scale", a.shape(), std::move(out), {a}, [s](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, scale(b, Real(-1)));
}

namespace detail {

template <typename Real, typename F, typename D>
Tensor<Real> unary(const char* op, const Tensor<Real>& a, F f, D df) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result<Real>(op, a.shape(), std::move(out), {a}, [df](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace detail

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary<Real>("tanh", a, [](Real x) { return std::tanh(x); },
                             [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary<Real>("sigmoid", a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
                             [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return detail::unary<Real>("relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
                             [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
}

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real k = Real(0.044715);
  return detail::unary<Real>(
      "gelu", a, [](Real x) { return Real(0.5) * x * (Real(1) + std::tanh(c * (x + k * x * x * x))); },
      [](Real x, Real) {
        const Real t = std::tanh(c * (x + k * x * x * x));
        return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * c * (Real(1) + Real(3) * k * x * x);
      });
}

/// Inverted dropout. Identity in eval mode or when p == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& a, double p, Rng* rng, bool train) {
  if (!train || p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  if (rng == nullptr) throw ContractError("dropout in train mode needs a random generator");
  const Real keep_scale = Real(1.0 / (1.0 - p));
  std::vector<Real> mask(a.numel());
  for (auto& m : mask) m = rng->uniform() < p ? Real(0) : keep_scale;
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  return make_result<Real>("dropout", a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node<Real>& self) {
    Node<Real>& p0 = self.parent(0);
    p0.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p0.grad[i] += self.grad[i] * mask[i];
  });
}

// ---- structural -----------------------------------------------------------

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis > 1) throw ContractError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank2("concat", p);
  const std::size_t other = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if ((axis == 0 ? p.cols() : p.rows()) != other) throw ShapeError("concat", parts[0].shape(), p.shape());
    total += axis == 0 ? p.rows() : p.cols();
  }
  const Shape shape = axis == 0 ? Shape{total, other} : Shape{other, total};
  std::vector<Real> out(total * other);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto x = p.data();
    if (axis == 0) {
      std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(off * other));
      off += p.rows();
    } else {
      const std::size_t w = p.cols();
      for (std::size_t i = 0; i < other; ++i)
        std::copy(x.begin() + static_cast<std::ptrdiff_t>(i * w), x.begin() + static_cast<std::ptrdiff_t>((i + 1) * w),
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + off));
      off += w;
    }
  }
  return make_result<Real>("concat", shape, std::move(out), parts, [axis, other, total, offsets](Node<Real>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node<Real>& p = self.parent(k);
      if (!p.requires_grad) continue;
      p.ensure_grad();
      if (axis == 0) {
        for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[offsets[k] * other + i];
      } else {
        const std::size_t w = p.shape[1];
        for (std::size_t i = 0; i < other; ++i)
          for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += self.grad[i * total + offsets[k] + j];
      }
    }
  });
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& a, std::size_t axis, std::size_t start, std::size_t len) {
  detail::require_rank2("slice", a);
  if (axis > 1) throw ContractError("slice: axis must be 0 or 1");
  const std::size_t m = a.rows(), n = a.cols();
  const std::size_t extent = axis == 0 ? m : n;
  if (len == 0 || start + len > extent) {
    throw ShapeError("slice", a.shape(), "cannot take [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                              ") on axis " + std::to_string(axis));
  }
  const Shape shape = axis == 0 ? Shape{len, n} : Shape{m, len};
  std::vector<Real> out(numel(shape));
  const auto x = a.data();
  if (axis == 0) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(start * n), x.begin() + static_cast<std::ptrdiff_t>((start + len) * n), out.begin());
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x[i * n + start + j];
  }
  return make_result<Real>("slice", shape, std::move(out), {a}, [axis, start, len, m, n](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    if (axis == 0) {
      for (std::size_t i = 0; i < len * n; ++i) p.grad[start * n + i] += self.grad[i];
    } else {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) p.grad[i * n + start + j] += self.grad[i * len + j];
    }
  });
}

/// Rows of `table` selected by `ids`; doubles as a row gather.
template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, std::span<const int> ids) {
  detail::require_rank2("embedding_lookup", table);
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
  std::vector<Real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw InvalidTokenError(i, ids[i], "outside table of " + std::to_string(v) + " rows");
    }
    const auto row = table.data().subspan(static_cast<std::size_t>(ids[i]) * d, d);
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return make_result<Real>("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                           [kept = std::move(kept), d](Node<Real>& self) {
                             Node<Real>& p = self.parent(0);
                             p.ensure_grad();
                             for (std::size_t i = 0; i < kept.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                 p.grad[static_cast<std::size_t>(kept[i]) * d + j] += self.grad[i * d + j];
                           });
}

// ---- normalization --------------------------------------------------------

/// Row-wise softmax over the last axis. Entries of -inf get zero weight.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& a) {
  detail::require_rank2("softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    Real sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const Real e = std::exp(x[i * n + j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  return make_result<Real>("softmax", a.shape(), std::move(out), {a}, [m, n](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

/// Normalizes each row to zero mean and unit variance, then applies gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias, double eps = 1e-12) {
  detail::require_rank2("layer_norm", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n) throw ShapeError("layer_norm", x.shape(), gain.shape());
  if (bias.numel() != n) throw ShapeError("layer_norm", x.shape(), bias.shape());
  std::vector<Real> out(m * n), xhat(m * n), inv_std(m);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += v[i * n + j];
    mean /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const Real d = v[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<Real>(n);
    inv_std[i] = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (v[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result<Real>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Real>& self) {
        Node<Real>& px = self.parent(0);
        Node<Real>& pg = self.parent(1);
        Node<Real>& pb = self.parent(2);
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        std::vector<Real> gx(n);
        for (std::size_t i = 0; i < m; ++i) {
          Real mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const Real g = self.grad[i * n + j];
            if (pg.requires_grad) pg.grad[j] += g * xhat[i * n + j];
            if (pb.requires_grad) pb.grad[j] += g;
            gx[j] = g * pg.value[j];
            mean_g += gx[j];
            mean_gx += gx[j] * xhat[i * n + j];
          }
          if (!px.requires_grad) continue;
          mean_g /= static_cast<Real>(n);
          mean_gx /= static_cast<Real>(n);
          for (std::size_t j = 0; j < n; ++j)
            px.grad[i * n + j] += inv_std[i] * (gx[j] - mean_g - xhat[i * n + j] * mean_gx);
        }
      });
}

// ---- reductions and losses ------------------------------------------------

template <typename Real>
Tensor<Real> reduce_sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real x : a.data()) s += x;
  return make_result<Real>("reduce_sum", {1, 1}, {s}, {a}, [](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename Real>
Tensor<Real> reduce_mean(const Tensor<Real>& a) {
  return scale(reduce_sum(a), Real(1) / static_cast<Real>(a.numel()));
}

/// Column sums of a [m, n] tensor, shape [1, n].
template <typename Real>
Tensor<Real> sum_rows(const Tensor<Real>& a) {
  detail::require_rank2("sum_rows", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(n, Real(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
  return make_result<Real>("sum_rows", {1, n}, std::move(out), {a}, [m, n](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j];
  });
}

/// Column sums taken in ascending value order, so the result depends only on
/// the multiset of rows and not on their order.
template <typename Real>
Tensor<Real> sum_rows_unordered(const Tensor<Real>& a) {
  detail::require_rank2("sum_rows_unordered", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(n, Real(0)), col(m);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) col[i] = a.data()[i * n + j];
    std::sort(col.begin(), col.end());
    for (Real v : col) out[j] += v;
  }
  return make_result<Real>("sum_rows_unordered", {1, n}, std::move(out), {a}, [m, n](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j];
  });
}

/// Column maxima of a [m, n] tensor, shape [1, n]; ties go to the first row.
template <typename Real>
Tensor<Real> max_rows(const Tensor<Real>& a) {
  detail::require_rank2("max_rows", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = a.data()[j];
    for (std::size_t i = 1; i < m; ++i)
      if (a.data()[i * n + j] > out[j]) out[j] = a.data()[i * n + j], arg[j] = i;
  }
  return make_result<Real>("max_rows", {1, n}, std::move(out), {a}, [n, arg = std::move(arg)](Node<Real>& self) {
    Node<Real>& p = self.parent(0);
    p.ensure_grad();
    for (std::size_t j = 0; j < n; ++j) p.grad[arg[j] * n + j] += self.grad[j];
  });
}

inline constexpr int kIgnoreIndex = -100;

/// Mean cross-entropy of row-wise softmax(logits) against target ids; targets
/// equal to kIgnoreIndex are skipped.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const int> targets, int ignore_index = kIgnoreIndex) {
  detail::require_rank2("cross_entropy", logits);
  const std::size_t m = logits.rows(), k = logits.cols();
  if (targets.size() != m) throw ShapeError("cross_entropy", logits.shape(), Shape{targets.size()});
  std::vector<Real> probs(m * k);
  std::vector<int> kept(targets.begin(), targets.end());
  Real total = 0;
  std::size_t count = 0;
  const auto x = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[i * k + j]);
    Real sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(x[i * k + j] - mx);
      sum += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= sum;
    if (kept[i] == ignore_index) continue;
    if (kept[i] < 0 || static_cast<std::size_t>(kept[i]) >= k) {
      throw InvalidTokenError(i, kept[i], "target outside " + std::to_string(k) + " classes");
    }
    total += (mx + std::log(sum)) - x[i * k + static_cast<std::size_t>(kept[i])];
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every target is ignored");
  const Real inv = Real(1) / static_cast<Real>(count);
  return make_result<Real>(
      "cross_entropy", {1, 1}, {total * inv}, {logits},
      [m, k, inv, ignore_index, probs = std::move(probs), kept = std::move(kept)](Node<Real>& self) {
        Node<Real>& p = self.parent(0);
        p.ensure_grad();
        const Real g = self.grad[0] * inv;
        for (std::size_t i = 0; i < m; ++i) {
          if (kept[i] == ignore_index) continue;
          for (std::size_t j = 0; j < k; ++j) p.grad[i * k + j] += g * probs[i * k + j];
          p.grad[i * k + static_cast<std::size_t>(kept[i])] -= g;
        }
      });
}

// ---- finite differences ---------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Coordinates sampled per input (all of them when the tensor is smaller).
  std::size_t coords_per_tensor = 32;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. `f` must rebuild its graph from `inputs` on every call and be
/// deterministic (pin dropout seeds inside it).
template <typename Real>
GradCheckReport finite_difference_check(const std::function<Tensor<Real>()>& f,
                                        std::vector<std::pair<std::string, Tensor<Real>>> inputs,
                                        const GradCheckOptions& options = {}) {
  for (auto& [name, t] : inputs) {
    if (!t.requires_grad()) throw ContractError("finite_difference_check: input '" + name + "' needs requires_grad");
    t.zero_grad();
  }
  const Tensor<Real> loss = f();
  backward(loss);
  GradCheckReport report;
  Rng rng(options.seed);
  for (auto& [name, t] : inputs) {
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > options.coords_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.coords_per_tensor);
    }
    auto data = t.mutable_data();
    for (std::size_t idx : coords) {
      const Real saved = data[idx];
      data[idx] = saved + static_cast<Real>(options.step);
      const double up = static_cast<double>(f().item());
      data[idx] = saved - static_cast<Real>(options.step);
      const double down = static_cast<double>(f().item());
      data[idx] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = static_cast<double>(analytic[idx]);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (report.worst_input.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

/// Single-input convenience form.
template <typename Real>
GradCheckReport finite_difference_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f, Tensor<Real> x,
                                        const GradCheckOptions& options = {}) {
  return finite_difference_check<Real>([&] { return f(x); }, {{"x", x}}, options);
}

}  // namespace hlm::ad
