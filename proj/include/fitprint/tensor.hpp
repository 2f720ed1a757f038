#pragma once

// Dense tensors and a minimal reverse-mode autodiff tape.
//
// The tape is define-by-run: every forward pass builds a fresh Tape whose
// nodes are appended in topological order, so backward() is a single reverse
// sweep. Leaves reference tensors owned by the caller (model parameters,
// input perturbations); their adjoints accumulate additively into
// Tensor::grad until an optimizer step clears them.
//
// Everything is double precision. Primitives are the small fixed set needed
// for training compact classifiers and differentiating fingerprint losses
// with respect to input perturbations; there is no broadcasting beyond what
// those primitives require.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace fitprint {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

class Tensor {
  Shape shape_;  // declared first: members below are initialized from it

 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    values.assign(numel(shape_), 0.0);
    check_invariants("Tensor");
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), values(std::move(data)) {
    if (values.size() != numel(shape_)) {
      throw std::invalid_argument(
          "Tensor: values length " + std::to_string(values.size()) +
          " does not match shape " + shape_to_string(shape_));
    }
    check_invariants("Tensor");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.values.begin(), t.values.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values.size(); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  // 3-D accessor for (C, H, W) images.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }

  void clear_grad() { grad.clear(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::vector<double> values;
  std::vector<double> grad;  // empty means absent; otherwise same length

 private:
  void check_invariants(const char* who) const {
    for (std::size_t e : shape_) {
      if (e == 0) {
        throw std::invalid_argument(std::string(who) +
                                    ": zero extent in shape " +
                                    shape_to_string(shape_));
      }
    }
  }
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

enum class OpKind : std::uint8_t {
  Leaf,
  Ref,
  MatMul,
  Affine,   // W x + b
  Conv2d,   // valid cross-correlation, stride 1, with channel bias
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  Relu,
  Clamp,
  Log,
  MaxPool2,
  Flatten,
  Softmax,
  Sum,
  Mean,
  Dot,
  L2Norm,
  CosineSim,
  Entropy,
  Pick,
  Stack,  // scalar vars -> 1-D vector
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {
    nodes_.reserve(64);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf referencing caller-owned storage; adjoints accumulate into t.grad.
  Var leaf(Tensor& t) {
    Node n;
    n.op = OpKind::Leaf;
    n.ext = &t;
    n.ext_mut = &t;
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
  }

  // Read-only reference; never receives gradient. Caller keeps t alive.
  Var ref(const Tensor& t) {
    Node n;
    n.op = OpKind::Ref;
    n.ext = &t;
    n.requires_grad = false;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.op = OpKind::Ref;
    n.val = std::move(t);  // owned by the node; ext stays null
    n.requires_grad = false;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ext ? *n.ext : n.val;
  }

  double scalar_value(Var v) const {
    const Tensor& t = value(v);
    if (t.size() != 1) {
      throw std::invalid_argument("scalar_value: tensor has " +
                                  std::to_string(t.size()) + " elements");
    }
    return t.values[0];
  }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.shape().size() == 2 && B.shape().size() == 2 &&
                A.shape()[1] == B.shape()[0],
            "matmul", A, B);
    const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) {
          s += A.values[i * k + t] * B.values[t * n + j];
        }
        out.values[i * n + j] = s;
      }
    }
    return binary(OpKind::MatMul, a, b, std::move(out));
  }

  // y = W x + b with W (m x n), x (n), b (m).
  Var affine(Var w, Var x, Var b) {
    const Tensor& W = value(w);
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    if (W.shape().size() != 2 || X.shape().size() != 1 ||
        W.shape()[1] != X.shape()[0] || B.shape().size() != 1 ||
        B.shape()[0] != W.shape()[0]) {
      throw std::invalid_argument("affine: shape mismatch " +
                                  shape_to_string(W.shape()) + " * " +
                                  shape_to_string(X.shape()) + " + " +
                                  shape_to_string(B.shape()));
    }
    const std::size_t m = W.shape()[0], n = W.shape()[1];
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
      double s = B.values[i];
      const double* row = &W.values[i * n];
      for (std::size_t j = 0; j < n; ++j) s += row[j] * X.values[j];
      out.values[i] = s;
    }
    Node node;
    node.op = OpKind::Affine;
    node.in = {w.id, x.id, b.id};
    node.val = std::move(out);
    node.requires_grad = grad_enabled_ && (needs(w) || needs(x) || needs(b));
    return push(std::move(node));
  }

  // Valid 2-D cross-correlation, stride 1: x (Cin,H,W), w (Cout,Cin,kh,kw),
  // b (Cout) -> (Cout, H-kh+1, W-kw+1).
  Var conv2d(Var x, Var w, Var b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.shape().size() != 3 || W.shape().size() != 4 ||
        W.shape()[1] != X.shape()[0] || B.shape().size() != 1 ||
        B.shape()[0] != W.shape()[0] || X.shape()[1] < W.shape()[2] ||
        X.shape()[2] < W.shape()[3]) {
      throw std::invalid_argument("conv2d: shape mismatch input " +
                                  shape_to_string(X.shape()) + " kernel " +
                                  shape_to_string(W.shape()) + " bias " +
                                  shape_to_string(B.shape()));
    }
    const std::size_t cin = X.shape()[0], h = X.shape()[1], wd = X.shape()[2];
    const std::size_t cout = W.shape()[0], kh = W.shape()[2], kw = W.shape()[3];
    const std::size_t oh = h - kh + 1, ow = wd - kw + 1;
    Tensor out({cout, oh, ow});
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = B.values[co];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xin = &X.values[(ci * h + oy) * wd + ox];
            const double* ker = &W.values[((co * cin + ci) * kh) * kw];
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                s += xin[ky * wd + kx] * ker[ky * kw + kx];
              }
            }
          }
          out.values[(co * oh + oy) * ow + ox] = s;
        }
      }
    }
    Node node;
    node.op = OpKind::Conv2d;
    node.in = {x.id, w.id, b.id};
    node.val = std::move(out);
    node.requires_grad = grad_enabled_ && (needs(x) || needs(w) || needs(b));
    return push(std::move(node));
  }

  Var add(Var a, Var b) { return elementwise(OpKind::Add, a, b); }
  Var sub(Var a, Var b) { return elementwise(OpKind::Sub, a, b); }
  Var mul(Var a, Var b) { return elementwise(OpKind::Mul, a, b); }

  Var add_scalar(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.values) v += c;
    return unary(OpKind::AddScalar, a, std::move(out), c);
  }

  Var mul_scalar(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.values) v *= c;
    return unary(OpKind::MulScalar, a, std::move(out), c);
  }

  Var relu(Var a) {
    Tensor out = value(a);
    for (double& v : out.values) v = v > 0.0 ? v : 0.0;
    return unary(OpKind::Relu, a, std::move(out));
  }

  Var clamp(Var a, double lo, double hi) {
    Tensor out = value(a);
    for (double& v : out.values) v = std::min(std::max(v, lo), hi);
    return unary(OpKind::Clamp, a, std::move(out), lo, hi);
  }

  // Elementwise natural log; inputs are clamped at 1e-12 to keep the
  // gradient finite for probabilities that underflow to zero.
  Var log(Var a) {
    Tensor out = value(a);
    for (double& v : out.values) v = std::log(std::max(v, 1e-12));
    return unary(OpKind::Log, a, std::move(out));
  }

  // 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
  Var maxpool2(Var a) {
    const Tensor& X = value(a);
    if (X.shape().size() != 3 || X.shape()[1] < 2 || X.shape()[2] < 2) {
      throw std::invalid_argument("maxpool2: need (C,H,W) with H,W >= 2, got " +
                                  shape_to_string(X.shape()));
    }
    const std::size_t c = X.shape()[0], h = X.shape()[1], w = X.shape()[2];
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    std::vector<std::uint32_t> argmax(out.size());
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::uint32_t best_idx = 0;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx =
                  (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
              if (X.values[idx] > best) {
                best = X.values[idx];
                best_idx = static_cast<std::uint32_t>(idx);
              }
            }
          }
          const std::size_t oidx = (ci * oh + oy) * ow + ox;
          out.values[oidx] = best;
          argmax[oidx] = best_idx;
        }
      }
    }
    Node node;
    node.op = OpKind::MaxPool2;
    node.in = {a.id, UINT32_MAX, UINT32_MAX};
    node.val = std::move(out);
    node.aux_idx = std::move(argmax);
    node.requires_grad = grad_enabled_ && needs(a);
    return push(std::move(node));
  }

  Var flatten(Var a) {
    const Tensor& X = value(a);
    Tensor out({X.size()}, X.values);
    return unary(OpKind::Flatten, a, std::move(out));
  }

  // Numerically stable softmax over a 1-D tensor.
  Var softmax(Var a) {
    const Tensor& X = value(a);
    if (X.shape().size() != 1) {
      throw std::invalid_argument("softmax: need 1-D input, got " +
                                  shape_to_string(X.shape()));
    }
    Tensor out = X;
    const double mx = *std::max_element(out.values.begin(), out.values.end());
    double denom = 0.0;
    for (double& v : out.values) {
      v = std::exp(v - mx);
      denom += v;
    }
    for (double& v : out.values) v /= denom;
    return unary(OpKind::Softmax, a, std::move(out));
  }

  Var sum(Var a) {
    const Tensor& X = value(a);
    return unary(OpKind::Sum, a,
                 Tensor::scalar(std::accumulate(X.values.begin(),
                                                X.values.end(), 0.0)));
  }

  Var mean(Var a) {
    const Tensor& X = value(a);
    const double s =
        std::accumulate(X.values.begin(), X.values.end(), 0.0);
    return unary(OpKind::Mean, a,
                 Tensor::scalar(s / static_cast<double>(X.size())));
  }

  Var dot(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.same_shape(B), "dot", A, B);
    double s = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A.values[i] * B.values[i];
    return binary(OpKind::Dot, a, b, Tensor::scalar(s));
  }

  Var l2norm(Var a) {
    const Tensor& A = value(a);
    double s = 0.0;
    for (double v : A.values) s += v * v;
    return unary(OpKind::L2Norm, a, Tensor::scalar(std::sqrt(s)));
  }

  // cos_sim with 1e-12 added to each norm so zero vectors stay finite.
  Var cosine_similarity(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.same_shape(B), "cosine_similarity", A, B);
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) {
      d += A.values[i] * B.values[i];
      na += A.values[i] * A.values[i];
      nb += B.values[i] * B.values[i];
    }
    const double ga = std::sqrt(na) + 1e-12, gb = std::sqrt(nb) + 1e-12;
    return binary(OpKind::CosineSim, a, b, Tensor::scalar(d / (ga * gb)));
  }

  // Natural-log entropy of a probability vector, with p*ln(p) := 0 at p=0.
  Var entropy(Var a) {
    const Tensor& A = value(a);
    double h = 0.0;
    for (double p : A.values) {
      if (p > 0.0) h -= p * std::log(p);
    }
    return unary(OpKind::Entropy, a, Tensor::scalar(h));
  }

  // Concatenates scalar vars into a 1-D tensor; backward scatters.
  Var stack_scalars(const std::vector<Var>& parts) {
    if (parts.empty()) {
      throw std::invalid_argument("stack_scalars: no inputs");
    }
    Tensor out({parts.size()});
    bool any_grad = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Tensor& p = value(parts[i]);
      if (p.size() != 1) {
        throw std::invalid_argument("stack_scalars: input " +
                                    std::to_string(i) + " has shape " +
                                    shape_to_string(p.shape()));
      }
      out.values[i] = p.values[0];
      any_grad = any_grad || needs(parts[i]);
    }
    Node node;
    node.op = OpKind::Stack;
    node.val = std::move(out);
    node.aux_idx.reserve(parts.size());
    for (Var p : parts) node.aux_idx.push_back(p.id);
    node.requires_grad = grad_enabled_ && any_grad;
    return push(std::move(node));
  }

  Var pick(Var a, std::size_t index) {
    const Tensor& A = value(a);
    if (index >= A.size()) {
      throw std::invalid_argument("pick: index " + std::to_string(index) +
                                  " out of range for " +
                                  shape_to_string(A.shape()));
    }
    Node node;
    node.op = OpKind::Pick;
    node.in = {a.id, UINT32_MAX, UINT32_MAX};
    node.val = Tensor::scalar(A.values[index]);
    node.a = static_cast<double>(index);
    node.requires_grad = grad_enabled_ && needs(a);
    return push(std::move(node));
  }

  // ---- backward ----------------------------------------------------------

  // Reverse sweep from a scalar loss. Leaf adjoints are added into the
  // external tensors' grad fields.
  void backward(Var loss) {
    if (!grad_enabled_) {
      throw std::logic_error("backward: tape was built with gradients disabled");
    }
    const Tensor& lv = value(loss);
    if (lv.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_to_string(lv.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grad_at(loss.id).assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || grads_[i].empty()) continue;
      backward_node(static_cast<std::uint32_t>(i), n);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.op == OpKind::Leaf && n.ext_mut && !grads_[i].empty()) {
        n.ext_mut->ensure_grad();
        for (std::size_t j = 0; j < grads_[i].size(); ++j) {
          n.ext_mut->grad[j] += grads_[i][j];
        }
      }
    }
    grads_.clear();
  }

 private:
  struct Node {
    OpKind op = OpKind::Ref;
    std::array<std::uint32_t, 3> in = {UINT32_MAX, UINT32_MAX, UINT32_MAX};
    Tensor val;
    const Tensor* ext = nullptr;      // leaf/ref external value
    Tensor* ext_mut = nullptr;        // leaf gradient sink
    std::vector<std::uint32_t> aux_idx;
    double a = 0.0, b = 0.0;
    bool requires_grad = false;
  };

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  const Tensor& node_value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.val;
  }

  std::vector<double>& grad_at(std::uint32_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(node_value(id).size(), 0.0);
    return g;
  }

  void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
    if (!ok) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_to_string(a.shape()) + " vs " +
                                  shape_to_string(b.shape()));
    }
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var unary(OpKind op, Var a, Tensor out, double p0 = 0.0, double p1 = 0.0) {
    Node node;
    node.op = op;
    node.in = {a.id, UINT32_MAX, UINT32_MAX};
    node.val = std::move(out);
    node.a = p0;
    node.b = p1;
    node.requires_grad = grad_enabled_ && needs(a);
    return push(std::move(node));
  }

  Var binary(OpKind op, Var a, Var b, Tensor out) {
    Node node;
    node.op = op;
    node.in = {a.id, b.id, UINT32_MAX};
    node.val = std::move(out);
    node.requires_grad = grad_enabled_ && (needs(a) || needs(b));
    return push(std::move(node));
  }

  Var elementwise(OpKind op, Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    const char* name = op == OpKind::Add ? "add"
                       : op == OpKind::Sub ? "sub"
                                           : "mul";
    require(A.same_shape(B), name, A, B);
    Tensor out = A;
    switch (op) {
      case OpKind::Add:
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += B.values[i];
        break;
      case OpKind::Sub:
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= B.values[i];
        break;
      default:
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= B.values[i];
        break;
    }
    return binary(op, a, b, std::move(out));
  }

  void backward_node(std::uint32_t id, Node& n) {
    const std::vector<double> g = grads_[id];  // copy: grad_at may reallocate
    const auto in0 = n.in[0], in1 = n.in[1], in2 = n.in[2];
    const bool need0 = in0 != UINT32_MAX && nodes_[in0].requires_grad;
    const bool need1 = in1 != UINT32_MAX && nodes_[in1].requires_grad;
    const bool need2 = in2 != UINT32_MAX && nodes_[in2].requires_grad;
    switch (n.op) {
      case OpKind::Leaf:
      case OpKind::Ref:
        break;
      case OpKind::MatMul: {
        const Tensor& A = node_value(in0);
        const Tensor& B = node_value(in1);
        const std::size_t m = A.shape()[0], k = A.shape()[1], c = B.shape()[1];
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              double s = 0.0;
              for (std::size_t j = 0; j < c; ++j)
                s += g[i * c + j] * B.values[t * c + j];
              ga[i * k + t] += s;
            }
        }
        if (need1) {
          auto& gb = grad_at(in1);
          for (std::size_t t = 0; t < k; ++t)
            for (std::size_t j = 0; j < c; ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                s += A.values[i * k + t] * g[i * c + j];
              gb[t * c + j] += s;
            }
        }
        break;
      }
      case OpKind::Affine: {
        const Tensor& W = node_value(in0);
        const Tensor& X = node_value(in1);
        const std::size_t m = W.shape()[0], c = W.shape()[1];
        if (need0) {
          auto& gw = grad_at(in0);
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g[i];
            double* row = &gw[i * c];
            for (std::size_t j = 0; j < c; ++j) row[j] += gi * X.values[j];
          }
        }
        if (need1) {
          auto& gx = grad_at(in1);
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g[i];
            const double* row = &W.values[i * c];
            for (std::size_t j = 0; j < c; ++j) gx[j] += gi * row[j];
          }
        }
        if (need2) {
          auto& gb = grad_at(in2);
          for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
        }
        break;
      }
      case OpKind::Conv2d: {
        const Tensor& X = node_value(in0);
        const Tensor& W = node_value(in1);
        const std::size_t cin = X.shape()[0], h = X.shape()[1],
                          wd = X.shape()[2];
        const std::size_t cout = W.shape()[0], kh = W.shape()[2],
                          kw = W.shape()[3];
        const std::size_t oh = h - kh + 1, ow = wd - kw + 1;
        std::vector<double>* gx = need0 ? &grad_at(in0) : nullptr;
        std::vector<double>* gw = need1 ? &grad_at(in1) : nullptr;
        std::vector<double>* gb = need2 ? &grad_at(in2) : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double go = g[(co * oh + oy) * ow + ox];
              if (go == 0.0) continue;
              if (gb) (*gb)[co] += go;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const std::size_t xbase = (ci * h + oy) * wd + ox;
                const std::size_t wbase = ((co * cin + ci) * kh) * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    if (gx) (*gx)[xbase + ky * wd + kx] +=
                        go * W.values[wbase + ky * kw + kx];
                    if (gw) (*gw)[wbase + ky * kw + kx] +=
                        go * X.values[xbase + ky * wd + kx];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Sub: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (need1) {
          auto& gb = grad_at(in1);
          const double sgn = n.op == OpKind::Add ? 1.0 : -1.0;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sgn * g[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& A = node_value(in0);
        const Tensor& B = node_value(in1);
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B.values[i];
        }
        if (need1) {
          auto& gb = grad_at(in1);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A.values[i];
        }
        break;
      }
      case OpKind::AddScalar: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        break;
      }
      case OpKind::MulScalar: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.a;
        }
        break;
      }
      case OpKind::Relu: {
        if (need0) {
          const Tensor& X = node_value(in0);
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (X.values[i] > 0.0) ga[i] += g[i];
          }
        }
        break;
      }
      case OpKind::Clamp: {
        if (need0) {
          const Tensor& X = node_value(in0);
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (X.values[i] > n.a && X.values[i] < n.b) ga[i] += g[i];
          }
        }
        break;
      }
      case OpKind::Log: {
        if (need0) {
          const Tensor& X = node_value(in0);
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] / std::max(X.values[i], 1e-12);
          }
        }
        break;
      }
      case OpKind::MaxPool2: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[n.aux_idx[i]] += g[i];
          }
        }
        break;
      }
      case OpKind::Flatten: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        break;
      }
      case OpKind::Softmax: {
        if (need0) {
          const Tensor& Y = n.val;
          auto& ga = grad_at(in0);
          double inner = 0.0;
          for (std::size_t j = 0; j < g.size(); ++j) inner += g[j] * Y.values[j];
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += Y.values[i] * (g[i] - inner);
          }
        }
        break;
      }
      case OpKind::Sum: {
        if (need0) {
          auto& ga = grad_at(in0);
          for (double& v : ga) v += g[0];
        }
        break;
      }
      case OpKind::Mean: {
        if (need0) {
          auto& ga = grad_at(in0);
          const double s = g[0] / static_cast<double>(ga.size());
          for (double& v : ga) v += s;
        }
        break;
      }
      case OpKind::Dot: {
        const Tensor& A = node_value(in0);
        const Tensor& B = node_value(in1);
        if (need0) {
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * B.values[i];
        }
        if (need1) {
          auto& gb = grad_at(in1);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * A.values[i];
        }
        break;
      }
      case OpKind::L2Norm: {
        if (need0) {
          const Tensor& X = node_value(in0);
          auto& ga = grad_at(in0);
          const double norm = std::max(n.val.values[0], 1e-12);
          for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g[0] * X.values[i] / norm;
          }
        }
        break;
      }
      case OpKind::CosineSim: {
        const Tensor& A = node_value(in0);
        const Tensor& B = node_value(in1);
        double d = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) {
          d += A.values[i] * B.values[i];
          na2 += A.values[i] * A.values[i];
          nb2 += B.values[i] * B.values[i];
        }
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double ga_ = na + 1e-12, gb_ = nb + 1e-12;
        if (need0) {
          auto& ga = grad_at(in0);
          const double c1 = g[0] / (ga_ * gb_);
          const double c2 = na > 1e-15 ? g[0] * d / (na * ga_ * ga_ * gb_) : 0.0;
          for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += c1 * B.values[i] - c2 * A.values[i];
          }
        }
        if (need1) {
          auto& gb = grad_at(in1);
          const double c1 = g[0] / (ga_ * gb_);
          const double c2 = nb > 1e-15 ? g[0] * d / (nb * gb_ * gb_ * ga_) : 0.0;
          for (std::size_t i = 0; i < gb.size(); ++i) {
            gb[i] += c1 * A.values[i] - c2 * B.values[i];
          }
        }
        break;
      }
      case OpKind::Entropy: {
        if (need0) {
          const Tensor& X = node_value(in0);
          auto& ga = grad_at(in0);
          for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] -= g[0] * (std::log(std::max(X.values[i], 1e-12)) + 1.0);
          }
        }
        break;
      }
      case OpKind::Pick: {
        if (need0) {
          auto& ga = grad_at(in0);
          ga[static_cast<std::size_t>(n.a)] += g[0];
        }
        break;
      }
      case OpKind::Stack: {
        for (std::size_t i = 0; i < n.aux_idx.size(); ++i) {
          const std::uint32_t src = n.aux_idx[i];
          if (nodes_[src].requires_grad) grad_at(src)[0] += g[i];
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool grad_enabled_;
};

// ---- optimizer ------------------------------------------------------------

// SGD with momentum and decoupled-from-loss weight decay:
//   g = grad + wd * w;  v = momentum * v + g;  w = w - lr * v.
// Momentum buffers are keyed by parameter address and persist across steps.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor*>& params, double lr) {
    for (Tensor* p : params) {
      if (!p->has_grad()) {
        throw std::invalid_argument("sgd_step: parameter missing gradient");
      }
    }
    for (Tensor* p : params) {
      auto& buf = buffers_[p];
      if (buf.size() != p->size()) buf.assign(p->size(), 0.0);
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = p->grad[i] + weight_decay_ * p->values[i];
        buf[i] = momentum_ * buf[i] + g;
        p->values[i] -= lr * buf[i];
      }
      p->clear_grad();
    }
  }

  void reset() { buffers_.clear(); }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<const Tensor*, std::vector<double>> buffers_;
};

inline void sgd_step(SgdOptimizer& opt, const std::vector<Tensor*>& params,
                     double lr) {
  opt.step(params, lr);
}

// lr(epoch) = lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2.
inline double cosine_annealing_lr(std::size_t epoch, std::size_t total,
                                  double lr_max, double lr_min) {
  if (epoch > total) {
    throw std::invalid_argument("cosine_annealing_lr: epoch " +
                                std::to_string(epoch) + " > total " +
                                std::to_string(total));
  }
  if (lr_min > lr_max) {
    throw std::invalid_argument("cosine_annealing_lr: lr_min > lr_max");
  }
  if (total == 0) return lr_max;
  const double t = static_cast<double>(epoch) / static_cast<double>(total);
  return lr_min + (lr_max - lr_min) * (1.0 + std::cos(M_PI * t)) / 2.0;
}

}  // namespace fitprint
