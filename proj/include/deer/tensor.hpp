#pragma once

// Reverse-mode autodiff over dense row-major tensors. The op set is exactly
// what the spotter needs; broadcasting is limited to leading batch dims in
// matmul plus a few dedicated bias/row ops. Tensors recorded in a graph are
// never mutated in place.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "deer/common.hpp"

namespace deer {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  int64_t numel() const { return int64_t(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(size_t(shape_numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != int64_t(data.size()))
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = T(rng.uniform(double(lo), double(hi)));
    return t;
  }

  static Tensor rand_normal(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = T(rng.normal() * double(stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t numel() const { return node_->numel(); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& vec() { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw UsageError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad_view() const {
    if (node_->grad.empty()) throw UsageError("gradient has not been computed");
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  NodePtr<T> node() const { return node_; }

  // detached copy sharing no graph state
  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(n);
  }

 private:
  NodePtr<T> node_;
};

// Builds an op node. Gradient tracking is skipped when disabled globally or
// when no parent needs it.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool need = false;
  if (g_grad_enabled) {
    for (auto& p : parents) need = need || p.requires_grad();
  }
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // iterative post-order DFS: children end up after all of their parents
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major). Parallelised over output rows; each output
// element is produced by one thread with a fixed summation order.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    constexpr int64_t KB = 256;
    for (int64_t i = i0; i < i1; ++i) {
      T* c = C + i * n;
      if (!accumulate) std::fill(c, c + n, T(0));
    }
    for (int64_t kb = 0; kb < k; kb += KB) {
      int64_t ke = std::min(k, kb + KB);
      for (int64_t i = i0; i < i1; ++i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (int64_t kk = kb; kk < ke; ++kk) {
          T av = a[kk];
          if (av == T(0)) continue;
          const T* b = B + kk * n;
          for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
      }
    }
  });
}

// C[m,k] (+)= A[m,n] * B[k,n]^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t n, int64_t k, bool accumulate) {
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* a = A + i * n;
      T* c = C + i * k;
      for (int64_t j = 0; j < k; ++j) {
        const T* b = B + j * n;
        T acc = accumulate ? c[j] : T(0);
        for (int64_t t = 0; t < n; ++t) acc += a[t] * b[t];
        c[j] = acc;
      }
    }
  });
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  parallel_for(k, [&](int64_t k0, int64_t k1) {
    if (!accumulate) {
      for (int64_t kk = k0; kk < k1; ++kk) std::fill(C + kk * n, C + kk * n + n, T(0));
    }
    for (int64_t i = 0; i < m; ++i) {
      const T* b = B + i * n;
      for (int64_t kk = k0; kk < k1; ++kk) {
        T av = A[i * k + kk];
        if (av == T(0)) continue;
        T* c = C + kk * n;
        for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  });
}

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_elementwise(const Tensor<T>& x, FwdFn fwd, BwdFn dfdx_from_xy) {
  std::vector<T> out(size_t(x.numel()));
  const T* xs = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  auto xn = x.node();
  return make_op<T>(
      x.shape(), std::move(out), {x}, [xn, dfdx_from_xy](Node<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* xv = xn->value.data();
        const T* yv = self.value.data();
        const T* g = self.grad.data();
        T* xg = xn->grad.data();
        for (size_t i = 0; i < self.value.size(); ++i) xg[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) bn->grad[i] += g[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) bn->grad[i] -= g[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    }
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "div");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) {
        T bv = bn->value[i];
        bn->grad[i] -= g[i] * an->value[i] / (bv * bv);
      }
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an, c](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i] * c;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_elementwise(
      a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// c - x
template <class T>
Tensor<T> sub_from_scalar(T c, const Tensor<T>& a) {
  return detail::unary_elementwise(
      a, [c](T x) { return c - x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> log_op(const Tensor<T>& a) {
  return detail::unary_elementwise(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return detail::unary_elementwise(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// subgradient at 0 is 0 for both relu and abs
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_elementwise(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> abs_op(const Tensor<T>& a) {
  return detail::unary_elementwise(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_elementwise(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// elementwise multiply / subtract by a constant vector (no gradient to it)
template <class T>
Tensor<T> mul_const_vec(const Tensor<T>& a, std::vector<T> v) {
  if (int64_t(v.size()) != a.numel()) throw DimensionError("mul_const_vec: size mismatch");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * v[i];
  auto an = a.node();
  auto vv = std::make_shared<std::vector<T>>(std::move(v));
  return make_op<T>(a.shape(), std::move(out), {a}, [an, vv](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i] * (*vv)[i];
  });
}

template <class T>
Tensor<T> sub_const_vec(const Tensor<T>& a, const std::vector<T>& v) {
  if (int64_t(v.size()) != a.numel()) throw DimensionError("sub_const_vec: size mismatch");
  std::vector<T> out(size_t(a.numel()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - v[i];
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
  std::vector<T> out(a.vec());
  auto an = a.node();
  return make_op<T>(std::move(new_shape), std::move(out), {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += g[i];
  });
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(size_t(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[size_t(j * m + i)] = a.data()[i * n + j];
  auto an = a.node();
  return make_op<T>({n, m}, std::move(out), {a}, [an, m, n](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < m; ++i) an->grad[size_t(i * n + j)] += g[j * m + i];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: empty input");
  int64_t d = parts[0].dim(int(parts[0].rank()) - 1);
  int64_t rows = 0;
  for (auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d)
      throw DimensionError("concat_rows: incompatible part shape " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(size_t(rows * d));
  for (auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
  std::vector<NodePtr<T>> nodes;
  for (auto& p : parts) nodes.push_back(p.node());
  return make_op<T>({rows, d}, std::move(out), parts, [nodes](Node<T>& self) {
    const T* g = self.grad.data();
    size_t off = 0;
    for (auto& pn : nodes) {
      size_t len = pn->value.size();
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (size_t i = 0; i < len; ++i) pn->grad[i] += g[off + i];
      }
      off += len;
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty input");
  int64_t m = parts[0].dim(0);
  int64_t d = 0;
  for (auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m)
      throw DimensionError("concat_cols: incompatible part shape " + shape_str(p.shape()));
    d += p.dim(1);
  }
  std::vector<T> out(size_t(m * d));
  int64_t col = 0;
  for (auto& p : parts) {
    int64_t w = p.dim(1);
    for (int64_t i = 0; i < m; ++i)
      std::copy(p.data() + i * w, p.data() + (i + 1) * w, out.begin() + i * d + col);
    col += w;
  }
  std::vector<NodePtr<T>> nodes;
  for (auto& p : parts) nodes.push_back(p.node());
  return make_op<T>({m, d}, std::move(out), parts, [nodes, m, d](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t col = 0;
    for (auto& pn : nodes) {
      int64_t w = pn->shape[1];
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < w; ++j) pn->grad[size_t(i * w + j)] += g[i * d + col + j];
      }
      col += w;
    }
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int64_t r0, int64_t r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw DimensionError("slice_rows: bad range on " + shape_str(a.shape()));
  int64_t d = a.dim(1);
  std::vector<T> out(a.data() + r0 * d, a.data() + r1 * d);
  auto an = a.node();
  return make_op<T>({r1 - r0, d}, std::move(out), {a}, [an, r0, d](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[size_t(r0 * d) + i] += g[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int64_t c0, int64_t c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw DimensionError("slice_cols: bad range on " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
  std::vector<T> out(size_t(m * w));
  for (int64_t i = 0; i < m; ++i)
    std::copy(a.data() + i * n + c0, a.data() + i * n + c1, out.begin() + i * w);
  auto an = a.node();
  return make_op<T>({m, w}, std::move(out), {a}, [an, c0, m, n, w](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) an->grad[size_t(i * n + c0 + j)] += g[i * w + j];
  });
}

// rows of a [V,d] table; also serves as embedding_lookup
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw InputError("gather_rows: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  std::vector<T> out(ids.size() * size_t(d));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data() + ids[i] * d, table.data() + (ids[i] + 1) * d, out.begin() + int64_t(i) * d);
  auto tn = table.node();
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return make_op<T>({int64_t(ids.size()), d}, std::move(out), {table}, [tn, ids_copy, d](Node<T>& self) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      T* dst = tn->grad.data() + (*ids_copy)[i] * d;
      const T* src = g + int64_t(i) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
  return gather_rows(table, ids);
}

// arbitrary flat-index gather, returns rank-1
template <class T>
Tensor<T> gather_flat(const Tensor<T>& a, const std::vector<int64_t>& idx) {
  for (int64_t i : idx)
    if (i < 0 || i >= a.numel()) throw InputError("gather_flat: index out of range");
  std::vector<T> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = a.data()[idx[i]];
  auto an = a.node();
  auto idx_copy = std::make_shared<std::vector<int64_t>>(idx);
  return make_op<T>({int64_t(idx.size())}, std::move(out), {a}, [an, idx_copy](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < idx_copy->size(); ++i) an->grad[size_t((*idx_copy)[i])] += g[i];
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) s += a.data()[i];
  auto an = a.node();
  return make_op<T>({1}, {s}, {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    T g = self.grad[0];
    for (auto& x : an->grad) x += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw UsageError("mean of empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// matmul: 2D x 2D, [B,m,k] x [B,k,n], [B,m,k] x [k,n]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: need rank >= 2, got " + shape_str(as) + " x " + shape_str(bs));
  int64_t k = as[as.size() - 1];
  if (bs[bs.size() - 2] != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(as) + " x " + shape_str(bs));

  int64_t m = as[as.size() - 2];
  int64_t n = bs[bs.size() - 1];
  int64_t batch_a = a.numel() / (m * k);
  int64_t batch_b = b.numel() / (k * n);
  if (!(batch_a == batch_b || batch_b == 1))
    throw DimensionError("matmul: cannot broadcast batches, " + shape_str(as) + " x " + shape_str(bs));
  if (a.rank() > 2 && b.rank() > 2 && batch_a != batch_b)
    throw DimensionError("matmul: batch mismatch, " + shape_str(as) + " x " + shape_str(bs));

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(size_t(batch_a * m * n));
  for (int64_t bidx = 0; bidx < batch_a; ++bidx) {
    const T* ap = a.data() + bidx * m * k;
    const T* bp = b.data() + (batch_b == 1 ? 0 : bidx * k * n);
    detail::gemm_nn(ap, bp, out.data() + bidx * m * n, m, k, n, false);
  }
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out_shape), std::move(out), {a, b},
                    [an, bn, m, k, n, batch_a, batch_b](Node<T>& self) {
                      const T* g = self.grad.data();
                      if (an->requires_grad) {
                        an->ensure_grad();
                        for (int64_t bi = 0; bi < batch_a; ++bi) {
                          const T* bp = bn->value.data() + (batch_b == 1 ? 0 : bi * k * n);
                          detail::gemm_nt(g + bi * m * n, bp, an->grad.data() + bi * m * k, m, n, k, true);
                        }
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (int64_t bi = 0; bi < batch_a; ++bi) {
                          const T* ap = an->value.data() + bi * m * k;
                          detail::gemm_tn(ap, g + bi * m * n, bn->grad.data() + (batch_b == 1 ? 0 : bi * k * n), m, k, n, true);
                        }
                      }
                    });
}

// x [..., d] + b [d]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  int64_t d = b.dim(0), rows = x.numel() / d;
  std::vector<T> out(size_t(x.numel()));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < d; ++j) out[size_t(i * d + j)] = x.data()[i * d + j] + b.data()[j];
  auto xn = x.node(), bn = b.node();
  return make_op<T>(x.shape(), std::move(out), {x, b}, [xn, bn, rows, d](Node<T>& self) {
    const T* g = self.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) xn->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < d; ++j) bn->grad[size_t(j)] += g[i * d + j];
    }
  });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// softmax along an axis, stabilised by max subtraction
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  int64_t n = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  std::vector<T> out(size_t(x.numel()));
  const T* xs = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* src = xs + o * n * inner + in;
      T* dst = out.data() + o * n * inner + in;
      T mx = src[0];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, src[j * inner]);
      T denom = T(0);
      for (int64_t j = 0; j < n; ++j) {
        T e = std::exp(src[j * inner] - mx);
        dst[j * inner] = e;
        denom += e;
      }
      T inv = T(1) / denom;
      for (int64_t j = 0; j < n; ++j) dst[j * inner] *= inv;
    }
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [xn, n, inner, outer](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * n * inner + in;
        T dot = T(0);
        for (int64_t j = 0; j < n; ++j) dot += y[base + j * inner] * g[base + j * inner];
        for (int64_t j = 0; j < n; ++j)
          xn->grad[size_t(base + j * inner)] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// normalisation
// ---------------------------------------------------------------------------

// x: [C,H,W] or [N,C,H,W]; gamma/beta: [C]
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int num_groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("group_norm: expected rank 3 or 4, got " + shape_str(x.shape()));
  int64_t nb = x.rank() == 4 ? x.dim(0) : 1;
  int64_t c = x.dim(x.rank() - 3), h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (c % num_groups != 0)
    throw ConfigError("group_norm: channels " + std::to_string(c) + " not divisible by groups " + std::to_string(num_groups));
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("group_norm: affine params must have C elements");

  int64_t cg = c / num_groups;
  int64_t gsz = cg * h * w;
  std::vector<T> out(size_t(x.numel()));
  auto stats = std::make_shared<std::vector<T>>(size_t(nb * num_groups * 2));  // mean, inv_std per group

  const T* xs = x.data();
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t g = 0; g < num_groups; ++g) {
      const T* src = xs + (b * c + g * cg) * h * w;
      T m = T(0);
      for (int64_t i = 0; i < gsz; ++i) m += src[i];
      m /= T(gsz);
      T v = T(0);
      for (int64_t i = 0; i < gsz; ++i) {
        T d = src[i] - m;
        v += d * d;
      }
      v /= T(gsz);
      T inv_std = T(1) / std::sqrt(v + eps);
      (*stats)[size_t((b * num_groups + g) * 2)] = m;
      (*stats)[size_t((b * num_groups + g) * 2 + 1)] = inv_std;
      T* dst = out.data() + (b * c + g * cg) * h * w;
      for (int64_t cc = 0; cc < cg; ++cc) {
        T ga = gamma.data()[g * cg + cc], be = beta.data()[g * cg + cc];
        for (int64_t i = 0; i < h * w; ++i) {
          dst[cc * h * w + i] = (src[cc * h * w + i] - m) * inv_std * ga + be;
        }
      }
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
                    [xn, gn, bn, stats, nb, num_groups, cg, h, w](Node<T>& self) {
                      int64_t hw = h * w, gsz = cg * hw;
                      const T* g = self.grad.data();
                      const T* xv = xn->value.data();
                      if (gn->requires_grad) gn->ensure_grad();
                      if (bn->requires_grad) bn->ensure_grad();
                      if (xn->requires_grad) xn->ensure_grad();
                      for (int64_t b = 0; b < nb; ++b) {
                        for (int64_t gr = 0; gr < num_groups; ++gr) {
                          T m = (*stats)[size_t((b * num_groups + gr) * 2)];
                          T inv_std = (*stats)[size_t((b * num_groups + gr) * 2 + 1)];
                          int64_t base = (b * (num_groups * cg) + gr * cg) * hw;
                          // accumulate per-channel affine grads and group sums
                          T sum_gd = T(0), sum_gdx = T(0);
                          for (int64_t cc = 0; cc < cg; ++cc) {
                            T ga = gn->value[size_t(gr * cg + cc)];
                            T dg = T(0), db = T(0);
                            for (int64_t i = 0; i < hw; ++i) {
                              int64_t idx = base + cc * hw + i;
                              T xhat = (xv[idx] - m) * inv_std;
                              dg += g[idx] * xhat;
                              db += g[idx];
                              sum_gd += ga * g[idx];
                              sum_gdx += ga * g[idx] * xhat;
                            }
                            if (gn->requires_grad) gn->grad[size_t(gr * cg + cc)] += dg;
                            if (bn->requires_grad) bn->grad[size_t(gr * cg + cc)] += db;
                          }
                          if (xn->requires_grad) {
                            for (int64_t cc = 0; cc < cg; ++cc) {
                              T ga = gn->value[size_t(gr * cg + cc)];
                              for (int64_t i = 0; i < hw; ++i) {
                                int64_t idx = base + cc * hw + i;
                                T xhat = (xv[idx] - m) * inv_std;
                                xn->grad[size_t(idx)] +=
                                    inv_std * (ga * g[idx] - (sum_gd + xhat * sum_gdx) / T(gsz));
                              }
                            }
                          }
                        }
                      }
                    });
}

// x: [..., d]; gamma/beta: [d]
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  int64_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: affine params must have d elements");
  int64_t rows = x.numel() / d;
  std::vector<T> out(size_t(x.numel()));
  auto stats = std::make_shared<std::vector<T>>(size_t(rows * 2));
  const T* xs = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = xs + r * d;
    T m = T(0);
    for (int64_t j = 0; j < d; ++j) m += src[j];
    m /= T(d);
    T v = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T dd = src[j] - m;
      v += dd * dd;
    }
    v /= T(d);
    T inv_std = T(1) / std::sqrt(v + eps);
    (*stats)[size_t(r * 2)] = m;
    (*stats)[size_t(r * 2 + 1)] = inv_std;
    T* dst = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) dst[j] = (src[j] - m) * inv_std * gamma.data()[j] + beta.data()[j];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, [xn, gn, bn, stats, rows, d](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv = xn->value.data();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      T m = (*stats)[size_t(r * 2)], inv_std = (*stats)[size_t(r * 2 + 1)];
      T sum_gd = T(0), sum_gdx = T(0);
      for (int64_t j = 0; j < d; ++j) {
        int64_t idx = r * d + j;
        T xhat = (xv[idx] - m) * inv_std;
        T ga = gn->value[size_t(j)];
        sum_gd += ga * g[idx];
        sum_gdx += ga * g[idx] * xhat;
        if (gn->requires_grad) gn->grad[size_t(j)] += g[idx] * xhat;
        if (bn->requires_grad) bn->grad[size_t(j)] += g[idx];
      }
      if (xn->requires_grad) {
        for (int64_t j = 0; j < d; ++j) {
          int64_t idx = r * d + j;
          T xhat = (xv[idx] - m) * inv_std;
          T ga = gn->value[size_t(j)];
          xn->grad[size_t(idx)] += inv_std * (ga * g[idx] - (sum_gd + xhat * sum_gdx) / T(d));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// convolutions (single image, [C,H,W])
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, T* col) {
  // col: [c*kh*kw, ho*wo]
  for (int64_t cc = 0; cc < c; ++cc) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((cc * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst + oy * wo, dst + (oy + 1) * wo, T(0));
            continue;
          }
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kj - pad;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? x[(cc * h + iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_accum(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* x) {
  for (int64_t cc = 0; cc < c; ++cc) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((cc * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) x[(cc * h + iy) * w + ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [Cin,H,W], kernel: [Cout,Cin,kh,kw] -> [Cout,Ho,Wo]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int64_t stride = 1, int64_t pad = 0) {
  if (x.rank() != 3 || kernel.rank() != 4)
    throw DimensionError("conv2d: expected x [C,H,W], kernel [Cout,Cin,kh,kw]; got " + shape_str(x.shape()) +
                         " and " + shape_str(kernel.shape()));
  int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  int64_t cout = kernel.dim(0), kcin = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (cin != kcin)
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (w + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: empty output for input " + shape_str(x.shape()));

  std::vector<T> col(size_t(cin * kh * kw * ho * wo));
  detail::im2col(x.data(), cin, h, w, kh, kw, stride, pad, ho, wo, col.data());
  std::vector<T> out(size_t(cout * ho * wo));
  detail::gemm_nn(kernel.data(), col.data(), out.data(), cout, cin * kh * kw, ho * wo, false);

  auto xn = x.node(), kn = kernel.node();
  return make_op<T>({cout, ho, wo}, std::move(out), {x, kernel},
                    [xn, kn, cin, h, w, cout, kh, kw, stride, pad, ho, wo](Node<T>& self) {
                      const T* g = self.grad.data();
                      // col is recomputed here rather than kept from the forward pass
                      std::vector<T> col(size_t(cin * kh * kw * ho * wo));
                      detail::im2col(xn->value.data(), cin, h, w, kh, kw, stride, pad, ho, wo, col.data());
                      if (kn->requires_grad) {
                        kn->ensure_grad();
                        detail::gemm_nt(g, col.data(), kn->grad.data(), cout, ho * wo, cin * kh * kw, true);
                      }
                      if (xn->requires_grad) {
                        xn->ensure_grad();
                        std::vector<T> dcol(size_t(cin * kh * kw * ho * wo));
                        detail::gemm_tn(kn->value.data(), g, dcol.data(), cout, cin * kh * kw, ho * wo, false);
                        detail::col2im_accum(dcol.data(), cin, h, w, kh, kw, stride, pad, ho, wo, xn->grad.data());
                      }
                    });
}

// x: [Cin,H,W], kernel: [Cin,Cout,kh,kw] -> [Cout,(H-1)*s+kh,(W-1)*s+kw]
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int64_t stride) {
  if (x.rank() != 3 || kernel.rank() != 4)
    throw DimensionError("transposed_conv2d: expected x [C,H,W], kernel [Cin,Cout,kh,kw]; got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kernel.dim(0) != cin)
    throw DimensionError("transposed_conv2d: channels " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(kernel.shape()));
  int64_t cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  int64_t ho = (h - 1) * stride + kh;
  int64_t wo = (w - 1) * stride + kw;

  std::vector<T> out(size_t(cout * ho * wo), T(0));
  const T* xs = x.data();
  const T* ks = kernel.data();
  parallel_for(cout, [&](int64_t c0, int64_t c1) {
    for (int64_t co = c0; co < c1; ++co) {
      T* dst = out.data() + co * ho * wo;
      for (int64_t ci = 0; ci < cin; ++ci) {
        const T* src = xs + ci * h * w;
        const T* kk = ks + (ci * cout + co) * kh * kw;
        for (int64_t iy = 0; iy < h; ++iy) {
          for (int64_t ix = 0; ix < w; ++ix) {
            T v = src[iy * w + ix];
            if (v == T(0)) continue;
            T* obase = dst + (iy * stride) * wo + ix * stride;
            for (int64_t ki = 0; ki < kh; ++ki)
              for (int64_t kj = 0; kj < kw; ++kj) obase[ki * wo + kj] += v * kk[ki * kw + kj];
          }
        }
      }
    }
  });

  auto xn = x.node(), kn = kernel.node();
  return make_op<T>({cout, ho, wo}, std::move(out), {x, kernel},
                    [xn, kn, cin, h, w, cout, kh, kw, stride, ho, wo](Node<T>& self) {
                      const T* g = self.grad.data();
                      if (xn->requires_grad) {
                        xn->ensure_grad();
                        // dx is an ordinary convolution of the output grad
                        parallel_for(cin, [&](int64_t a0, int64_t a1) {
                          for (int64_t ci = a0; ci < a1; ++ci) {
                            T* dx = xn->grad.data() + ci * h * w;
                            for (int64_t co = 0; co < cout; ++co) {
                              const T* kk = kn->value.data() + (ci * cout + co) * kh * kw;
                              const T* go = g + co * ho * wo;
                              for (int64_t iy = 0; iy < h; ++iy)
                                for (int64_t ix = 0; ix < w; ++ix) {
                                  T acc = T(0);
                                  const T* ob = go + (iy * stride) * wo + ix * stride;
                                  for (int64_t ki = 0; ki < kh; ++ki)
                                    for (int64_t kj = 0; kj < kw; ++kj) acc += ob[ki * wo + kj] * kk[ki * kw + kj];
                                  dx[iy * w + ix] += acc;
                                }
                            }
                          }
                        });
                      }
                      if (kn->requires_grad) {
                        kn->ensure_grad();
                        for (int64_t ci = 0; ci < cin; ++ci) {
                          const T* src = xn->value.data() + ci * h * w;
                          for (int64_t co = 0; co < cout; ++co) {
                            T* dk = kn->grad.data() + (ci * cout + co) * kh * kw;
                            const T* go = g + co * ho * wo;
                            for (int64_t iy = 0; iy < h; ++iy)
                              for (int64_t ix = 0; ix < w; ++ix) {
                                T v = src[iy * w + ix];
                                if (v == T(0)) continue;
                                const T* ob = go + (iy * stride) * wo + ix * stride;
                                for (int64_t ki = 0; ki < kh; ++ki)
                                  for (int64_t kj = 0; kj < kw; ++kj) dk[ki * kw + kj] += v * ob[ki * wo + kj];
                              }
                          }
                        }
                      }
                    });
}

// per-channel bias for [C,H,W]
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(size_t(x.numel()));
  for (int64_t cc = 0; cc < c; ++cc)
    for (int64_t i = 0; i < hw; ++i) out[size_t(cc * hw + i)] = x.data()[cc * hw + i] + b.data()[cc];
  auto xn = x.node(), bn = b.node();
  return make_op<T>(x.shape(), std::move(out), {x, b}, [xn, bn, c, hw](Node<T>& self) {
    const T* g = self.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) xn->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t cc = 0; cc < c; ++cc) {
        T acc = T(0);
        for (int64_t i = 0; i < hw; ++i) acc += g[cc * hw + i];
        bn->grad[size_t(cc)] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// cross entropy over [T,V] logits; mean over rows whose target != ignore_index
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, int ignore_index = -1) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [T,V], got " + shape_str(logits.shape()));
  int64_t rows = logits.dim(0), v = logits.dim(1);
  if (int64_t(targets.size()) != rows) throw DimensionError("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t != ignore_index && (t < 0 || t >= v)) throw InputError("cross_entropy: target id out of range");

  int64_t cnt = 0;
  T loss = T(0);
  const T* ls = logits.data();
  for (int64_t r = 0; r < rows; ++r) {
    if (targets[size_t(r)] == ignore_index) continue;
    const T* row = ls + r * v;
    T mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    loss += std::log(denom) - (row[targets[size_t(r)]] - mx);
    ++cnt;
  }
  if (cnt > 0) loss /= T(cnt);
  auto ln = logits.node();
  auto tg = std::make_shared<std::vector<int>>(targets);
  return make_op<T>({1}, {loss}, {logits}, [ln, tg, rows, v, ignore_index, cnt](Node<T>& self) {
    if (!ln->requires_grad || cnt == 0) return;
    ln->ensure_grad();
    T g = self.grad[0] / T(cnt);
    const T* ls = ln->value.data();
    for (int64_t r = 0; r < rows; ++r) {
      int t = (*tg)[size_t(r)];
      if (t == ignore_index) continue;
      const T* row = ls + r * v;
      T mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      T denom = T(0);
      for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      for (int64_t j = 0; j < v; ++j) {
        T p = std::exp(row[j] - mx) / denom;
        ln->grad[size_t(r * v + j)] += g * (p - (j == t ? T(1) : T(0)));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// gradient checking against central finite differences
// ---------------------------------------------------------------------------

template <class T>
struct GradCheckReport {
  std::vector<T> max_rel_err;  // per input
  T worst = T(0);
  bool pass = false;
};

// f must return a scalar tensor. Relative error uses max(1,|a|,|b|) in the
// denominator. h = h_scale*(1+|x|) per element.
template <class T>
GradCheckReport<T> check_gradients(const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& f,
                                   std::vector<Tensor<T>> inputs, T tol, T h_scale = T(1e-6)) {
  for (auto& in : inputs) in.set_requires_grad(true);
  for (auto& in : inputs) in.zero_grad();
  Tensor<T> out = f(inputs);
  if (out.numel() != 1) throw UsageError("check_gradients: f must return a scalar");
  backward(out);

  GradCheckReport<T> report;
  report.max_rel_err.assign(inputs.size(), T(0));
  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    auto& in = inputs[ii];
    std::vector<T> ad = in.has_grad() ? in.grad_view() : std::vector<T>(size_t(in.numel()), T(0));
    for (int64_t e = 0; e < in.numel(); ++e) {
      T x0 = in.data()[e];
      T h = h_scale * (T(1) + std::abs(x0));
      T fp, fm;
      {
        NoGradGuard ng;
        in.data()[e] = x0 + h;
        fp = f(inputs).item();
        in.data()[e] = x0 - h;
        fm = f(inputs).item();
        in.data()[e] = x0;
      }
      T fd = (fp - fm) / (T(2) * h);
      T err = std::abs(ad[size_t(e)] - fd) / std::max({T(1), std::abs(fd), std::abs(ad[size_t(e)])});
      report.max_rel_err[ii] = std::max(report.max_rel_err[ii], err);
    }
    report.worst = std::max(report.worst, report.max_rel_err[ii]);
  }
  report.pass = report.worst <= tol;
  return report;
}

template <class T>
bool has_nan_or_inf(const Tensor<T>& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(double(t.data()[i]))) return true;
  return false;
}

}  // namespace deer
