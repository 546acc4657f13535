#include "moedt/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "moedt/rng.hpp"

namespace moedt {

namespace {

thread_local int no_grad_depth = 0;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string pair_str(const Shape& a, const Shape& b) {
  return shape_str(a) + " vs " + shape_str(b);
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
#ifndef NDEBUG
  for (T v : values) {
    if (!std::isfinite(v)) throw Error(std::string(op) + ": non-finite value");
  }
#else
  (void)op;
  (void)values;
#endif
}

// Creates an op result. The backward closure is kept only if grad mode is
// on and some parent wants a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& p : parents) any = any || p->requires_grad;
  }
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
int64_t rows_of(const Shape& s) {
  int64_t r = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return s.empty() ? 1 : r;
}

int64_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <typename T>
void require_2d(const char* op, const Tensor<T>& t) {
  if (t.shape().size() != 2) {
    shape_fail(op, "expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, pair_str(a.shape(), b.shape()));
}

template <typename T, typename F, typename D>
Tensor<T> elementwise(const char* op, const Tensor<T>& x, F f, D df) {
  const auto& xv = x.ptr()->value;
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xp = x.ptr();
  return make_result<T>(op, x.shape(), std::move(out), {xp},
                        [xp, df](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          const auto& in = xp->value;
                          for (size_t i = 0; i < in.size(); ++i) {
                            g[i] += self.grad[i] * df(in[i], self.value[i]);
                          }
                        });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> values,
                               bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) shape_fail("from_data", "non-positive dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    shape_fail("from_data", shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  std::vector<T> values(static_cast<size_t>(shape_numel(shape)), T(0));
  return from_data(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({1}, {value});
}

template <typename T>
int64_t Tensor<T>::rows() const {
  return rows_of<T>(node_->shape);
}

template <typename T>
int64_t Tensor<T>::cols() const {
  return cols_of(node_->shape);
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(node_->shape) +
                     " is not a scalar");
  }
  return node_->value[0];
}

template <typename T>
void Tensor<T>::backward() const {
  if (node_->value.size() != 1) {
    throw ShapeError("backward: loss of shape " + shape_str(node_->shape) +
                     " is not a scalar");
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      check_finite(n->op, n->grad);
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(node_->shape, node_->value, false);
}

// ---- linear algebra ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) shape_fail("matmul", pair_str(a.shape(), b.shape()));
  std::vector<T> out(static_cast<size_t>(m * n));
  {
    ConstMapMat<T> A(a.ptr()->value.data(), m, k);
    ConstMapMat<T> B(b.ptr()->value.data(), k, n);
    MapMat<T> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto ap = a.ptr(), bp = b.ptr();
  return make_result<T>("matmul", {m, n}, std::move(out), {ap, bp},
                        [ap, bp, m, k, n](Node<T>& self) {
                          ConstMapMat<T> G(self.grad.data(), m, n);
                          if (ap->requires_grad) {
                            MapMat<T> GA(ap->grad_buffer(), m, k);
                            ConstMapMat<T> B(bp->value.data(), k, n);
                            GA.noalias() += G * B.transpose();
                          }
                          if (bp->requires_grad) {
                            MapMat<T> GB(bp->grad_buffer(), k, n);
                            ConstMapMat<T> A(ap->value.data(), m, k);
                            GB.noalias() += A.transpose() * G;
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a, b);
  const auto& av = a.ptr()->value;
  const auto& bv = b.ptr()->value;
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto ap = a.ptr(), bp = b.ptr();
  return make_result<T>("add", a.shape(), std::move(out), {ap, bp},
                        [ap, bp](Node<T>& self) {
                          for (auto* p : {ap.get(), bp.get()}) {
                            if (!p->requires_grad) continue;
                            T* g = p->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("sub", a, b);
  const auto& av = a.ptr()->value;
  const auto& bv = b.ptr()->value;
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto ap = a.ptr(), bp = b.ptr();
  return make_result<T>("sub", a.shape(), std::move(out), {ap, bp},
                        [ap, bp](Node<T>& self) {
                          if (ap->requires_grad) {
                            T* g = ap->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                          if (bp->requires_grad) {
                            T* g = bp->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a, b);
  const auto& av = a.ptr()->value;
  const auto& bv = b.ptr()->value;
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto ap = a.ptr(), bp = b.ptr();
  return make_result<T>("mul", a.shape(), std::move(out), {ap, bp},
                        [ap, bp](Node<T>& self) {
                          if (ap->requires_grad) {
                            T* g = ap->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bp->value[i];
                          }
                          if (bp->requires_grad) {
                            T* g = bp->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ap->value[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return elementwise<T>(
      "scale", a, [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const int64_t r = x.rows(), c = x.cols();
  if (bias.numel() != c) shape_fail("add_bias", pair_str(x.shape(), bias.shape()));
  const auto& xv = x.ptr()->value;
  const auto& bv = bias.ptr()->value;
  std::vector<T> out(xv.size());
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  }
  auto xp = x.ptr(), bp = bias.ptr();
  return make_result<T>("add_bias", x.shape(), std::move(out), {xp, bp},
                        [xp, bp, r, c](Node<T>& self) {
                          if (xp->requires_grad) {
                            T* g = xp->grad_buffer();
                            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                          if (bp->requires_grad) {
                            T* g = bp->grad_buffer();
                            for (int64_t i = 0; i < r; ++i) {
                              for (int64_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w) {
  const int64_t r = x.rows(), c = x.cols();
  if (w.numel() != r) shape_fail("scale_rows", pair_str(x.shape(), w.shape()));
  const auto& xv = x.ptr()->value;
  const auto& wv = w.ptr()->value;
  std::vector<T> out(xv.size());
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * wv[i];
  }
  auto xp = x.ptr(), wp = w.ptr();
  return make_result<T>("scale_rows", x.shape(), std::move(out), {xp, wp},
                        [xp, wp, r, c](Node<T>& self) {
                          if (xp->requires_grad) {
                            T* g = xp->grad_buffer();
                            for (int64_t i = 0; i < r; ++i) {
                              const T wi = wp->value[i];
                              for (int64_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * wi;
                            }
                          }
                          if (wp->requires_grad) {
                            T* g = wp->grad_buffer();
                            for (int64_t i = 0; i < r; ++i) {
                              T acc = 0;
                              for (int64_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * xp->value[i * c + j];
                              g[i] += acc;
                            }
                          }
                        });
}

// ---- normalisation / activations -------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  const int64_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    shape_fail("layer_norm", pair_str(x.shape(), gamma.shape()));
  }
  const auto& xv = x.ptr()->value;
  const auto& gv = gamma.ptr()->value;
  const auto& bv = beta.ptr()->value;
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const T* row = &xv[i * c];
    T mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= T(c);
    T var = 0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int64_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  auto xp = x.ptr(), gp = gamma.ptr(), bp = beta.ptr();
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {xp, gp, bp},
      [xp, gp, bp, xhat, inv_std, r, c](Node<T>& self) {
        const auto& dy = self.grad;
        if (gp->requires_grad) {
          T* g = gp->grad_buffer();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) g[j] += dy[i * c + j] * (*xhat)[i * c + j];
        }
        if (bp->requires_grad) {
          T* g = bp->grad_buffer();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) g[j] += dy[i * c + j];
        }
        if (xp->requires_grad) {
          T* g = xp->grad_buffer();
          const auto& gam = gp->value;
          for (int64_t i = 0; i < r; ++i) {
            T mean_d = 0, mean_dh = 0;
            for (int64_t j = 0; j < c; ++j) {
              const T d = dy[i * c + j] * gam[j];
              mean_d += d;
              mean_dh += d * (*xhat)[i * c + j];
            }
            mean_d /= T(c);
            mean_dh /= T(c);
            for (int64_t j = 0; j < c; ++j) {
              const T d = dy[i * c + j] * gam[j];
              g[i * c + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * c + j] * mean_dh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int64_t r = x.rows(), c = x.cols();
  const auto& xv = x.ptr()->value;
  std::vector<T> out(xv.size());
  for (int64_t i = 0; i < r; ++i) {
    const T* row = &xv[i * c];
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (int64_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      s += out[i * c + j];
    }
    for (int64_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  auto xp = x.ptr();
  return make_result<T>("softmax_rows", x.shape(), std::move(out), {xp},
                        [xp, r, c](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          for (int64_t i = 0; i < r; ++i) {
                            T dot = 0;
                            for (int64_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
                            for (int64_t j = 0; j < c; ++j) {
                              g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> topk_softmax_rows(const Tensor<T>& x, int k) {
  const int64_t r = x.rows(), c = x.cols();
  if (k < 1 || k > c) {
    throw Error("topk_softmax_rows: k=" + std::to_string(k) + " outside [1, " +
                std::to_string(c) + "]");
  }
  const auto& xv = x.ptr()->value;
  std::vector<T> out(xv.size(), T(0));
  std::vector<int64_t> idx(static_cast<size_t>(c));
  for (int64_t i = 0; i < r; ++i) {
    const T* row = &xv[i * c];
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [row](int64_t a, int64_t b) { return row[a] > row[b]; });
    T mx = row[idx[0]];
    T s = 0;
    for (int q = 0; q < k; ++q) {
      out[i * c + idx[q]] = std::exp(row[idx[q]] - mx);
      s += out[i * c + idx[q]];
    }
    for (int q = 0; q < k; ++q) out[i * c + idx[q]] /= s;
  }
  auto xp = x.ptr();
  return make_result<T>("topk_softmax_rows", x.shape(), std::move(out), {xp},
                        [xp, r, c](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          for (int64_t i = 0; i < r; ++i) {
                            T dot = 0;
                            for (int64_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
                            for (int64_t j = 0; j < c; ++j) {
                              const T y = self.value[i * c + j];
                              if (y != T(0)) g[i * c + j] += y * (self.grad[i * c + j] - dot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return elementwise<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return elementwise<T>(
      "gelu", x,
      [](T v) {
        const T t = std::tanh(T(kC) * (v + T(kA) * v * v * v));
        return T(0.5) * v * (T(1) + t);
      },
      [](T v, T) {
        const T t = std::tanh(T(kC) * (v + T(kA) * v * v * v));
        return T(0.5) * (T(1) + t) +
               T(0.5) * v * (T(1) - t * t) * T(kC) * (T(1) + T(3 * kA) * v * v);
      });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return elementwise<T>(
      "tanh", x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

// ---- indexing ---------------------------------------------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int64_t> ids) {
  const int64_t r = x.rows(), c = x.cols();
  if (ids.empty()) shape_fail("gather_rows", "empty index list");
  std::vector<T> out(ids.size() * static_cast<size_t>(c));
  const auto& xv = x.ptr()->value;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= r) {
      shape_fail("gather_rows", "index " + std::to_string(ids[i]) +
                                    " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(&xv[ids[i] * c], c, &out[i * c]);
  }
  auto xp = x.ptr();
  auto idv = std::make_shared<std::vector<int64_t>>(ids.begin(), ids.end());
  return make_result<T>("gather_rows", {static_cast<int64_t>(ids.size()), c},
                        std::move(out), {xp}, [xp, idv, c](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          for (size_t i = 0; i < idv->size(); ++i) {
                            const int64_t src = (*idv)[i];
                            for (int64_t j = 0; j < c; ++j) g[src * c + j] += self.grad[i * c + j];
                          }
                        });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int64_t> ids) {
  require_2d("embedding", table);
  return gather_rows(table, ids);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) shape_fail("concat_rows", "no inputs");
  const int64_t c = parts[0].cols();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) shape_fail("concat_rows", pair_str(parts[0].shape(), p.shape()));
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(total * c));
  std::vector<std::shared_ptr<Node<T>>> ptrs;
  for (const auto& p : parts) {
    out.insert(out.end(), p.ptr()->value.begin(), p.ptr()->value.end());
    ptrs.push_back(p.ptr());
  }
  auto keep = ptrs;
  return make_result<T>("concat_rows", {total, c}, std::move(out), std::move(ptrs),
                        [keep](Node<T>& self) {
                          size_t off = 0;
                          for (const auto& p : keep) {
                            const size_t n = p->value.size();
                            if (p->requires_grad) {
                              T* g = p->grad_buffer();
                              for (size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
                            }
                            off += n;
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t begin, int64_t end) {
  const int64_t r = x.rows(), c = x.cols();
  if (begin < 0 || end > r || begin >= end) {
    shape_fail("slice_rows", "range [" + std::to_string(begin) + ", " +
                                 std::to_string(end) + ") on " + shape_str(x.shape()));
  }
  std::vector<T> out(x.ptr()->value.begin() + begin * c, x.ptr()->value.begin() + end * c);
  auto xp = x.ptr();
  return make_result<T>("slice_rows", {end - begin, c}, std::move(out), {xp},
                        [xp, begin, c](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer() + begin * c;
                          for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) shape_fail("concat_cols", "no inputs");
  const int64_t r = parts[0].rows();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) shape_fail("concat_cols", pair_str(parts[0].shape(), p.shape()));
    total += p.cols();
  }
  std::vector<T> out(static_cast<size_t>(r * total));
  std::vector<std::shared_ptr<Node<T>>> ptrs;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t c = p.cols();
    for (int64_t i = 0; i < r; ++i) {
      std::copy_n(&p.ptr()->value[i * c], c, &out[i * total + off]);
    }
    off += c;
    ptrs.push_back(p.ptr());
  }
  auto keep = ptrs;
  return make_result<T>("concat_cols", {r, total}, std::move(out), std::move(ptrs),
                        [keep, r, total](Node<T>& self) {
                          int64_t o = 0;
                          for (const auto& p : keep) {
                            const int64_t c = p->shape.back();
                            if (p->requires_grad) {
                              T* g = p->grad_buffer();
                              for (int64_t i = 0; i < r; ++i)
                                for (int64_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * total + o + j];
                            }
                            o += c;
                          }
                        });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t begin, int64_t end) {
  const int64_t r = x.rows(), c = x.cols();
  if (begin < 0 || end > c || begin >= end) {
    shape_fail("slice_cols", "range [" + std::to_string(begin) + ", " +
                                 std::to_string(end) + ") on " + shape_str(x.shape()));
  }
  const int64_t w = end - begin;
  std::vector<T> out(static_cast<size_t>(r * w));
  for (int64_t i = 0; i < r; ++i) std::copy_n(&x.ptr()->value[i * c + begin], w, &out[i * w]);
  auto xp = x.ptr();
  return make_result<T>("slice_cols", {r, w}, std::move(out), {xp},
                        [xp, begin, r, c, w](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          for (int64_t i = 0; i < r; ++i)
                            for (int64_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
                        });
}

// ---- regularisation / reductions ------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, uint64_t key) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  const auto& xv = x.ptr()->value;
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    const bool keep = unit_uniform(mix64(key ^ mix64(i))) >= p;
    (*mask)[i] = keep ? keep_scale : T(0);
    out[i] = xv[i] * (*mask)[i];
  }
  auto xp = x.ptr();
  return make_result<T>("dropout", x.shape(), std::move(out), {xp},
                        [xp, mask](Node<T>& self) {
                          if (!xp->requires_grad) return;
                          T* g = xp->grad_buffer();
                          for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.ptr()->value) s += v;
  auto xp = x.ptr();
  return make_result<T>("sum", {1}, {s}, {xp}, [xp](Node<T>& self) {
    if (!xp->requires_grad) return;
    T* g = xp->grad_buffer();
    for (size_t i = 0; i < xp->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target,
                     std::span<const T> mask) {
  const size_t n = pred.ptr()->value.size();
  if (target.size() != n || mask.size() != n) {
    shape_fail("masked_mse", "pred " + shape_str(pred.shape()) + " target " +
                                 std::to_string(target.size()) + " mask " +
                                 std::to_string(mask.size()));
  }
  T denom = 0;
  for (T m : mask) denom += m;
  if (denom <= T(0)) throw Error("masked_mse: every element is masked");
  auto diff = std::make_shared<std::vector<T>>(n);
  T acc = 0;
  for (size_t i = 0; i < n; ++i) {
    if (mask[i] == T(0)) {
      (*diff)[i] = T(0);
      continue;
    }
    const T d = pred.ptr()->value[i] - target[i];
    (*diff)[i] = mask[i] * d;
    acc += mask[i] * d * d;
  }
  auto pp = pred.ptr();
  return make_result<T>("masked_mse", {1}, {acc / denom}, {pp},
                        [pp, diff, denom](Node<T>& self) {
                          if (!pp->requires_grad) return;
                          T* g = pp->grad_buffer();
                          const T f = T(2) * self.grad[0] / denom;
                          for (size_t i = 0; i < diff->size(); ++i) g[i] += f * (*diff)[i];
                        });
}

// ---- attention ---------------------------------------------------------------

template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& qkv, int64_t batch,
                                int64_t seq_len, int64_t n_heads,
                                std::span<const uint8_t> key_valid) {
  require_2d("causal_self_attention", qkv);
  const int64_t rows = batch * seq_len;
  if (qkv.rows() != rows || qkv.cols() % 3 != 0) {
    shape_fail("causal_self_attention",
               shape_str(qkv.shape()) + " for batch " + std::to_string(batch) +
                   " x seq " + std::to_string(seq_len));
  }
  const int64_t hidden = qkv.cols() / 3;
  if (n_heads <= 0 || hidden % n_heads != 0) {
    shape_fail("causal_self_attention", "hidden " + std::to_string(hidden) +
                                            " not divisible by heads " +
                                            std::to_string(n_heads));
  }
  if (static_cast<int64_t>(key_valid.size()) != rows) {
    shape_fail("causal_self_attention", "key_valid length mismatch");
  }
  const int64_t dh = hidden / n_heads;
  const int64_t stride = 3 * hidden;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const T* in = qkv.ptr()->value.data();
  auto valid = std::make_shared<std::vector<uint8_t>>(key_valid.begin(), key_valid.end());
  // probs[(b * heads + h) * L * L + i * L + j]
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(batch * n_heads * seq_len * seq_len), T(0));
  std::vector<T> out(static_cast<size_t>(rows * hidden), T(0));

  auto allowed = [&](int64_t b, int64_t i, int64_t j) {
    return j == i || (*valid)[b * seq_len + j] != 0;
  };

  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < n_heads; ++h) {
      T* P = &(*probs)[(b * n_heads + h) * seq_len * seq_len];
      for (int64_t i = 0; i < seq_len; ++i) {
        const T* q = in + (b * seq_len + i) * stride + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j <= i; ++j) {
          if (!allowed(b, i, j)) continue;
          const T* k = in + (b * seq_len + j) * stride + hidden + h * dh;
          T s = 0;
          for (int64_t d = 0; d < dh; ++d) s += q[d] * k[d];
          s *= inv_sqrt;
          P[i * seq_len + j] = s;
          mx = std::max(mx, s);
        }
        T z = 0;
        for (int64_t j = 0; j <= i; ++j) {
          if (!allowed(b, i, j)) continue;
          const T e = std::exp(P[i * seq_len + j] - mx);
          P[i * seq_len + j] = e;
          z += e;
        }
        T* o = &out[(b * seq_len + i) * hidden + h * dh];
        for (int64_t j = 0; j <= i; ++j) {
          if (!allowed(b, i, j)) continue;
          P[i * seq_len + j] /= z;
          const T p = P[i * seq_len + j];
          const T* v = in + (b * seq_len + j) * stride + 2 * hidden + h * dh;
          for (int64_t d = 0; d < dh; ++d) o[d] += p * v[d];
        }
      }
    }
  }

  auto xp = qkv.ptr();
  return make_result<T>(
      "causal_self_attention", {rows, hidden}, std::move(out), {xp},
      [xp, probs, valid, batch, seq_len, n_heads, hidden, dh, stride,
       inv_sqrt](Node<T>& self) {
        if (!xp->requires_grad) return;
        const T* in = xp->value.data();
        T* g = xp->grad_buffer();
        std::vector<T> dP(static_cast<size_t>(seq_len));
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t h = 0; h < n_heads; ++h) {
            const T* P = &(*probs)[(b * n_heads + h) * seq_len * seq_len];
            for (int64_t i = 0; i < seq_len; ++i) {
              const T* dO = &self.grad[(b * seq_len + i) * hidden + h * dh];
              const T* q = in + (b * seq_len + i) * stride + h * dh;
              T* dq = g + (b * seq_len + i) * stride + h * dh;
              T dot = 0;
              for (int64_t j = 0; j <= i; ++j) {
                if (!(j == i || (*valid)[b * seq_len + j])) {
                  dP[j] = 0;
                  continue;
                }
                const T p = P[i * seq_len + j];
                const T* v = in + (b * seq_len + j) * stride + 2 * hidden + h * dh;
                T* dv = g + (b * seq_len + j) * stride + 2 * hidden + h * dh;
                T s = 0;
                for (int64_t d = 0; d < dh; ++d) {
                  s += dO[d] * v[d];
                  dv[d] += p * dO[d];
                }
                dP[j] = s;
                dot += p * s;
              }
              for (int64_t j = 0; j <= i; ++j) {
                if (!(j == i || (*valid)[b * seq_len + j])) continue;
                const T ds = P[i * seq_len + j] * (dP[j] - dot) * inv_sqrt;
                const T* k = in + (b * seq_len + j) * stride + hidden + h * dh;
                T* dk = g + (b * seq_len + j) * stride + hidden + h * dh;
                for (int64_t d = 0; d < dh; ++d) {
                  dq[d] += ds * k[d];
                  dk[d] += ds * q[d];
                }
              }
            }
          }
        }
      });
}

// ---- instantiations ----------------------------------------------------------

#define MOEDT_INSTANTIATE(T)                                                     \
  template class Tensor<T>;                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                 \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> scale_rows(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,              \
                                const Tensor<T>&, T);                            \
  template Tensor<T> softmax_rows(const Tensor<T>&);                             \
  template Tensor<T> topk_softmax_rows(const Tensor<T>&, int);                   \
  template Tensor<T> relu(const Tensor<T>&);                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                     \
  template Tensor<T> tanh(const Tensor<T>&);                                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int64_t>);      \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int64_t>);    \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                 \
  template Tensor<T> slice_rows(const Tensor<T>&, int64_t, int64_t);             \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                 \
  template Tensor<T> slice_cols(const Tensor<T>&, int64_t, int64_t);             \
  template Tensor<T> dropout(const Tensor<T>&, double, uint64_t);                \
  template Tensor<T> sum(const Tensor<T>&);                                      \
  template Tensor<T> mean(const Tensor<T>&);                                     \
  template Tensor<T> masked_mse(const Tensor<T>&, std::span<const T>,            \
                                std::span<const T>);                             \
  template Tensor<T> causal_self_attention(const Tensor<T>&, int64_t, int64_t,   \
                                           int64_t, std::span<const uint8_t>);

MOEDT_INSTANTIATE(float)
MOEDT_INSTANTIATE(double)

#undef MOEDT_INSTANTIATE

}  // namespace moedt
