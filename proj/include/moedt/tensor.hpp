#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// Every op result keeps shared pointers to its inputs and a closure that
// accumulates input gradients from the result gradient. Calling backward()
// on a scalar walks the graph in reverse topological order. Tensors are
// row-major; ops that care about rank treat a tensor as [rows, cols] where
// cols is the last dimension.
//
// All reductions accumulate in index-ascending order with a single
// accumulator so results are reproducible bit-for-bit within one build.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moedt/error.hpp"

namespace moedt {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

// While alive, ops on this thread record no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<T> values,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t rows() const;
  int64_t cols() const;

  std::span<const T> data() const { return node_->value; }
  // Only meaningful on leaves; mutating an op result does not re-run it.
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  void backward() const;

  // Leaf copy of the current values; shares nothing with this tensor.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// ---- primitives --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// x[r, c] + bias[c]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
// x[r, c] * w[r]; w has one entry per row of x.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
// Per row: softmax over the k largest entries (ties go to the lower
// index); every other entry is exactly zero.
template <typename T>
Tensor<T> topk_softmax_rows(const Tensor<T>& x, int k);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

// table[V, d] -> [ids.size(), d]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int64_t> ids);
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int64_t> ids);
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t begin, int64_t end);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t begin, int64_t end);

// Inverted dropout. The mask for element i is a pure function of (key, i).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, uint64_t key);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// sum(mask * (pred - target)^2) / sum(mask). Masked entries contribute
// exactly zero to value and gradient. Throws if the mask is all zero.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target,
                     std::span<const T> mask);

// Multi-head causal self-attention over packed sequences.
//   qkv: [batch * seq_len, 3 * hidden], columns laid out as q | k | v.
//   key_valid: one flag per row; invalid keys are only visible to
//   themselves.
// Returns [batch * seq_len, hidden].
template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& qkv, int64_t batch,
                                int64_t seq_len, int64_t n_heads,
                                std::span<const uint8_t> key_valid);

// Element-type conversion of a leaf (values only).
template <typename To, typename From>
Tensor<To> cast_leaf(const Tensor<From>& x) {
  std::vector<To> values(x.data().begin(), x.data().end());
  return Tensor<To>::from_data(x.shape(), std::move(values),
                               x.requires_grad());
}

}  // namespace moedt
