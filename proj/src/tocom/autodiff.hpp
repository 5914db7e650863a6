#pragma once

// Reverse-mode differentiation over the fixed op set the transformer needs.
//
// A Var is a handle to a node in a dynamically built graph. Ops whose inputs
// all lack requires_grad produce plain constants and record nothing, so
// forward-only evaluation carries no tape overhead.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "tocom/tensor.hpp"

namespace tocom::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool consumed = false;  // set on the root of a finished backward pass
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Lazily allocated gradient buffer, zero-filled.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape(), T(0));
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value);
  // Leaf that receives a gradient.
  static Var parameter(Tensor<T> value);

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && !node_->backward_fn; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  // Mutable access for optimizers; only valid on leaves.
  Tensor<T>& mutable_value();

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  const Shape& shape() const { return node_->value.shape(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Output row i = sum of weight * input[source] over rows[i].
struct RowMix {
  std::size_t in_rows = 0;
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows;

  static RowMix gather(std::size_t in_rows, std::span<const std::size_t> index);
};

// Runs reverse-mode differentiation from a scalar loss. Every node with
// requires_grad on the path receives its gradient (leaves accumulate).
// Throws if the loss is not 1x1 or the graph was already differentiated.
template <class T>
void backward(const Var<T>& loss);

// Clears the consumed flag so backward may run on the same graph again.
template <class T>
void reset(const Var<T>& loss);

template <class T>
Var<T> stop_gradient(const Var<T>& x);

// --- linear algebra ---
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> transpose(const Var<T>& a);
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T s);
// a (n x c) + bias (1 x c) broadcast over rows.
template <class T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias);
template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts);
template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> index);
template <class T>
Var<T> mix_rows(const Var<T>& a, const RowMix& mix);
template <class T>
Var<T> sum(const Var<T>& a);
template <class T>
Var<T> mean(const Var<T>& a);

// --- nonlinearities ---
// Row softmax; bias (1 x cols) is added to every row before normalization.
template <class T>
Var<T> softmax_rows(const Var<T>& x, const Tensor<T>* bias = nullptr);
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6));
template <class T>
Var<T> gelu(const Var<T>& x);
template <class T>
Var<T> relu(const Var<T>& x);

// Multi-head self-attention over a batch of equally sized token sets.
// q, k, v: (batch*tokens) x dim. key_bias: batch x tokens additive logit per
// key column (may be empty). When cls_attention is non-null it receives the
// batch x tokens softmax row of token 0, averaged over heads.
template <class T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t heads,
                            const Tensor<T>& key_bias, Tensor<T>* cls_attention = nullptr);

// --- losses (teacher side is a plain tensor: no gradient reaches it) ---
// mean over rows of KL(softmax(teacher) || softmax(student)).
template <class T>
Var<T> kl_soft_targets(const Var<T>& student, const Tensor<T>& teacher);
template <class T>
Var<T> l1_feature(const Var<T>& student, const Tensor<T>& teacher);
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

// Non-differentiable reference kernels used by the ops above and by tests.
template <class T>
Tensor<T> softmax_rows_value(const Tensor<T>& x, const Tensor<T>* bias = nullptr);
template <class T>
T gelu_value(T x);

}  // namespace tocom::ad
