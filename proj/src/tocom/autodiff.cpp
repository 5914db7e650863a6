#include "tocom/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace tocom::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedC = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw ValidationError(std::string("non-finite value produced by ") + op);
}

// Creates the result node. The graph edge is recorded only when some parent
// requires a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, const char* op, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  const bool needs = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(node));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

RowMix RowMix::gather(std::size_t in_rows, std::span<const std::size_t> index) {
  RowMix mix;
  mix.in_rows = in_rows;
  mix.rows.reserve(index.size());
  for (std::size_t i : index) mix.rows.push_back({{static_cast<std::uint32_t>(i), 1.0}});
  return mix;
}

template <class T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = "constant";
  return Var<T>(std::move(node));
}

template <class T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "parameter";
  return Var<T>(std::move(node));
}

template <class T>
Tensor<T>& Var<T>::mutable_value() {
  if (node_->backward_fn) throw ValidationError("mutable_value on a non-leaf node");
  return node_->value;
}

template <class T>
void backward(const Var<T>& loss) {
  Node<T>* root = loss.node();
  if (!root) throw ValidationError("backward on an empty Var");
  if (root->value.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(root->value.shape()));
  if (root->consumed) throw ValidationError("backward called twice on the same graph without reset");
  root->consumed = true;
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward_fn || n->grad.empty()) continue;
    n->backward_fn(*n);
    if (n != root) n->grad = Tensor<T>();  // interior gradients are not retained
  }
}

template <class T>
void reset(const Var<T>& loss) {
  if (loss.node()) loss.node()->consumed = false;
}

template <class T>
Var<T> stop_gradient(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out;
  gemm(a.value(), false, b.value(), false, out);
  return make_result<T>(std::move(out), "matmul", {a.ptr(), b.ptr()}, [](Node<T>& n) {
    Node<T>& pa = *n.parents[0];
    Node<T>& pb = *n.parents[1];
    if (pa.requires_grad) gemm(n.grad, false, pb.value, true, pa.grad_buffer(), true);
    if (pb.requires_grad) gemm(pa.value, true, n.grad, false, pb.grad_buffer(), true);
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  return make_result<T>(tocom::transpose(a.value()), "transpose", {a.ptr()}, [](Node<T>& n) {
    add_inplace(n.parents[0]->grad_buffer(), tocom::transpose(n.grad));
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  add_inplace(out, b.value());
  return make_result<T>(std::move(out), "add", {a.ptr(), b.ptr()}, [](Node<T>& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) add_inplace(p->grad_buffer(), n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  add_inplace(out, b.value(), T(-1));
  return make_result<T>(std::move(out), "sub", {a.ptr(), b.ptr()}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) add_inplace(n.parents[0]->grad_buffer(), n.grad);
    if (n.parents[1]->requires_grad) add_inplace(n.parents[1]->grad_buffer(), n.grad, T(-1));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (T& v : out.values()) v *= s;
  return make_result<T>(std::move(out), "scale", {a.ptr()},
                        [s](Node<T>& n) { add_inplace(n.parents[0]->grad_buffer(), n.grad, s); });
}

template <class T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (bv.numel() != av.cols())
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " for input " + shape_str(av.shape()));
  Tensor<T> out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i) {
    T* row = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) row[j] += bv[j];
  }
  return make_result<T>(std::move(out), "add_bias", {a.ptr(), bias.ptr()}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) add_inplace(n.parents[0]->grad_buffer(), n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor<T>& gb = n.parents[1]->grad_buffer();
      const std::size_t c = n.grad.cols();
      for (std::size_t i = 0; i < n.grad.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += n.grad(i, j);
    }
  });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column count mismatch");
    total += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(total, c);
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().numel(), out.data() + off * c);
    off += p.rows();
    parents.push_back(p.ptr());
  }
  return make_result<T>(std::move(out), "concat_rows", std::move(parents), [](Node<T>& n) {
    const std::size_t c = n.grad.cols();
    std::size_t off = 0;
    for (auto& p : n.parents) {
      const std::size_t r = p->value.rows();
      if (p->requires_grad) {
        Tensor<T>& g = p->grad_buffer();
        for (std::size_t i = 0; i < r * c; ++i) g[i] += n.grad[off * c + i];
      }
      off += r;
    }
  });
}

template <class T>
Var<T> mix_rows(const Var<T>& a, const RowMix& mix) {
  const auto& av = a.value();
  if (mix.in_rows != av.rows())
    throw ShapeError("mix_rows: plan expects " + std::to_string(mix.in_rows) + " rows, input has " +
                     std::to_string(av.rows()));
  const std::size_t c = av.cols();
  Tensor<T> out = Tensor<T>::matrix(mix.rows.size(), c);
  for (std::size_t i = 0; i < mix.rows.size(); ++i) {
    T* dst = out.data() + i * c;
    for (const auto& [src, w] : mix.rows[i]) {
      if (src >= av.rows()) throw ShapeError("mix_rows: row index " + std::to_string(src) + " out of range");
      const T* s = av.data() + std::size_t(src) * c;
      const T wt = static_cast<T>(w);
      if (wt == T(1))
        for (std::size_t j = 0; j < c; ++j) dst[j] += s[j];
      else
        for (std::size_t j = 0; j < c; ++j) dst[j] += wt * s[j];
    }
  }
  return make_result<T>(std::move(out), "mix_rows", {a.ptr()}, [mix](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->grad_buffer();
    const std::size_t c = n.grad.cols();
    for (std::size_t i = 0; i < mix.rows.size(); ++i) {
      const T* gi = n.grad.data() + i * c;
      for (const auto& [src, w] : mix.rows[i]) {
        T* dst = g.data() + std::size_t(src) * c;
        const T wt = static_cast<T>(w);
        for (std::size_t j = 0; j < c; ++j) dst[j] += wt * gi[j];
      }
    }
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> index) {
  for (std::size_t i : index)
    if (i >= a.rows()) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  return mix_rows(a, RowMix::gather(a.rows(), index));
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), "sum", {a.ptr()}, [](Node<T>& n) {
    const T g = n.grad[0];
    for (T& v : n.parents[0]->grad_buffer().values()) v += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T count = static_cast<T>(a.value().numel());
  return scale(sum(a), T(1) / count);
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_rows_value(const Tensor<T>& x, const Tensor<T>* bias) {
  if (!x.all_finite()) throw ValidationError("softmax_rows: non-finite input");
  const std::size_t r = x.rows(), c = x.cols();
  if (bias && bias->numel() != c) throw ShapeError("softmax_rows: bias length does not match columns");
  Tensor<T> out = Tensor<T>::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data() + i * c;
    T* oi = out.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      oi[j] = xi[j] + (bias ? (*bias)[j] : T(0));
      mx = std::max(mx, oi[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      oi[j] = std::exp(oi[j] - mx);
      z += oi[j];
    }
    for (std::size_t j = 0; j < c; ++j) oi[j] /= z;
  }
  return out;
}

template <class T>
Var<T> softmax_rows(const Var<T>& x, const Tensor<T>* bias) {
  Tensor<T> p = softmax_rows_value(x.value(), bias);
  return make_result<T>(std::move(p), "softmax_rows", {x.ptr()}, [](Node<T>& n) {
    const auto& p = n.value;
    Tensor<T>& g = n.parents[0]->grad_buffer();
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < p.rows(); ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += n.grad(i, j) * p(i, j);
      for (std::size_t j = 0; j < c; ++j) g(i, j) += p(i, j) * (n.grad(i, j) - dot);
    }
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& xv = x.value();
  if (!xv.all_finite()) throw ValidationError("layer_norm: non-finite input");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw ShapeError("layer_norm: affine parameters do not match feature count");
  Tensor<T> xhat = Tensor<T>::matrix(r, c);
  std::vector<T> inv_std(r);
  Tensor<T> out = Tensor<T>::matrix(r, c);
  const auto& g = gamma.value();
  const auto& b = beta.value();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = xv.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xi[j] - mu) * is;
      out(i, j) = xhat(i, j) * g[j] + b[j];
    }
  }
  return make_result<T>(std::move(out), "layer_norm", {x.ptr(), gamma.ptr(), beta.ptr()},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
                          const std::size_t r = xhat.rows(), c = xhat.cols();
                          Node<T>& px = *n.parents[0];
                          Node<T>& pg = *n.parents[1];
                          Node<T>& pb = *n.parents[2];
                          const auto& gv = pg.value;
                          if (pg.requires_grad) {
                            Tensor<T>& gg = pg.grad_buffer();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) gg[j] += n.grad(i, j) * xhat(i, j);
                          }
                          if (pb.requires_grad) {
                            Tensor<T>& gb = pb.grad_buffer();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) gb[j] += n.grad(i, j);
                          }
                          if (px.requires_grad) {
                            Tensor<T>& gx = px.grad_buffer();
                            std::vector<T> dxhat(c);
                            for (std::size_t i = 0; i < r; ++i) {
                              T s1 = 0, s2 = 0;
                              for (std::size_t j = 0; j < c; ++j) {
                                dxhat[j] = n.grad(i, j) * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat(i, j);
                              }
                              const T k = inv_std[i] / T(c);
                              for (std::size_t j = 0; j < c; ++j)
                                gx(i, j) += k * (T(c) * dxhat[j] - s1 - xhat(i, j) * s2);
                            }
                          }
                        });
}

namespace {

template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T kGeluA = T(0.044715);

}  // namespace

template <class T>
T gelu_value(T x) {
  const T u = kGeluC<T> * (x + kGeluA<T> * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = gelu_value(v);
  return make_result<T>(std::move(out), "gelu", {x.ptr()}, [](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    Tensor<T>& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const T x = xv[i];
      const T u = kGeluC<T> * (x + kGeluA<T> * x * x * x);
      const T t = std::tanh(u);
      const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x * x);
      g[i] += n.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), "relu", {x.ptr()}, [](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    Tensor<T>& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < xv.numel(); ++i)
      if (xv[i] > T(0)) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t heads,
                            const Tensor<T>& key_bias, Tensor<T>* cls_attention) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  const std::size_t dim = Q.cols();
  if (batch == 0 || Q.rows() % batch != 0) throw ShapeError("attention: rows not divisible by batch");
  if (heads == 0 || dim % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  const std::size_t n_tok = Q.rows() / batch;
  const std::size_t hd = dim / heads;
  const bool has_bias = !key_bias.empty();
  if (has_bias && key_bias.shape() != Shape{batch, n_tok})
    throw ShapeError("attention: key bias " + shape_str(key_bias.shape()) + " for " + std::to_string(batch) + "x" +
                     std::to_string(n_tok) + " tokens");
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));

  // Softmax probabilities are kept for the backward pass: batch*heads blocks of n_tok x n_tok.
  auto probs = std::make_shared<std::vector<T>>(batch * heads * n_tok * n_tok);
  Tensor<T> out = Tensor<T>::matrix(Q.rows(), dim);
  if (cls_attention) *cls_attention = Tensor<T>::matrix(batch, n_tok);
  RowMat<T> s(n_tok, n_tok);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * n_tok * dim;
    for (std::size_t h = 0; h < heads; ++h) {
      StridedC<T> Qh(Q.data() + base + h * hd, n_tok, hd, Eigen::OuterStride<>(dim));
      StridedC<T> Kh(K.data() + base + h * hd, n_tok, hd, Eigen::OuterStride<>(dim));
      StridedC<T> Vh(V.data() + base + h * hd, n_tok, hd, Eigen::OuterStride<>(dim));
      s.noalias() = Qh * Kh.transpose();
      s *= sc;
      T* p = probs->data() + (b * heads + h) * n_tok * n_tok;
      for (std::size_t i = 0; i < n_tok; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n_tok; ++j) {
          T val = s(i, j) + (has_bias ? key_bias(b, j) : T(0));
          s(i, j) = val;
          mx = std::max(mx, val);
        }
        T z = 0;
        for (std::size_t j = 0; j < n_tok; ++j) {
          p[i * n_tok + j] = std::exp(s(i, j) - mx);
          z += p[i * n_tok + j];
        }
        for (std::size_t j = 0; j < n_tok; ++j) p[i * n_tok + j] /= z;
      }
      Eigen::Map<const RowMat<T>> P(p, n_tok, n_tok);
      Strided<T> Oh(out.data() + base + h * hd, n_tok, hd, Eigen::OuterStride<>(dim));
      Oh.noalias() = P * Vh;
      if (cls_attention)
        for (std::size_t j = 0; j < n_tok; ++j) (*cls_attention)(b, j) += p[j] / static_cast<T>(heads);
    }
  }

  return make_result<T>(std::move(out), "attention", {q.ptr(), k.ptr(), v.ptr()},
                        [probs, batch, heads, n_tok, hd, dim, sc](Node<T>& n) {
                          Node<T>& pq = *n.parents[0];
                          Node<T>& pk = *n.parents[1];
                          Node<T>& pv = *n.parents[2];
                          const auto& Q = pq.value;
                          const auto& K = pk.value;
                          const auto& V = pv.value;
                          T* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
                          T* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
                          T* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
                          RowMat<T> dp(n_tok, n_tok);
                          for (std::size_t b = 0; b < batch; ++b) {
                            const std::size_t base = b * n_tok * dim;
                            for (std::size_t h = 0; h < heads; ++h) {
                              const std::size_t off = base + h * hd;
                              Eigen::Map<const RowMat<T>> P(probs->data() + (b * heads + h) * n_tok * n_tok, n_tok,
                                                            n_tok);
                              StridedC<T> dO(n.grad.data() + off, n_tok, hd, Eigen::OuterStride<>(dim));
                              StridedC<T> Qh(Q.data() + off, n_tok, hd, Eigen::OuterStride<>(dim));
                              StridedC<T> Kh(K.data() + off, n_tok, hd, Eigen::OuterStride<>(dim));
                              StridedC<T> Vh(V.data() + off, n_tok, hd, Eigen::OuterStride<>(dim));
                              if (gv) {
                                Strided<T> dV(gv + off, n_tok, hd, Eigen::OuterStride<>(dim));
                                dV.noalias() += P.transpose() * dO;
                              }
                              if (!gq && !gk) continue;
                              dp.noalias() = dO * Vh.transpose();
                              for (std::size_t i = 0; i < n_tok; ++i) {
                                T dot = 0;
                                for (std::size_t j = 0; j < n_tok; ++j) dot += dp(i, j) * P(i, j);
                                for (std::size_t j = 0; j < n_tok; ++j) dp(i, j) = P(i, j) * (dp(i, j) - dot) * sc;
                              }
                              if (gq) {
                                Strided<T> dQ(gq + off, n_tok, hd, Eigen::OuterStride<>(dim));
                                dQ.noalias() += dp * Kh;
                              }
                              if (gk) {
                                Strided<T> dK(gk + off, n_tok, hd, Eigen::OuterStride<>(dim));
                                dK.noalias() += dp.transpose() * Qh;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> kl_soft_targets(const Var<T>& student, const Tensor<T>& teacher) {
  require_same_shape(student.value(), teacher, "kl_soft_targets");
  Tensor<T> ps = softmax_rows_value(student.value());
  Tensor<T> pt = softmax_rows_value(teacher);
  const std::size_t r = ps.rows(), c = ps.cols();
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    // log-softmax computed directly from logits for accuracy.
    auto log_softmax = [&](const Tensor<T>& x, std::size_t row, std::size_t j) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t t = 0; t < c; ++t) mx = std::max(mx, x(row, t));
      T z = 0;
      for (std::size_t t = 0; t < c; ++t) z += std::exp(x(row, t) - mx);
      return x(row, j) - mx - std::log(z);
    };
    for (std::size_t j = 0; j < c; ++j) {
      if (pt(i, j) <= T(0)) continue;
      total += pt(i, j) * (log_softmax(teacher, i, j) - log_softmax(student.value(), i, j));
    }
  }
  total /= static_cast<T>(r);
  return make_result<T>(Tensor<T>::scalar(total), "kl_soft_targets", {student.ptr()},
                        [ps = std::move(ps), pt = std::move(pt)](Node<T>& n) {
                          const T g = n.grad[0] / static_cast<T>(ps.rows());
                          Tensor<T>& gs = n.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < ps.numel(); ++i) gs[i] += g * (ps[i] - pt[i]);
                        });
}

template <class T>
Var<T> l1_feature(const Var<T>& student, const Tensor<T>& teacher) {
  require_same_shape(student.value(), teacher, "l1_feature");
  const auto& s = student.value();
  T total = 0;
  for (std::size_t i = 0; i < s.numel(); ++i) total += std::abs(s[i] - teacher[i]);
  const T count = static_cast<T>(s.numel());
  return make_result<T>(Tensor<T>::scalar(total / count), "l1_feature", {student.ptr()},
                        [teacher, count](Node<T>& n) {
                          const auto& s = n.parents[0]->value;
                          Tensor<T>& g = n.parents[0]->grad_buffer();
                          const T k = n.grad[0] / count;
                          for (std::size_t i = 0; i < s.numel(); ++i) {
                            const T d = s[i] - teacher[i];
                            g[i] += d > T(0) ? k : (d < T(0) ? -k : T(0));
                          }
                        });
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto& x = logits.value();
  if (labels.size() != x.rows()) throw ShapeError("cross_entropy: label count does not match rows");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= x.cols()) throw ShapeError("cross_entropy: label out of range");
  Tensor<T> p = softmax_rows_value(x);
  const std::size_t c = x.cols();
  T total = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(i, j));
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x(i, j) - mx);
    total -= x(i, labels[i]) - mx - std::log(z);
  }
  total /= static_cast<T>(x.rows());
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(Tensor<T>::scalar(total), "cross_entropy", {logits.ptr()},
                        [p = std::move(p), lab = std::move(lab)](Node<T>& n) {
                          Tensor<T>& g = n.parents[0]->grad_buffer();
                          const T k = n.grad[0] / static_cast<T>(p.rows());
                          for (std::size_t i = 0; i < p.rows(); ++i)
                            for (std::size_t j = 0; j < p.cols(); ++j)
                              g(i, j) += k * (p(i, j) - (int(j) == lab[i] ? T(1) : T(0)));
                        });
}

#define TOCOM_AD_INSTANTIATE(T)                                                                                     \
  template class Var<T>;                                                                                            \
  template void backward(const Var<T>&);                                                                            \
  template void reset(const Var<T>&);                                                                               \
  template Var<T> stop_gradient(const Var<T>&);                                                                     \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                             \
  template Var<T> transpose(const Var<T>&);                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                                \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                                \
  template Var<T> scale(const Var<T>&, T);                                                                          \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> concat_rows(std::span<const Var<T>>);                                                             \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                                         \
  template Var<T> mix_rows(const Var<T>&, const RowMix&);                                                           \
  template Var<T> sum(const Var<T>&);                                                                               \
  template Var<T> mean(const Var<T>&);                                                                              \
  template Tensor<T> softmax_rows_value(const Tensor<T>&, const Tensor<T>*);                                        \
  template Var<T> softmax_rows(const Var<T>&, const Tensor<T>*);                                                    \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                       \
  template T gelu_value(T);                                                                                         \
  template Var<T> gelu(const Var<T>&);                                                                              \
  template Var<T> relu(const Var<T>&);                                                                              \
  template Var<T> multi_head_attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t,       \
                                       const Tensor<T>&, Tensor<T>*);                                               \
  template Var<T> kl_soft_targets(const Var<T>&, const Tensor<T>&);                                                 \
  template Var<T> l1_feature(const Var<T>&, const Tensor<T>&);                                                      \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);

TOCOM_AD_INSTANTIATE(float)
TOCOM_AD_INSTANTIATE(double)

}  // namespace tocom::ad
