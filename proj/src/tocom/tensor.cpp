#include "tocom/tensor.hpp"

#include <Eigen/Core>
#include <cstring>

namespace tocom {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.numel() * sizeof(T)) == 0;
}

template <class T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

}  // namespace

template <class T>
void gemm(const Tensor<T>& a, bool trans_a, const Tensor<T>& b, bool trans_b, Tensor<T>& c, bool accumulate) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(a.shape()) + (trans_a ? "^T" : "") + " * " +
                     shape_str(b.shape()) + (trans_b ? "^T" : "") + ")");
  if (c.shape() != Shape{m, n}) {
    if (accumulate) throw ShapeError("gemm: accumulator has shape " + shape_str(c.shape()));
    c = Tensor<T>::matrix(m, n);
  }
  MapC<T> A(a.data(), a.rows(), a.cols());
  MapC<T> B(b.data(), b.rows(), b.cols());
  Map<T> C(c.data(), m, n);
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) C.setZero();
    return;
  }
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      C.noalias() += lhs * rhs;
    else
      C.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) run(A, B);
  if (!trans_a && trans_b) run(A, B.transpose());
  if (trans_a && !trans_b) run(A.transpose(), B);
  if (trans_a && trans_b) run(A.transpose(), B.transpose());
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c;
  gemm(a, false, b, false, c);
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> t = Tensor<T>::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src, T alpha) {
  if (dst.shape() != src.shape())
    throw ShapeError("add: " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  T* d = dst.data();
  const T* s = src.data();
  const std::size_t n = dst.numel();
  if (alpha == T(1))
    for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
  else
    for (std::size_t i = 0; i < n; ++i) d[i] += alpha * s[i];
}

#define TOCOM_INSTANTIATE(T)                                                                  \
  template bool bit_identical(const Tensor<T>&, const Tensor<T>&);                            \
  template T max_abs(const Tensor<T>&);                                                       \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);                                \
  template void gemm(const Tensor<T>&, bool, const Tensor<T>&, bool, Tensor<T>&, bool);       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template void add_inplace(Tensor<T>&, const Tensor<T>&, T);

TOCOM_INSTANTIATE(float)
TOCOM_INSTANTIATE(double)

}  // namespace tocom
