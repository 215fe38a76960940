#pragma once

// Dense numerics shared by every module. All matrices are row-major so that
// a flattened context vector of length rows*cols cuts into consecutive rows.
// Every differentiable op comes with a hand-paired vector-Jacobian product.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "softcpt/errors.hpp"

namespace softcpt {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = RowMatrix<double>;
using Vec = ColVector<double>;
using MatrixF = RowMatrix<float>;

namespace detail {
inline std::string dims(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}
}  // namespace detail

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

template <typename DerivedA, typename DerivedB>
RowMatrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::dims(a.rows(), a.cols()) + " times " +
                     detail::dims(b.rows(), b.cols()));
  }
  return a * b;
}

/// Cotangents of (a, b) for c = a*b given dL/dc.
template <typename Scalar>
std::pair<RowMatrix<Scalar>, RowMatrix<Scalar>> matmul_vjp(const RowMatrix<Scalar>& a,
                                                           const RowMatrix<Scalar>& b,
                                                           const RowMatrix<Scalar>& cot) {
  if (a.cols() != b.rows() || cot.rows() != a.rows() || cot.cols() != b.cols()) {
    throw ShapeError("matmul_vjp: incompatible cotangent " +
                     detail::dims(cot.rows(), cot.cols()));
  }
  return {cot * b.transpose(), a.transpose() * cot};
}

template <typename Derived>
ColVector<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar n = v.norm();
  if (!(n > Scalar(0))) throw DegenerateInputError("l2_normalize: zero vector");
  return v / n;
}

/// Projection Jacobian of v/|v| applied to a cotangent: (c - y<y,c>)/|v|.
template <typename DerivedV, typename DerivedC>
ColVector<typename DerivedV::Scalar> l2_normalize_vjp(const Eigen::MatrixBase<DerivedV>& v,
                                                      const Eigen::MatrixBase<DerivedC>& cot) {
  using Scalar = typename DerivedV::Scalar;
  const Scalar n = v.norm();
  if (!(n > Scalar(0))) throw DegenerateInputError("l2_normalize_vjp: zero vector");
  if (cot.size() != v.size()) throw ShapeError("l2_normalize_vjp: width mismatch");
  const ColVector<Scalar> y = v / n;
  return (cot - y * y.dot(cot)) / n;
}

template <typename Derived>
ColVector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = logits.maxCoeff();
  ColVector<Scalar> e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

/// Given p = softmax(z) and dL/dp, returns dL/dz.
template <typename DerivedP, typename DerivedC>
ColVector<typename DerivedP::Scalar> softmax_vjp(const Eigen::MatrixBase<DerivedP>& p,
                                                 const Eigen::MatrixBase<DerivedC>& cot) {
  if (cot.size() != p.size()) throw ShapeError("softmax_vjp: width mismatch");
  return (p.array() * (cot.array() - p.dot(cot))).matrix();
}

/// Row-major reshape: element i of the flat vector lands at (i / cols, i % cols).
template <typename Derived>
RowMatrix<typename Derived::Scalar> reshape(const Eigen::MatrixBase<Derived>& flat,
                                            Eigen::Index rows, Eigen::Index cols) {
  if (flat.size() != rows * cols) {
    throw ShapeError("reshape: " + std::to_string(flat.size()) + " entries into " +
                     detail::dims(rows, cols));
  }
  RowMatrix<typename Derived::Scalar> out(rows, cols);
  for (Eigen::Index i = 0; i < flat.size(); ++i) out(i / cols, i % cols) = flat(i);
  return out;
}

template <typename Scalar>
ColVector<Scalar> flatten(const RowMatrix<Scalar>& m) {
  return Eigen::Map<const ColVector<Scalar>>(m.data(), m.size());
}

/// Stacks `top` above `bottom`; both must share a width (an empty top is allowed).
template <typename Scalar>
RowMatrix<Scalar> vconcat(const RowMatrix<Scalar>& top, const RowMatrix<Scalar>& bottom) {
  if (top.rows() > 0 && bottom.rows() > 0 && top.cols() != bottom.cols()) {
    throw ShapeError("vconcat: widths " + std::to_string(top.cols()) + " and " +
                     std::to_string(bottom.cols()));
  }
  const Eigen::Index cols = top.rows() > 0 ? top.cols() : bottom.cols();
  RowMatrix<Scalar> out(top.rows() + bottom.rows(), cols);
  if (top.rows() > 0) out.topRows(top.rows()) = top;
  if (bottom.rows() > 0) out.bottomRows(bottom.rows()) = bottom;
  return out;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (!(na > Scalar(0)) || !(nb > Scalar(0))) {
    throw DegenerateInputError("cosine_similarity: zero vector");
  }
  return a.dot(b) / (na * nb);
}

}  // namespace softcpt
