#pragma once

#include <Eigen/Dense>

namespace melm {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// proposals x feature_dim
using FeatureMatrix = RowMatrix<double>;
/// proposals x classes, raw head outputs
using Scores = RowMatrix<double>;
/// proposals x classes (or cliques x classes), probabilities
using ProbMatrix = RowMatrix<double>;
using Vector = ColVector<double>;

/// Floor used inside every log and denominator.
inline constexpr double kEpsilon = 1e-12;

/// Softmax of each row, max-shifted.
template <typename Derived>
RowMatrix<typename Derived::Scalar> row_softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const Scalar m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Softmax over every entry of the matrix jointly.
template <typename Derived>
RowMatrix<typename Derived::Scalar> table_softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  RowMatrix<Scalar> out = (x.array() - m).exp().matrix();
  out /= out.sum();
  return out;
}

/// Vector-Jacobian product of row_softmax: given P = row_softmax(S) and G = dL/dP, returns dL/dS.
template <typename DerivedP, typename DerivedG>
RowMatrix<typename DerivedP::Scalar> row_softmax_backward(const Eigen::MatrixBase<DerivedP>& probs,
                                                          const Eigen::MatrixBase<DerivedG>& upstream) {
  using Scalar = typename DerivedP::Scalar;
  const ColVector<Scalar> dot = probs.cwiseProduct(upstream).rowwise().sum();
  return (probs.array() * (upstream.colwise() - dot).array()).matrix();
}

/// Vector-Jacobian product of table_softmax.
template <typename DerivedP, typename DerivedG>
RowMatrix<typename DerivedP::Scalar> table_softmax_backward(const Eigen::MatrixBase<DerivedP>& probs,
                                                            const Eigen::MatrixBase<DerivedG>& upstream) {
  const auto dot = probs.cwiseProduct(upstream).sum();
  return (probs.array() * (upstream.array() - dot)).matrix();
}

}  // namespace melm
