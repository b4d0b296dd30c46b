#pragma once

#include <oodlab/core.hpp>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace oodlab {

// Singular values below kRankTol * sigma_max are treated as zero.
inline constexpr double kRankTol = 1e-10;

struct SubspaceBasis {
  Matrix columns;  // ambient_dim x basis_dim, orthonormal columns

  Index ambient_dim() const { return columns.rows(); }
  Index basis_dim() const { return columns.cols(); }
};

struct ProjectionDecomposition {
  Matrix left;             // source_rows x k
  Matrix right;            // source_cols x k
  Vector singular_values;  // k values, non-increasing, non-negative
  Index source_rows = 0;
  Index source_cols = 0;

  Matrix reconstruct() const {
    return left * singular_values.asDiagonal() * right.transpose();
  }
};

namespace detail {

// Deterministic sign convention: the entry of largest magnitude in each left
// column is made positive (first index wins ties); the right column flips
// with it so the product is unchanged.
inline void fix_signs(Matrix& left, Matrix& right) {
  for (Index c = 0; c < left.cols(); ++c) {
    Index best = 0;
    double mag = std::abs(left(0, c));
    for (Index r = 1; r < left.rows(); ++r) {
      if (std::abs(left(r, c)) > mag) {
        mag = std::abs(left(r, c));
        best = r;
      }
    }
    if (left(best, c) < 0.0) {
      left.col(c) = -left.col(c);
      right.col(c) = -right.col(c);
    }
  }
}

inline void fix_signs(Matrix& cols) {
  for (Index c = 0; c < cols.cols(); ++c) {
    Index best = 0;
    double mag = std::abs(cols(0, c));
    for (Index r = 1; r < cols.rows(); ++r) {
      if (std::abs(cols(r, c)) > mag) {
        mag = std::abs(cols(r, c));
        best = r;
      }
    }
    if (cols(best, c) < 0.0) cols.col(c) = -cols.col(c);
  }
}

}  // namespace detail

inline ProjectionDecomposition svd(const Matrix& m) {
  if (m.rows() == 0 || m.cols() == 0)
    throw DimMismatchError("svd: empty matrix");
  Eigen::JacobiSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  ProjectionDecomposition out;
  out.left = dec.matrixU();
  out.right = dec.matrixV();
  out.singular_values = dec.singularValues();
  out.source_rows = m.rows();
  out.source_cols = m.cols();
  detail::fix_signs(out.left, out.right);
  return out;
}

inline Index numerical_rank(const Vector& singular_values) {
  if (singular_values.size() == 0) return 0;
  const double cutoff = kRankTol * singular_values(0);
  Index rank = 0;
  for (Index i = 0; i < singular_values.size(); ++i)
    if (singular_values(i) > cutoff && singular_values(i) > 0.0) ++rank;
  return rank;
}

// Orthonormal basis for the row space of m. Throws ZeroMatrixError when m
// has no numerically nonzero entries.
inline SubspaceBasis orthonormal_basis(const Matrix& m) {
  if (m.rows() == 0 || m.cols() == 0)
    throw ZeroMatrixError("orthonormal_basis: empty matrix");
  if (m.cwiseAbs().maxCoeff() <= 0.0)
    throw ZeroMatrixError("orthonormal_basis: all entries are zero");
  ProjectionDecomposition dec = svd(m);
  const Index rank = numerical_rank(dec.singular_values);
  if (rank == 0)
    throw ZeroMatrixError("orthonormal_basis: numerically zero matrix");
  SubspaceBasis basis;
  basis.columns = dec.right.leftCols(rank);
  detail::fix_signs(basis.columns);
  return basis;
}

inline ProjectionDecomposition truncated_svd(const Matrix& m, Index keep) {
  const Index full = std::min(m.rows(), m.cols());
  if (keep < 1 || keep > full)
    throw BadRankError("truncated_svd: keep must be in [1, min(rows, cols)]");
  ProjectionDecomposition dec = svd(m);
  ProjectionDecomposition out;
  out.left = dec.left.leftCols(keep);
  out.right = dec.right.leftCols(keep);
  out.singular_values = dec.singular_values.head(keep);
  out.source_rows = dec.source_rows;
  out.source_cols = dec.source_cols;
  return out;
}

// Cosines of the principal angles between two subspaces given by orthonormal
// bases, non-increasing, clamped to [0, 1]. The bases must share an ambient
// dimension; orthonormality of the inputs is the caller's contract.
inline Vector overlap_spectrum(const SubspaceBasis& a, const SubspaceBasis& b) {
  if (a.ambient_dim() != b.ambient_dim())
    throw DimMismatchError("overlap_spectrum: ambient dimensions differ");
  if (a.basis_dim() == 0 || b.basis_dim() == 0)
    return Vector::Zero(0);
  const Matrix cross = a.columns.transpose() * b.columns;
  Eigen::JacobiSVD<Matrix> dec(cross);
  Vector s = dec.singularValues();
  for (Index i = 0; i < s.size(); ++i) s(i) = std::clamp(s(i), 0.0, 1.0);
  return s;
}

// Largest principal-angle cosine, or 0 for empty spectra.
inline double largest_overlap(const SubspaceBasis& a, const SubspaceBasis& b) {
  const Vector s = overlap_spectrum(a, b);
  return s.size() > 0 ? s(0) : 0.0;
}

inline bool is_orthonormal(const Matrix& cols, double tol = 1e-10) {
  const Matrix g = cols.transpose() * cols;
  return (g - Matrix::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff() <= tol;
}

}  // namespace oodlab
