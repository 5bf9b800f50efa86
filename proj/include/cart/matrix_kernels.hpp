#pragma once

#include <Eigen/Dense>

namespace cart {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Singular values below this fraction of the largest one count as zero in
/// subgradients and rank counts.
inline constexpr double kZeroSingularRel = 1e-10;

/// Truncated SVD triple: left (m x k, orthonormal columns), singulars
/// (length k, nonincreasing, >= 0), right (k x n, orthonormal rows).
struct LowRankFactor {
    Matrix left;
    Vector singulars;
    Matrix right;

    Eigen::Index rank() const { return singulars.size(); }
    Eigen::Index rows() const { return left.rows(); }
    Eigen::Index cols() const { return right.cols(); }
};

/// Thin SVD with k = min(m, n). Deterministic: the largest-magnitude entry of
/// every left singular vector is made nonnegative (first index wins ties).
/// Throws Error(Numeric) on non-finite input.
LowRankFactor svd(const Matrix &a);

/// Keeps the k leading singular triples. Error(Rank) unless 0 <= k <= f.rank().
LowRankFactor truncate(const LowRankFactor &f, Eigen::Index k);

Matrix reconstruct(const LowRankFactor &f);

/// Sum of element-wise products; Error(Shape) if the shapes differ.
double frobenius_inner(const Matrix &a, const Matrix &b);
double frobenius_norm(const Matrix &a);

double nuclear_norm(const Matrix &a);

/// U_r V_r^T over the singular values above kZeroSingularRel * sigma_max.
/// Returns the zero matrix for a zero input.
Matrix nuclear_subgradient(const Matrix &a);

/// Number of singular values above kZeroSingularRel * sigma_max.
Eigen::Index numerical_rank(const Matrix &a);
Eigen::Index numerical_rank(const Vector &singulars);

/// k = ceil(ratio * min(m, n)), clamped to [0, min(m, n)]. A tiny slack keeps
/// products such as 0.07 * 100 from rounding up past the exact integer.
Eigen::Index pruned_rank(double ratio, Eigen::Index rows, Eigen::Index cols);

} // namespace cart
