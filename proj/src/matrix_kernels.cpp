#include "cart/matrix_kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/SVD>

#include "cart/error.hpp"

namespace cart {

LowRankFactor svd(const Matrix &a) {
    if (!a.allFinite()) throw Error(ErrorCode::Numeric, "svd input has non-finite entries");

    const Eigen::Index k = std::min(a.rows(), a.cols());
    LowRankFactor f;
    if (k == 0) {
        f.left = Matrix(a.rows(), 0);
        f.singulars = Vector(0);
        f.right = Matrix(0, a.cols());
        return f;
    }

    // Two-sided Jacobi: deterministic, no randomization, sorted output.
    Eigen::JacobiSVD<Matrix> solver(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    f.left = solver.matrixU();
    f.singulars = solver.singularValues();
    f.right = solver.matrixV().transpose();

    for (Eigen::Index i = 0; i < k; ++i) {
        Eigen::Index pivot = 0;
        f.left.col(i).cwiseAbs().maxCoeff(&pivot);
        if (f.left(pivot, i) < 0) {
            f.left.col(i) *= -1.0;
            f.right.row(i) *= -1.0;
        }
    }
    return f;
}

LowRankFactor truncate(const LowRankFactor &f, Eigen::Index k) {
    if (k < 0 || k > f.rank())
        throw Error(ErrorCode::Rank, "truncation rank " + std::to_string(k) + " outside [0, " +
                                         std::to_string(f.rank()) + "]");
    return {f.left.leftCols(k), f.singulars.head(k), f.right.topRows(k)};
}

Matrix reconstruct(const LowRankFactor &f) {
    if (f.rank() == 0) return Matrix::Zero(f.rows(), f.cols());
    return f.left * f.singulars.asDiagonal() * f.right;
}

double frobenius_inner(const Matrix &a, const Matrix &b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(ErrorCode::Shape, "frobenius_inner operands differ in shape");
    return a.cwiseProduct(b).sum();
}

double frobenius_norm(const Matrix &a) { return a.norm(); }

double nuclear_norm(const Matrix &a) { return svd(a).singulars.sum(); }

Eigen::Index numerical_rank(const Vector &singulars) {
    if (singulars.size() == 0) return 0;
    const double cutoff = kZeroSingularRel * singulars.maxCoeff();
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < singulars.size(); ++i)
        if (singulars(i) > cutoff) ++r;
    return r;
}

Eigen::Index numerical_rank(const Matrix &a) { return numerical_rank(svd(a).singulars); }

Matrix nuclear_subgradient(const Matrix &a) {
    const auto f = svd(a);
    const Eigen::Index r = numerical_rank(f.singulars);
    if (r == 0) return Matrix::Zero(a.rows(), a.cols());
    return f.left.leftCols(r) * f.right.topRows(r);
}

Eigen::Index pruned_rank(double ratio, Eigen::Index rows, Eigen::Index cols) {
    const Eigen::Index full = std::min(rows, cols);
    const double scaled = ratio * static_cast<double>(full);
    const auto k = static_cast<Eigen::Index>(std::ceil(scaled - 1e-9 * std::max(1.0, scaled)));
    return std::clamp<Eigen::Index>(k, 0, full);
}

} // namespace cart
