#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cart/matrix_kernels.hpp"
#include "cart/origin_solver.hpp"
#include "cart/tensor_store.hpp"

namespace cart {

/// Row-space interference
///   I(k) = sum_i sum_{j != i} || S_i^T V_i^T V_j S_j ||_F
/// where V_t holds the top-k right singular vectors of delta_t and S_t the
/// matching singular values divided by ||delta_t||_F (the norm of the full
/// singular-value vector). Ordered pairs are summed, so each unordered pair
/// counts twice.
///
/// Needs T >= 2 and 1 <= k <= min(m, n); a zero delta throws
/// Error(ZeroTaskVector) because the normalization is undefined.
double row_space_interference(std::span<const Matrix> deltas, Eigen::Index k);

/// I(k) for several k sharing one SVD per delta.
std::vector<double> row_space_interference_curve(std::span<const Matrix> deltas, std::span<const Eigen::Index> ks);

/// R(k) = sum_t || (theta_t - origin) - SVD_k(theta_t - origin) ||_F^2.
double reconstruction_error(std::span<const Matrix> thetas, const Matrix &origin, Eigen::Index k);

struct LayerInterference {
    std::string layer;
    std::vector<std::pair<Eigen::Index, double>> interference;   // (k, I); empty if some delta is zero
    std::vector<std::pair<Eigen::Index, double>> reconstruction; // (k, R), k = 0..min(m, n)
    std::vector<std::vector<double>> spectra;                     // per task, full singular values
    bool zero_task_vector = false;
};

struct InterferenceReport {
    std::string origin_mode;
    std::vector<LayerInterference> layers;

    nlohmann::json to_json() const;
    std::string to_csv() const; // layer,k,interference,reconstruction
};

/// Spectral diagnostics of every Matrix layer of the task vectors taken
/// about `origin`.
InterferenceReport analyze_interference(const TensorMap &origin, std::span<const TensorMap> finetuned,
                                        const std::string &origin_mode, const ClassOverrides &overrides = {});

/// Per-task accuracies in [0, 1] for a merged checkpoint.
using Evaluator = std::function<std::vector<double>(const TensorMap &)>;

struct SweepRow {
    double ratio;
    double lambda;
    std::vector<double> task_accuracy;
    double mean_accuracy;
};

struct SweepTable {
    std::string origin_mode;
    std::vector<SweepRow> rows;           // ratio-major, then lambda, in grid order
    std::vector<double> weight_average_accuracy;
    std::vector<double> origin_accuracy;  // the origin evaluated as a model

    /// Rows whose endpoint identity fails: ratio 0 must reproduce the origin
    /// model and, for the mean origin, ratio 1 must reproduce the weight average.
    std::vector<std::size_t> endpoint_violations(double tol = 1e-12) const;

    std::string to_csv() const; // ratio,lambda,task,accuracy
    nlohmann::json to_json() const;
};

inline const std::vector<double> kDefaultSweepRatios{0.0, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.0};

/// Builds and evaluates the merged model for every (ratio, lambda) cell.
/// Evaluator failures surface as Error(Evaluation).
SweepTable rank_sweep(const TensorMap &pretrained, std::span<const TensorMap> finetuned, const Evaluator &evaluator,
                      std::span<const double> lambdas, std::span<const double> ratios, const OriginMode &origin_mode,
                      const ClassOverrides &overrides = {});

/// Samples needed to estimate a mean within +-epsilon at critical value z,
/// bounding the standard deviation of a variable on [a, b] by (b - a) / 2.
std::int64_t sample_size(double a, double b, double epsilon, double z = 1.96);

} // namespace cart
