#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "cart/interference.hpp"
#include "cart/matrix_kernels.hpp"
#include "cart/tensor_store.hpp"
#include "cart/toy_classifier.hpp"

namespace cart {

struct SuiteParams {
    int d = 6;
    int tasks = 3;
    int n = 4;       // samples per task
    int r = 2;       // rank of every task matrix
    double alpha = 0.5;
    double s_max = 2.0;
    double c = 1.0;
    double eta = 0.05;

    /// Error(Param) on any violated precondition (0 < alpha <= s_max,
    /// 1 <= r <= d, tasks > 2, n >= 1, c > 0, eta >= 0).
    void validate() const;
};

/// Linear multi-task instance: task t maps x to (theta0 + tau_t) x and its
/// inputs are x = V_t a + eps with V_t spanning the row space of tau_t.
struct SyntheticTaskSuite {
    SuiteParams params;
    std::uint64_t seed = 0;
    Matrix theta0;
    std::vector<Matrix> taus;                     // d x d each
    std::vector<Matrix> row_bases;                // V_t, d x r
    std::vector<std::vector<Vector>> coords;      // a_{t,i}, length r
    std::vector<std::vector<Vector>> noise;       // eps_{t,i}, length d
    std::vector<std::vector<Vector>> inputs;      // x_{t,i}

    /// Error(Invariant) if the singular-value window, norm bounds or rank
    /// bound of the parameters is broken.
    void check_invariants() const;
};

/// Ranges for randomized certification batches.
struct SuiteRanges {
    int d_min = 2;
    int d_max = 8;
    int tasks_min = 3;
    int tasks_max = 4;
    int n_max = 5;
    double alpha_min = 0.1;
    double alpha_max = 1.0;
    double s_max_spread = 2.0; // s_max = alpha + U[0, spread]
    double c_min = 0.2;
    double c_max = 2.0;
    double eta_max = 0.3;
};

/// Draws suite parameters from the ranges using the stream for `seed`.
SuiteParams sample_suite_params(const SuiteRanges &ranges, std::uint64_t seed);

/// Random orthonormal U_t, V_t and singular values uniform in [alpha, s_max];
/// coordinates uniform in the ball of radius c * s_max, noise uniform in the
/// ball of radius eta. Each ingredient draws from its own named stream so,
/// for example, changing eta leaves the task matrices untouched.
SyntheticTaskSuite generate_suite(const SuiteParams &params, std::uint64_t seed);

/// Same construction but all row spaces (and column spaces) are mutually
/// orthogonal blocks of one random orthogonal matrix. Needs tasks * r <= d.
SyntheticTaskSuite generate_orthogonal_suite(const SuiteParams &params, std::uint64_t seed);

/// Multiplies every tau_t and the singular-value window [alpha, s_max] by
/// `factor` (> 0). Inputs are kept as they are.
SyntheticTaskSuite scale_suite(const SyntheticTaskSuite &suite, double factor);

/// Applies a fixed orthogonal R: tau_t <- tau_t R^T, x <- R x.
SyntheticTaskSuite rotate_suite(const SyntheticTaskSuite &suite, const Matrix &rotation);

/// L = sum_t sum_i || theta_MTL x_{t,i} - (theta0 + tau_t) x_{t,i} ||^2 with
/// theta_MTL = theta0 + sum_t tau_t.
double task_interference_L(const SyntheticTaskSuite &suite);

struct BoundCertificate {
    std::uint64_t seed = 0;
    SuiteParams params;
    Eigen::Index rank = 0;     // max numerical rank of the tau_t
    Eigen::Index k_for_i = 0;
    double L_value = 0.0;
    double I_value = 0.0;
    double bound_value = 0.0;
    double k3 = 0.0;
    double k4 = 0.0;
    bool holds = false;

    nlohmann::json to_json() const;
};

/// Relative and absolute round-off slack used when comparing L with the bound.
inline constexpr double kBoundRelSlack = 1e-12;
inline constexpr double kBoundAbsSlack = 1e-24;

/// Checks L <= n (k3 I + T (T - 1) k4 eta)^2 with k3 = s_max^2 c r s_max^2 / alpha^2,
/// k4 = s_max and r the largest task rank. `k_for_i` defaults to r and must not
/// be smaller (Error(Param)).
BoundCertificate certify_bound(const SyntheticTaskSuite &suite, std::optional<Eigen::Index> k_for_i = std::nullopt);

/// theta_t = pretrained + S + L_t: a shared component S common to every task
/// plus a task-specific low-rank part.
struct SharedComponentParams {
    int rows = 16;
    int cols = 16;
    int tasks = 4;
    int shared_rank = 2;
    int task_rank = 2;
    double shared_scale = 3.0;
    double task_scale = 1.0;
};

struct CheckpointSuite {
    TensorMap pretrained;
    std::vector<TensorMap> finetuned;
};

CheckpointSuite make_shared_component_suite(const SharedComponentParams &params, std::uint64_t seed);

/// Multi-task classification instance for rank sweeps: one shared backbone
/// matrix, fixed per-task heads, task-specific low-rank signal plus full-rank
/// finetuning noise.
struct ClassificationParams {
    int input_dim = 32;
    int feature_dim = 32;
    int tasks = 4;
    int classes = 4;
    int subspace_dim = 8;
    int samples_per_class = 40;
    double class_sep = 1.0;
    double input_noise = 0.8;
    double pretrained_scale = 1.0;
    double signal_scale = 1.0;
    double finetune_noise = 0.08;
};

struct ClassificationSuite {
    ClassificationParams params;
    ToyClassifier model;
    TensorMap pretrained;
    std::vector<TensorMap> finetuned;
    Batch test;

    std::vector<double> accuracy(const TensorMap &params) const;
    Evaluator evaluator() const;
};

ClassificationSuite make_classification_suite(const ClassificationParams &params, std::uint64_t seed);

/// Two-task, two-layer (tanh) instance for coefficient adaptation. Task 0's
/// delta sharpens its classes; task 1's delta is Gaussian noise of the same
/// Frobenius norm per layer. The unlabeled test stream holds task-0 inputs only.
struct SignalNoiseParams {
    int input_dim = 16;
    int hidden_dim = 16;
    int classes = 4;
    int subspace_dim = 4;
    int samples_per_class = 32;
    double class_sep = 1.5;
    double input_noise = 0.3;
    double pretrained_scale = 0.5;
    double signal_scale = 2.0;
};

ClassificationSuite make_signal_noise_suite(const SignalNoiseParams &params, std::uint64_t seed);

} // namespace cart
