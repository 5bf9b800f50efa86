#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cart/matrix_kernels.hpp"
#include "cart/origin_solver.hpp"
#include "cart/tensor_store.hpp"

namespace cart {

/// One task's deviation for one Matrix layer, stored dense or factored.
using TaskDelta = std::variant<Matrix, LowRankFactor>;

Matrix dense(const TaskDelta &delta);

struct TaskVectorSet {
    TensorMap origin;
    std::vector<std::string> layers;              // Matrix layers, lexicographic
    std::vector<std::vector<TaskDelta>> deltas;   // deltas[task][layer]
    TensorMap nonmatrix_mean;                     // NonMatrix params: finetuned average

    std::size_t task_count() const { return deltas.size(); }
    std::size_t layer_count() const { return layers.size(); }
};

/// lambda_t^l table: rows are tasks, columns follow `layers`.
struct CoefficientTable {
    std::vector<std::string> layers;
    Matrix values;

    static CoefficientTable filled(std::size_t tasks, std::vector<std::string> layers, double value);
    nlohmann::json to_json() const;
    static CoefficientTable from_json(const nlohmann::json &j);
};

struct MergePlan {
    OriginMode origin_mode = OriginMode::mean();
    double rank_ratio = 0.08;
    std::variant<double, CoefficientTable> coefficients = 1.0; // Global(lambda) or per task/layer

    /// Error(Plan) on a ratio outside [0, 1].
    void validate() const;
    nlohmann::json to_json() const;
    static MergePlan from_json(const nlohmann::json &j);
};

TaskVectorSet build_task_vectors(const TensorMap &origin, std::span<const TensorMap> finetuned,
                                 const ClassOverrides &overrides = {});

/// Replaces every delta by its top-k SVD, k = ceil(ratio * min(m, n)).
TaskVectorSet prune_ranks(const TaskVectorSet &tvs, double rank_ratio);

/// origin + sum_t lambda_t^l delta_t^l on Matrix layers; NonMatrix params are
/// the finetuned average whatever the coefficients. No pruning happens here.
TensorMap merge(const TaskVectorSet &tvs, const MergePlan &plan);

/// Mean origin, build, prune, merge with a global lambda.
TensorMap cart_merge(const TensorMap &pretrained, std::span<const TensorMap> finetuned, double rank_ratio,
                     double lambda, const ClassOverrides &overrides = {});

/// Weight average plus one task's rank-reduced centered delta.
TensorMap cart_indexing(const TensorMap &pretrained, std::span<const TensorMap> finetuned, double rank_ratio,
                        std::size_t task_index, const ClassOverrides &overrides = {});

struct StorageCost {
    std::uint64_t mask_bits = 0;
    std::uint64_t lowrank_bits = 0;
};

/// Bits for T binary masks versus T sets of (U, sigma, V^T) factors.
StorageCost storage_cost(std::uint64_t tasks, std::span<const std::pair<std::int64_t, std::int64_t>> layer_dims,
                         double rank_ratio, std::uint64_t float_bits = 32);

/// Elementwise mean of aligned checkpoints.
TensorMap weight_average(std::span<const TensorMap> maps);

} // namespace cart
