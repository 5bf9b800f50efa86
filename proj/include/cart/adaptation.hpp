#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cart/merge_engine.hpp"
#include "cart/toy_classifier.hpp"

namespace cart {

/// Builds the merged parameters for a coefficient table through merge().
TensorMap merged_params(const TaskVectorSet &tvs, const CoefficientTable &table);

/// d entropy / d lambda_t^l as a T x L grid (columns follow tvs.layers),
/// by the chain rule through the merge and the network.
Matrix coefficient_gradient(const CoefficientTable &table, const TaskVectorSet &tvs, const ToyClassifier &model,
                            const Batch &batch);

struct AdaptOptions {
    double lr = 1e-2;
    int iters = 100;
    double init_lambda = 0.3;
};

struct AdaptLogRow {
    int iter;
    double entropy;
    double mean_lambda;
};

struct AdaptResult {
    CoefficientTable table;
    std::vector<AdaptLogRow> log; // iter 0 is the initial table, the last row the returned one

    std::string log_csv() const; // iter,entropy,mean_lambda
};

/// Plain gradient descent on the entropy of the full test batch.
/// Error(Numeric) if a gradient turns non-finite.
AdaptResult adapt_coefficients(const TaskVectorSet &tvs, const ToyClassifier &model, const Batch &batch,
                               const AdaptOptions &options = {});

/// Straight-through masking of singular values: the value uses the hard mask
/// [sigmoid(A) > 0.5], the derivative is that of sigmoid(A) * s.
struct SteOutput {
    Vector value;      // hard-masked singulars
    Vector derivative; // d value_i / d A_i along the soft path
    Vector soft_mask;  // sigmoid(A)
};

SteOutput ste_masked_singulars(const Vector &singulars, const Vector &logits);

/// Logits initialized to +1 on the first init_k entries and -1 elsewhere.
Vector initial_mask_logits(Eigen::Index full_rank, Eigen::Index init_k);

struct AdaRankOptions {
    double lr = 1e-2;      // coefficients
    double mask_lr = 1.0;  // mask logits
    int iters = 100;
    double init_lambda = 0.3;
    Eigen::Index init_k = 1;
};

struct AdaRankResult {
    std::vector<std::vector<LowRankFactor>> factors; // [task][layer], full SVD of each delta
    std::vector<std::vector<Vector>> logits;         // [task][layer]
    CoefficientTable table;
    std::vector<AdaptLogRow> log;

    /// Retained rank of the hard mask for one cell.
    Eigen::Index retained_rank(std::size_t task, std::size_t layer) const;
    /// Task vectors with hard-masked singulars.
    TaskVectorSet masked(const TaskVectorSet &tvs) const;
    nlohmann::json to_json() const;
};

AdaRankResult adarank_adapt(const TaskVectorSet &tvs, const ToyClassifier &model, const Batch &batch,
                            const AdaRankOptions &options = {});

} // namespace cart
