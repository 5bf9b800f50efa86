#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cart/matrix_kernels.hpp"
#include "cart/tensor_store.hpp"

namespace cart {

/// How the task-vector origin is chosen.
class OriginMode {
public:
    enum class Kind { Pretrained, Mean, RankMin };

    static OriginMode pretrained() { return OriginMode(Kind::Pretrained, 0, std::nullopt); }
    static OriginMode mean() { return OriginMode(Kind::Mean, 0, std::nullopt); }
    /// steps >= 1; step_size > 0 when given. Without a step size the solver
    /// uses 0.1 x the mean singular value of the initial task vectors.
    static OriginMode rank_min(int steps = 200, std::optional<double> step_size = std::nullopt);

    Kind kind() const { return kind_; }
    int steps() const { return steps_; }
    std::optional<double> step_size() const { return step_size_; }

    std::string name() const; // "pretrained" | "mean" | "rankmin"
    static OriginMode parse(const std::string &name, int steps = 200, std::optional<double> step_size = std::nullopt);

private:
    OriginMode(Kind kind, int steps, std::optional<double> step_size)
        : kind_(kind), steps_(steps), step_size_(step_size) {}

    Kind kind_;
    int steps_;
    std::optional<double> step_size_;
};

struct TraceRecord {
    int step;
    double nuclear_sum;  // sum_t ||theta_t - origin||_*
    double fip_abs_sum;  // sum_{t' < t} |<tau_t, tau_t'>_F|
};

/// One record per step; step 0 is the starting point before any update.
struct SolverTrace {
    std::vector<TraceRecord> records;

    std::string to_csv() const; // step,nuclear_sum,fip_abs_sum
};

/// Elementwise mean. Error(EmptyInput) for an empty list.
Matrix mean_origin(std::span<const Matrix> layers);

/// sum_t sum_{t'<t} <theta_t - origin, theta_t' - origin>_F.
/// Error(InsufficientTasks) for fewer than two layers.
double simmin_objective(const Matrix &origin, std::span<const Matrix> layers);

double nuclear_objective(const Matrix &origin, std::span<const Matrix> layers);
double fip_abs_sum(const Matrix &origin, std::span<const Matrix> layers);

struct RankMinResult {
    Matrix origin;        // best iterate
    SolverTrace trace;
    double initial_objective = 0.0;
    double best_objective = 0.0;
};

/// Subgradient descent on sum_t ||theta_t - origin||_* started from the mean,
/// step size step_size / sqrt(s), keeping the best iterate.
/// Error(Divergence) if the objective exceeds ten times its initial value.
RankMinResult rankmin_origin(std::span<const Matrix> layers, int steps, std::optional<double> step_size = std::nullopt);

struct OriginResult {
    TensorMap origin;
    std::map<std::string, SolverTrace> traces; // RankMin only, keyed by layer
};

/// Per-layer origin. Matrix layers use the selected solver; NonMatrix layers
/// take the finetuned mean (Mean / RankMin) or the pretrained value (Pretrained).
OriginResult select_origin(const OriginMode &mode, const TensorMap &pretrained, std::span<const TensorMap> finetuned,
                           const ClassOverrides &overrides = {});

} // namespace cart
