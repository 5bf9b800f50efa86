#include "cart/origin_solver.hpp"

#include <cmath>
#include <sstream>

#include "cart/error.hpp"

namespace cart {

OriginMode OriginMode::rank_min(int steps, std::optional<double> step_size) {
    if (steps < 1) throw Error(ErrorCode::Param, "RankMin needs steps >= 1");
    if (step_size && !(*step_size > 0.0 && std::isfinite(*step_size)))
        throw Error(ErrorCode::Param, "RankMin step size must be positive");
    return OriginMode(Kind::RankMin, steps, step_size);
}

std::string OriginMode::name() const {
    switch (kind_) {
    case Kind::Pretrained: return "pretrained";
    case Kind::Mean: return "mean";
    case Kind::RankMin: return "rankmin";
    }
    return "?";
}

OriginMode OriginMode::parse(const std::string &name, int steps, std::optional<double> step_size) {
    if (name == "pretrained") return pretrained();
    if (name == "mean") return mean();
    if (name == "rankmin") return rank_min(steps, step_size);
    throw Error(ErrorCode::Param, "unknown origin mode '" + name + "'");
}

std::string SolverTrace::to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,nuclear_sum,fip_abs_sum\n";
    for (const auto &r : records) out << r.step << ',' << r.nuclear_sum << ',' << r.fip_abs_sum << '\n';
    return out.str();
}

namespace {

void check_same_shape(std::span<const Matrix> layers) {
    for (const auto &m : layers)
        if (m.rows() != layers[0].rows() || m.cols() != layers[0].cols())
            throw Error(ErrorCode::Shape, "origin solver layers differ in shape");
}

} // namespace

Matrix mean_origin(std::span<const Matrix> layers) {
    if (layers.empty()) throw Error(ErrorCode::EmptyInput, "mean_origin of an empty list");
    check_same_shape(layers);
    Matrix acc = Matrix::Zero(layers[0].rows(), layers[0].cols());
    for (const auto &m : layers) acc += m;
    return acc / static_cast<double>(layers.size());
}

double simmin_objective(const Matrix &origin, std::span<const Matrix> layers) {
    if (layers.size() < 2) throw Error(ErrorCode::InsufficientTasks, "SimMin objective needs at least two tasks");
    double total = 0.0;
    for (std::size_t t = 1; t < layers.size(); ++t)
        for (std::size_t s = 0; s < t; ++s) total += frobenius_inner(layers[t] - origin, layers[s] - origin);
    return total;
}

double nuclear_objective(const Matrix &origin, std::span<const Matrix> layers) {
    double total = 0.0;
    for (const auto &m : layers) total += nuclear_norm(m - origin);
    return total;
}

double fip_abs_sum(const Matrix &origin, std::span<const Matrix> layers) {
    double total = 0.0;
    for (std::size_t t = 1; t < layers.size(); ++t)
        for (std::size_t s = 0; s < t; ++s) total += std::abs(frobenius_inner(layers[t] - origin, layers[s] - origin));
    return total;
}

RankMinResult rankmin_origin(std::span<const Matrix> layers, int steps, std::optional<double> step_size) {
    if (steps < 1) throw Error(ErrorCode::Param, "RankMin needs steps >= 1");
    Matrix theta = mean_origin(layers);

    RankMinResult result;
    result.initial_objective = nuclear_objective(theta, layers);
    result.best_objective = result.initial_objective;
    result.origin = theta;
    result.trace.records.push_back({0, result.initial_objective, fip_abs_sum(theta, layers)});
    if (layers.size() == 1) return result;

    double eta0 = 0.0;
    if (step_size) {
        eta0 = *step_size;
    } else {
        double sum = 0.0;
        Eigen::Index count = 0;
        for (const auto &m : layers) {
            const auto s = svd(m - theta).singulars;
            sum += s.sum();
            count += s.size();
        }
        eta0 = count > 0 ? 0.1 * sum / static_cast<double>(count) : 0.0;
    }
    if (eta0 <= 0.0) return result; // all task vectors vanish: the mean is already optimal

    const double inv_t = 1.0 / static_cast<double>(layers.size());
    for (int s = 1; s <= steps; ++s) {
        Matrix direction = Matrix::Zero(theta.rows(), theta.cols());
        for (const auto &m : layers) direction += nuclear_subgradient(m - theta);
        theta += (eta0 / std::sqrt(static_cast<double>(s))) * inv_t * direction;

        const double objective = nuclear_objective(theta, layers);
        if (!std::isfinite(objective) || objective > 10.0 * result.initial_objective)
            throw Error(ErrorCode::Divergence, "RankMin objective diverged at step " + std::to_string(s));
        result.trace.records.push_back({s, objective, fip_abs_sum(theta, layers)});
        if (objective < result.best_objective) {
            result.best_objective = objective;
            result.origin = theta;
        }
    }
    return result;
}

OriginResult select_origin(const OriginMode &mode, const TensorMap &pretrained, std::span<const TensorMap> finetuned,
                           const ClassOverrides &overrides) {
    if (finetuned.empty()) throw Error(ErrorCode::EmptyInput, "select_origin needs finetuned checkpoints");

    std::vector<TensorMap> all;
    if (!pretrained.entries.empty()) all.push_back(pretrained);
    all.insert(all.end(), finetuned.begin(), finetuned.end());
    if (all.size() >= 2) validate_aligned(all);

    OriginResult out;
    if (mode.kind() == OriginMode::Kind::Pretrained) {
        if (pretrained.entries.empty()) throw Error(ErrorCode::Param, "pretrained origin requested without a pretrained checkpoint");
        out.origin = pretrained;
        return out;
    }

    out.origin.metadata = finetuned[0].metadata;
    for (const auto &[name, ref] : finetuned[0].entries) {
        const bool is_matrix = classify(name, ref, overrides) == ParamClass::Matrix;
        if (!is_matrix || mode.kind() == OriginMode::Kind::Mean) {
            // Elementwise mean over the raw buffers covers every rank of tensor.
            DenseTensor mean = ref;
            for (std::size_t i = 0; i < mean.values.size(); ++i) {
                double acc = 0.0;
                for (const auto &f : finetuned) acc += f.entries.at(name).values[i];
                mean.values[i] = acc / static_cast<double>(finetuned.size());
            }
            out.origin.entries.emplace(name, std::move(mean));
            continue;
        }
        std::vector<Matrix> layers;
        layers.reserve(finetuned.size());
        for (const auto &f : finetuned) layers.push_back(to_matrix(f.entries.at(name)));
        auto solved = rankmin_origin(layers, mode.steps(), mode.step_size());
        out.origin.entries.emplace(name, from_matrix(solved.origin, ref.dtype));
        out.traces.emplace(name, std::move(solved.trace));
    }
    return out;
}

} // namespace cart
