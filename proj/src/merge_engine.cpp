#include "cart/merge_engine.hpp"

#include <algorithm>
#include <cmath>

#include "cart/error.hpp"

namespace cart {

Matrix dense(const TaskDelta &delta) {
    if (const auto *m = std::get_if<Matrix>(&delta)) return *m;
    return reconstruct(std::get<LowRankFactor>(delta));
}

CoefficientTable CoefficientTable::filled(std::size_t tasks, std::vector<std::string> layers, double value) {
    CoefficientTable table;
    table.values = Matrix::Constant(static_cast<Eigen::Index>(tasks), static_cast<Eigen::Index>(layers.size()), value);
    table.layers = std::move(layers);
    return table;
}

nlohmann::json CoefficientTable::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index t = 0; t < values.rows(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index l = 0; l < values.cols(); ++l) row.push_back(values(t, l));
        rows.push_back(std::move(row));
    }
    return {{"layers", layers}, {"values", rows}};
}

CoefficientTable CoefficientTable::from_json(const nlohmann::json &j) {
    try {
        CoefficientTable table;
        table.layers = j.at("layers").get<std::vector<std::string>>();
        const auto rows = j.at("values").get<std::vector<std::vector<double>>>();
        table.values = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.layers.size()));
        for (std::size_t t = 0; t < rows.size(); ++t) {
            if (rows[t].size() != table.layers.size())
                throw Error(ErrorCode::Plan, "coefficient row " + std::to_string(t) + " does not cover every layer");
            for (std::size_t l = 0; l < rows[t].size(); ++l)
                table.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(l)) = rows[t][l];
        }
        return table;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorCode::Plan, std::string("malformed coefficient table: ") + e.what());
    }
}

void MergePlan::validate() const {
    if (!(rank_ratio >= 0.0 && rank_ratio <= 1.0)) throw Error(ErrorCode::Plan, "rank ratio must lie in [0, 1]");
    if (const auto *table = std::get_if<CoefficientTable>(&coefficients)) {
        if (!table->values.allFinite()) throw Error(ErrorCode::Plan, "coefficient table has non-finite entries");
        auto sorted = table->layers;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw Error(ErrorCode::Plan, "coefficient table lists a layer twice");
    }
}

nlohmann::json MergePlan::to_json() const {
    nlohmann::json j;
    j["origin_mode"] = origin_mode.name();
    if (origin_mode.kind() == OriginMode::Kind::RankMin) {
        j["rankmin_steps"] = origin_mode.steps();
        if (origin_mode.step_size()) j["rankmin_step_size"] = *origin_mode.step_size();
    }
    j["rank_ratio"] = rank_ratio;
    if (const auto *lambda = std::get_if<double>(&coefficients))
        j["coefficients"] = {{"global", *lambda}};
    else
        j["coefficients"] = std::get<CoefficientTable>(coefficients).to_json();
    return j;
}

MergePlan MergePlan::from_json(const nlohmann::json &j) {
    try {
        MergePlan plan;
        std::optional<double> step_size;
        if (j.contains("rankmin_step_size")) step_size = j.at("rankmin_step_size").get<double>();
        plan.origin_mode = OriginMode::parse(j.value("origin_mode", std::string("mean")), j.value("rankmin_steps", 200),
                                             step_size);
        plan.rank_ratio = j.value("rank_ratio", 0.08);
        if (j.contains("coefficients")) {
            const auto &c = j.at("coefficients");
            if (c.is_number())
                plan.coefficients = c.get<double>();
            else if (c.contains("global"))
                plan.coefficients = c.at("global").get<double>();
            else
                plan.coefficients = CoefficientTable::from_json(c);
        }
        plan.validate();
        return plan;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorCode::Plan, std::string("malformed merge plan: ") + e.what());
    }
}

TaskVectorSet build_task_vectors(const TensorMap &origin, std::span<const TensorMap> finetuned,
                                 const ClassOverrides &overrides) {
    if (finetuned.empty()) throw Error(ErrorCode::EmptyInput, "no finetuned checkpoints");
    std::vector<TensorMap> all{origin};
    all.insert(all.end(), finetuned.begin(), finetuned.end());
    validate_aligned(all);

    TaskVectorSet tvs;
    tvs.origin = origin;
    tvs.layers = matrix_names(origin, overrides);
    tvs.deltas.resize(finetuned.size());
    for (std::size_t t = 0; t < finetuned.size(); ++t) {
        tvs.deltas[t].reserve(tvs.layers.size());
        for (const auto &name : tvs.layers)
            tvs.deltas[t].emplace_back(to_matrix(finetuned[t].entries.at(name)) - to_matrix(origin.entries.at(name)));
    }
    for (const auto &[name, ref] : origin.entries) {
        if (std::binary_search(tvs.layers.begin(), tvs.layers.end(), name)) continue;
        DenseTensor mean = finetuned[0].entries.at(name);
        for (std::size_t i = 0; i < mean.values.size(); ++i) {
            double acc = 0.0;
            for (const auto &f : finetuned) acc += f.entries.at(name).values[i];
            mean.values[i] = acc / static_cast<double>(finetuned.size());
        }
        tvs.nonmatrix_mean.entries.emplace(name, std::move(mean));
    }
    return tvs;
}

TaskVectorSet prune_ranks(const TaskVectorSet &tvs, double rank_ratio) {
    if (!(rank_ratio >= 0.0 && rank_ratio <= 1.0)) throw Error(ErrorCode::Range, "rank ratio must lie in [0, 1]");
    TaskVectorSet out = tvs;
    for (auto &task : out.deltas) {
        for (auto &delta : task) {
            LowRankFactor full = std::holds_alternative<LowRankFactor>(delta) ? std::get<LowRankFactor>(delta)
                                                                              : svd(std::get<Matrix>(delta));
            const Eigen::Index k = pruned_rank(rank_ratio, full.rows(), full.cols());
            delta = truncate(full, std::min(k, full.rank()));
        }
    }
    return out;
}

TensorMap merge(const TaskVectorSet &tvs, const MergePlan &plan) {
    plan.validate();
    const std::size_t tasks = tvs.task_count();

    // Resolve lambda_t^l up front so a missing entry fails before any work.
    Matrix lambdas(static_cast<Eigen::Index>(tasks), static_cast<Eigen::Index>(tvs.layer_count()));
    if (const auto *global = std::get_if<double>(&plan.coefficients)) {
        lambdas.setConstant(*global);
    } else {
        const auto &table = std::get<CoefficientTable>(plan.coefficients);
        if (static_cast<std::size_t>(table.values.rows()) != tasks)
            throw Error(ErrorCode::Plan, "coefficient table has " + std::to_string(table.values.rows()) +
                                             " task rows, expected " + std::to_string(tasks));
        for (std::size_t l = 0; l < tvs.layer_count(); ++l) {
            const auto it = std::find(table.layers.begin(), table.layers.end(), tvs.layers[l]);
            if (it == table.layers.end()) throw Error(ErrorCode::Plan, "no coefficient for layer " + tvs.layers[l]);
            lambdas.col(static_cast<Eigen::Index>(l)) = table.values.col(it - table.layers.begin());
        }
    }

    TensorMap out;
    out.metadata = tvs.origin.metadata;
    for (const auto &[name, t] : tvs.nonmatrix_mean.entries) out.entries.emplace(name, t);
    for (std::size_t l = 0; l < tvs.layer_count(); ++l) {
        const auto &name = tvs.layers[l];
        const auto &ref = tvs.origin.entries.at(name);
        Matrix merged = to_matrix(ref);
        for (std::size_t t = 0; t < tasks; ++t) {
            const double lambda = lambdas(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(l));
            if (lambda != 0.0) merged += lambda * dense(tvs.deltas[t][l]);
        }
        out.entries.insert_or_assign(name, from_matrix(merged, ref.dtype));
    }
    // Origin entries that are neither merged layers nor averaged params (none
    // in practice) pass through unchanged.
    for (const auto &[name, t] : tvs.origin.entries) out.entries.try_emplace(name, t);
    return out;
}

TensorMap weight_average(std::span<const TensorMap> maps) {
    if (maps.empty()) throw Error(ErrorCode::EmptyInput, "weight_average of no checkpoints");
    if (maps.size() >= 2) validate_aligned(maps);
    TensorMap out = maps[0];
    for (auto &[name, t] : out.entries) {
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            double acc = 0.0;
            for (const auto &m : maps) acc += m.entries.at(name).values[i];
            t.values[i] = acc / static_cast<double>(maps.size());
        }
    }
    return out;
}

TensorMap cart_merge(const TensorMap &pretrained, std::span<const TensorMap> finetuned, double rank_ratio,
                     double lambda, const ClassOverrides &overrides) {
    if (finetuned.empty()) throw Error(ErrorCode::EmptyInput, "cart_merge needs finetuned checkpoints");
    const auto origin = select_origin(OriginMode::mean(), pretrained, finetuned, overrides).origin;
    const auto tvs = prune_ranks(build_task_vectors(origin, finetuned, overrides), rank_ratio);
    MergePlan plan;
    plan.rank_ratio = rank_ratio;
    plan.coefficients = lambda;
    return merge(tvs, plan);
}

TensorMap cart_indexing(const TensorMap &pretrained, std::span<const TensorMap> finetuned, double rank_ratio,
                        std::size_t task_index, const ClassOverrides &overrides) {
    if (task_index >= finetuned.size())
        throw Error(ErrorCode::Index, "task index " + std::to_string(task_index) + " out of range for " +
                                          std::to_string(finetuned.size()) + " tasks");
    const auto origin = select_origin(OriginMode::mean(), pretrained, finetuned, overrides).origin;
    const auto tvs = prune_ranks(build_task_vectors(origin, finetuned, overrides), rank_ratio);
    MergePlan plan;
    plan.rank_ratio = rank_ratio;
    plan.coefficients = CoefficientTable::filled(finetuned.size(), tvs.layers, 0.0);
    std::get<CoefficientTable>(plan.coefficients).values.row(static_cast<Eigen::Index>(task_index)).setOnes();
    auto out = merge(tvs, plan);
    // A per-task model keeps that task's own biases and norm parameters.
    for (const auto &[name, t] : tvs.nonmatrix_mean.entries)
        out.entries.insert_or_assign(name, finetuned[task_index].entries.at(name));
    return out;
}

StorageCost storage_cost(std::uint64_t tasks, std::span<const std::pair<std::int64_t, std::int64_t>> layer_dims,
                         double rank_ratio, std::uint64_t float_bits) {
    StorageCost cost;
    for (const auto &[m, n] : layer_dims) {
        if (m <= 0 || n <= 0) throw Error(ErrorCode::Param, "layer dims must be positive");
        const auto k = static_cast<std::uint64_t>(pruned_rank(rank_ratio, m, n));
        const auto um = static_cast<std::uint64_t>(m), un = static_cast<std::uint64_t>(n);
        cost.mask_bits += tasks * um * un;
        cost.lowrank_bits += float_bits * tasks * ((um + un) * k + k);
    }
    return cost;
}

} // namespace cart
