#include "cart/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cart/error.hpp"

namespace cart {

namespace {

// Position of every TaskVectorSet layer in the model's forward order, or -1.
std::vector<int> layer_positions(const TaskVectorSet &tvs, const ToyClassifier &model) {
    std::vector<int> pos;
    for (const auto &name : tvs.layers) {
        const auto it = std::find(model.layer_names.begin(), model.layer_names.end(), name);
        pos.push_back(it == model.layer_names.end() ? -1 : static_cast<int>(it - model.layer_names.begin()));
    }
    return pos;
}

double mean_coefficient(const CoefficientTable &table) {
    return table.values.size() > 0 ? table.values.mean() : 0.0;
}

std::string log_to_csv(const std::vector<AdaptLogRow> &log) {
    std::ostringstream out;
    out.precision(17);
    out << "iter,entropy,mean_lambda\n";
    for (const auto &r : log) out << r.iter << ',' << r.entropy << ',' << r.mean_lambda << '\n';
    return out.str();
}

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

} // namespace

TensorMap merged_params(const TaskVectorSet &tvs, const CoefficientTable &table) {
    MergePlan plan;
    plan.rank_ratio = 1.0;
    plan.coefficients = table;
    return merge(tvs, plan);
}

Matrix coefficient_gradient(const CoefficientTable &table, const TaskVectorSet &tvs, const ToyClassifier &model,
                            const Batch &batch) {
    const auto weights = model.weights_from(merged_params(tvs, table));
    const auto grad = entropy_weight_gradient(model, weights, batch);
    const auto pos = layer_positions(tvs, model);

    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(tvs.task_count()), static_cast<Eigen::Index>(tvs.layer_count()));
    for (std::size_t l = 0; l < tvs.layer_count(); ++l) {
        if (pos[l] < 0) continue;
        for (std::size_t t = 0; t < tvs.task_count(); ++t)
            out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(l)) =
                frobenius_inner(grad.weights[static_cast<std::size_t>(pos[l])], dense(tvs.deltas[t][l]));
    }
    return out;
}

std::string AdaptResult::log_csv() const { return log_to_csv(log); }

AdaptResult adapt_coefficients(const TaskVectorSet &tvs, const ToyClassifier &model, const Batch &batch,
                               const AdaptOptions &options) {
    AdaptResult result;
    result.table = CoefficientTable::filled(tvs.task_count(), tvs.layers, options.init_lambda);

    for (int it = 0; it < options.iters; ++it) {
        const double loss = entropy_loss(model, merged_params(tvs, result.table), batch);
        result.log.push_back({it, loss, mean_coefficient(result.table)});
        const Matrix grad = coefficient_gradient(result.table, tvs, model, batch);
        if (!grad.allFinite())
            throw Error(ErrorCode::Numeric, "non-finite coefficient gradient at iteration " + std::to_string(it));
        result.table.values -= options.lr * grad;
    }
    result.log.push_back({options.iters, entropy_loss(model, merged_params(tvs, result.table), batch),
                          mean_coefficient(result.table)});
    return result;
}

SteOutput ste_masked_singulars(const Vector &singulars, const Vector &logits) {
    if (singulars.size() != logits.size()) throw Error(ErrorCode::Shape, "mask logits and singulars differ in length");
    SteOutput out;
    out.soft_mask = logits.unaryExpr([](double a) { return sigmoid(a); });
    out.value = Vector::Zero(singulars.size());
    out.derivative = Vector::Zero(singulars.size());
    for (Eigen::Index i = 0; i < singulars.size(); ++i) {
        const double m = out.soft_mask(i);
        // Strict comparison: a logit of exactly 0 drops the component.
        out.value(i) = m > 0.5 ? singulars(i) : 0.0;
        out.derivative(i) = singulars(i) * m * (1.0 - m);
    }
    return out;
}

Vector initial_mask_logits(Eigen::Index full_rank, Eigen::Index init_k) {
    if (init_k < 0 || init_k > full_rank)
        throw Error(ErrorCode::Rank, "initial mask rank " + std::to_string(init_k) + " exceeds full rank " +
                                         std::to_string(full_rank));
    Vector a = Vector::Constant(full_rank, -1.0);
    a.head(init_k).setOnes();
    return a;
}

Eigen::Index AdaRankResult::retained_rank(std::size_t task, std::size_t layer) const {
    const auto &a = logits.at(task).at(layer);
    return (a.array() > 0.0).count();
}

TaskVectorSet AdaRankResult::masked(const TaskVectorSet &tvs) const {
    TaskVectorSet out = tvs;
    for (std::size_t t = 0; t < factors.size(); ++t) {
        for (std::size_t l = 0; l < factors[t].size(); ++l) {
            const auto &f = factors[t][l];
            const auto ste = ste_masked_singulars(f.singulars, logits[t][l]);
            out.deltas[t][l] = Matrix(f.left * ste.value.asDiagonal() * f.right);
        }
    }
    return out;
}

nlohmann::json AdaRankResult::to_json() const {
    nlohmann::json j;
    j["coefficients"] = table.to_json();
    j["retained_rank"] = nlohmann::json::array();
    for (std::size_t t = 0; t < logits.size(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t l = 0; l < logits[t].size(); ++l) row.push_back(retained_rank(t, l));
        j["retained_rank"].push_back(std::move(row));
    }
    return j;
}

AdaRankResult adarank_adapt(const TaskVectorSet &tvs, const ToyClassifier &model, const Batch &batch,
                            const AdaRankOptions &options) {
    AdaRankResult result;
    result.table = CoefficientTable::filled(tvs.task_count(), tvs.layers, options.init_lambda);
    result.factors.resize(tvs.task_count());
    result.logits.resize(tvs.task_count());
    for (std::size_t t = 0; t < tvs.task_count(); ++t) {
        for (const auto &delta : tvs.deltas[t]) {
            auto f = std::holds_alternative<LowRankFactor>(delta) ? std::get<LowRankFactor>(delta)
                                                                  : svd(std::get<Matrix>(delta));
            result.logits[t].push_back(initial_mask_logits(f.rank(), options.init_k));
            result.factors[t].push_back(std::move(f));
        }
    }
    const auto pos = layer_positions(tvs, model);

    for (int it = 0;; ++it) {
        const auto masked = result.masked(tvs);
        const auto weights = model.weights_from(merged_params(masked, result.table));
        const auto grad = entropy_weight_gradient(model, weights, batch);
        result.log.push_back({it, grad.loss, mean_coefficient(result.table)});
        if (it == options.iters) break;

        Matrix lambda_grad = Matrix::Zero(result.table.values.rows(), result.table.values.cols());
        for (std::size_t l = 0; l < tvs.layer_count(); ++l) {
            if (pos[l] < 0) continue;
            const Matrix &g = grad.weights[static_cast<std::size_t>(pos[l])];
            for (std::size_t t = 0; t < tvs.task_count(); ++t) {
                const auto ti = static_cast<Eigen::Index>(t), li = static_cast<Eigen::Index>(l);
                const auto &f = result.factors[t][l];
                auto &a = result.logits[t][l];
                const auto ste = ste_masked_singulars(f.singulars, a);
                lambda_grad(ti, li) = frobenius_inner(g, std::get<Matrix>(masked.deltas[t][l]));
                // d loss / d masked_s_i = lambda * u_i^T G v_i
                const Vector projected = (f.left.transpose() * g * f.right.transpose()).diagonal();
                const Vector a_grad = result.table.values(ti, li) * projected.cwiseProduct(ste.derivative);
                if (!a_grad.allFinite())
                    throw Error(ErrorCode::Numeric, "non-finite mask gradient at iteration " + std::to_string(it));
                a -= options.mask_lr * a_grad;
            }
        }
        if (!lambda_grad.allFinite())
            throw Error(ErrorCode::Numeric, "non-finite coefficient gradient at iteration " + std::to_string(it));
        result.table.values -= options.lr * lambda_grad;
    }
    return result;
}

} // namespace cart
