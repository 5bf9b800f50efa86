#include "cart/interference.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cart/error.hpp"
#include "cart/merge_engine.hpp"

namespace cart {

namespace {

// Columns: top right singular vectors scaled by normalized singular values.
struct NormalizedBasis {
    Matrix right;      // n x r, right singular vectors as columns
    Vector normalized; // singular values / ||delta||_F
};

std::vector<NormalizedBasis> normalized_bases(std::span<const Matrix> deltas) {
    std::vector<NormalizedBasis> out;
    out.reserve(deltas.size());
    for (std::size_t t = 0; t < deltas.size(); ++t) {
        const auto f = svd(deltas[t]);
        const double norm = f.singulars.norm();
        if (norm == 0.0) throw Error(ErrorCode::ZeroTaskVector, "task vector " + std::to_string(t) + " is zero");
        out.push_back({f.right.transpose(), f.singulars / norm});
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

} // namespace

std::vector<double> row_space_interference_curve(std::span<const Matrix> deltas, std::span<const Eigen::Index> ks) {
    if (deltas.size() < 2) throw Error(ErrorCode::InsufficientTasks, "row-space interference needs at least two tasks");
    const Eigen::Index full = std::min(deltas[0].rows(), deltas[0].cols());
    for (const auto &d : deltas)
        if (d.rows() != deltas[0].rows() || d.cols() != deltas[0].cols())
            throw Error(ErrorCode::Shape, "task vectors differ in shape");
    for (auto k : ks)
        if (k < 1 || k > full) throw Error(ErrorCode::Rank, "interference rank " + std::to_string(k) + " outside [1, " +
                                                                std::to_string(full) + "]");

    const auto bases = normalized_bases(deltas);
    std::vector<double> values;
    values.reserve(ks.size());
    for (auto k : ks) {
        std::vector<Matrix> scaled;
        scaled.reserve(bases.size());
        for (const auto &b : bases) scaled.push_back(b.right.leftCols(k) * b.normalized.head(k).asDiagonal());
        double total = 0.0;
        for (std::size_t i = 0; i < scaled.size(); ++i)
            for (std::size_t j = 0; j < scaled.size(); ++j)
                if (i != j) total += (scaled[i].transpose() * scaled[j]).norm();
        values.push_back(total);
    }
    return values;
}

double row_space_interference(std::span<const Matrix> deltas, Eigen::Index k) {
    const Eigen::Index ks[] = {k};
    return row_space_interference_curve(deltas, ks).front();
}

double reconstruction_error(std::span<const Matrix> thetas, const Matrix &origin, Eigen::Index k) {
    double total = 0.0;
    for (const auto &theta : thetas) {
        const Matrix delta = theta - origin;
        const auto f = svd(delta);
        total += (delta - reconstruct(truncate(f, k))).squaredNorm();
    }
    return total;
}

nlohmann::json InterferenceReport::to_json() const {
    nlohmann::json j;
    j["origin_mode"] = origin_mode;
    j["pair_convention"] = "ordered pairs i != j";
    j["normalization"] = "singular values / ||tau||_F";
    j["layers"] = nlohmann::json::array();
    for (const auto &l : layers) {
        nlohmann::json entry;
        entry["layer"] = l.layer;
        entry["zero_task_vector"] = l.zero_task_vector;
        entry["interference"] = nlohmann::json::array();
        for (const auto &[k, v] : l.interference) entry["interference"].push_back({{"k", k}, {"I", v}});
        entry["reconstruction"] = nlohmann::json::array();
        for (const auto &[k, v] : l.reconstruction) entry["reconstruction"].push_back({{"k", k}, {"R", v}});
        entry["spectra"] = l.spectra;
        j["layers"].push_back(std::move(entry));
    }
    return j;
}

std::string InterferenceReport::to_csv() const {
    std::ostringstream out;
    out << "layer,k,interference,reconstruction\n";
    for (const auto &l : layers) {
        for (const auto &[k, r] : l.reconstruction) {
            std::string interference;
            for (const auto &[ki, v] : l.interference)
                if (ki == k) interference = fmt(v);
            out << l.layer << ',' << k << ',' << interference << ',' << fmt(r) << '\n';
        }
    }
    return out.str();
}

InterferenceReport analyze_interference(const TensorMap &origin, std::span<const TensorMap> finetuned,
                                        const std::string &origin_mode, const ClassOverrides &overrides) {
    const auto tvs = build_task_vectors(origin, finetuned, overrides);
    InterferenceReport report;
    report.origin_mode = origin_mode;
    for (std::size_t l = 0; l < tvs.layer_count(); ++l) {
        LayerInterference entry;
        entry.layer = tvs.layers[l];
        std::vector<Matrix> deltas;
        for (const auto &task : tvs.deltas) deltas.push_back(dense(task[l]));

        const Eigen::Index full = std::min(deltas[0].rows(), deltas[0].cols());
        std::vector<Vector> spectra;
        for (const auto &d : deltas) {
            spectra.push_back(svd(d).singulars);
            entry.spectra.emplace_back(spectra.back().data(), spectra.back().data() + spectra.back().size());
        }
        // R(k) is the tail energy of each spectrum.
        for (Eigen::Index k = 0; k <= full; ++k) {
            double r = 0.0;
            for (const auto &s : spectra) r += s.tail(full - k).squaredNorm();
            entry.reconstruction.emplace_back(k, r);
        }
        if (deltas.size() >= 2) {
            std::vector<Eigen::Index> ks(static_cast<std::size_t>(full));
            for (Eigen::Index k = 1; k <= full; ++k) ks[static_cast<std::size_t>(k - 1)] = k;
            try {
                const auto values = row_space_interference_curve(deltas, ks);
                for (std::size_t i = 0; i < ks.size(); ++i) entry.interference.emplace_back(ks[i], values[i]);
            } catch (const Error &e) {
                if (e.code() != ErrorCode::ZeroTaskVector) throw;
                entry.zero_task_vector = true;
            }
        }
        report.layers.push_back(std::move(entry));
    }
    return report;
}

std::vector<std::size_t> SweepTable::endpoint_violations(double tol) const {
    auto same = [tol](const std::vector<double> &a, const std::vector<double> &b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (std::abs(a[i] - b[i]) > tol) return false;
        return true;
    };
    std::vector<std::size_t> bad;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto &row = rows[i];
        if (row.ratio == 0.0 && !same(row.task_accuracy, origin_accuracy)) bad.push_back(i);
        else if (row.ratio == 1.0 && origin_mode == "mean" && !same(row.task_accuracy, weight_average_accuracy))
            bad.push_back(i);
    }
    return bad;
}

std::string SweepTable::to_csv() const {
    std::ostringstream out;
    out << "ratio,lambda,task,accuracy\n";
    for (const auto &row : rows)
        for (std::size_t t = 0; t < row.task_accuracy.size(); ++t)
            out << fmt(row.ratio) << ',' << fmt(row.lambda) << ',' << t << ',' << fmt(row.task_accuracy[t]) << '\n';
    return out.str();
}

nlohmann::json SweepTable::to_json() const {
    nlohmann::json j;
    j["origin_mode"] = origin_mode;
    j["weight_average_accuracy"] = weight_average_accuracy;
    j["origin_accuracy"] = origin_accuracy;
    j["rows"] = nlohmann::json::array();
    for (const auto &row : rows)
        j["rows"].push_back({{"ratio", row.ratio},
                             {"lambda", row.lambda},
                             {"task_accuracy", row.task_accuracy},
                             {"mean_accuracy", row.mean_accuracy}});
    return j;
}

namespace {

std::vector<double> checked_eval(const Evaluator &evaluator, const TensorMap &model) {
    std::vector<double> acc;
    try {
        acc = evaluator(model);
    } catch (const std::exception &e) {
        throw Error(ErrorCode::Evaluation, e.what());
    }
    for (double a : acc)
        if (!(a >= 0.0 && a <= 1.0)) throw Error(ErrorCode::Evaluation, "accuracy outside [0, 1]");
    return acc;
}

double mean_of(const std::vector<double> &v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

SweepTable rank_sweep(const TensorMap &pretrained, std::span<const TensorMap> finetuned, const Evaluator &evaluator,
                      std::span<const double> lambdas, std::span<const double> ratios, const OriginMode &origin_mode,
                      const ClassOverrides &overrides) {
    SweepTable table;
    table.origin_mode = origin_mode.name();
    if (ratios.empty() || lambdas.empty()) return table;

    const auto origin = select_origin(origin_mode, pretrained, finetuned, overrides).origin;
    auto full = build_task_vectors(origin, finetuned, overrides);
    for (auto &task : full.deltas)
        for (auto &delta : task) delta = svd(std::get<Matrix>(delta));

    table.weight_average_accuracy = checked_eval(evaluator, weight_average(finetuned));
    // The origin as a model, with NonMatrix params averaged as every merge does.
    {
        MergePlan zero;
        zero.coefficients = 0.0;
        table.origin_accuracy = checked_eval(evaluator, merge(full, zero));
    }

    for (double ratio : ratios) {
        const auto pruned = prune_ranks(full, ratio);
        for (double lambda : lambdas) {
            MergePlan plan;
            plan.origin_mode = origin_mode;
            plan.rank_ratio = ratio;
            plan.coefficients = lambda;
            auto acc = checked_eval(evaluator, merge(pruned, plan));
            const double mean = mean_of(acc);
            table.rows.push_back({ratio, lambda, std::move(acc), mean});
        }
    }
    return table;
}

std::int64_t sample_size(double a, double b, double epsilon, double z) {
    if (!(b > a)) throw Error(ErrorCode::Range, "sample_size needs b > a");
    if (!(epsilon > 0.0) || !(z > 0.0)) throw Error(ErrorCode::Range, "sample_size needs epsilon > 0 and z > 0");
    const double sigma = (b - a) / 2.0;
    const double x = std::pow(z * sigma / epsilon, 2);
    // Slack absorbs round-off when x is an exact integer (e.g. epsilon = z * sigma).
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(x - 1e-9 * x)));
}

} // namespace cart
