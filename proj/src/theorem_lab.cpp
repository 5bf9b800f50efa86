#include "cart/theorem_lab.hpp"

#include <algorithm>
#include <cmath>

#include "cart/error.hpp"
#include "cart/rng.hpp"

namespace cart {

void SuiteParams::validate() const {
    if (!(alpha > 0.0 && alpha <= s_max)) throw Error(ErrorCode::Param, "need 0 < alpha <= s_max");
    if (r < 1 || r > d) throw Error(ErrorCode::Param, "need 1 <= r <= d");
    if (tasks <= 2) throw Error(ErrorCode::Param, "need more than two tasks");
    if (n < 1) throw Error(ErrorCode::Param, "need n >= 1");
    if (!(c > 0.0)) throw Error(ErrorCode::Param, "need c > 0");
    if (!(eta >= 0.0)) throw Error(ErrorCode::Param, "need eta >= 0");
}

void SyntheticTaskSuite::check_invariants() const {
    const double tol = 1e-9;
    const auto T = static_cast<std::size_t>(params.tasks);
    if (taus.size() != T || row_bases.size() != T || inputs.size() != T)
        throw Error(ErrorCode::Invariant, "suite does not hold one entry per task");
    for (std::size_t t = 0; t < T; ++t) {
        const auto f = svd(taus[t]);
        const Eigen::Index rank = numerical_rank(f.singulars);
        if (rank > params.r) throw Error(ErrorCode::Invariant, "task " + std::to_string(t) + " exceeds rank bound");
        for (Eigen::Index i = 0; i < rank; ++i) {
            const double s = f.singulars(i);
            if (s < params.alpha * (1 - tol) || s > params.s_max * (1 + tol))
                throw Error(ErrorCode::Invariant, "task " + std::to_string(t) + " singular value outside [alpha, s_max]");
        }
        const Matrix &v = row_bases[t];
        const Matrix gram = v.transpose() * v;
        if ((gram - Matrix::Identity(v.cols(), v.cols())).norm() > 1e-8)
            throw Error(ErrorCode::Invariant, "row basis of task " + std::to_string(t) + " is not orthonormal");
        const Matrix outside = taus[t] - taus[t] * v * v.transpose();
        if (outside.norm() > 1e-8 * std::max(1.0, taus[t].norm()))
            throw Error(ErrorCode::Invariant, "row basis of task " + std::to_string(t) + " misses the row space");
        for (std::size_t i = 0; i < inputs[t].size(); ++i) {
            if (coords[t][i].norm() > params.c * params.s_max * (1 + tol))
                throw Error(ErrorCode::Invariant, "coordinate norm above c * s_max");
            if (noise[t][i].norm() > params.eta * (1 + tol) + 1e-300)
                throw Error(ErrorCode::Invariant, "noise norm above eta");
        }
    }
}

namespace {

void draw_inputs(SyntheticTaskSuite &suite) {
    const auto &p = suite.params;
    Rng coord_rng(suite.seed, "theorem.coords");
    Rng noise_rng(suite.seed, "theorem.noise");
    const auto T = static_cast<std::size_t>(p.tasks);
    suite.coords.assign(T, {});
    suite.noise.assign(T, {});
    suite.inputs.assign(T, {});
    for (std::size_t t = 0; t < T; ++t) {
        for (int i = 0; i < p.n; ++i) {
            Vector a = coord_rng.in_ball(suite.row_bases[t].cols(), p.c * p.s_max);
            Vector e = noise_rng.in_ball(p.d, p.eta);
            suite.inputs[t].push_back(suite.row_bases[t] * a + e);
            suite.coords[t].push_back(std::move(a));
            suite.noise[t].push_back(std::move(e));
        }
    }
}

Vector draw_singulars(Rng &rng, const SuiteParams &p) {
    Vector s(p.r);
    for (int i = 0; i < p.r; ++i) s(i) = rng.uniform(p.alpha, p.s_max);
    return s;
}

} // namespace

SyntheticTaskSuite generate_suite(const SuiteParams &params, std::uint64_t seed) {
    params.validate();
    SyntheticTaskSuite suite;
    suite.params = params;
    suite.seed = seed;

    Rng base_rng(seed, "theorem.theta0");
    suite.theta0 = base_rng.gaussian(params.d, params.d);

    Rng task_rng(seed, "theorem.taus");
    for (int t = 0; t < params.tasks; ++t) {
        const Matrix u = task_rng.orthonormal(params.d, params.r);
        const Matrix v = task_rng.orthonormal(params.d, params.r);
        const Vector s = draw_singulars(task_rng, params);
        suite.taus.push_back(u * s.asDiagonal() * v.transpose());
        suite.row_bases.push_back(v);
    }
    draw_inputs(suite);
    return suite;
}

SyntheticTaskSuite generate_orthogonal_suite(const SuiteParams &params, std::uint64_t seed) {
    params.validate();
    if (params.tasks * params.r > params.d)
        throw Error(ErrorCode::Param, "orthogonal suite needs tasks * r <= d");
    SyntheticTaskSuite suite;
    suite.params = params;
    suite.seed = seed;

    Rng base_rng(seed, "theorem.theta0");
    suite.theta0 = base_rng.gaussian(params.d, params.d);

    Rng task_rng(seed, "theorem.taus");
    const Matrix left = task_rng.orthonormal(params.d, params.d);
    const Matrix right = task_rng.orthonormal(params.d, params.d);
    for (int t = 0; t < params.tasks; ++t) {
        const Matrix u = left.middleCols(t * params.r, params.r);
        const Matrix v = right.middleCols(t * params.r, params.r);
        const Vector s = draw_singulars(task_rng, params);
        suite.taus.push_back(u * s.asDiagonal() * v.transpose());
        suite.row_bases.push_back(v);
    }
    draw_inputs(suite);
    return suite;
}

SyntheticTaskSuite scale_suite(const SyntheticTaskSuite &suite, double factor) {
    if (!(factor > 0.0)) throw Error(ErrorCode::Param, "scale factor must be positive");
    SyntheticTaskSuite out = suite;
    for (auto &tau : out.taus) tau *= factor;
    out.params.alpha *= factor;
    out.params.s_max *= factor;
    // Inputs stay valid: the coordinate bound c * s_max only grew.
    return out;
}

SyntheticTaskSuite rotate_suite(const SyntheticTaskSuite &suite, const Matrix &rotation) {
    SyntheticTaskSuite out = suite;
    for (auto &tau : out.taus) tau = tau * rotation.transpose();
    for (auto &v : out.row_bases) v = rotation * v;
    for (auto &task : out.inputs)
        for (auto &x : task) x = rotation * x;
    for (auto &task : out.noise)
        for (auto &e : task) e = rotation * e;
    return out;
}

double task_interference_L(const SyntheticTaskSuite &suite) {
    Matrix merged = suite.theta0;
    for (const auto &tau : suite.taus) merged += tau;
    double total = 0.0;
    for (std::size_t t = 0; t < suite.taus.size(); ++t) {
        const Matrix own = suite.theta0 + suite.taus[t];
        for (const auto &x : suite.inputs[t]) total += (merged * x - own * x).squaredNorm();
    }
    return total;
}

nlohmann::json BoundCertificate::to_json() const {
    // Field order is fixed by nlohmann's sorted object keys.
    return {{"seed", seed},       {"d", params.d},         {"T", params.tasks},   {"n", params.n},
            {"r", rank},          {"alpha", params.alpha}, {"s_max", params.s_max}, {"c", params.c},
            {"eta", params.eta},  {"L", L_value},          {"I", I_value},        {"bound", bound_value},
            {"k3", k3},           {"k4", k4},              {"k_for_I", k_for_i},  {"holds", holds}};
}

BoundCertificate certify_bound(const SyntheticTaskSuite &suite, std::optional<Eigen::Index> k_for_i) {
    suite.check_invariants();
    const auto &p = suite.params;

    BoundCertificate cert;
    cert.seed = suite.seed;
    cert.params = p;
    for (const auto &tau : suite.taus) cert.rank = std::max(cert.rank, numerical_rank(tau));
    cert.k_for_i = k_for_i.value_or(cert.rank);
    if (cert.k_for_i < cert.rank || cert.k_for_i > p.d)
        throw Error(ErrorCode::Param, "k for I must cover the largest task rank and not exceed d");

    cert.L_value = task_interference_L(suite);
    cert.I_value = row_space_interference(suite.taus, cert.k_for_i);
    const double r = static_cast<double>(cert.rank);
    cert.k3 = p.s_max * p.s_max * p.c * (r * p.s_max * p.s_max / (p.alpha * p.alpha));
    cert.k4 = p.s_max;
    const double T = p.tasks;
    const double inner = cert.k3 * cert.I_value + T * (T - 1.0) * cert.k4 * p.eta;
    cert.bound_value = p.n * inner * inner;

    const double scale = p.n * T * std::pow(p.c * p.s_max * p.s_max, 2);
    cert.holds = cert.L_value <= cert.bound_value * (1.0 + kBoundRelSlack) + kBoundAbsSlack * scale;
    return cert;
}

CheckpointSuite make_shared_component_suite(const SharedComponentParams &p, std::uint64_t seed) {
    Rng rng(seed, "shared.suite");
    const Matrix pretrained = rng.gaussian(p.rows, p.cols);
    const Matrix shared = p.shared_scale * rng.gaussian(p.rows, p.shared_rank) * rng.gaussian(p.shared_rank, p.cols) /
                          std::sqrt(static_cast<double>(p.rows * p.cols) / p.shared_rank);

    CheckpointSuite suite;
    suite.pretrained.entries.emplace("layer.weight", from_matrix(pretrained));
    for (int t = 0; t < p.tasks; ++t) {
        const Matrix own = p.task_scale * rng.gaussian(p.rows, p.task_rank) * rng.gaussian(p.task_rank, p.cols) /
                           std::sqrt(static_cast<double>(p.rows * p.cols) / p.task_rank);
        TensorMap m;
        m.entries.emplace("layer.weight", from_matrix(pretrained + shared + own));
        suite.finetuned.push_back(std::move(m));
    }
    return suite;
}

std::vector<double> ClassificationSuite::accuracy(const TensorMap &merged) const {
    const auto weights = model.weights_from(merged);
    return task_accuracy(model, weights, test, finetuned.size());
}

Evaluator ClassificationSuite::evaluator() const {
    return [this](const TensorMap &merged) { return accuracy(merged); };
}

ClassificationSuite make_classification_suite(const ClassificationParams &p, std::uint64_t seed) {
    if (p.tasks < 2 || p.classes < 2 || p.subspace_dim < p.classes || p.subspace_dim > p.input_dim ||
        p.classes > p.feature_dim || p.samples_per_class < 1)
        throw Error(ErrorCode::Param, "inconsistent classification suite parameters");

    ClassificationSuite suite;
    suite.params = p;
    suite.model.layer_names = {"backbone.weight"};

    Rng head_rng(seed, "cls.heads");
    Rng mean_rng(seed, "cls.means");
    Rng weight_rng(seed, "cls.weights");
    Rng sample_rng(seed, "cls.samples");

    const Matrix theta0 = p.pretrained_scale * weight_rng.gaussian(p.feature_dim, p.input_dim) /
                          std::sqrt(static_cast<double>(p.input_dim));
    suite.pretrained.entries.emplace("backbone.weight", from_matrix(theta0));

    std::vector<Matrix> class_means;
    for (int t = 0; t < p.tasks; ++t) {
        const Matrix head = head_rng.gaussian(p.classes, p.feature_dim) / std::sqrt(static_cast<double>(p.feature_dim));
        suite.model.heads.push_back(head);

        const Matrix basis = mean_rng.orthonormal(p.input_dim, p.subspace_dim);
        const Matrix means = p.class_sep * basis * mean_rng.orthonormal(p.subspace_dim, p.classes); // input_dim x C
        class_means.push_back(means);

        // Low-rank signal mapping class mean c onto the head's class-c direction.
        const Matrix head_pinv = head.completeOrthogonalDecomposition().pseudoInverse();
        const Matrix means_pinv = means.completeOrthogonalDecomposition().pseudoInverse();
        const Matrix signal = p.signal_scale * head_pinv * means_pinv;
        const Matrix noise = p.finetune_noise * weight_rng.gaussian(p.feature_dim, p.input_dim) /
                             std::sqrt(static_cast<double>(p.input_dim));

        TensorMap m;
        m.entries.emplace("backbone.weight", from_matrix(theta0 + signal + noise));
        suite.finetuned.push_back(std::move(m));
    }

    for (int t = 0; t < p.tasks; ++t)
        for (int c = 0; c < p.classes; ++c)
            for (int i = 0; i < p.samples_per_class; ++i) {
                Sample s;
                s.task = static_cast<std::size_t>(t);
                s.label = c;
                s.x = class_means[static_cast<std::size_t>(t)].col(c) +
                      p.input_noise * sample_rng.gaussian(p.input_dim) / std::sqrt(static_cast<double>(p.input_dim));
                suite.test.push_back(std::move(s));
            }
    return suite;
}

} // namespace cart

namespace cart {

ClassificationSuite make_signal_noise_suite(const SignalNoiseParams &p, std::uint64_t seed) {
    if (p.classes < 2 || p.subspace_dim < p.classes || p.subspace_dim > p.input_dim || p.classes > p.hidden_dim)
        throw Error(ErrorCode::Param, "inconsistent signal/noise suite parameters");

    Rng rng(seed, "signal_noise.suite");
    ClassificationSuite suite;
    suite.model.layer_names = {"layer0.weight", "layer1.weight"};
    const double in_norm = std::sqrt(static_cast<double>(p.input_dim));
    const double hid_norm = std::sqrt(static_cast<double>(p.hidden_dim));

    const Matrix w0 = p.pretrained_scale * rng.gaussian(p.hidden_dim, p.input_dim) / in_norm;
    const Matrix w1 = p.pretrained_scale * rng.gaussian(p.hidden_dim, p.hidden_dim) / hid_norm;
    suite.pretrained.entries.emplace("layer0.weight", from_matrix(w0));
    suite.pretrained.entries.emplace("layer1.weight", from_matrix(w1));

    for (int t = 0; t < 2; ++t) suite.model.heads.push_back(rng.gaussian(p.classes, p.hidden_dim) / hid_norm);

    const Matrix basis = rng.orthonormal(p.input_dim, p.subspace_dim);
    const Matrix means = p.class_sep * basis * rng.orthonormal(p.subspace_dim, p.classes);

    // Signal: layer 0 copies the task subspace into the hidden units, layer 1
    // maps the (tanh) class codes onto the head's class directions.
    const Matrix embed = rng.orthonormal(p.hidden_dim, p.subspace_dim);
    const Matrix d0 = p.signal_scale * embed * basis.transpose();
    const Matrix codes = ((w0 + d0) * means).array().tanh().matrix();
    const Matrix d1 = p.signal_scale * suite.model.heads[0].completeOrthogonalDecomposition().pseudoInverse() *
                      codes.completeOrthogonalDecomposition().pseudoInverse();

    Matrix n0 = rng.gaussian(p.hidden_dim, p.input_dim);
    Matrix n1 = rng.gaussian(p.hidden_dim, p.hidden_dim);
    n0 *= d0.norm() / n0.norm();
    n1 *= d1.norm() / n1.norm();

    TensorMap signal, noise;
    signal.entries.emplace("layer0.weight", from_matrix(w0 + d0));
    signal.entries.emplace("layer1.weight", from_matrix(w1 + d1));
    noise.entries.emplace("layer0.weight", from_matrix(w0 + n0));
    noise.entries.emplace("layer1.weight", from_matrix(w1 + n1));
    suite.finetuned = {std::move(signal), std::move(noise)};

    for (int c = 0; c < p.classes; ++c)
        for (int i = 0; i < p.samples_per_class; ++i) {
            Sample s;
            s.task = 0;
            s.label = c;
            s.x = means.col(c) + p.input_noise * rng.gaussian(p.input_dim) / in_norm;
            suite.test.push_back(std::move(s));
        }
    return suite;
}

} // namespace cart

namespace cart {

SuiteParams sample_suite_params(const SuiteRanges &q, std::uint64_t seed) {
    Rng rng(seed, "theorem.params");
    auto pick = [&rng](int lo, int hi) { return lo + static_cast<int>(rng.next() % static_cast<std::uint64_t>(hi - lo + 1)); };
    SuiteParams p;
    p.d = pick(q.d_min, q.d_max);
    p.tasks = pick(q.tasks_min, q.tasks_max);
    p.n = pick(1, q.n_max);
    p.r = pick(1, p.d);
    p.alpha = rng.uniform(q.alpha_min, q.alpha_max);
    p.s_max = p.alpha + rng.uniform(0.0, q.s_max_spread);
    p.c = rng.uniform(q.c_min, q.c_max);
    p.eta = rng.uniform(0.0, q.eta_max);
    p.validate();
    return p;
}

} // namespace cart
