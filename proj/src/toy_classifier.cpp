#include "cart/toy_classifier.hpp"

#include <cmath>

#include "cart/error.hpp"

namespace cart {

void ToyClassifier::validate(std::span<const Matrix> weights) const {
    if (weights.size() != layer_names.size() || weights.empty())
        throw Error(ErrorCode::Shape, "toy classifier needs one weight per backbone layer");
    for (std::size_t l = 1; l < weights.size(); ++l)
        if (weights[l].cols() != weights[l - 1].rows())
            throw Error(ErrorCode::Shape, "backbone layer " + layer_names[l] + " does not chain");
    for (const auto &h : heads)
        if (h.cols() != weights.back().rows()) throw Error(ErrorCode::Shape, "head does not fit backbone output");
}

std::vector<Matrix> ToyClassifier::weights_from(const TensorMap &params) const {
    std::vector<Matrix> weights;
    weights.reserve(layer_names.size());
    for (const auto &name : layer_names) {
        const auto it = params.entries.find(name);
        if (it == params.entries.end()) throw Error(ErrorCode::Shape, "checkpoint lacks backbone layer " + name);
        weights.push_back(to_matrix(it->second));
    }
    validate(weights);
    return weights;
}

Vector ToyClassifier::logits(std::span<const Matrix> weights, const Sample &sample) const {
    Vector h = sample.x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        h = weights[l] * h;
        if (l + 1 < weights.size()) h = h.array().tanh().matrix();
    }
    return heads.at(sample.task) * h;
}

Vector softmax(const Vector &logits) {
    const Vector shifted = logits.array() - logits.maxCoeff();
    Vector p = shifted.array().exp();
    return p / p.sum();
}

double entropy_of_logits(const Vector &logits) {
    const Vector shifted = logits.array() - logits.maxCoeff();
    const double log_z = std::log(shifted.array().exp().sum());
    const Vector log_p = shifted.array() - log_z;
    double h = 0.0;
    for (Eigen::Index c = 0; c < log_p.size(); ++c) h -= std::exp(log_p(c)) * log_p(c);
    return std::max(0.0, h);
}

double entropy_loss(const ToyClassifier &model, std::span<const Matrix> weights, const Batch &batch) {
    if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "entropy over an empty batch");
    double total = 0.0;
    for (const auto &s : batch) total += entropy_of_logits(model.logits(weights, s));
    return total / static_cast<double>(batch.size());
}

double entropy_loss(const ToyClassifier &model, const TensorMap &params, const Batch &batch) {
    const auto weights = model.weights_from(params);
    return entropy_loss(model, weights, batch);
}

EntropyGradient entropy_weight_gradient(const ToyClassifier &model, std::span<const Matrix> weights,
                                        const Batch &batch) {
    if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "entropy over an empty batch");
    const std::size_t depth = weights.size();
    EntropyGradient out;
    out.weights.reserve(depth);
    for (const auto &w : weights) out.weights.push_back(Matrix::Zero(w.rows(), w.cols()));

    const double scale = 1.0 / static_cast<double>(batch.size());
    std::vector<Vector> acts(depth + 1);
    for (const auto &s : batch) {
        acts[0] = s.x;
        for (std::size_t l = 0; l < depth; ++l) {
            acts[l + 1] = weights[l] * acts[l];
            if (l + 1 < depth) acts[l + 1] = acts[l + 1].array().tanh().matrix();
        }
        const Vector z = model.heads.at(s.task) * acts[depth];
        const Vector p = softmax(z);
        const double h = entropy_of_logits(z);

        // dH/dz_c = -p_c (log p_c + H)
        Vector g_z(z.size());
        for (Eigen::Index c = 0; c < z.size(); ++c)
            g_z(c) = p(c) > 0.0 ? -p(c) * (std::log(p(c)) + h) : 0.0;

        out.loss += h * scale;
        Vector g = model.heads.at(s.task).transpose() * g_z;
        for (std::size_t l = depth; l-- > 0;) {
            if (l + 1 < depth) g = g.cwiseProduct((1.0 - acts[l + 1].array().square()).matrix());
            out.weights[l].noalias() += scale * g * acts[l].transpose();
            if (l > 0) g = weights[l].transpose() * g;
        }
    }
    return out;
}

std::vector<double> task_accuracy(const ToyClassifier &model, std::span<const Matrix> weights, const Batch &batch,
                                  std::size_t tasks) {
    std::vector<double> correct(tasks, 0.0), seen(tasks, 0.0);
    for (const auto &s : batch) {
        if (s.label < 0 || s.task >= tasks) continue;
        Eigen::Index best = 0;
        model.logits(weights, s).maxCoeff(&best);
        seen[s.task] += 1.0;
        if (best == s.label) correct[s.task] += 1.0;
    }
    std::vector<double> acc(tasks, 0.0);
    for (std::size_t t = 0; t < tasks; ++t) acc[t] = seen[t] > 0.0 ? correct[t] / seen[t] : 0.0;
    return acc;
}

} // namespace cart
