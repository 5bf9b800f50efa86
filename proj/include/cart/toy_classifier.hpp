#pragma once

#include <span>
#include <string>
#include <vector>

#include "cart/matrix_kernels.hpp"
#include "cart/tensor_store.hpp"

namespace cart {

struct Sample {
    std::size_t task = 0;
    Vector x;
    int label = -1; // -1 when unlabeled
};

using Batch = std::vector<Sample>;

/// Small multi-head network: h <- tanh(W_l h) for every backbone layer but
/// the last, which is linear; task t then reads logits = heads[t] * h.
/// Backbone weights come from a checkpoint by name; heads stay fixed.
struct ToyClassifier {
    std::vector<std::string> layer_names; // forward order
    std::vector<Matrix> heads;            // per task: classes x features

    /// Error(Shape) unless the layers chain and the heads fit the last layer.
    void validate(std::span<const Matrix> weights) const;
    std::vector<Matrix> weights_from(const TensorMap &params) const;

    Vector logits(std::span<const Matrix> weights, const Sample &sample) const;
};

Vector softmax(const Vector &logits);

/// Shannon entropy of softmax(logits), in nats.
double entropy_of_logits(const Vector &logits);

/// Mean posterior entropy over the batch. Error(EmptyBatch) if empty.
double entropy_loss(const ToyClassifier &model, std::span<const Matrix> weights, const Batch &batch);
double entropy_loss(const ToyClassifier &model, const TensorMap &params, const Batch &batch);

struct EntropyGradient {
    double loss = 0.0;
    std::vector<Matrix> weights; // d loss / d W_l, forward order
};

/// Mean entropy and its exact gradient with respect to every backbone weight.
EntropyGradient entropy_weight_gradient(const ToyClassifier &model, std::span<const Matrix> weights,
                                        const Batch &batch);

/// Fraction of labeled samples of each task whose argmax logit is the label.
std::vector<double> task_accuracy(const ToyClassifier &model, std::span<const Matrix> weights, const Batch &batch,
                                  std::size_t tasks);

} // namespace cart
