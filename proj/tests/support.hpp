#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cart/rng.hpp"
#include "cart/tensor_store.hpp"

namespace cart::test {

/// Checkpoint with two Matrix layers, one bias and one 1 x n embedding-like row.
inline TensorMap random_checkpoint(Rng &rng, double scale = 1.0) {
    TensorMap m;
    m.entries["a.weight"] = from_matrix(scale * rng.gaussian(6, 5));
    m.entries["b.weight"] = from_matrix(scale * rng.gaussian(4, 7));
    const Eigen::MatrixXd bias = scale * rng.gaussian(1, 5);
    m.entries["a.bias"] = DenseTensor({5}, DType::F64, std::vector<double>(bias.data(), bias.data() + 5));
    m.entries["row"] = from_matrix(scale * rng.gaussian(1, 3));
    return m;
}

inline std::vector<TensorMap> random_family(std::uint64_t seed, int tasks, TensorMap *pretrained = nullptr) {
    Rng rng(seed, "test.family");
    const TensorMap base = random_checkpoint(rng);
    if (pretrained) *pretrained = base;
    std::vector<TensorMap> out;
    for (int t = 0; t < tasks; ++t) {
        TensorMap ft = base;
        const TensorMap noise = random_checkpoint(rng, 0.3);
        for (auto &[name, tensor] : ft.entries)
            for (std::size_t i = 0; i < tensor.values.size(); ++i) tensor.values[i] += noise.entries.at(name).values[i];
        out.push_back(std::move(ft));
    }
    return out;
}

inline double max_abs_diff(const TensorMap &a, const TensorMap &b) {
    double worst = 0.0;
    for (const auto &[name, t] : a.entries) {
        const auto &u = b.entries.at(name);
        for (std::size_t i = 0; i < t.values.size(); ++i) worst = std::max(worst, std::abs(t.values[i] - u.values[i]));
    }
    return worst;
}

} // namespace cart::test
