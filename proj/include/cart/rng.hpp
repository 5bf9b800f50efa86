#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace cart {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for an independent stream: hash(seed, purpose). Streams for different
/// purposes never share state, so adding a consumer does not shift the others.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view purpose) {
    std::uint64_t h = 0xCBF29CE484222325ULL; // FNV-1a
    for (char c : purpose) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return mix64(seed ^ mix64(h));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view purpose) : engine_(stream_seed(seed, purpose)) {}

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    std::uint64_t next() { return engine_(); }

    Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
        return m;
    }

    Eigen::VectorXd gaussian(Eigen::Index n) { return gaussian(n, 1).col(0); }

    /// Uniform on the closed ball of the given radius in R^n.
    Eigen::VectorXd in_ball(Eigen::Index n, double radius) {
        if (n == 0 || radius == 0.0) return Eigen::VectorXd::Zero(n);
        Eigen::VectorXd v = gaussian(n);
        while (v.norm() == 0.0) v = gaussian(n);
        const double r = radius * std::pow(uniform(), 1.0 / static_cast<double>(n));
        return v * (r / v.norm());
    }

    /// n x k matrix with orthonormal columns (k <= n), from QR of a Gaussian.
    Eigen::MatrixXd orthonormal(Eigen::Index n, Eigen::Index k) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(n, k));
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, k);
        return q;
    }

    std::mt19937_64 &engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_;
};

} // namespace cart
