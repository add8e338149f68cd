#pragma once

#include "drrl/common.hpp"

#include <Eigen/Eigenvalues>

#include <vector>

namespace drrl {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Gauss-Hermite rule for the standard normal density (probabilists' Hermite
/// polynomials) via the Golub-Welsch eigenvalue method. Weights sum to 1.
inline QuadratureRule gauss_hermite(int order) {
    if (order < 1) throw std::invalid_argument("gauss_hermite: order must be >= 1");
    Matrix j = Matrix::Zero(order, order);
    for (int k = 1; k < order; ++k) j(k - 1, k) = j(k, k - 1) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Matrix> es(j);
    if (es.info() != Eigen::Success) throw NumericalError("gauss_hermite: eigen decomposition failed");
    QuadratureRule rule;
    double total = 0.0;
    for (int i = 0; i < order; ++i) {
        rule.nodes.push_back(es.eigenvalues()[i]);
        const double v0 = es.eigenvectors()(0, i);
        rule.weights.push_back(v0 * v0);
        total += v0 * v0;
    }
    for (auto& w : rule.weights) w /= total;
    return rule;
}

struct QuadratureConfig {
    int order = 16;                      ///< per-dimension Gauss-Hermite order
    std::size_t max_tensor_dim = 2;      ///< tensor grids up to this dimension, Monte Carlo beyond
    std::size_t mc_samples = 4096;
    std::uint64_t seed = 0;
};

struct WeightedPoints {
    std::vector<Vector> points;
    std::vector<double> weights;
};

/// Discrete surrogate for N(mean, sigma^2 I).
inline WeightedPoints gaussian_surrogate(const Vector& mean, double sigma, const QuadratureConfig& cfg) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_surrogate: sigma must be >= 0");
    const auto d = mean.size();
    WeightedPoints out;
    if (sigma == 0.0 || d == 0) {
        out.points.push_back(mean);
        out.weights.push_back(1.0);
        return out;
    }
    if (static_cast<std::size_t>(d) <= cfg.max_tensor_dim) {
        const auto rule = gauss_hermite(cfg.order);
        const std::size_t m = rule.nodes.size();
        std::size_t total = 1;
        for (Eigen::Index i = 0; i < d; ++i) total *= m;
        for (std::size_t flat = 0; flat < total; ++flat) {
            Vector x = mean;
            double w = 1.0;
            std::size_t rem = flat;
            for (Eigen::Index i = d - 1; i >= 0; --i) {
                const std::size_t k = rem % m;
                rem /= m;
                x[i] += sigma * rule.nodes[k];
                w *= rule.weights[k];
            }
            out.points.push_back(std::move(x));
            out.weights.push_back(w);
        }
        return out;
    }
    if (cfg.mc_samples == 0) throw std::invalid_argument("gaussian_surrogate: zero Monte Carlo samples");
    Rng rng(derive_seed({cfg.seed, hash_string("gaussian_surrogate")}));
    const double w = 1.0 / static_cast<double>(cfg.mc_samples);
    for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
        Vector x = mean;
        for (Eigen::Index i = 0; i < d; ++i) x[i] += sigma * rng.normal();
        out.points.push_back(std::move(x));
        out.weights.push_back(w);
    }
    return out;
}

} // namespace drrl
