#pragma once

#include "drrl/common.hpp"

#include <Eigen/Cholesky>

#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace drrl {

enum class KernelFamily { SquaredExponential, Matern52 };

/// How the output index of an augmented point enters the kernel.
///
/// Independent gives a block-diagonal covariance over outputs. SharedLengthscale
/// treats the output index as one more coordinate with lengthscale
/// `output_lengthscale`, which couples the outputs.
enum class OutputCoupling { Independent, SharedLengthscale };

/// Stationary kernel over the augmented domain (state, action, output index),
/// normalized so that k(x, x) = 1.
struct KernelSpec {
    KernelFamily family = KernelFamily::SquaredExponential;
    /// One entry per (state, action) coordinate, or a single entry used for all.
    std::vector<double> lengthscales{1.0};
    OutputCoupling coupling = OutputCoupling::Independent;
    double output_lengthscale = 1.0;
    /// Regularization lambda of the posterior (the assumed observation noise variance).
    double noise_variance = 0.01;
    /// RKHS norm bound B.
    double rkhs_bound = 1.0;

    void validate() const {
        if (lengthscales.empty()) throw ConfigError("kernel: lengthscales must be nonempty");
        for (double l : lengthscales)
            if (!(l > 0.0) || !std::isfinite(l))
                throw ConfigError("kernel: lengthscales must be positive");
        if (!(noise_variance > 0.0)) throw ConfigError("kernel: lambda must be positive");
        if (!(rkhs_bound > 0.0)) throw ConfigError("kernel: rkhs_bound must be positive");
        if (!(output_lengthscale > 0.0))
            throw ConfigError("kernel: output_lengthscale must be positive");
    }

    double lengthscale(std::size_t dim) const {
        if (lengthscales.size() == 1) return lengthscales.front();
        if (dim >= lengthscales.size())
            throw DimensionError("kernel: input has more dimensions than lengthscales");
        return lengthscales[dim];
    }

    /// Radial profile as a function of the squared scaled distance.
    double profile(double r2) const {
        if (family == KernelFamily::SquaredExponential) return std::exp(-0.5 * r2);
        const double r = std::sqrt(r2);
        const double s5r = std::sqrt(5.0) * r;
        return (1.0 + s5r + 5.0 * r2 / 3.0) * std::exp(-s5r);
    }

    double scaled_sq_distance(const Vector& x1, const Vector& x2) const {
        if (x1.size() != x2.size()) throw DimensionError("kernel: input dimension mismatch");
        if (lengthscales.size() != 1 && lengthscales.size() != static_cast<std::size_t>(x1.size()))
            throw DimensionError("kernel: " + std::to_string(lengthscales.size()) +
                                 " lengthscales for " + std::to_string(x1.size()) + "-d input");
        double r2 = 0.0;
        for (Eigen::Index i = 0; i < x1.size(); ++i) {
            const double d = (x1[i] - x2[i]) / lengthscale(static_cast<std::size_t>(i));
            r2 += d * d;
        }
        return r2;
    }

    /// Kernel on joined (state, action) vectors, ignoring the output index.
    double base(const Vector& x1, const Vector& x2) const {
        return profile(scaled_sq_distance(x1, x2));
    }
};

struct AugmentedPoint {
    Vector state;
    Vector action;
    int output_index = 1; ///< 1-based, in [1, d]

    Vector input() const { return join(state, action); }
};

inline void check_point(const AugmentedPoint& p) {
    if (p.output_index < 1) throw DimensionError("augmented point: output_index must be >= 1");
    if (!p.state.allFinite() || !p.action.allFinite())
        throw DimensionError("augmented point: non-finite coordinates");
}

inline double eval_kernel(const KernelSpec& spec, const AugmentedPoint& x1, const AugmentedPoint& x2) {
    if (x1.state.size() != x2.state.size() || x1.action.size() != x2.action.size())
        throw DimensionError("eval_kernel: points do not share dimensionality");
    check_point(x1);
    check_point(x2);
    const Vector a = x1.input();
    const Vector b = x2.input();
    if (spec.coupling == OutputCoupling::Independent) {
        if (x1.output_index != x2.output_index) return 0.0;
        return spec.base(a, b);
    }
    const double dl = static_cast<double>(x1.output_index - x2.output_index) / spec.output_lengthscale;
    return spec.profile(spec.scaled_sq_distance(a, b) + dl * dl);
}

/// Symmetric Gram matrix, filled row-major over the upper triangle.
inline Matrix gram_matrix(const KernelSpec& spec, const std::vector<AugmentedPoint>& points) {
    if (points.empty()) throw std::invalid_argument("gram_matrix: empty point list");
    const auto n = static_cast<Eigen::Index>(points.size());
    Matrix k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i; j < n; ++j) {
            const double v = eval_kernel(spec, points[static_cast<std::size_t>(i)],
                                         points[static_cast<std::size_t>(j)]);
            k(i, j) = v;
            k(j, i) = v;
        }
    }
    return k;
}

/// 0.5 * logdet(I + K / lambda) for the given points.
inline double information_gain(const KernelSpec& spec, const std::vector<AugmentedPoint>& points) {
    if (points.empty()) return 0.0;
    const Matrix k = gram_matrix(spec, points);
    Matrix a = Matrix::Identity(k.rows(), k.cols()) + k / spec.noise_variance;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success)
        throw NumericalError("information_gain: I + K/lambda is not positive definite");
    double logdet = 0.0;
    const Matrix& l = llt.matrixLLT();
    for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
    if (!std::isfinite(logdet)) throw NumericalError("information_gain: non-finite logdet");
    return 0.5 * logdet;
}

struct GreedySelection {
    std::vector<std::size_t> indices;
    double value = 0.0;
};

/// Greedy approximation of the maximum information gain over `budget` points
/// from a finite candidate list. Each round adds the candidate with the largest
/// marginal gain 0.5 * log(1 + sigma^2(c | selected) / lambda); ties go to the
/// lowest candidate index.
inline GreedySelection greedy_max_info_gain(const KernelSpec& spec,
                                            const std::vector<AugmentedPoint>& candidates,
                                            std::size_t budget) {
    if (budget > candidates.size())
        throw std::invalid_argument("greedy_max_info_gain: budget exceeds candidate count");
    GreedySelection out;
    if (budget == 0) return out;

    const auto m = static_cast<Eigen::Index>(candidates.size());
    const double lambda = spec.noise_variance;
    // Rows of proj hold L^{-1} k(selected, candidate) for the selected set.
    Matrix proj(0, m);
    Vector prior(m);
    for (Eigen::Index c = 0; c < m; ++c)
        prior[c] = eval_kernel(spec, candidates[static_cast<std::size_t>(c)],
                               candidates[static_cast<std::size_t>(c)]);
    std::vector<bool> taken(candidates.size(), false);

    for (std::size_t round = 0; round < budget; ++round) {
        Eigen::Index best = -1;
        double best_var = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < m; ++c) {
            if (taken[static_cast<std::size_t>(c)]) continue;
            const double var = prior[c] - proj.col(c).squaredNorm();
            if (var > best_var) {
                best_var = var;
                best = c;
            }
        }
        taken[static_cast<std::size_t>(best)] = true;
        out.indices.push_back(static_cast<std::size_t>(best));

        // Extend the Cholesky factor of K_S + lambda I by the chosen candidate.
        const double diag = std::sqrt(std::max(best_var, 0.0) + lambda);
        Vector row(m);
        for (Eigen::Index c = 0; c < m; ++c) {
            const double kc = eval_kernel(spec, candidates[static_cast<std::size_t>(best)],
                                          candidates[static_cast<std::size_t>(c)]);
            row[c] = (kc - proj.col(best).dot(proj.col(c))) / diag;
        }
        proj.conservativeResize(proj.rows() + 1, Eigen::NoChange);
        proj.row(proj.rows() - 1) = row.transpose();
    }

    std::vector<AugmentedPoint> chosen;
    for (auto i : out.indices) chosen.push_back(candidates[i]);
    out.value = information_gain(spec, chosen);
    return out;
}

inline std::string to_string(KernelFamily f) {
    return f == KernelFamily::SquaredExponential ? "squared_exponential" : "matern52";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "squared_exponential" || s == "se") return KernelFamily::SquaredExponential;
    if (s == "matern52") return KernelFamily::Matern52;
    throw ConfigError("unknown kernel family '" + s + "'");
}

inline std::string to_string(OutputCoupling c) {
    return c == OutputCoupling::Independent ? "independent" : "shared_lengthscale";
}

inline OutputCoupling coupling_from_string(const std::string& s) {
    if (s == "independent") return OutputCoupling::Independent;
    if (s == "shared_lengthscale") return OutputCoupling::SharedLengthscale;
    throw ConfigError("unknown output coupling '" + s + "'");
}

} // namespace drrl
