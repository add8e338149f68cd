#pragma once

#include "drrl/dro.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace drrl {

inline constexpr std::size_t kOracleMaxSupportSmooth = 12;
inline constexpr std::size_t kOracleMaxSupportTv = 64;

namespace oracle {

/// Minimum of E_p[V] over the L1 ball: shift mass rho / 2 from the
/// highest-value atoms onto the lowest-value atom.
inline double tv(const std::vector<double>& p0, const std::vector<double>& v, double rho) {
    std::vector<double> p = p0;
    std::size_t lowest = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0 && (p[lowest] <= 0.0 || v[i] < v[lowest])) lowest = i;
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    double budget = 0.5 * rho;
    for (std::size_t i : order) {
        if (budget <= 0.0 || v[i] <= v[lowest]) break;
        const double moved = std::min(budget, p[i]);
        p[i] -= moved;
        p[lowest] += moved;
        budget -= moved;
    }
    double e = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) e += p[i] * v[i];
    return e;
}

struct Tilt {
    double kl = 0.0;
    double mean = 0.0;
};

/// p_alpha(i) proportional to p0(i) exp(-V(i) / alpha).
inline Tilt exponential_tilt(const std::vector<double>& p0, const std::vector<double>& v, double alpha) {
    const double vmin = *std::min_element(v.begin(), v.end());
    std::vector<double> w(p0.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i) {
        w[i] = p0[i] > 0.0 ? p0[i] * std::exp(-(v[i] - vmin) / alpha) : 0.0;
        z += w[i];
    }
    Tilt t;
    for (std::size_t i = 0; i < p0.size(); ++i) {
        if (w[i] <= 0.0) continue;
        const double q = w[i] / z;
        t.mean += q * v[i];
        t.kl += q * std::log(q / p0[i]);
    }
    return t;
}

/// Bisection on log(alpha) for the tilt whose KL to p0 equals rho.
inline double kl(const std::vector<double>& p0, const std::vector<double>& v, double rho) {
    double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin, min_mass = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i)
        if (p0[i] > 0.0) {
            vmin = std::min(vmin, v[i]);
            vmax = std::max(vmax, v[i]);
        }
    for (std::size_t i = 0; i < p0.size(); ++i)
        if (p0[i] > 0.0 && v[i] == vmin) min_mass += p0[i];
    if (rho >= -std::log(min_mass)) return vmin;
    const double span = vmax - vmin;
    double lo = std::log(span * 1e-16), hi = std::log(span * 1e16);
    for (int it = 0; it < 400; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (exponential_tilt(p0, v, std::exp(mid)).kl > rho) lo = mid;
        else hi = mid;
    }
    return exponential_tilt(p0, v, std::exp(0.5 * (lo + hi))).mean;
}

/// p_i = p0_i max(0, 1 + (nu - V_i) / t) with nu chosen so that sum p = 1.
inline std::vector<double> chi2_candidate(const std::vector<double>& p0, const std::vector<double>& v, double t,
                                          double vmin, double mean) {
    auto mass = [&](double nu) {
        double s = 0.0;
        for (std::size_t i = 0; i < p0.size(); ++i) s += p0[i] * std::max(0.0, 1.0 + (nu - v[i]) / t);
        return s;
    };
    double lo = vmin - t, hi = mean;
    for (int it = 0; it < 300; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mass(mid) < 1.0) lo = mid;
        else hi = mid;
    }
    const double nu = 0.5 * (lo + hi);
    std::vector<double> p(p0.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i) s += (p[i] = p0[i] * std::max(0.0, 1.0 + (nu - v[i]) / t));
    for (auto& x : p) x /= s;
    return p;
}

/// 0.5 sum (p - p0)^2 / p0.
inline double chi2_divergence(const std::vector<double>& p, const std::vector<double>& p0) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p0[i] > 0.0) s += (p[i] - p0[i]) * (p[i] - p0[i]) / p0[i];
    return 0.5 * s;
}

/// KKT solution of min E_p[V] s.t. the chi-square constraint is active, found
/// by nested bisection on the multipliers.
inline double chi2(const std::vector<double>& p0, const std::vector<double>& v, double rho) {
    double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin, min_mass = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i)
        if (p0[i] > 0.0) {
            vmin = std::min(vmin, v[i]);
            vmax = std::max(vmax, v[i]);
            mean += p0[i] * v[i];
        }
    for (std::size_t i = 0; i < p0.size(); ++i)
        if (p0[i] > 0.0 && v[i] == vmin) min_mass += p0[i];
    if (rho >= 0.5 * (1.0 / min_mass - 1.0)) return vmin;
    const double span = vmax - vmin;
    double lo = std::log(span * 1e-12), hi = std::log(span * 1e16);
    for (int it = 0; it < 300; ++it) {
        const double mid = 0.5 * (lo + hi);
        const auto p = chi2_candidate(p0, v, std::exp(mid), vmin, mean);
        if (chi2_divergence(p, p0) > rho) lo = mid;
        else hi = mid;
    }
    const auto p = chi2_candidate(p0, v, std::exp(hi), vmin, mean);
    double e = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) e += p[i] * v[i];
    return e;
}

} // namespace oracle

/// Brute-force minimum of E_p[V] over the uncertainty ball, independent of the
/// dual solvers.
inline double primal_oracle(const DiscreteDistribution& p0, const UncertaintySet& set) {
    p0.validate();
    set.validate();
    const auto p = p0.probs();
    const auto v = p0.values();
    const std::size_t limit = set.divergence == Divergence::TV ? kOracleMaxSupportTv : kOracleMaxSupportSmooth;
    if (p.size() > limit)
        throw std::invalid_argument("primal_oracle: support of " + std::to_string(p.size()) + " exceeds " +
                                    std::to_string(limit));
    double mean = 0.0, vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
    for (std::size_t i = 0; i < p.size(); ++i) {
        mean += p[i] * v[i];
        if (p[i] > 0.0) {
            vmin = std::min(vmin, v[i]);
            vmax = std::max(vmax, v[i]);
        }
    }
    if (set.radius == 0.0 || vmax == vmin) return set.radius == 0.0 ? mean : vmin;
    switch (set.divergence) {
    case Divergence::TV: return oracle::tv(p, v, set.radius);
    case Divergence::KL: return oracle::kl(p, v, set.radius);
    case Divergence::Chi2: return oracle::chi2(p, v, set.radius);
    }
    throw std::invalid_argument("primal_oracle: unknown divergence");
}

} // namespace drrl
