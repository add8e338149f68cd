#pragma once

#include "drrl/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace drrl {

enum class Divergence { KL, Chi2, TV };

inline std::string to_string(Divergence d) {
    switch (d) {
    case Divergence::KL: return "kl";
    case Divergence::Chi2: return "chi2";
    case Divergence::TV: return "tv";
    }
    return "?";
}

inline Divergence divergence_from_string(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "kl") return Divergence::KL;
    if (s == "chi2" || s == "chi_square" || s == "chisq") return Divergence::Chi2;
    if (s == "tv") return Divergence::TV;
    throw ConfigError("unknown divergence '" + s + "'");
}

/// Ball {p : D(p || P0) <= radius} around a nominal law.
///
/// Radius scales: KL(p||q) = sum p log(p/q); Chi2 uses the Cressie-Read k = 2
/// generator f(t) = (t - 1)^2 / 2, i.e. half the Pearson statistic; TV uses the
/// unhalved L1 distance sum |p - q|, so radius 2 covers every reweighting.
struct UncertaintySet {
    Divergence divergence = Divergence::KL;
    double radius = 0.0;

    void validate() const {
        if (!(radius >= 0.0) || !std::isfinite(radius)) throw std::invalid_argument("uncertainty set: radius must be >= 0");
    }
};

struct Atom {
    double value = 0.0;
    double prob = 0.0;
};

inline constexpr double kProbabilitySumTolerance = 1e-12;

struct DiscreteDistribution {
    std::vector<Atom> atoms;

    DiscreteDistribution() = default;
    explicit DiscreteDistribution(std::vector<Atom> a) : atoms(std::move(a)) { validate(); }

    /// Builds from parallel arrays, rescaling the probabilities to sum to 1.
    static DiscreteDistribution normalized(const std::vector<double>& probs, const std::vector<double>& values) {
        if (probs.size() != values.size()) throw DimensionError("distribution: probs/values size mismatch");
        const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
        if (!(total > 0.0)) throw std::invalid_argument("distribution: total mass must be positive");
        DiscreteDistribution d;
        for (std::size_t i = 0; i < probs.size(); ++i) d.atoms.push_back({values[i], probs[i] / total});
        d.validate();
        return d;
    }

    std::size_t size() const { return atoms.size(); }

    void validate() const {
        if (atoms.empty()) throw std::invalid_argument("distribution: no atoms");
        double total = 0.0;
        for (const auto& a : atoms) {
            if (!std::isfinite(a.value)) throw std::invalid_argument("distribution: non-finite value");
            if (!(a.prob >= 0.0)) throw std::invalid_argument("distribution: negative probability");
            total += a.prob;
        }
        if (std::abs(total - 1.0) > kProbabilitySumTolerance)
            throw std::invalid_argument("distribution: probabilities sum to " + format_double(total));
    }

    std::vector<double> probs() const {
        std::vector<double> p;
        for (const auto& a : atoms) p.push_back(a.prob);
        return p;
    }
    std::vector<double> values() const {
        std::vector<double> v;
        for (const auto& a : atoms) v.push_back(a.value);
        return v;
    }
};

struct DualDiagnostics {
    double optimizer = 0.0; ///< alpha* for KL, eta* for Chi2/TV
    double bracket_lo = 0.0;
    double bracket_hi = 0.0;
    int iterations = 0;
    double objective = 0.0;
    bool zero_radius = false;    ///< rho = 0 short circuit
    bool lower_endpoint = false; ///< optimum at the lower bracket end (alpha -> 0 gives ESI for KL)
    bool upper_endpoint = false;
    bool full_ball = false;      ///< TV radius >= 2, answer is ESI
    bool polished = false;       ///< closed-form candidate beat the golden-section result
};

struct WorstCase {
    double value = 0.0;
    DualDiagnostics diagnostics;
};

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

struct GoldenResult {
    double x = 0.0;
    double fx = 0.0;
    int iterations = 0;
};

inline constexpr int kGoldenMaxIterations = 200;

/// Maximizes a concave function on the open interval (lo, hi) by golden-section
/// search until the bracket is narrower than `tol`. Endpoints are not evaluated.
template <typename F>
GoldenResult golden_section_max(F&& f, double lo, double hi, double tol) {
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    double c = b - invphi * (b - a);
    double d = a + invphi * (b - a);
    double fc = f(c), fd = f(d);
    int it = 0;
    while (b - a > tol && it < kGoldenMaxIterations) {
        ++it;
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d);
        }
    }
    return fc >= fd ? GoldenResult{c, fc, it} : GoldenResult{d, fd, it};
}

namespace detail {

struct Moments {
    double mean = 0.0;
    double esi = std::numeric_limits<double>::infinity(); ///< min value with positive mass
    double vmax = -std::numeric_limits<double>::infinity();
};

inline Moments check_atoms(std::span<const double> p, std::span<const double> v) {
    if (p.size() != v.size()) throw DimensionError("worst case: probs/values size mismatch");
    if (p.empty()) throw std::invalid_argument("worst case: empty distribution");
    Moments m;
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(v[i])) throw std::invalid_argument("worst case: non-finite value");
        if (!(p[i] >= 0.0)) throw std::invalid_argument("worst case: negative probability");
        total += p[i];
        if (p[i] > 0.0) {
            m.mean += p[i] * v[i];
            m.esi = std::min(m.esi, v[i]);
            m.vmax = std::max(m.vmax, v[i]);
        }
    }
    if (!(total > 0.0)) throw std::invalid_argument("worst case: zero total mass");
    m.mean /= total;
    return m;
}

inline void check_radius(double rho) {
    if (!(rho >= 0.0) || !std::isfinite(rho)) throw std::invalid_argument("worst case: radius must be >= 0");
}

inline void check_bound(const Moments& m, double bound) {
    if (!(bound > 0.0) || !std::isfinite(bound)) throw std::invalid_argument("worst case: value bound must be positive");
    const double slack = 1e-9 * bound;
    if (m.esi < -slack || m.vmax > bound + slack)
        throw std::invalid_argument("worst case: values must lie in [0, " + format_double(bound) + "]");
}

inline double clamp_result(double x, const Moments& m) { return std::clamp(x, m.esi, std::max(m.esi, m.mean)); }

} // namespace detail

// ---------------------------------------------------------------------------
// KL
// ---------------------------------------------------------------------------

/// Dual objective -alpha log E[exp(-V/alpha)] - alpha rho, evaluated with the
/// minimum value factored out so the exponentials never underflow to zero.
inline double kl_dual_objective(std::span<const double> p, std::span<const double> v, double vmin, double alpha,
                                double rho) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) s += p[i] * std::exp(-(v[i] - vmin) / alpha);
    return vmin - alpha * std::log(s) - alpha * rho;
}

inline WorstCase worst_case_kl(std::span<const double> p, std::span<const double> v, double rho, double bound) {
    detail::check_radius(rho);
    const auto m = detail::check_atoms(p, v);
    detail::check_bound(m, bound);
    WorstCase out;
    auto& dg = out.diagnostics;
    if (rho == 0.0) {
        dg.zero_radius = true;
        out.value = dg.objective = m.mean;
        return out;
    }
    dg.bracket_lo = 0.0;
    dg.bracket_hi = bound / rho;
    auto g = [&](double alpha) { return kl_dual_objective(p, v, m.esi, alpha, rho); };
    const auto gs = golden_section_max(g, dg.bracket_lo, dg.bracket_hi, 1e-10 * bound);
    dg.iterations = gs.iterations;
    dg.optimizer = gs.x;
    dg.objective = gs.fx;
    const double g_hi = g(dg.bracket_hi);
    if (g_hi > dg.objective) {
        dg.optimizer = dg.bracket_hi;
        dg.objective = g_hi;
        dg.upper_endpoint = true;
    }
    // alpha -> 0 limit of the dual is the essential infimum.
    if (m.esi >= dg.objective) {
        dg.optimizer = 0.0;
        dg.objective = m.esi;
        dg.upper_endpoint = false;
        dg.lower_endpoint = true;
    }
    out.value = detail::clamp_result(dg.objective, m);
    return out;
}

// ---------------------------------------------------------------------------
// Chi-square
// ---------------------------------------------------------------------------

inline double chi2_constant(double rho) { return std::sqrt(1.0 + 2.0 * rho); }

/// eta - c2 sqrt(E[(eta - V)_+^2]).
inline double chi2_dual_objective(std::span<const double> p, std::span<const double> v, double eta, double c2) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double t = eta - v[i];
        if (t > 0.0) s += p[i] * t * t;
    }
    return eta - c2 * std::sqrt(s);
}

namespace detail {

/// Stationary points of the chi-square objective. Between consecutive sorted
/// values the set {V < eta} is fixed and the first-order condition reduces to
/// a quadratic in eta; returns every root that falls in its own segment.
inline std::vector<double> chi2_stationary_points(std::span<const double> p, std::span<const double> v, double c2) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> roots;
    double mass = 0.0, m1 = 0.0, m2 = 0.0;
    const double c2sq = c2 * c2;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t i = order[k];
        mass += p[i];
        m1 += p[i] * v[i];
        m2 += p[i] * v[i] * v[i];
        if (k + 1 < order.size() && v[order[k + 1]] == v[i]) continue;
        const double lo = v[i];
        const double hi = k + 1 < order.size() ? v[order[k + 1]] : std::numeric_limits<double>::infinity();
        // mass (c2^2 mass - 1) eta^2 - 2 m1 (c2^2 mass - 1) eta + (c2^2 m1^2 - m2) = 0
        const double a = mass * (c2sq * mass - 1.0);
        const double b = -2.0 * m1 * (c2sq * mass - 1.0);
        const double c = c2sq * m1 * m1 - m2;
        if (std::abs(a) < 1e-300) continue;
        const double disc = b * b - 4.0 * a * c;
        if (disc < 0.0) continue;
        const double sq = std::sqrt(disc);
        for (double r : {(-b + sq) / (2.0 * a), (-b - sq) / (2.0 * a)})
            if (r >= lo && r <= hi && mass * r - m1 > 0.0) roots.push_back(r);
    }
    return roots;
}

} // namespace detail

inline WorstCase worst_case_chi2(std::span<const double> p, std::span<const double> v, double rho, double bound) {
    detail::check_radius(rho);
    const auto m = detail::check_atoms(p, v);
    detail::check_bound(m, bound);
    WorstCase out;
    auto& dg = out.diagnostics;
    if (rho == 0.0) {
        dg.zero_radius = true;
        out.value = dg.objective = m.mean;
        return out;
    }
    const double c2 = chi2_constant(rho);
    dg.bracket_lo = 0.0;
    dg.bracket_hi = c2 * bound / (c2 - 1.0);
    auto g = [&](double eta) { return chi2_dual_objective(p, v, eta, c2); };
    const auto gs = golden_section_max(g, dg.bracket_lo, dg.bracket_hi, 1e-10 * bound);
    dg.iterations = gs.iterations;
    dg.optimizer = gs.x;
    dg.objective = gs.fx;
    auto consider = [&](double eta, bool& flag) {
        const double val = g(eta);
        if (val > dg.objective) {
            dg.optimizer = eta;
            dg.objective = val;
            flag = true;
        }
    };
    consider(dg.bracket_lo, dg.lower_endpoint);
    consider(dg.bracket_hi, dg.upper_endpoint);
    for (double r : detail::chi2_stationary_points(p, v, c2))
        if (r >= dg.bracket_lo && r <= dg.bracket_hi) consider(r, dg.polished);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) consider(v[i], dg.polished);
    out.value = detail::clamp_result(dg.objective, m);
    return out;
}

// ---------------------------------------------------------------------------
// Total variation
// ---------------------------------------------------------------------------

/// eta - E[(eta - V)_+] - (rho / 2) (eta - ESI)_+.
inline double tv_dual_objective(std::span<const double> p, std::span<const double> v, double eta, double rho,
                                double esi) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double t = eta - v[i];
        if (t > 0.0) s += p[i] * t;
    }
    return eta - s - 0.5 * rho * std::max(eta - esi, 0.0);
}

inline WorstCase worst_case_tv(std::span<const double> p, std::span<const double> v, double rho, double gamma) {
    detail::check_radius(rho);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("worst_case_tv: gamma must lie in [0, 1)");
    const auto m = detail::check_atoms(p, v);
    detail::check_bound(m, 1.0 / (1.0 - gamma));
    WorstCase out;
    auto& dg = out.diagnostics;
    if (rho == 0.0) {
        dg.zero_radius = true;
        out.value = dg.objective = m.mean;
        return out;
    }
    if (rho >= 2.0) {
        dg.full_ball = true;
        dg.optimizer = m.esi;
        dg.bracket_hi = (2.0 + rho) / (rho * (1.0 - gamma));
        out.value = dg.objective = m.esi;
        return out;
    }
    dg.bracket_lo = 0.0;
    dg.bracket_hi = (2.0 + rho) / (rho * (1.0 - gamma));
    auto g = [&](double eta) { return tv_dual_objective(p, v, eta, rho, m.esi); };
    const auto gs = golden_section_max(g, dg.bracket_lo, dg.bracket_hi, 1e-10 / (1.0 - gamma));
    dg.iterations = gs.iterations;
    dg.optimizer = gs.x;
    dg.objective = gs.fx;
    auto consider = [&](double eta, bool& flag) {
        const double val = g(eta);
        if (val > dg.objective) {
            dg.optimizer = eta;
            dg.objective = val;
            flag = true;
        }
    };
    consider(dg.bracket_lo, dg.lower_endpoint);
    consider(dg.bracket_hi, dg.upper_endpoint);
    // Piecewise linear and concave: the maximum sits on an atom value.
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) consider(v[i], dg.polished);
    out.value = detail::clamp_result(dg.objective, m);
    return out;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// inf over the ball of E_p[V]. `bound` is the value ceiling M used for the KL
/// and Chi2 brackets; TV derives its bracket from gamma.
inline WorstCase worst_case(std::span<const double> p, std::span<const double> v, const UncertaintySet& set,
                            double gamma, double bound) {
    switch (set.divergence) {
    case Divergence::KL: return worst_case_kl(p, v, set.radius, bound);
    case Divergence::Chi2: return worst_case_chi2(p, v, set.radius, bound);
    case Divergence::TV: return worst_case_tv(p, v, set.radius, gamma);
    }
    throw std::invalid_argument("worst_case: unknown divergence");
}

inline WorstCase worst_case_kl(const DiscreteDistribution& d, double rho, double bound) {
    const auto p = d.probs(), v = d.values();
    return worst_case_kl(p, v, rho, bound);
}

inline WorstCase worst_case_chi2(const DiscreteDistribution& d, double rho, double bound) {
    const auto p = d.probs(), v = d.values();
    return worst_case_chi2(p, v, rho, bound);
}

inline WorstCase worst_case_tv(const DiscreteDistribution& d, double rho, double gamma) {
    const auto p = d.probs(), v = d.values();
    return worst_case_tv(p, v, rho, gamma);
}

inline WorstCase worst_case(const DiscreteDistribution& d, const UncertaintySet& set, double gamma, double bound) {
    const auto p = d.probs(), v = d.values();
    return worst_case(p, v, set, gamma, bound);
}

} // namespace drrl
