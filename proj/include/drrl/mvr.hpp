#pragma once

#include "drrl/common.hpp"
#include "drrl/gp.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace drrl {

/// Black-box simulator s' = f(s, a) + w, w ~ N(0, sigma^2 I).
///
/// The noise of the i-th query is drawn from a stream keyed by (seed, i), so a
/// run can be replayed from its query sequence alone.
struct GenerativeSimulator {
    DynamicsFn mean_fn;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    Vector sample(const Vector& s, const Vector& a, std::uint64_t iteration) const {
        Vector out = mean_fn(s, a);
        if (!out.allFinite()) throw NumericalError("simulator returned a non-finite state");
        Rng rng(derive_seed({seed, iteration}));
        for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += noise_sigma * rng.normal();
        return out;
    }
};

enum class PoolConstruction { UniformGrid, LatinHypercube, Explicit };

/// Finite set of (state, action) candidates inside a box.
struct CandidatePool {
    std::vector<std::pair<Vector, Vector>> points;
    PoolConstruction construction = PoolConstruction::Explicit;
    Vector lower; ///< joined (state, action) bounds
    Vector upper;

    std::size_t size() const { return points.size(); }

    void validate() const {
        if (points.empty()) throw std::invalid_argument("candidate pool is empty");
        for (const auto& [s, a] : points) {
            const Vector x = join(s, a);
            if (x.size() != lower.size() || x.size() != upper.size())
                throw DimensionError("candidate pool: point/bounds dimension mismatch");
            for (Eigen::Index i = 0; i < x.size(); ++i)
                if (x[i] < lower[i] || x[i] > upper[i]) throw std::invalid_argument("candidate pool: point outside bounds");
        }
    }
};

namespace detail {
inline std::pair<Vector, Vector> split_point(const Vector& x, std::size_t state_dim) {
    const auto ds = static_cast<Eigen::Index>(state_dim);
    return {x.head(ds), x.tail(x.size() - ds)};
}

inline void check_box(const Vector& lower, const Vector& upper, std::size_t state_dim) {
    if (lower.size() != upper.size()) throw DimensionError("pool bounds dimension mismatch");
    if (static_cast<Eigen::Index>(state_dim) > lower.size()) throw DimensionError("state_dim exceeds box dimension");
    for (Eigen::Index i = 0; i < lower.size(); ++i)
        if (!(upper[i] >= lower[i])) throw std::invalid_argument("pool bounds: upper < lower");
}
} // namespace detail

/// Tensor grid with `points_per_dim[i]` evenly spaced values (endpoints included)
/// along each joined coordinate; the last coordinate varies fastest.
inline CandidatePool make_uniform_grid_pool(const Vector& lower, const Vector& upper,
                                            const std::vector<std::size_t>& points_per_dim, std::size_t state_dim) {
    detail::check_box(lower, upper, state_dim);
    if (points_per_dim.size() != static_cast<std::size_t>(lower.size()))
        throw DimensionError("uniform grid: points_per_dim size mismatch");
    std::size_t total = 1;
    for (auto c : points_per_dim) {
        if (c == 0) throw std::invalid_argument("uniform grid: zero points along a dimension");
        total *= c;
    }
    CandidatePool pool;
    pool.construction = PoolConstruction::UniformGrid;
    pool.lower = lower;
    pool.upper = upper;
    const auto dims = lower.size();
    for (std::size_t flat = 0; flat < total; ++flat) {
        Vector x(dims);
        std::size_t rem = flat;
        for (Eigen::Index i = dims - 1; i >= 0; --i) {
            const std::size_t c = points_per_dim[static_cast<std::size_t>(i)];
            const std::size_t k = rem % c;
            rem /= c;
            x[i] = c == 1 ? 0.5 * (lower[i] + upper[i])
                          : lower[i] + (upper[i] - lower[i]) * static_cast<double>(k) / static_cast<double>(c - 1);
        }
        pool.points.push_back(detail::split_point(x, state_dim));
    }
    return pool;
}

inline CandidatePool make_latin_hypercube_pool(const Vector& lower, const Vector& upper, std::size_t count,
                                               std::size_t state_dim, std::uint64_t seed) {
    detail::check_box(lower, upper, state_dim);
    if (count == 0) throw std::invalid_argument("latin hypercube: zero points");
    Rng rng(derive_seed({seed, hash_string("latin_hypercube")}));
    const auto dims = lower.size();
    std::vector<std::vector<std::size_t>> perms(static_cast<std::size_t>(dims));
    for (auto& p : perms) {
        p.resize(count);
        std::iota(p.begin(), p.end(), 0);
        for (std::size_t i = count; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
    }
    CandidatePool pool;
    pool.construction = PoolConstruction::LatinHypercube;
    pool.lower = lower;
    pool.upper = upper;
    for (std::size_t k = 0; k < count; ++k) {
        Vector x(dims);
        for (Eigen::Index i = 0; i < dims; ++i) {
            const double u = (static_cast<double>(perms[static_cast<std::size_t>(i)][k]) + rng.uniform()) /
                             static_cast<double>(count);
            x[i] = lower[i] + (upper[i] - lower[i]) * u;
        }
        pool.points.push_back(detail::split_point(x, state_dim));
    }
    return pool;
}

inline CandidatePool make_explicit_pool(std::vector<std::pair<Vector, Vector>> points, const Vector& lower,
                                        const Vector& upper) {
    CandidatePool pool{std::move(points), PoolConstruction::Explicit, lower, upper};
    pool.validate();
    return pool;
}

struct MvrRecord {
    std::size_t iteration = 0;  ///< 1-based
    std::size_t point_index = 0;
    double max_sigma_norm = 0.0; ///< ||sigma_{i-1}|| at the chosen point (the pool maximum)
    double info_gain = 0.0;      ///< information gain of the points chosen so far
};

using MvrTrace = std::vector<MvrRecord>;

struct MvrResult {
    GpModel model;
    TransitionDataset data;
    MvrTrace trace;
};

/// Index of the largest entry; ties resolve to the lowest index.
/// Values within kTieTolerance (relative) of the maximum count as ties, so the
/// pick does not depend on round-off between update paths.
inline constexpr double kTieTolerance = 1e-12;

inline std::size_t argmax_lowest(const std::vector<double>& values) {
    if (values.empty()) throw DimensionError("argmax of empty vector");
    const double top = *std::max_element(values.begin(), values.end());
    const double cut = top - kTieTolerance * std::max(1.0, std::abs(top));
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i] >= cut) return i;
    return 0;
}

/// Maximum variance reduction: at every iteration query the pool point with the
/// largest posterior standard-deviation norm, observe the simulator once and
/// condition the model on the new transition.
inline MvrResult run_mvr(const KernelSpec& spec, const GenerativeSimulator& sim, const CandidatePool& pool,
                         std::size_t budget, TargetTransform transform = {}) {
    if (budget == 0) throw std::invalid_argument("run_mvr: budget must be >= 1");
    pool.validate();
    const auto& [s0, a0] = pool.points.front();
    const Vector probe = sim.mean_fn(s0, a0);
    GpModel model = GpModel::prior(spec, static_cast<std::size_t>(s0.size()), static_cast<std::size_t>(a0.size()),
                                   static_cast<std::size_t>(probe.size()), std::move(transform));
    PosteriorVarianceTracker tracker(model, pool.points);
    MvrTrace trace;
    std::vector<double> norms(pool.size());
    for (std::size_t i = 1; i <= budget; ++i) {
        for (std::size_t q = 0; q < pool.size(); ++q) norms[q] = tracker.sigma_norm(q);
        const std::size_t pick = argmax_lowest(norms);
        const auto& [s, a] = pool.points[pick];
        const Vector sp = sim.sample(s, a, i - 1);
        model = model.append(s, a, sp);
        tracker.sync(model);
        trace.push_back({i, pick, norms[pick], model.information_gain()});
    }
    TransitionDataset data = model.data();
    data.rng_seed = sim.seed;
    data.source = DataSource::Simulator;
    return {std::move(model), std::move(data), std::move(trace)};
}

/// Control arm: `budget` pool points drawn uniformly without replacement.
inline MvrResult random_baseline(const KernelSpec& spec, const GenerativeSimulator& sim, const CandidatePool& pool,
                                 std::size_t budget, std::uint64_t seed, TargetTransform transform = {}) {
    pool.validate();
    if (budget > pool.size()) throw std::invalid_argument("random_baseline: budget exceeds pool size");
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed({seed, hash_string("random_baseline")}));
    for (std::size_t i = 0; i < budget; ++i) std::swap(order[i], order[i + rng.index(pool.size() - i)]);

    const auto& [s0, a0] = pool.points.front();
    TransitionDataset data(static_cast<std::size_t>(s0.size()), static_cast<std::size_t>(a0.size()),
                           static_cast<std::size_t>(sim.mean_fn(s0, a0).size()));
    data.rng_seed = sim.seed;
    MvrTrace trace;
    for (std::size_t i = 0; i < budget; ++i) {
        const auto& [s, a] = pool.points[order[i]];
        data.add(s, a, sim.sample(s, a, i));
        trace.push_back({i + 1, order[i], 0.0, 0.0});
    }
    GpModel model = GpModel::fit(spec, data, std::move(transform));
    return {std::move(model), std::move(data), std::move(trace)};
}

inline void write_trace_csv(std::ostream& os, const MvrTrace& trace) {
    os << "iter,point_idx,max_sigma_norm,info_gain\n";
    for (const auto& r : trace)
        os << r.iteration << "," << r.point_index << "," << format_double(r.max_sigma_norm) << ","
           << format_double(r.info_gain) << "\n";
}

} // namespace drrl
