#pragma once

#include "drrl/common.hpp"
#include "drrl/dro.hpp"
#include "drrl/quadrature.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace drrl {

/// Next-state law over state indices. Indices are strictly increasing.
struct SparseDistribution {
    std::vector<std::size_t> index;
    std::vector<double> prob;

    std::size_t size() const { return index.size(); }
};

/// Finite (s, a)-rectangular robust MDP.
struct RobustMdp {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    Matrix reward;                              ///< n_states x n_actions, entries in [0, 1]
    std::vector<SparseDistribution> nominal;    ///< row s * n_actions + a
    double gamma = 0.9;
    UncertaintySet set;
    std::vector<Vector> state_coords;           ///< optional cell centers
    std::vector<Vector> action_values;          ///< optional continuous actions

    double value_bound() const { return 1.0 / (1.0 - gamma); }

    const SparseDistribution& transition(std::size_t s, std::size_t a) const { return nominal[s * n_actions + a]; }
    SparseDistribution& transition(std::size_t s, std::size_t a) { return nominal[s * n_actions + a]; }

    void validate() const {
        if (n_states == 0 || n_actions == 0) throw std::invalid_argument("mdp: empty state or action set");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("mdp: gamma must lie in [0, 1)");
        set.validate();
        if (reward.rows() != static_cast<Eigen::Index>(n_states) || reward.cols() != static_cast<Eigen::Index>(n_actions))
            throw DimensionError("mdp: reward shape mismatch");
        if (!(reward.minCoeff() >= 0.0 && reward.maxCoeff() <= 1.0))
            throw std::invalid_argument("mdp: rewards must lie in [0, 1]");
        if (nominal.size() != n_states * n_actions) throw DimensionError("mdp: one nominal law per (s, a) required");
        for (const auto& row : nominal) {
            if (row.index.empty() || row.index.size() != row.prob.size())
                throw std::invalid_argument("mdp: malformed nominal law");
            double total = 0.0;
            for (std::size_t k = 0; k < row.size(); ++k) {
                if (row.index[k] >= n_states) throw std::invalid_argument("mdp: successor index out of range");
                if (k > 0 && row.index[k] <= row.index[k - 1])
                    throw std::invalid_argument("mdp: successor indices must be increasing");
                if (!(row.prob[k] >= 0.0)) throw std::invalid_argument("mdp: negative transition probability");
                total += row.prob[k];
            }
            if (std::abs(total - 1.0) > kProbabilitySumTolerance)
                throw std::invalid_argument("mdp: nominal law sums to " + format_double(total));
        }
    }
};

using ValueFunction = Vector;
using Policy = std::vector<std::size_t>;

/// Value iteration ran out of iterations before reaching the tolerance.
class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, double residual) : NumericalError(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

/// r(s, a) + gamma * inf over the ball around the nominal law of E[V].
inline double robust_bellman_q(const RobustMdp& mdp, const ValueFunction& v, std::size_t s, std::size_t a) {
    const auto& row = mdp.transition(s, a);
    std::vector<double> vals(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) vals[k] = v[static_cast<Eigen::Index>(row.index[k])];
    const double inner = worst_case(row.prob, vals, mdp.set, mdp.gamma, mdp.value_bound()).value;
    return mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) + mdp.gamma * inner;
}

struct BellmanBackup {
    ValueFunction value;
    Policy greedy; ///< argmax action, ties to the lowest index
};

/// One synchronous sweep; states are processed in parallel against the frozen `v`.
inline BellmanBackup robust_bellman_backup(const RobustMdp& mdp, const ValueFunction& v) {
    if (v.size() != static_cast<Eigen::Index>(mdp.n_states)) throw DimensionError("bellman: value size mismatch");
    BellmanBackup out{ValueFunction(static_cast<Eigen::Index>(mdp.n_states)), Policy(mdp.n_states, 0)};
    parallel_for(mdp.n_states, [&](std::size_t s) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t a = 0; a < mdp.n_actions; ++a) {
            const double q = robust_bellman_q(mdp, v, s, a);
            if (q > best) {
                best = q;
                arg = a;
            }
        }
        out.value[static_cast<Eigen::Index>(s)] = best;
        out.greedy[s] = arg;
    });
    return out;
}

inline ValueFunction robust_bellman_operator(const RobustMdp& mdp, const ValueFunction& v) {
    return robust_bellman_backup(mdp, v).value;
}

/// 10 * ceil(log(tol (1 - gamma)) / log(gamma)), and 1 when gamma = 0.
inline std::size_t default_max_iterations(double gamma, double tol) {
    if (gamma == 0.0) return 1;
    const double k = std::ceil(std::log(tol * (1.0 - gamma)) / std::log(gamma));
    return static_cast<std::size_t>(10.0 * std::max(1.0, k));
}

struct ValueIterationResult {
    ValueFunction value;
    Policy policy;
    std::vector<double> residuals; ///< ||V_{k+1} - V_k||_inf per sweep
    std::size_t iterations = 0;
};

struct ValueIterationOptions {
    double tol = 1e-8;
    std::size_t max_iter = 0; ///< 0 selects default_max_iterations
    std::optional<ValueFunction> initial;
};

inline ValueIterationResult robust_value_iteration(const RobustMdp& mdp, const ValueIterationOptions& opt = {}) {
    mdp.validate();
    if (!(opt.tol > 0.0)) throw std::invalid_argument("value iteration: tol must be positive");
    const std::size_t max_iter = opt.max_iter ? opt.max_iter : default_max_iterations(mdp.gamma, opt.tol);
    ValueIterationResult res;
    res.value = opt.initial ? *opt.initial : ValueFunction::Zero(static_cast<Eigen::Index>(mdp.n_states));
    if (res.value.size() != static_cast<Eigen::Index>(mdp.n_states))
        throw DimensionError("value iteration: initial value size mismatch");
    double residual = std::numeric_limits<double>::infinity();
    while (res.iterations < max_iter) {
        auto next = robust_bellman_backup(mdp, res.value);
        if (!next.value.allFinite()) throw NumericalError("value iteration: non-finite value");
        residual = (next.value - res.value).cwiseAbs().maxCoeff();
        res.residuals.push_back(residual);
        res.value = std::move(next.value);
        ++res.iterations;
        // With gamma = 0 a single backup is already the fixed point.
        if (residual <= opt.tol || mdp.gamma == 0.0) {
            res.policy = robust_bellman_backup(mdp, res.value).greedy;
            return res;
        }
    }
    throw ConvergenceError("value iteration: no convergence after " + std::to_string(max_iter) +
                               " sweeps, last residual " + format_double(residual),
                           residual);
}

// ---------------------------------------------------------------------------
// Monte Carlo evaluation on the nominal law
// ---------------------------------------------------------------------------

inline std::size_t sample_successor(const SparseDistribution& row, Rng& rng) {
    double u = rng.uniform(), acc = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
        acc += row.prob[k];
        if (u < acc) return row.index[k];
    }
    return row.index.back();
}

/// Mean discounted return of `policy` over `episodes` rollouts of length
/// `horizon`. Episode e starts at `start` (or a uniform state) and draws from
/// its own stream derive_seed(seed, e).
inline double evaluate_policy(const RobustMdp& mdp, const Policy& policy, std::size_t horizon, std::size_t episodes,
                              std::uint64_t seed, std::optional<std::size_t> start = std::nullopt) {
    if (horizon == 0) throw std::invalid_argument("evaluate_policy: horizon must be >= 1");
    if (episodes == 0) throw std::invalid_argument("evaluate_policy: episodes must be >= 1");
    if (policy.size() != mdp.n_states) throw DimensionError("evaluate_policy: policy size mismatch");
    for (auto a : policy)
        if (a >= mdp.n_actions) throw std::invalid_argument("evaluate_policy: invalid action in policy");
    std::vector<double> returns(episodes);
    parallel_for(episodes, [&](std::size_t e) {
        Rng rng(derive_seed({seed, e}));
        std::size_t s = start ? *start : rng.index(mdp.n_states);
        double g = 0.0, disc = 1.0;
        for (std::size_t t = 0; t < horizon; ++t) {
            const std::size_t a = policy[s];
            g += disc * mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
            disc *= mdp.gamma;
            s = sample_successor(mdp.transition(s, a), rng);
        }
        returns[e] = g;
    });
    double total = 0.0;
    for (double r : returns) total += r;
    return total / static_cast<double>(episodes);
}

// ---------------------------------------------------------------------------
// Discretization of continuous dynamics
// ---------------------------------------------------------------------------

enum class BoundaryMode { Reflect, Absorb };

inline std::string to_string(BoundaryMode m) { return m == BoundaryMode::Reflect ? "reflect" : "absorb"; }

inline BoundaryMode boundary_mode_from_string(const std::string& s) {
    if (s == "reflect") return BoundaryMode::Reflect;
    if (s == "absorb") return BoundaryMode::Absorb;
    throw ConfigError("unknown boundary mode '" + s + "'");
}

/// Regular grid of cells over a box. Dimensions listed in `periodic` wrap
/// around instead of hitting a boundary. Flat indices vary fastest in the last
/// dimension.
struct StateGrid {
    Vector lower;
    Vector upper;
    std::vector<std::size_t> cells;
    std::vector<bool> periodic;

    StateGrid() = default;
    StateGrid(Vector lo, Vector hi, std::vector<std::size_t> c, std::vector<std::size_t> periodic_dims = {})
        : lower(std::move(lo)), upper(std::move(hi)), cells(std::move(c)), periodic(cells.size(), false) {
        if (lower.size() != upper.size() || cells.size() != static_cast<std::size_t>(lower.size()))
            throw DimensionError("grid: bounds/cells dimension mismatch");
        for (Eigen::Index i = 0; i < lower.size(); ++i)
            if (!(upper[i] > lower[i])) throw std::invalid_argument("grid: degenerate box");
        for (auto c2 : cells)
            if (c2 < 2) throw std::invalid_argument("grid: need at least 2 cells per dimension");
        for (auto d : periodic_dims) {
            if (d >= cells.size()) throw DimensionError("grid: periodic dimension out of range");
            periodic[d] = true;
        }
    }

    std::size_t dims() const { return cells.size(); }
    std::size_t size() const {
        std::size_t n = 1;
        for (auto c : cells) n *= c;
        return n;
    }
    double width(std::size_t d) const {
        return (upper[static_cast<Eigen::Index>(d)] - lower[static_cast<Eigen::Index>(d)]) / static_cast<double>(cells[d]);
    }

    Vector center(std::size_t flat) const {
        Vector x(static_cast<Eigen::Index>(dims()));
        for (std::size_t d = dims(); d-- > 0;) {
            const std::size_t k = flat % cells[d];
            flat /= cells[d];
            x[static_cast<Eigen::Index>(d)] = lower[static_cast<Eigen::Index>(d)] + (static_cast<double>(k) + 0.5) * width(d);
        }
        return x;
    }

    /// Cell containing x, or nullopt when x leaves a non-periodic dimension and
    /// `clamp` is false.
    std::optional<std::size_t> locate(const Vector& x, bool clamp) const {
        std::size_t flat = 0;
        for (std::size_t d = 0; d < dims(); ++d) {
            const auto i = static_cast<Eigen::Index>(d);
            const double span = upper[i] - lower[i];
            double t = (x[i] - lower[i]) / span;
            if (periodic[d]) t -= std::floor(t);
            long k = static_cast<long>(std::floor(t * static_cast<double>(cells[d])));
            const long last = static_cast<long>(cells[d]) - 1;
            if (k < 0 || k > last) {
                if (periodic[d]) k = std::clamp(k, 0L, last);
                else if (!clamp) return std::nullopt;
                else k = std::clamp(k, 0L, last);
            }
            flat = flat * cells[d] + static_cast<std::size_t>(k);
        }
        return flat;
    }
};

using RewardFn = std::function<double(const Vector&, const Vector&)>;

struct DiscretizationSpec {
    StateGrid grid;
    std::vector<Vector> actions;
    double noise_sigma = 0.0;
    QuadratureConfig quadrature;
    BoundaryMode boundary = BoundaryMode::Reflect;
};

/// Pushes N(f(s, a), sigma^2 I) from every cell center onto the grid. Under
/// Reflect, mass leaving the box goes to the nearest boundary cell; under
/// Absorb it goes to an extra zero-reward absorbing state (index = cell count).
inline RobustMdp discretize_continuous(const std::function<Vector(const Vector&, const Vector&)>& dynamics,
                                       const RewardFn& reward, const DiscretizationSpec& spec, double gamma,
                                       const UncertaintySet& set) {
    if (spec.actions.empty()) throw std::invalid_argument("discretize: empty action list");
    const std::size_t cells = spec.grid.size();
    const bool absorb = spec.boundary == BoundaryMode::Absorb;
    RobustMdp mdp;
    mdp.n_states = cells + (absorb ? 1 : 0);
    mdp.n_actions = spec.actions.size();
    mdp.gamma = gamma;
    mdp.set = set;
    mdp.action_values = spec.actions;
    mdp.reward = Matrix::Zero(static_cast<Eigen::Index>(mdp.n_states), static_cast<Eigen::Index>(mdp.n_actions));
    mdp.nominal.resize(mdp.n_states * mdp.n_actions);
    for (std::size_t s = 0; s < cells; ++s) mdp.state_coords.push_back(spec.grid.center(s));
    if (absorb) mdp.state_coords.push_back(Vector::Constant(static_cast<Eigen::Index>(spec.grid.dims()), std::nan("")));

    parallel_for(cells, [&](std::size_t s) {
        const Vector x = spec.grid.center(s);
        for (std::size_t a = 0; a < mdp.n_actions; ++a) {
            const double r = reward(x, spec.actions[a]);
            if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("discretize: reward outside [0, 1]");
            mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = r;
            const Vector mu = dynamics(x, spec.actions[a]);
            if (mu.size() != static_cast<Eigen::Index>(spec.grid.dims()) || !mu.allFinite())
                throw NumericalError("discretize: dynamics returned an invalid state");
            QuadratureConfig qc = spec.quadrature;
            qc.seed = derive_seed({spec.quadrature.seed, s, a});
            const auto pts = gaussian_surrogate(mu, spec.noise_sigma, qc);
            std::map<std::size_t, double> mass;
            for (std::size_t k = 0; k < pts.points.size(); ++k) {
                const auto cell = spec.grid.locate(pts.points[k], !absorb);
                mass[cell ? *cell : cells] += pts.weights[k];
            }
            double total = 0.0;
            for (const auto& [i, w] : mass) total += w;
            SparseDistribution row;
            for (const auto& [i, w] : mass) {
                row.index.push_back(i);
                row.prob.push_back(w / total);
            }
            mdp.transition(s, a) = std::move(row);
        }
    });
    if (absorb)
        for (std::size_t a = 0; a < mdp.n_actions; ++a) mdp.transition(cells, a) = SparseDistribution{{cells}, {1.0}};
    mdp.validate();
    return mdp;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RobustMdp& mdp) {
    nlohmann::json j;
    j["states"] = mdp.n_states;
    j["actions"] = mdp.n_actions;
    j["gamma"] = mdp.gamma;
    j["divergence"] = to_string(mdp.set.divergence);
    j["rho"] = mdp.set.radius;
    auto reward = nlohmann::json::array();
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
        auto row = nlohmann::json::array();
        for (std::size_t a = 0; a < mdp.n_actions; ++a)
            row.push_back(mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)));
        reward.push_back(row);
    }
    j["reward"] = reward;
    auto trans = nlohmann::json::array();
    for (std::size_t s = 0; s < mdp.n_states; ++s)
        for (std::size_t a = 0; a < mdp.n_actions; ++a) {
            const auto& t = mdp.transition(s, a);
            trans.push_back({{"state", s}, {"action", a}, {"next", t.index}, {"prob", t.prob}});
        }
    j["transitions"] = trans;
    return j;
}

inline RobustMdp mdp_from_json(const nlohmann::json& j) {
    try {
        RobustMdp mdp;
        mdp.n_states = j.at("states").get<std::size_t>();
        mdp.n_actions = j.at("actions").get<std::size_t>();
        mdp.gamma = j.at("gamma").get<double>();
        mdp.set = {divergence_from_string(j.at("divergence").get<std::string>()), j.at("rho").get<double>()};
        mdp.reward = Matrix(static_cast<Eigen::Index>(mdp.n_states), static_cast<Eigen::Index>(mdp.n_actions));
        const auto& r = j.at("reward");
        if (r.size() != mdp.n_states) throw ConfigError("mdp json: reward has wrong row count");
        for (std::size_t s = 0; s < mdp.n_states; ++s) {
            if (r[s].size() != mdp.n_actions) throw ConfigError("mdp json: reward row has wrong length");
            for (std::size_t a = 0; a < mdp.n_actions; ++a)
                mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = r[s][a].get<double>();
        }
        mdp.nominal.resize(mdp.n_states * mdp.n_actions);
        for (const auto& t : j.at("transitions")) {
            const auto s = t.at("state").get<std::size_t>(), a = t.at("action").get<std::size_t>();
            if (s >= mdp.n_states || a >= mdp.n_actions) throw ConfigError("mdp json: transition index out of range");
            mdp.transition(s, a) = {t.at("next").get<std::vector<std::size_t>>(), t.at("prob").get<std::vector<double>>()};
        }
        mdp.validate();
        return mdp;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("mdp json: ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("mdp json: ") + e.what());
    }
}

inline void write_value_csv(std::ostream& os, const ValueFunction& v) {
    os << "state_idx,value\n";
    for (Eigen::Index s = 0; s < v.size(); ++s) os << s << "," << format_double(v[s]) << "\n";
}

inline void write_policy_csv(std::ostream& os, const Policy& p) {
    os << "state_idx,action_idx\n";
    for (std::size_t s = 0; s < p.size(); ++s) os << s << "," << p[s] << "\n";
}

inline Policy read_policy_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || split_csv_line(line) != std::vector<std::string>{"state_idx", "action_idx"})
        throw ConfigError("policy csv: expected header state_idx,action_idx");
    Policy p;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != 2) throw ConfigError("policy csv: row " + std::to_string(row) + " needs 2 fields");
        const double s = parse_double(f[0]), a = parse_double(f[1]);
        if (s != static_cast<double>(p.size()) || a < 0 || a != std::floor(a))
            throw ConfigError("policy csv: row " + std::to_string(row) + " is malformed");
        p.push_back(static_cast<std::size_t>(a));
    }
    return p;
}

} // namespace drrl
