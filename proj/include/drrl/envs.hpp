#pragma once

#include "drrl/common.hpp"
#include "drrl/kernels.hpp"
#include "drrl/rmdp.hpp"

#include <numbers>
#include <numeric>
#include <string>
#include <vector>

namespace drrl {

// ---------------------------------------------------------------------------
// Pendulum-lite
// ---------------------------------------------------------------------------

/// Frictionless pendulum with theta = 0 upright:
///   theta_dd = (g / l) sin(theta) + u / (m l^2),
/// integrated by semi-implicit Euler with a speed clamp.
struct PendulumLiteParams {
    double length = 1.0;
    double gravity = 10.0;
    double mass = 1.0;
    double dt = 0.05;
    double max_torque = 2.0;
    double max_speed = 8.0;
    double noise_sigma = 0.0;
    /// Probability that a rollout replaces the chosen action by a uniform random torque.
    double action_noise = 0.0;
    double angle_weight = 1.0;
    double speed_weight = 0.1;
    double torque_weight = 0.001;

    void validate() const {
        if (!(length > 0.0)) throw ConfigError("pendulum: length must be positive");
        if (!(dt > 0.0)) throw ConfigError("pendulum: dt must be positive");
        if (!(mass > 0.0)) throw ConfigError("pendulum: mass must be positive");
        if (!(gravity >= 0.0)) throw ConfigError("pendulum: gravity must be >= 0");
        if (!(max_torque >= 0.0) || !(max_speed > 0.0)) throw ConfigError("pendulum: bad limits");
        if (!(noise_sigma >= 0.0)) throw ConfigError("pendulum: noise_sigma must be >= 0");
        if (!(action_noise >= 0.0 && action_noise <= 1.0)) throw ConfigError("pendulum: action_noise must lie in [0, 1]");
        if (!(angle_weight >= 0.0 && speed_weight >= 0.0 && torque_weight >= 0.0))
            throw ConfigError("pendulum: reward weights must be >= 0");
    }

    /// Largest cost over the state box and torque limits.
    double cost_scale() const {
        const double pi = std::numbers::pi;
        const double z = angle_weight * pi * pi + speed_weight * max_speed * max_speed +
                         torque_weight * max_torque * max_torque;
        return z > 0.0 ? z : 1.0;
    }
};

inline Vector pendulum_step(const PendulumLiteParams& p, const Vector& state, double u) {
    if (state.size() != 2) throw DimensionError("pendulum: state must be (theta, theta_dot)");
    u = std::clamp(u, -p.max_torque, p.max_torque);
    const double acc = (p.gravity / p.length) * std::sin(state[0]) + u / (p.mass * p.length * p.length);
    const double speed = std::clamp(state[1] + p.dt * acc, -p.max_speed, p.max_speed);
    Vector next(2);
    next << wrap_angle(state[0] + p.dt * speed), speed;
    return next;
}

inline Vector pendulum_step(const PendulumLiteParams& p, const Vector& state, const Vector& action) {
    if (action.size() != 1) throw DimensionError("pendulum: action must be scalar");
    return pendulum_step(p, state, action[0]);
}

/// 1 - cost / cost_scale, clamped to [0, 1].
inline double pendulum_reward(const PendulumLiteParams& p, const Vector& state, double u) {
    const double th = wrap_angle(state[0]);
    u = std::clamp(u, -p.max_torque, p.max_torque);
    const double cost = p.angle_weight * th * th + p.speed_weight * state[1] * state[1] + p.torque_weight * u * u;
    return std::clamp(1.0 - cost / p.cost_scale(), 0.0, 1.0);
}

/// Total mechanical energy, potential measured from the pivot.
inline double pendulum_energy(const PendulumLiteParams& p, const Vector& state) {
    return 0.5 * p.mass * p.length * p.length * state[1] * state[1] +
           p.mass * p.gravity * p.length * std::cos(state[0]);
}

enum class PerturbationKnob { Length, Gravity, ActionNoise };

inline std::string to_string(PerturbationKnob k) {
    switch (k) {
    case PerturbationKnob::Length: return "length";
    case PerturbationKnob::Gravity: return "gravity";
    case PerturbationKnob::ActionNoise: return "action_noise";
    }
    return "?";
}

inline PerturbationKnob knob_from_string(const std::string& s) {
    if (s == "length") return PerturbationKnob::Length;
    if (s == "gravity") return PerturbationKnob::Gravity;
    if (s == "action_noise") return PerturbationKnob::ActionNoise;
    throw ConfigError("unknown perturbation knob '" + s + "'");
}

/// Length and Gravity scale by (1 + magnitude / 100); ActionNoise sets the
/// replacement probability to `magnitude`.
inline PendulumLiteParams perturb(const PendulumLiteParams& p, PerturbationKnob knob, double magnitude) {
    PendulumLiteParams q = p;
    switch (knob) {
    case PerturbationKnob::Length: q.length = p.length * (1.0 + magnitude / 100.0); break;
    case PerturbationKnob::Gravity: q.gravity = p.gravity * (1.0 + magnitude / 100.0); break;
    case PerturbationKnob::ActionNoise: q.action_noise = magnitude; break;
    }
    q.validate();
    return q;
}

/// Piecewise-constant feedback law: the action of the grid cell containing the state.
struct GridPolicy {
    StateGrid grid;
    Policy actions;
    std::vector<double> torques;

    double operator()(const Vector& state) const {
        const auto cell = grid.locate(state, true);
        return torques[actions[*cell]];
    }
};

struct PendulumStart {
    double angle_spread = std::numbers::pi; ///< initial theta ~ U[-spread, spread]
    double speed_spread = 1.0;              ///< initial theta_dot ~ U[-spread, spread]
};

/// One rollout. Each step draws the action-noise coin, a replacement torque
/// and two transition-noise normals whether or not they are used, so streams
/// stay aligned across policies and perturbations.
inline double pendulum_rollout(const PendulumLiteParams& p, const std::function<double(const Vector&)>& policy,
                               std::size_t horizon, std::uint64_t seed, const PendulumStart& start = {},
                               std::vector<Vector>* trajectory = nullptr) {
    Rng rng(seed);
    Vector s(2);
    s << rng.uniform(-start.angle_spread, start.angle_spread), rng.uniform(-start.speed_spread, start.speed_spread);
    if (trajectory) trajectory->push_back(s);
    double total = 0.0;
    for (std::size_t t = 0; t < horizon; ++t) {
        double u = policy(s);
        const double coin = rng.uniform();
        const double random_u = rng.uniform(-p.max_torque, p.max_torque);
        if (coin < p.action_noise) u = random_u;
        total += pendulum_reward(p, s, u);
        s = pendulum_step(p, s, u);
        const double w0 = rng.normal(), w1 = rng.normal();
        s[0] = wrap_angle(s[0] + p.noise_sigma * w0);
        s[1] = std::clamp(s[1] + p.noise_sigma * w1, -p.max_speed, p.max_speed);
        if (trajectory) trajectory->push_back(s);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Random finite MDPs
// ---------------------------------------------------------------------------

/// Rewards ~ U[0, 1]; every (s, a) moves to `branch` distinct successors drawn
/// uniformly, with Dirichlet(1, ..., 1) weights.
inline RobustMdp make_random_mdp(std::size_t n_states, std::size_t n_actions, std::size_t branch, std::uint64_t seed,
                                 double gamma = 0.9, UncertaintySet set = {}) {
    if (branch == 0 || branch > n_states) throw std::invalid_argument("random mdp: branch must lie in [1, n_states]");
    Rng rng(derive_seed({seed, hash_string("random_mdp")}));
    RobustMdp mdp;
    mdp.n_states = n_states;
    mdp.n_actions = n_actions;
    mdp.gamma = gamma;
    mdp.set = set;
    mdp.reward = Matrix(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions));
    for (std::size_t s = 0; s < n_states; ++s)
        for (std::size_t a = 0; a < n_actions; ++a)
            mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = rng.uniform();
    mdp.nominal.resize(n_states * n_actions);
    std::vector<std::size_t> perm(n_states);
    for (auto& row : mdp.nominal) {
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 0; i < branch; ++i) std::swap(perm[i], perm[i + rng.index(n_states - i)]);
        std::vector<std::size_t> succ(perm.begin(), perm.begin() + static_cast<long>(branch));
        std::sort(succ.begin(), succ.end());
        std::vector<double> w(branch);
        double total = 0.0;
        for (auto& x : w) total += (x = -std::log(1.0 - rng.uniform()));
        row.index = succ;
        for (auto x : w) row.prob.push_back(x / total);
    }
    mdp.validate();
    return mdp;
}

// ---------------------------------------------------------------------------
// Synthetic RKHS dynamics
// ---------------------------------------------------------------------------

/// f_l(s, a) = sum_j c_{jl} k((s, a), z_j) with c_l^T K c_l = B^2 for every output l.
struct SyntheticRkhsTarget {
    KernelSpec spec;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::vector<Vector> anchors; ///< joined (state, action) points
    Matrix coefficients;         ///< anchors x outputs

    std::size_t output_dim() const { return static_cast<std::size_t>(coefficients.cols()); }

    Vector operator()(const Vector& s, const Vector& a) const {
        const Vector x = join(s, a);
        Vector kv(static_cast<Eigen::Index>(anchors.size()));
        for (std::size_t j = 0; j < anchors.size(); ++j) kv[static_cast<Eigen::Index>(j)] = spec.base(x, anchors[j]);
        return coefficients.transpose() * kv;
    }

    /// RKHS norm of each output, sqrt(c_l^T K c_l).
    Vector norms() const {
        const auto m = static_cast<Eigen::Index>(anchors.size());
        Matrix k(m, m);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < m; ++j) k(i, j) = spec.base(anchors[static_cast<std::size_t>(i)], anchors[static_cast<std::size_t>(j)]);
        Vector out(coefficients.cols());
        for (Eigen::Index l = 0; l < coefficients.cols(); ++l)
            out[l] = std::sqrt(coefficients.col(l).dot(k * coefficients.col(l)));
        return out;
    }
};

/// Anchors uniform in the box [lower, upper] over joined (state, action)
/// coordinates, standard normal coefficients rescaled to norm B per output.
inline SyntheticRkhsTarget make_rkhs_target(const KernelSpec& spec, std::size_t m, double bound, std::uint64_t seed,
                                            std::size_t state_dim, std::size_t action_dim, std::size_t output_dim,
                                            const Vector& lower, const Vector& upper) {
    spec.validate();
    if (m == 0) throw std::invalid_argument("rkhs target: need at least one anchor");
    if (!(bound > 0.0)) throw std::invalid_argument("rkhs target: bound must be positive");
    const auto dim = static_cast<Eigen::Index>(state_dim + action_dim);
    if (lower.size() != dim || upper.size() != dim) throw DimensionError("rkhs target: box dimension mismatch");
    Rng rng(derive_seed({seed, hash_string("rkhs_target")}));
    SyntheticRkhsTarget t;
    t.spec = spec;
    t.state_dim = state_dim;
    t.action_dim = action_dim;
    for (std::size_t j = 0; j < m; ++j) {
        Vector z(dim);
        for (Eigen::Index i = 0; i < dim; ++i) z[i] = rng.uniform(lower[i], upper[i]);
        t.anchors.push_back(z);
    }
    t.coefficients = Matrix(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(output_dim));
    for (Eigen::Index j = 0; j < t.coefficients.rows(); ++j)
        for (Eigen::Index l = 0; l < t.coefficients.cols(); ++l) t.coefficients(j, l) = rng.normal();
    const Vector n = t.norms();
    for (Eigen::Index l = 0; l < t.coefficients.cols(); ++l) {
        if (!(n[l] > 0.0)) throw NumericalError("rkhs target: degenerate coefficients");
        t.coefficients.col(l) *= bound / n[l];
    }
    return t;
}

} // namespace drrl
