#include "drrl/dro_oracle.hpp"
#include "drrl/envs.hpp"
#include "drrl/rmdp.hpp"

#include <gtest/gtest.h>

#include <Eigen/LU>

#include <sstream>

using namespace drrl;

namespace {

ValueIterationOptions tolerance(double tol) {
    ValueIterationOptions o;
    o.tol = tol;
    return o;
}

constexpr Divergence kAll[] = {Divergence::KL, Divergence::Chi2, Divergence::TV};

RobustMdp two_state(double gamma, UncertaintySet set, SparseDistribution from0, SparseDistribution from1) {
    RobustMdp m;
    m.n_states = 2;
    m.n_actions = 1;
    m.gamma = gamma;
    m.set = set;
    m.reward = Matrix(2, 1);
    m.reward << 0.3, 0.6;
    m.nominal = {std::move(from0), std::move(from1)};
    return m;
}

Vector random_value(Rng& rng, std::size_t n, double bound) {
    Vector v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = rng.uniform(0.0, bound);
    return v;
}

// Optimal nominal value by policy iteration with exact linear solves.
Vector policy_iteration_value(const RobustMdp& mdp) {
    const auto n = static_cast<Eigen::Index>(mdp.n_states);
    Policy pi(mdp.n_states, 0);
    Vector v = Vector::Zero(n);
    for (int it = 0; it < 1000; ++it) {
        Matrix p = Matrix::Zero(n, n);
        Vector r(n);
        for (Eigen::Index s = 0; s < n; ++s) {
            r[s] = mdp.reward(s, static_cast<Eigen::Index>(pi[s]));
            const auto& row = mdp.transition(s, pi[s]);
            for (std::size_t k = 0; k < row.size(); ++k) p(s, static_cast<Eigen::Index>(row.index[k])) += row.prob[k];
        }
        v = (Matrix::Identity(n, n) - mdp.gamma * p).partialPivLu().solve(r);
        bool stable = true;
        for (Eigen::Index s = 0; s < n; ++s) {
            double best = -1.0;
            std::size_t arg = 0;
            for (std::size_t a = 0; a < mdp.n_actions; ++a) {
                const auto& row = mdp.transition(s, a);
                double q = mdp.reward(s, static_cast<Eigen::Index>(a));
                for (std::size_t k = 0; k < row.size(); ++k) q += mdp.gamma * row.prob[k] * v[static_cast<Eigen::Index>(row.index[k])];
                if (q > best + 1e-13) {
                    best = q;
                    arg = a;
                }
            }
            double cur = mdp.reward(s, static_cast<Eigen::Index>(pi[s]));
            const auto& row = mdp.transition(s, pi[s]);
            for (std::size_t k = 0; k < row.size(); ++k) cur += mdp.gamma * row.prob[k] * v[static_cast<Eigen::Index>(row.index[k])];
            if (best > cur + 1e-12) {
                pi[s] = arg;
                stable = false;
            }
        }
        if (stable) break;
    }
    return v;
}

// Robust value iteration with the primal oracle in place of the dual solver.
Vector oracle_value_iteration(const RobustMdp& mdp, double tol) {
    Vector v = Vector::Zero(static_cast<Eigen::Index>(mdp.n_states));
    for (int it = 0; it < 10000; ++it) {
        Vector next(v.size());
        for (std::size_t s = 0; s < mdp.n_states; ++s) {
            double best = -1.0;
            for (std::size_t a = 0; a < mdp.n_actions; ++a) {
                const auto& row = mdp.transition(s, a);
                std::vector<double> vals;
                for (auto i : row.index) vals.push_back(v[static_cast<Eigen::Index>(i)]);
                const double inner = primal_oracle(DiscreteDistribution::normalized(row.prob, vals), mdp.set);
                best = std::max(best, mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) + mdp.gamma * inner);
            }
            next[static_cast<Eigen::Index>(s)] = best;
        }
        const double res = (next - v).cwiseAbs().maxCoeff();
        v = next;
        if (res <= tol) break;
    }
    return v;
}

} // namespace

TEST(RobustQ, ZeroDiscountIsReward) {
    const auto mdp = make_random_mdp(6, 2, 3, 1, 0.0, {Divergence::KL, 0.5});
    Rng rng(1);
    const Vector v = random_value(rng, 6, 1.0);
    for (std::size_t s = 0; s < 6; ++s)
        for (std::size_t a = 0; a < 2; ++a)
            EXPECT_DOUBLE_EQ(robust_bellman_q(mdp, v, s, a), mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)));
}

TEST(RobustQ, ZeroRadiusIsStandardBackup) {
    Rng rng(2);
    for (auto div : kAll) {
        const auto mdp = make_random_mdp(8, 3, 4, 2, 0.9, {div, 0.0});
        const Vector v = random_value(rng, 8, 10.0);
        for (std::size_t s = 0; s < 8; ++s)
            for (std::size_t a = 0; a < 3; ++a) {
                const auto& row = mdp.transition(s, a);
                double e = 0.0;
                for (std::size_t k = 0; k < row.size(); ++k) e += row.prob[k] * v[static_cast<Eigen::Index>(row.index[k])];
                EXPECT_NEAR(robust_bellman_q(mdp, v, s, a), mdp.reward(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) + 0.9 * e, 1e-12);
            }
    }
}

TEST(RobustQ, TwoStateTotalVariationFullBall) {
    Vector v(2);
    v << 0.0, 1.0;
    // Both states in the nominal support: the adversary moves everything onto state 0.
    const auto spread = two_state(0.5, {Divergence::TV, 2.0}, {{0, 1}, {0.5, 0.5}}, {{0, 1}, {0.5, 0.5}});
    EXPECT_DOUBLE_EQ(robust_bellman_q(spread, v, 0, 0), 0.3);
    // Point-mass nominal on state 1: the ball on that support keeps the point mass.
    const auto point = two_state(0.5, {Divergence::TV, 2.0}, {{1}, {1.0}}, {{1}, {1.0}});
    EXPECT_DOUBLE_EQ(robust_bellman_q(point, v, 0, 0), 0.3 + 0.5 * 1.0);
}

TEST(BellmanOperator, ZeroValueGivesMaxReward) {
    const auto mdp = make_random_mdp(10, 4, 3, 3, 0.9, {Divergence::Chi2, 0.3});
    const Vector tv = robust_bellman_operator(mdp, Vector::Zero(10));
    for (Eigen::Index s = 0; s < 10; ++s) EXPECT_DOUBLE_EQ(tv[s], mdp.reward.row(s).maxCoeff());
}

TEST(BellmanOperator, ContractionAllDivergences) {
    Rng rng(4);
    for (auto div : kAll)
        for (int i = 0; i < 100; ++i) {
            const double gamma = rng.uniform(0.1, 0.95);
            const auto mdp = make_random_mdp(10, 3, 1 + rng.index(6), 100 + i, gamma, {div, rng.uniform(0.01, 1.5)});
            const double bound = mdp.value_bound();
            const Vector v1 = random_value(rng, 10, bound), v2 = random_value(rng, 10, bound);
            const double lhs = (robust_bellman_operator(mdp, v1) - robust_bellman_operator(mdp, v2)).cwiseAbs().maxCoeff();
            EXPECT_LE(lhs, gamma * (v1 - v2).cwiseAbs().maxCoeff() + 1e-9) << to_string(div);
        }
}

TEST(BellmanOperator, Monotone) {
    Rng rng(5);
    for (auto div : kAll)
        for (int i = 0; i < 50; ++i) {
            const auto mdp = make_random_mdp(10, 3, 4, 200 + i, 0.9, {div, 0.4});
            Vector v1 = random_value(rng, 10, 5.0);
            Vector v2 = v1;
            for (auto& x : v2) x += rng.uniform(0.0, 5.0);
            const Vector t1 = robust_bellman_operator(mdp, v1), t2 = robust_bellman_operator(mdp, v2);
            EXPECT_TRUE(((t2 - t1).array() >= -1e-9).all());
        }
}

TEST(BellmanOperator, KlFixedPointMatchesOracleBackedIteration) {
    RobustMdp mdp;
    mdp.n_states = 2;
    mdp.n_actions = 2;
    mdp.gamma = 0.9;
    mdp.set = {Divergence::KL, 0.1};
    mdp.reward = Matrix(2, 2);
    mdp.reward << 0.1, 0.5, 0.9, 0.2;
    mdp.nominal.assign(4, SparseDistribution{{0, 1}, {0.5, 0.5}});
    const auto vi = robust_value_iteration(mdp, tolerance(1e-10));
    const Vector oracle = oracle_value_iteration(mdp, 1e-10);
    EXPECT_LE((vi.value - oracle).cwiseAbs().maxCoeff(), 1e-4 * mdp.value_bound());
}

TEST(ValueIteration, ZeroDiscountConvergesInOneSweep) {
    const auto mdp = make_random_mdp(7, 3, 2, 6, 0.0, {Divergence::TV, 0.5});
    const auto vi = robust_value_iteration(mdp);
    EXPECT_EQ(vi.iterations, 1u);
    for (Eigen::Index s = 0; s < 7; ++s) EXPECT_DOUBLE_EQ(vi.value[s], mdp.reward.row(s).maxCoeff());
}

TEST(ValueIteration, ZeroRadiusMatchesPolicyIteration) {
    for (int seed = 0; seed < 10; ++seed) {
        const auto mdp = make_random_mdp(15, 3, 4, 300 + seed, 0.9, {Divergence::KL, 0.0});
        const auto vi = robust_value_iteration(mdp);
        EXPECT_LE((vi.value - policy_iteration_value(mdp)).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(ValueIteration, RobustBelowNominalAndMonotoneInRadius) {
    for (auto div : kAll)
        for (int seed = 0; seed < 5; ++seed) {
            Vector prev;
            for (double rho : {0.0, 0.1, 0.3, 0.5, 1.0}) {
                const auto mdp = make_random_mdp(5, 3, 3, 400 + seed, 0.9, {div, rho});
                const auto vi = robust_value_iteration(mdp);
                if (prev.size()) {
                    EXPECT_TRUE(((prev - vi.value).array() >= -1e-7).all()) << to_string(div) << " rho " << rho;
                }
                prev = vi.value;
            }
        }
}

TEST(ValueIteration, WithinIterationBoundAndResidualGuard) {
    for (auto div : kAll) {
        const auto mdp = make_random_mdp(20, 4, 5, 500, 0.9, {div, 0.3});
        const double tol = 1e-8;
        const auto vi = robust_value_iteration(mdp, tolerance(tol));
        const double bound = std::ceil(std::log(tol / mdp.value_bound()) / std::log(mdp.gamma)) + 1;
        EXPECT_LE(static_cast<double>(vi.iterations), bound);
        const double fp = (robust_bellman_operator(mdp, vi.value) - vi.value).cwiseAbs().maxCoeff();
        EXPECT_LE(fp, tol * (1 + mdp.gamma) / (1 - mdp.gamma));
        for (Eigen::Index s = 0; s < vi.value.size(); ++s) {
            EXPECT_GE(vi.value[s], 0.0);
            EXPECT_LE(vi.value[s], mdp.value_bound());
        }
    }
}

TEST(ValueIteration, PolicyStableAcrossInitialValues) {
    for (auto div : kAll)
        for (int seed = 0; seed < 5; ++seed) {
            const auto mdp = make_random_mdp(12, 3, 4, 600 + seed, 0.85, {div, 0.2});
            const auto a = robust_value_iteration(mdp, tolerance(1e-10));
            auto o = tolerance(1e-10);
            o.initial = Vector::Constant(12, mdp.value_bound());
            const auto b = robust_value_iteration(mdp, o);
            EXPECT_EQ(a.policy, b.policy);
        }
}

TEST(ValueIteration, NonConvergenceCarriesResidual) {
    const auto mdp = make_random_mdp(5, 2, 2, 7, 0.99, {Divergence::TV, 0.1});
    ValueIterationOptions o;
    o.max_iter = 3;
    try {
        robust_value_iteration(mdp, o);
        FAIL();
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 0.0);
    }
}

TEST(ValueIteration, GreedyTiesGoToLowestAction) {
    RobustMdp mdp;
    mdp.n_states = 1;
    mdp.n_actions = 3;
    mdp.gamma = 0.5;
    mdp.reward = Matrix::Constant(1, 3, 0.4);
    mdp.nominal.assign(3, SparseDistribution{{0}, {1.0}});
    EXPECT_EQ(robust_value_iteration(mdp).policy, Policy{0});
}

TEST(EvaluatePolicy, ZeroReward) {
    auto mdp = make_random_mdp(4, 2, 2, 8);
    mdp.reward.setZero();
    EXPECT_EQ(evaluate_policy(mdp, Policy(4, 1), 50, 10, 1), 0.0);
}

TEST(EvaluatePolicy, SelfLoopGeometricSeries) {
    RobustMdp mdp;
    mdp.n_states = 1;
    mdp.n_actions = 1;
    mdp.gamma = 0.9;
    mdp.reward = Matrix::Ones(1, 1);
    mdp.nominal = {SparseDistribution{{0}, {1.0}}};
    EXPECT_NEAR(evaluate_policy(mdp, Policy{0}, 200, 3, 1), (1 - std::pow(0.9, 200)) / 0.1, 1e-12);
}

TEST(EvaluatePolicy, DeterministicGivenSeed) {
    const auto mdp = make_random_mdp(10, 3, 4, 9);
    const Policy pi(10, 2);
    EXPECT_EQ(evaluate_policy(mdp, pi, 30, 20, 5), evaluate_policy(mdp, pi, 30, 20, 5));
    EXPECT_THROW(evaluate_policy(mdp, pi, 0, 20, 5), std::invalid_argument);
}

TEST(Discretize, IdentityDynamicsSmallNoiseStaysPut) {
    DiscretizationSpec spec;
    spec.grid = StateGrid(Vector::Constant(2, -1.0), Vector::Constant(2, 1.0), {10, 10});
    spec.actions = {Vector::Zero(1)};
    spec.noise_sigma = spec.grid.width(0) / 100.0;
    const auto mdp = discretize_continuous([](const Vector& s, const Vector&) { return s; },
                                           [](const Vector&, const Vector&) { return 0.5; }, spec, 0.9, {});
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
        const auto& row = mdp.transition(s, 0);
        double own = 0.0;
        for (std::size_t k = 0; k < row.size(); ++k)
            if (row.index[k] == s) own = row.prob[k];
        EXPECT_GE(own, 0.999);
    }
}

TEST(Discretize, SymmetricDynamicsGiveReflectionSymmetricMatrix) {
    DiscretizationSpec spec;
    spec.grid = StateGrid(Vector::Constant(1, -1.0), Vector::Constant(1, 1.0), {11});
    spec.actions = {Vector::Zero(1)};
    spec.noise_sigma = 0.3;
    const auto mdp = discretize_continuous([](const Vector& s, const Vector&) { return (0.7 * s).eval(); },
                                           [](const Vector&, const Vector&) { return 0.0; }, spec, 0.9, {});
    const auto n = mdp.n_states;
    Matrix p = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) {
        const auto& row = mdp.transition(s, 0);
        for (std::size_t k = 0; k < row.size(); ++k) p(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(row.index[k])) = row.prob[k];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            EXPECT_NEAR(p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                        p(static_cast<Eigen::Index>(n - 1 - i), static_cast<Eigen::Index>(n - 1 - j)), 1e-9);
}

TEST(Discretize, RowsNormalizedAndBoundaryModes) {
    DiscretizationSpec spec;
    spec.grid = StateGrid(Vector::Constant(2, -1.0), Vector::Constant(2, 1.0), {6, 5}, {0});
    spec.actions = {Vector::Constant(1, -0.5), Vector::Constant(1, 0.5)};
    spec.noise_sigma = 0.4;
    auto f = [](const Vector& s, const Vector& a) { return (s * 1.3 + Vector::Constant(2, a[0])).eval(); };
    auto r = [](const Vector& s, const Vector&) { return 0.5 + 0.25 * std::tanh(s[0]); };
    for (auto mode : {BoundaryMode::Reflect, BoundaryMode::Absorb}) {
        spec.boundary = mode;
        const auto mdp = discretize_continuous(f, r, spec, 0.9, {});
        EXPECT_EQ(mdp.n_states, mode == BoundaryMode::Absorb ? 31u : 30u);
        for (const auto& row : mdp.nominal) {
            double total = 0.0;
            for (double p : row.prob) total += p;
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
    EXPECT_THROW(StateGrid(Vector::Constant(1, 1.0), Vector::Constant(1, 1.0), {4}), std::invalid_argument);
    EXPECT_THROW(StateGrid(Vector::Constant(1, 0.0), Vector::Constant(1, 1.0), {1}), std::invalid_argument);
}

TEST(Serialization, JsonRoundTrip) {
    const auto mdp = make_random_mdp(6, 2, 3, 10, 0.8, {Divergence::Chi2, 0.25});
    const auto back = mdp_from_json(nlohmann::json::parse(to_json(mdp).dump()));
    EXPECT_EQ(to_json(back), to_json(mdp));
    EXPECT_THROW(mdp_from_json(nlohmann::json::parse(R"({"states": 1})")), ConfigError);
}

TEST(Serialization, ValueAndPolicyCsv) {
    std::stringstream v, p;
    Vector val(2);
    val << 0.1, 2.0 / 3.0;
    write_value_csv(v, val);
    EXPECT_EQ(v.str(), "state_idx,value\n0,0.10000000000000001\n1,0.66666666666666663\n");
    write_policy_csv(p, {1, 0});
    EXPECT_EQ(p.str(), "state_idx,action_idx\n0,1\n1,0\n");
    EXPECT_EQ(read_policy_csv(p), (Policy{1, 0}));
}
