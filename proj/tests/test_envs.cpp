#include "drrl/envs.hpp"

#include <gtest/gtest.h>

#include <Eigen/LU>

using namespace drrl;

namespace {

Vector state(double th, double om) {
    Vector s(2);
    s << th, om;
    return s;
}

} // namespace

TEST(Pendulum, HangingEquilibrium) {
    const PendulumLiteParams p;
    const Vector next = pendulum_step(p, state(std::numbers::pi, 0.0), 0.0);
    EXPECT_NEAR(std::abs(next[0]), std::numbers::pi, 1e-12);
    EXPECT_NEAR(next[1], 0.0, 1e-12);
}

TEST(Pendulum, EnergyDriftIsSecondOrder) {
    PendulumLiteParams p;
    p.dt = 0.05;
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
        const Vector s = state(rng.uniform(-3.1, 3.1), rng.uniform(-3.0, 3.0));
        const Vector n = pendulum_step(p, s, 0.0);
        const double acc = (p.gravity / p.length) * std::sin(s[0]);
        const double ml2 = p.mass * p.length * p.length, mgl = p.mass * p.gravity * p.length;
        // Semi-implicit Euler: first-order terms cancel, leaving
        // h^2 (ml^2 a^2 / 2 + mgl |a| + mgl w'^2 / 2).
        const double bound = p.dt * p.dt * (0.5 * ml2 * acc * acc + mgl * std::abs(acc) + 0.5 * mgl * n[1] * n[1]);
        EXPECT_LE(std::abs(pendulum_energy(p, n) - pendulum_energy(p, s)), bound + 1e-12);
    }
}

TEST(Pendulum, OddSymmetry) {
    const PendulumLiteParams p;
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const Vector s = state(rng.uniform(-3.0, 3.0), rng.uniform(-5.0, 5.0));
        const double u = rng.uniform(-2.0, 2.0);
        const Vector a = pendulum_step(p, s, u), b = pendulum_step(p, -s, -u);
        EXPECT_NEAR(a[0], -b[0], 1e-12);
        EXPECT_NEAR(a[1], -b[1], 1e-12);
    }
}

TEST(Pendulum, TorqueIsClamped) {
    const PendulumLiteParams p;
    EXPECT_EQ(pendulum_step(p, state(0.3, 0.1), 50.0), pendulum_step(p, state(0.3, 0.1), p.max_torque));
}

TEST(Pendulum, RewardInUnitInterval) {
    const PendulumLiteParams p;
    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
        const double r = pendulum_reward(p, state(rng.uniform(-4, 4), rng.uniform(-p.max_speed, p.max_speed)),
                                         rng.uniform(-3, 3));
        EXPECT_GE(r, 0.0);
        EXPECT_LE(r, 1.0);
    }
    EXPECT_DOUBLE_EQ(pendulum_reward(p, state(0, 0), 0), 1.0);
}

TEST(Perturb, Definitions) {
    const PendulumLiteParams p;
    const auto same = perturb(p, PerturbationKnob::Length, 0.0);
    EXPECT_EQ(same.length, p.length);
    EXPECT_EQ(same.gravity, p.gravity);
    EXPECT_EQ(same.action_noise, p.action_noise);
    EXPECT_DOUBLE_EQ(perturb(p, PerturbationKnob::Length, 50.0).length, 1.5);
    EXPECT_DOUBLE_EQ(perturb(p, PerturbationKnob::Gravity, -20.0).gravity, 8.0);
    EXPECT_THROW(perturb(p, PerturbationKnob::Length, -100.0), ConfigError);
    EXPECT_THROW(perturb(p, PerturbationKnob::ActionNoise, 1.5), ConfigError);
}

TEST(Perturb, FullActionNoiseIgnoresPolicy) {
    auto p = perturb(PendulumLiteParams{}, PerturbationKnob::ActionNoise, 1.0);
    p.noise_sigma = 0.05;
    std::vector<Vector> a, b;
    pendulum_rollout(p, [](const Vector&) { return 2.0; }, 100, 7, {}, &a);
    pendulum_rollout(p, [](const Vector& s) { return -s[0]; }, 100, 7, {}, &b);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t], b[t]);
}

TEST(Pendulum, RolloutReplayable) {
    PendulumLiteParams p;
    p.noise_sigma = 0.1;
    p.action_noise = 0.3;
    std::vector<Vector> a, b;
    const double ra = pendulum_rollout(p, [](const Vector& s) { return -2.0 * s[0]; }, 200, 11, {}, &a);
    const double rb = pendulum_rollout(p, [](const Vector& s) { return -2.0 * s[0]; }, 200, 11, {}, &b);
    EXPECT_EQ(ra, rb);
    EXPECT_EQ(a, b);
}

TEST(RandomMdp, DeterministicChainMatchesLinearSolve) {
    for (int seed = 0; seed < 5; ++seed) {
        const auto mdp = make_random_mdp(12, 3, 1, seed, 0.9, {Divergence::TV, 0.0});
        ValueIterationOptions o;
        o.tol = 1e-12;
        const auto vi = robust_value_iteration(mdp, o);
        const auto n = static_cast<Eigen::Index>(mdp.n_states);
        Matrix p = Matrix::Zero(n, n);
        Vector r(n);
        for (Eigen::Index s = 0; s < n; ++s) {
            const auto a = vi.policy[static_cast<std::size_t>(s)];
            r[s] = mdp.reward(s, static_cast<Eigen::Index>(a));
            const auto& row = mdp.transition(static_cast<std::size_t>(s), a);
            ASSERT_EQ(row.size(), 1u);
            p(s, static_cast<Eigen::Index>(row.index[0])) = 1.0;
        }
        const Vector v = (Matrix::Identity(n, n) - 0.9 * p).partialPivLu().solve(r);
        EXPECT_LE((v - vi.value).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(RandomMdp, SeedStableAndNormalized) {
    const auto a = make_random_mdp(20, 4, 5, 99), b = make_random_mdp(20, 4, 5, 99);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_NE(to_json(a).dump(), to_json(make_random_mdp(20, 4, 5, 100)).dump());
    for (const auto& row : a.nominal) {
        double total = 0.0;
        for (double x : row.prob) total += x;
        EXPECT_NEAR(total, 1.0, 1e-12);
        EXPECT_EQ(row.size(), 5u);
    }
    EXPECT_THROW(make_random_mdp(3, 2, 4, 1), std::invalid_argument);
}

TEST(RkhsTarget, SingleAnchor) {
    KernelSpec spec;
    const auto t = make_rkhs_target(spec, 1, 1.0, 3, 1, 1, 1, Vector::Constant(2, -1), Vector::Constant(2, 1));
    const Vector z = t.anchors[0];
    EXPECT_NEAR(t(z.head(1), z.tail(1))[0], 1.0, 1e-12);
}

TEST(RkhsTarget, NormAndReproducingBound) {
    KernelSpec spec;
    spec.lengthscales = {0.4};
    for (int seed = 0; seed < 5; ++seed) {
        const auto t = make_rkhs_target(spec, 5, 1.3, seed, 1, 1, 2, Vector::Constant(2, -1), Vector::Constant(2, 1));
        EXPECT_NEAR(t.norms()[0], 1.3, 1e-10);
        EXPECT_NEAR(t.norms()[1], 1.3, 1e-10);
        Rng rng(seed);
        for (int i = 0; i < 1000; ++i) {
            const Vector s = Vector::Constant(1, rng.uniform(-3, 3)), a = Vector::Constant(1, rng.uniform(-3, 3));
            EXPECT_LE(t(s, a).cwiseAbs().maxCoeff(), 1.3 + 1e-12);
        }
    }
}
