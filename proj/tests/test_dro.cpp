#include "drrl/dro.hpp"
#include "drrl/dro_oracle.hpp"
#include "drrl/quadrature.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace drrl;

namespace {

struct Instance {
    std::vector<double> p, v;
};

Instance random_instance(Rng& rng, double bound, std::size_t max_support = 8) {
    const std::size_t n = 2 + rng.index(max_support - 1);
    Instance in;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = -std::log(1.0 - rng.uniform());
        in.p.push_back(w);
        total += w;
        in.v.push_back(rng.uniform(0.0, bound));
    }
    for (auto& x : in.p) x /= total;
    return in;
}

double mean(const Instance& in) {
    double e = 0.0;
    for (std::size_t i = 0; i < in.p.size(); ++i) e += in.p[i] * in.v[i];
    return e;
}

double vmin(const Instance& in) { return *std::min_element(in.v.begin(), in.v.end()); }

DiscreteDistribution dist(const Instance& in) { return DiscreteDistribution::normalized(in.p, in.v); }

// Worst case over the L1 ball as a quantile integral: the adversary removes
// the top rho/2 of mass and places it at the minimum.
double tv_quantile_oracle(const Instance& in, double rho) {
    const double eps = std::min(0.5 * rho, 1.0);
    std::vector<std::size_t> idx(in.p.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return in.v[a] < in.v[b]; });
    double keep = 1.0 - eps, e = eps * in.v[idx.front()];
    for (auto i : idx) {
        const double take = std::min(keep, in.p[i]);
        e += take * in.v[i];
        keep -= take;
    }
    return e;
}

double kl_two_point(double p, double q) {
    double s = 0.0;
    if (p > 0) s += p * std::log(p / q);
    if (p < 1) s += (1 - p) * std::log((1 - p) / (1 - q));
    return s;
}

constexpr double kRhos[] = {0.05, 0.1, 0.5, 1.0};

} // namespace

// ---------------------------------------------------------------------------
// Worked instances
// ---------------------------------------------------------------------------

TEST(WorstCaseKl, ConstantValue) {
    const auto d = DiscreteDistribution::normalized({0.2, 0.3, 0.5}, {0.7, 0.7, 0.7});
    for (double rho : {0.01, 0.5, 3.0}) EXPECT_NEAR(worst_case_kl(d, rho, 1.0).value, 0.7, 1e-12);
}

TEST(WorstCaseKl, ZeroRadiusIsMean) {
    const auto d = DiscreteDistribution::normalized({0.2, 0.8}, {0.1, 0.6});
    const auto r = worst_case_kl(d, 0.0, 1.0);
    EXPECT_DOUBLE_EQ(r.value, 0.2 * 0.1 + 0.8 * 0.6);
    EXPECT_TRUE(r.diagnostics.zero_radius);
}

TEST(WorstCaseKl, TwoAtomsMatchDirectScan) {
    // Uniform P0 on values {0, 1}, rho = 0.1: scan p = P(V = 0) at step 1e-7.
    const double rho = 0.1;
    double best = 1.0;
    for (long k = 0; k <= 10000000; ++k) {
        const double p = k * 1e-7;
        if (kl_two_point(p, 0.5) <= rho) best = std::min(best, 1.0 - p);
    }
    const auto d = DiscreteDistribution::normalized({0.5, 0.5}, {0.0, 1.0});
    const auto r = worst_case_kl(d, rho, 1.0);
    EXPECT_NEAR(r.value, best, 1e-6);
    EXPECT_NEAR(primal_oracle(d, {Divergence::KL, rho}), best, 1e-6);
    EXPECT_GE(r.diagnostics.optimizer, r.diagnostics.bracket_lo);
    EXPECT_LE(r.diagnostics.optimizer, r.diagnostics.bracket_hi);
}

TEST(WorstCaseKl, LargeRadiusReachesEssentialInfimum) {
    const auto d = DiscreteDistribution::normalized({0.5, 0.5}, {0.2, 1.0});
    const auto r = worst_case_kl(d, 5.0, 1.0);
    EXPECT_DOUBLE_EQ(r.value, 0.2);
    EXPECT_TRUE(r.diagnostics.lower_endpoint);
}

TEST(WorstCaseKl, ErrorsOnBadInput) {
    const auto d = DiscreteDistribution::normalized({1.0}, {0.5});
    EXPECT_THROW(worst_case_kl(d, -0.1, 1.0), std::invalid_argument);
    EXPECT_THROW(worst_case_kl(DiscreteDistribution{}, 0.1, 1.0), std::invalid_argument);
}

TEST(WorstCaseChi2, ConstantValue) {
    const auto d = DiscreteDistribution::normalized({0.4, 0.6}, {0.3, 0.3});
    EXPECT_NEAR(worst_case_chi2(d, 0.7, 1.0).value, 0.3, 1e-12);
}

TEST(WorstCaseChi2, ZeroRadiusIsMean) {
    const auto d = DiscreteDistribution::normalized({0.4, 0.6}, {0.3, 0.9});
    EXPECT_DOUBLE_EQ(worst_case_chi2(d, 0.0, 1.0).value, 0.4 * 0.3 + 0.6 * 0.9);
}

TEST(WorstCaseChi2, TwoAtomsMatchGridScan) {
    // Divergence 0.5 * sum (p - p0)^2 / p0 = 2 (p - 1/2)^2 on two uniform atoms.
    for (double rho : {0.05, 0.1, 0.2, 0.5}) {
        double best = 1.0;
        for (long k = 0; k <= 1000000; ++k) {
            const double p = k * 1e-6;
            if (2.0 * (p - 0.5) * (p - 0.5) <= rho) best = std::min(best, 1.0 - p);
        }
        const auto d = DiscreteDistribution::normalized({0.5, 0.5}, {0.0, 1.0});
        EXPECT_NEAR(worst_case_chi2(d, rho, 1.0).value, best, 1e-4) << "rho " << rho;
        EXPECT_NEAR(primal_oracle(d, {Divergence::Chi2, rho}), best, 1e-4) << "rho " << rho;
    }
}

TEST(WorstCaseChi2, WorkedRadiusHalfReachesMinimum) {
    const auto d = DiscreteDistribution::normalized({0.5, 0.5}, {0.0, 1.0});
    EXPECT_NEAR(worst_case_chi2(d, 0.5, 1.0).value, 0.0, 1e-12);
}

TEST(WorstCaseTv, ConstantValue) {
    const auto d = DiscreteDistribution::normalized({0.1, 0.9}, {2.0, 2.0});
    EXPECT_NEAR(worst_case_tv(d, 0.5, 0.9).value, 2.0, 1e-12);
}

TEST(WorstCaseTv, FullBallGivesMinimum) {
    const auto d = DiscreteDistribution::normalized({0.1, 0.0, 0.9}, {2.0, 0.5, 4.0});
    for (double rho : {2.0, 3.5}) {
        const auto r = worst_case_tv(d, rho, 0.9);
        EXPECT_EQ(r.value, 2.0);
        EXPECT_TRUE(r.diagnostics.full_ball);
    }
}

TEST(WorstCaseTv, FiveAtomWaterFilling) {
    const auto d = DiscreteDistribution::normalized({0.2, 0.2, 0.2, 0.2, 0.2}, {0.1, 0.2, 0.3, 0.4, 0.5});
    const auto r = worst_case_tv(d, 0.4, 0.9);
    EXPECT_NEAR(r.value, 0.22, 1e-8);
    EXPECT_NEAR(primal_oracle(d, {Divergence::TV, 0.4}), 0.22, 1e-12);
    EXPECT_GE(r.diagnostics.optimizer, r.diagnostics.bracket_lo);
    EXPECT_LE(r.diagnostics.optimizer, r.diagnostics.bracket_hi);
}

TEST(WorstCaseTv, ErrorsOnBadGamma) {
    const auto d = DiscreteDistribution::normalized({1.0}, {0.5});
    EXPECT_THROW(worst_case_tv(d, 0.1, 1.0), std::invalid_argument);
    EXPECT_THROW(worst_case_tv(d, -0.1, 0.5), std::invalid_argument);
}

TEST(Distribution, RejectsUnnormalized) {
    EXPECT_THROW(DiscreteDistribution({{0.0, 0.5}, {1.0, 0.4}}), std::invalid_argument);
    EXPECT_THROW(DiscreteDistribution({{std::nan(""), 1.0}}), std::invalid_argument);
    EXPECT_NO_THROW(DiscreteDistribution({{0.0, 0.5}, {1.0, 0.5}}));
}

TEST(PrimalOracle, SupportLimits) {
    std::vector<double> p(13, 1.0 / 13), v(13, 0.5);
    const auto d = DiscreteDistribution::normalized(p, v);
    EXPECT_THROW(primal_oracle(d, {Divergence::KL, 0.1}), std::invalid_argument);
    EXPECT_NO_THROW(primal_oracle(d, {Divergence::TV, 0.1}));
}

TEST(PrimalOracle, ZeroRadiusIsMean) {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto in = random_instance(rng, 1.0);
        for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV})
            EXPECT_NEAR(primal_oracle(dist(in), {div, 0.0}), mean(in), 1e-12);
    }
}

TEST(PrimalOracle, TvAgreesWithQuantileFormula) {
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const auto in = random_instance(rng, 5.0, 64);
        const double rho = rng.uniform(0.0, 2.5);
        EXPECT_NEAR(primal_oracle(dist(in), {Divergence::TV, rho}), tv_quantile_oracle(in, rho), 1e-12);
    }
}

TEST(PrimalOracle, KlSolutionSitsOnTheBoundary) {
    // The tilted optimum must be feasible and a small random perturbation
    // inside the ball must not do better.
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto in = random_instance(rng, 1.0);
        const double rho = kRhos[i % 4];
        const double opt = primal_oracle(dist(in), {Divergence::KL, rho});
        for (int k = 0; k < 200; ++k) {
            std::vector<double> q(in.p.size());
            double z = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) z += (q[j] = in.p[j] * std::exp(rng.uniform(-3, 3)));
            double kl = 0.0, e = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) {
                q[j] /= z;
                kl += q[j] * std::log(q[j] / in.p[j]);
                e += q[j] * in.v[j];
            }
            if (kl <= rho) {
                EXPECT_GE(e, opt - 1e-9);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dual = primal on random instances
// ---------------------------------------------------------------------------

TEST(DualPrimal, RandomInstancesAllDivergences) {
    Rng rng(4);
    const double gamma = 0.9, bound = 1.0 / (1.0 - gamma);
    for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV}) {
        const double tol = div == Divergence::KL ? 1e-4 * bound : div == Divergence::Chi2 ? 1e-3 * bound : 1e-8;
        for (int i = 0; i < 100; ++i) {
            const auto in = random_instance(rng, bound);
            const UncertaintySet set{div, kRhos[i % 4]};
            const double dual = worst_case(dist(in), set, gamma, bound).value;
            const double primal = primal_oracle(dist(in), set);
            EXPECT_NEAR(dual, primal, tol) << to_string(div) << " instance " << i;
        }
    }
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

TEST(DroProperties, BoundsAndMonotoneInRadius) {
    Rng rng(5);
    const double gamma = 0.8, bound = 5.0;
    for (int i = 0; i < 100; ++i) {
        const auto in = random_instance(rng, bound);
        for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV}) {
            double prev = std::numeric_limits<double>::infinity();
            for (int k = 0; k <= 20; ++k) {
                const double rho = 0.1 * k;
                const double w = worst_case(dist(in), {div, rho}, gamma, bound).value;
                EXPECT_GE(w, vmin(in) - 1e-12);
                EXPECT_LE(w, mean(in) + 1e-12);
                EXPECT_LE(w, prev + 1e-9);
                if (k == 0) {
                    EXPECT_NEAR(w, mean(in), 1e-12);
                }
                prev = w;
            }
        }
    }
}

TEST(DroProperties, OneLipschitzInValues) {
    Rng rng(6);
    const double gamma = 0.9, bound = 10.0;
    for (int i = 0; i < 100; ++i) {
        const auto a = random_instance(rng, bound);
        auto b = a;
        for (auto& x : b.v) x = std::clamp(x + rng.uniform(-1.0, 1.0), 0.0, bound);
        double dv = 0.0;
        for (std::size_t j = 0; j < a.v.size(); ++j) dv = std::max(dv, std::abs(a.v[j] - b.v[j]));
        for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV}) {
            const UncertaintySet set{div, kRhos[i % 4]};
            const double wa = worst_case(dist(a), set, gamma, bound).value;
            const double wb = worst_case(dist(b), set, gamma, bound).value;
            EXPECT_LE(std::abs(wa - wb), dv + 1e-9);
        }
    }
}

TEST(DroProperties, TranslationEquivariance) {
    Rng rng(7);
    const double gamma = 0.9, bound = 10.0;
    for (int i = 0; i < 100; ++i) {
        const auto a = random_instance(rng, 5.0);
        const double c = rng.uniform(0.0, 5.0);
        auto b = a;
        for (auto& x : b.v) x += c;
        for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV}) {
            const UncertaintySet set{div, kRhos[i % 4]};
            const double wa = worst_case(dist(a), set, gamma, bound).value;
            const double wb = worst_case(dist(b), set, gamma, bound).value;
            EXPECT_NEAR(wb, wa + c, 1e-9) << to_string(div);
        }
    }
}

TEST(DroProperties, KlVersusTvOrderingMatchesOracles) {
    Rng rng(8);
    const double gamma = 0.9, bound = 10.0;
    for (int i = 0; i < 50; ++i) {
        const auto in = random_instance(rng, bound);
        const double rho = 0.05;
        const double kl = worst_case(dist(in), {Divergence::KL, rho}, gamma, bound).value;
        const double tv = worst_case(dist(in), {Divergence::TV, rho}, gamma, bound).value;
        const double kl_o = primal_oracle(dist(in), {Divergence::KL, rho});
        const double tv_o = primal_oracle(dist(in), {Divergence::TV, rho});
        if (std::abs(kl_o - tv_o) > 1e-3 * bound) {
            EXPECT_EQ(kl > tv, kl_o > tv_o) << "instance " << i;
        }
    }
}

TEST(DroProperties, DiagnosticsOptimizerInsideBracket) {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        const auto in = random_instance(rng, 10.0);
        for (auto div : {Divergence::KL, Divergence::Chi2, Divergence::TV}) {
            const auto r = worst_case(dist(in), {div, kRhos[i % 4]}, 0.9, 10.0);
            EXPECT_GE(r.diagnostics.optimizer, r.diagnostics.bracket_lo);
            EXPECT_LE(r.diagnostics.optimizer, r.diagnostics.bracket_hi);
            EXPECT_LE(r.diagnostics.iterations, kGoldenMaxIterations);
        }
    }
}

TEST(DroProperties, UnknownDivergenceThrows) {
    const auto d = DiscreteDistribution::normalized({1.0}, {0.5});
    EXPECT_THROW(worst_case(d, {static_cast<Divergence>(99), 0.1}, 0.9, 1.0), std::invalid_argument);
    EXPECT_THROW(divergence_from_string("wasserstein"), ConfigError);
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

TEST(GaussHermite, MomentsOfStandardNormal) {
    const auto r = gauss_hermite(16);
    double m0 = 0, m1 = 0, m2 = 0, m4 = 0, m30 = 0;
    for (std::size_t i = 0; i < r.nodes.size(); ++i) {
        const double x = r.nodes[i], w = r.weights[i];
        m0 += w;
        m1 += w * x;
        m2 += w * x * x;
        m4 += w * std::pow(x, 4);
        m30 += w * std::pow(x, 30);
    }
    EXPECT_NEAR(m0, 1.0, 1e-13);
    EXPECT_NEAR(m1, 0.0, 1e-13);
    EXPECT_NEAR(m2, 1.0, 1e-12);
    EXPECT_NEAR(m4, 3.0, 1e-11);
    // (29)!! = 6190283353629375
    EXPECT_NEAR(m30 / 6190283353629375.0, 1.0, 1e-8);
}

TEST(GaussianSurrogate, TensorGridAndMonteCarlo) {
    QuadratureConfig cfg;
    Vector mu(2);
    mu << 0.5, -1.0;
    const auto g = gaussian_surrogate(mu, 0.3, cfg);
    EXPECT_EQ(g.points.size(), 256u);
    Vector m = Vector::Zero(2);
    double w = 0.0;
    for (std::size_t i = 0; i < g.points.size(); ++i) {
        m += g.weights[i] * g.points[i];
        w += g.weights[i];
    }
    EXPECT_NEAR(w, 1.0, 1e-12);
    EXPECT_TRUE(m.isApprox(mu, 1e-12));

    Vector mu3 = Vector::Constant(3, 0.2);
    cfg.seed = 42;
    const auto a = gaussian_surrogate(mu3, 0.1, cfg);
    const auto b = gaussian_surrogate(mu3, 0.1, cfg);
    EXPECT_EQ(a.points.size(), 4096u);
    for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_EQ(a.points[i], b.points[i]);
}

TEST(KlSensitivity, ModelShiftBoundOnQuadrature) {
    // |E_P e^{-V/alpha} - E_Q e^{-V/alpha}| <= |mu_P - mu_Q| / sigma for Gaussians.
    const auto rule = gauss_hermite(16);
    const double sigma = 0.5;
    auto V = [](double x) { return 5.0 * (1.0 + std::tanh(x)); };
    Rng rng(10);
    for (int i = 0; i < 50; ++i) {
        const double mp = rng.uniform(-1, 1), mq = mp + rng.uniform(-0.5, 0.5), alpha = rng.uniform(0.5, 5.0);
        double ep = 0.0, eq = 0.0;
        for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
            ep += rule.weights[k] * std::exp(-V(mp + sigma * rule.nodes[k]) / alpha);
            eq += rule.weights[k] * std::exp(-V(mq + sigma * rule.nodes[k]) / alpha);
        }
        EXPECT_LE(std::abs(ep - eq), std::abs(mp - mq) / sigma + 1e-2);
    }
}
