#include <catch2/catch_amalgamated.hpp>

#include "glab/ot.hpp"
#include "glab/rng.hpp"

#include <cmath>

using namespace glab;

namespace {

Tensor pt(double v) { return Tensor::scalar(v); }

DiscretePdf random_pdf(Rng& rng, int max_points = 5, int dim = 1) {
    DiscretePdf p;
    const int n = rng.uniform_int(2, max_points);
    std::vector<double> w(static_cast<std::size_t>(n));
    double s = 0.0;
    for (double& x : w) {
        x = rng.uniform(0.05, 1.0);
        s += x;
    }
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (double& x : v) x = rng.uniform(-2.0, 2.0);
        p.support.push_back(Tensor({dim}, std::move(v)));
        if (i + 1 < n) {
            p.weights.push_back(w[static_cast<std::size_t>(i)] / s);
            acc += p.weights.back();
        } else {
            p.weights.push_back(1.0 - acc); // exact normalization
        }
    }
    return p;
}

DiscreteJoint random_joint(Rng& rng, const std::vector<Tensor>& xs, const std::vector<double>& xw) {
    DiscreteJoint j;
    j.x_points = xs;
    j.x_weights = xw;
    for (std::size_t i = 0; i < xs.size(); ++i) j.conditionals.push_back(random_pdf(rng, 3));
    return j;
}

} // namespace

TEST_CASE("two-dirac distance is the ground norm", "[ot]") {
    DiscretePdf P{{Tensor({2}, {1.0, 2.0})}, {1.0}};
    DiscretePdf Q{{Tensor({2}, {4.0, 6.0})}, {1.0}};
    CHECK(wasserstein_exact(P, Q, 2.0, 1.0).value == Catch::Approx(5.0).margin(1e-12));
    CHECK(wasserstein_exact(P, Q, 1.0, 1.0).value == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("split mass to a middle point", "[ot]") {
    DiscretePdf P{{pt(0.0), pt(2.0)}, {0.5, 0.5}};
    DiscretePdf Q{{pt(1.0)}, {1.0}};
    WassersteinResult r = wasserstein_exact(P, Q, 1.0, 1.0);
    CHECK(r.value == Catch::Approx(1.0).margin(1e-12));
    CHECK(r.coupling.at(0, 0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(r.coupling.at(1, 0) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("unnormalized inputs are rejected", "[ot]") {
    DiscretePdf bad{{pt(0.0), pt(1.0)}, {0.5, 0.6}};
    DiscretePdf Q{{pt(1.0)}, {1.0}};
    CHECK_THROWS_AS(wasserstein_exact(bad, Q), std::invalid_argument);
}

TEST_CASE("LP value equals brute-force vertex enumeration", "[ot]") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        Rng rng(seed + 100);
        DiscretePdf P = random_pdf(rng, 4);
        DiscretePdf Q = random_pdf(rng, 4);
        const double r_order = seed % 3 == 0 ? 2.0 : 1.0;
        const double gp = seed % 2 == 0 ? 2.0 : 1.0;
        const double lp = wasserstein_exact(P, Q, gp, r_order).value;
        const double bf = wasserstein_bruteforce(P, Q, gp, r_order);
        INFO("seed " << seed);
        CHECK(lp == Catch::Approx(bf).margin(1e-9));
    }
}

TEST_CASE("optimal coupling marginals match the inputs", "[ot]") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed + 7);
        DiscretePdf P = random_pdf(rng, 6, 2);
        DiscretePdf Q = random_pdf(rng, 6, 2);
        WassersteinResult r = wasserstein_exact(P, Q, 2.0, 1.0);
        for (int j = 0; j < r.coupling.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < r.coupling.cols; ++k) s += r.coupling.at(j, k);
            CHECK(s == Catch::Approx(P.weights[static_cast<std::size_t>(j)]).margin(1e-10));
        }
        for (int k = 0; k < r.coupling.cols; ++k) {
            double s = 0.0;
            for (int j = 0; j < r.coupling.rows; ++j) s += r.coupling.at(j, k);
            CHECK(s == Catch::Approx(Q.weights[static_cast<std::size_t>(k)]).margin(1e-10));
        }
    }
}

TEST_CASE("metric axioms on random instances", "[ot]") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed + 1000);
        DiscretePdf A = random_pdf(rng);
        DiscretePdf B = random_pdf(rng);
        DiscretePdf C = random_pdf(rng);
        const double ab = wasserstein_exact(A, B, 2.0, 1.0).value;
        const double ba = wasserstein_exact(B, A, 2.0, 1.0).value;
        const double aa = wasserstein_exact(A, A, 2.0, 1.0).value;
        const double bc = wasserstein_exact(B, C, 2.0, 1.0).value;
        const double ac = wasserstein_exact(A, C, 2.0, 1.0).value;
        INFO("seed " << seed);
        CHECK(std::fabs(ab - ba) < 1e-12);
        CHECK(aa < 1e-10);
        CHECK(ac <= ab + bc + 1e-9);
    }
}

TEST_CASE("KR duality: LP dual witness and weak duality", "[ot]") {
    SECTION("optimal witness closes the gap") {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            Rng rng(seed + 11);
            DiscretePdf P = random_pdf(rng);
            DiscretePdf Q = random_pdf(rng);
            auto witness = kr_optimal_witness(P, Q, 2.0);
            const double gap = kr_dual_gap(P, Q, witness, 2.0);
            INFO("seed " << seed);
            CHECK(std::fabs(gap) < 1e-8);
        }
    }
    SECTION("two-point instance: dual variables close the gap") {
        DiscretePdf P{{pt(0.0), pt(3.0)}, {0.5, 0.5}};
        DiscretePdf Q{{pt(1.0), pt(2.0)}, {0.5, 0.5}};
        auto witness = kr_optimal_witness(P, Q, 1.0);
        CHECK(std::fabs(kr_dual_gap(P, Q, witness, 1.0)) < 1e-10);
    }
    SECTION("zero witness gap equals W") {
        DiscretePdf P{{pt(0.0)}, {1.0}};
        DiscretePdf Q{{pt(2.0)}, {1.0}};
        const double gap = kr_dual_gap(P, Q, [](const Tensor&) { return 0.0; }, 2.0);
        CHECK(gap == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("random feasible witnesses never beat W") {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(seed + 321);
            DiscretePdf P = random_pdf(rng);
            DiscretePdf Q = random_pdf(rng);
            // a random 1-Lipschitz function: distance to a random anchor with slope in [-1,1]
            const double anchor = rng.uniform(-2.0, 2.0);
            const double slope = rng.uniform(-1.0, 1.0);
            auto witness = [anchor, slope](const Tensor& z) { return slope * std::fabs(z[0] - anchor); };
            const double gap = kr_dual_gap(P, Q, witness, 2.0);
            INFO("seed " << seed);
            CHECK(gap >= -1e-9);
        }
    }
    SECTION("Lipschitz-violating witness is rejected") {
        DiscretePdf P{{pt(0.0), pt(1.0)}, {0.5, 0.5}};
        DiscretePdf Q{{pt(2.0)}, {1.0}};
        CHECK_THROWS_AS(kr_dual_gap(P, Q, [](const Tensor& z) { return 3.0 * z[0]; }, 2.0),
                        std::invalid_argument);
    }
}

TEST_CASE("jw_exact on joints", "[ot]") {
    Rng rng(5);
    std::vector<Tensor> xs{pt(0.0), pt(1.0)};
    std::vector<double> xw{0.5, 0.5};

    SECTION("identical joints are at distance zero") {
        DiscreteJoint j1 = random_joint(rng, xs, xw);
        CHECK(jw_exact(j1, j1) < 1e-12);
    }
    SECTION("single X point reduces to plain Wasserstein") {
        std::vector<Tensor> one{pt(0.0)};
        std::vector<double> w1{1.0};
        DiscreteJoint j1 = random_joint(rng, one, w1);
        DiscreteJoint j2 = random_joint(rng, one, w1);
        CHECK(jw_exact(j1, j2) ==
              Catch::Approx(wasserstein_exact(j1.conditionals[0], j2.conditionals[0]).value).margin(1e-12));
    }
    SECTION("mismatched marginals are rejected") {
        DiscreteJoint j1 = random_joint(rng, xs, xw);
        DiscreteJoint j2 = random_joint(rng, xs, {0.25, 0.75});
        CHECK_THROWS_AS(jw_exact(j1, j2), std::invalid_argument);
    }
    SECTION("triangle inequality over 200 seeds") {
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            Rng r2(seed + 4000);
            DiscreteJoint a = random_joint(r2, xs, xw);
            DiscreteJoint b = random_joint(r2, xs, xw);
            DiscreteJoint c = random_joint(r2, xs, xw);
            INFO("seed " << seed);
            CHECK(jw_exact(a, c) <= jw_exact(a, b) + jw_exact(b, c) + 1e-9);
        }
    }
}

TEST_CASE("jw2 combined-norm distance and its sigma limit", "[ot]") {
    Rng rng(17);
    std::vector<Tensor> xs{pt(0.0), pt(1.0)};
    std::vector<double> xw{0.5, 0.5};

    SECTION("identical joints at distance zero") {
        DiscreteJoint j1 = random_joint(rng, xs, xw);
        CHECK(jw2_exact(j1, j1, 0.01) < 1e-12);
    }
    SECTION("sigma -> infinity recovers the Y-marginal Wasserstein") {
        DiscreteJoint j1 = random_joint(rng, xs, xw);
        DiscreteJoint j2 = random_joint(rng, xs, xw);
        // flatten Y marginals
        auto flat = [](const DiscreteJoint& j) {
            DiscretePdf p;
            double acc = 0.0;
            for (std::size_t i = 0; i < j.x_points.size(); ++i)
                for (std::size_t k = 0; k < j.conditionals[i].support.size(); ++k) {
                    p.support.push_back(j.conditionals[i].support[k]);
                    p.weights.push_back(j.x_weights[i] * j.conditionals[i].weights[k]);
                    acc += p.weights.back();
                }
            p.weights.back() += 1.0 - acc;
            return p;
        };
        const double big = jw2_exact(j1, j2, 1e9);
        const double wy = wasserstein_exact(flat(j1), flat(j2), 2.0, 1.0).value;
        CHECK(big == Catch::Approx(wy).margin(1e-6));
    }
    SECTION("values are monotone as sigma decreases and reach jw_exact") {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            Rng r2(seed + 900);
            DiscreteJoint a = random_joint(r2, xs, xw);
            DiscreteJoint b = random_joint(r2, xs, xw);
            const double jw = jw_exact(a, b);
            double prev = -1e300;
            for (double sigma : {1.0, 0.1, 0.01, 0.001}) {
                const double v = jw2_exact(a, b, sigma);
                INFO("seed " << seed << " sigma " << sigma);
                CHECK(v >= prev - 1e-9);
                prev = v;
            }
            CHECK(std::fabs(prev - jw) < 1e-3);
        }
    }
}
