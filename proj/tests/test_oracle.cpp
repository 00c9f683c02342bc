// Exact divergence oracle: total variation, KL, factorized-family search,
// quadrature enumeration of decoder laws, and the latent-matching bound audit.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "couplegen/divergence_oracle.hpp"
#include "couplegen/rng.hpp"

using namespace couplegen;
using namespace couplegen::oracle;

namespace {

// The two-outcome equal-mass pair law: half on 00, half on 11.
ExactDistribution perfect_pair() {
    ExactDistribution d(2, 2);
    d.p = {0.5, 0.0, 0.0, 0.5};
    return d;
}

ExactDistribution random_law(int V, int T, Rng& rng) {
    ExactDistribution d(V, T);
    double tot = 0.0;
    for (double& v : d.p) {
        v = -std::log(rng.uniform());
        tot += v;
    }
    for (double& v : d.p) v /= tot;
    return d;
}

}  // namespace

TEST_CASE("indexing round-trips and is base-V with position 0 most significant") {
    CHECK(ExactDistribution::index_of({1, 0, 2}, 3) == 9 + 0 + 2);
    for (std::size_t idx = 0; idx < 81; ++idx) {
        const TokenSequence x = ExactDistribution::sequence_of(idx, 3, 4);
        CHECK(ExactDistribution::index_of(x, 3) == idx);
    }
    CHECK_THROWS_AS((void)enumerable_support(2, 64), PrereqError);
}

TEST_CASE("tv and kl agree with hand values") {
    ExactDistribution a(2, 1), b(2, 1);
    a.p = {0.8, 0.2};
    b.p = {0.5, 0.5};
    CHECK(exact_tv(a, b) == doctest::Approx(0.3).epsilon(1e-12));
    // KL(Bernoulli(0.8) || Bernoulli(0.5)) = 0.8 ln 1.6 + 0.2 ln 0.4
    const double want = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
    CHECK(exact_kl(a, b) == doctest::Approx(want).epsilon(1e-12));
    CHECK(want == doctest::Approx(0.19274).epsilon(1e-4));

    ExactDistribution c(2, 1);
    c.p = {1.0, 0.0};
    CHECK(std::isinf(exact_kl(a, c)));
    CHECK(exact_kl(c, a) == doctest::Approx(std::log(1.0 / 0.8)).epsilon(1e-12));
}

TEST_CASE("pinsker holds on a thousand random pairs") {
    Rng rng(2024);
    for (int i = 0; i < 1000; ++i) {
        const int V = 2 + int(rng.below(3));
        const int T = 1 + int(rng.below(3));
        const ExactDistribution p = random_law(V, T, rng);
        const ExactDistribution q = random_law(V, T, rng);
        const double tv = exact_tv(p, q);
        const double kl = exact_kl(p, q);
        CHECK(tv <= std::sqrt(kl / 2.0) + 1e-12);
        CHECK(tv >= 0.0);
        CHECK(tv <= 1.0 + 1e-12);
        CHECK(kl >= 0.0);
    }
}

TEST_CASE("marginals, product law, empirical law") {
    const ExactDistribution d = perfect_pair();
    const auto m = marginals_of(d);
    REQUIRE(m.size() == 2);
    CHECK(m[0][0] == doctest::Approx(0.5));
    CHECK(m[1][1] == doctest::Approx(0.5));

    const ExactDistribution prod = product_law(m);
    CHECK(prod.p[0] == doctest::Approx(0.25));
    CHECK(prod.p[1] == doctest::Approx(0.25));
    // TV between the pair law and its product of marginals is exactly 1/2.
    CHECK(exact_tv(d, prod) == doctest::Approx(0.5).epsilon(1e-12));

    std::vector<TokenSequence> samples = {{0, 0}, {1, 1}, {0, 0}, {1, 1}};
    const ExactDistribution emp = empirical_law(samples, 2, 2);
    CHECK(exact_tv(emp, d) == doctest::Approx(0.0));
}

TEST_CASE("factorized family floor for the pair law") {
    // Over product laws q(x1)q(x2), the minimal TV to the pair law is
    // 2a^2 - 2a + 1 - a^2/2 ... minimized on the diagonal marginal a = 1/sqrt(2):
    // value sqrt(2) - 1 = 0.41421356...
    const ExactDistribution d = perfect_pair();
    const FactorizedSearchResult r = best_factorized_tv(d);
    CHECK(r.tv == doctest::Approx(std::sqrt(2.0) - 1.0).epsilon(1e-6));
    // Optimal marginals put mass 1/sqrt(2) on one symbol per position, the
    // same symbol at both positions (two mirror-symmetric optima exist).
    const double heavy0 = std::max(r.marginals[0][0], r.marginals[0][1]);
    const double heavy1 = std::max(r.marginals[1][0], r.marginals[1][1]);
    CHECK(heavy0 == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-4));
    CHECK(heavy1 == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-4));
    const bool same_symbol = (r.marginals[0][0] > 0.5) == (r.marginals[1][0] > 0.5);
    CHECK(same_symbol);
    // Never worse than the product of marginals.
    CHECK(r.tv <= 0.5 + 1e-12);
}

TEST_CASE("factorized search recovers exact zero on product laws") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const int V = 2 + int(rng.below(2));
        const int T = 2 + int(rng.below(2));
        std::vector<std::vector<double>> m;
        for (int t = 0; t < T; ++t) {
            std::vector<double> q(std::size_t(V), 0.0);
            double tot = 0.0;
            for (double& v : q) {
                v = 0.05 - std::log(rng.uniform());
                tot += v;
            }
            for (double& v : q) v /= tot;
            m.push_back(q);
        }
        const ExactDistribution d = product_law(m);
        const FactorizedSearchResult r = best_factorized_tv(d);
        CHECK(r.tv <= 5e-3);
    }
}

TEST_CASE("pair determinant certifies non-factorizability") {
    const ExactDistribution d = perfect_pair();
    CHECK(pair_factorization_determinant(d) == doctest::Approx(0.25).epsilon(1e-12));
    // Any factorized law has zero determinant.
    std::vector<std::vector<double>> m = {{0.3, 0.7}, {0.6, 0.4}};
    CHECK(pair_factorization_determinant(product_law(m)) == doctest::Approx(0.0).epsilon(1e-12));
    ExactDistribution bad(3, 2);
    CHECK_THROWS_AS((void)pair_factorization_determinant(bad), PrereqError);
}

TEST_CASE("quadrature enumeration integrates a constant decoder exactly") {
    // Decoder ignoring z: generated law must equal its fixed product law.
    const ConditionalFn f = [](const std::vector<double>&) {
        Tensor probs = Tensor::zeros({2, 2});
        probs.at(0, 0) = 0.8;
        probs.at(0, 1) = 0.2;
        probs.at(1, 0) = 0.3;
        probs.at(1, 1) = 0.7;
        return probs;
    };
    const ExactDistribution g = enumerate_generated_marginal(f, 1, 2, 2);
    CHECK(g.p[ExactDistribution::index_of({0, 1}, 2)] == doctest::Approx(0.8 * 0.7).epsilon(1e-9));
    CHECK(g.p[ExactDistribution::index_of({1, 0}, 2)] == doctest::Approx(0.3 * 0.2).epsilon(1e-9));
}

TEST_CASE("quadrature enumeration matches closed-form moments of a smooth decoder") {
    // On-probability Phi(z_0) (standard normal cdf). Exact moments:
    //   E[Phi(Z)]   = 1/2            (symmetry)
    //   E[Phi(Z)^2] = 1/3            (Z is the max of three iid normals w.p. 1/3)
    // so p11 = 1/3, p10 = p01 = 1/6, p00 = 1/3, in any latent dimension.
    auto cdf_decoder = [](const std::vector<double>& z) {
        Tensor probs = Tensor::zeros({2, 2});
        const double on = 0.5 * std::erfc(-z[0] / std::sqrt(2.0));
        for (std::size_t t = 0; t < 2; ++t) {
            probs.at(t, 1) = on;
            probs.at(t, 0) = 1.0 - on;
        }
        return probs;
    };
    for (int dim = 1; dim <= 2; ++dim) {
        const ExactDistribution g = enumerate_generated_marginal(cdf_decoder, dim, 2, 2);
        CHECK(g.p[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-8));
        CHECK(g.p[2] == doctest::Approx(1.0 / 6.0).epsilon(1e-8));
        CHECK(g.p[1] == doctest::Approx(1.0 / 6.0).epsilon(1e-8));
        CHECK(g.p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-8));
        g.validate(1e-9);
    }
}

TEST_CASE("quadrature mass check fails loudly when the box is truncated") {
    const ConditionalFn f = [](const std::vector<double>&) {
        Tensor probs = Tensor::full({1, 2}, 0.5);
        return probs;
    };
    QuadratureSpec spec;
    spec.lo = -1.0;  // truncates most of the normal mass
    spec.hi = 1.0;
    spec.max_doublings = 1;
    CHECK_THROWS_AS((void)enumerate_generated_marginal(f, 1, 2, 1, spec), CheckFailure);
}

TEST_CASE("latent matching bound holds across random finite systems") {
    Rng rng(99);
    int strict = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int J = 2 + int(rng.below(7));  // latent atoms
        DiscretizedLatentJoint joint;
        std::vector<ExactDistribution> dec;
        std::vector<double> prior(std::size_t(J), 0.0);
        double wtot = 0.0, ptot = 0.0;
        for (int j = 0; j < J; ++j) {
            joint.weights.push_back(-std::log(rng.uniform()));
            wtot += joint.weights.back();
            prior[std::size_t(j)] = -std::log(rng.uniform());
            ptot += prior[std::size_t(j)];
            joint.conditionals.push_back(random_law(2, 2, rng));
            dec.push_back(random_law(2, 2, rng));
        }
        for (double& v : joint.weights) v /= wtot;
        for (double& v : prior) v /= ptot;

        const BoundReport r = check_latent_matching_bound(joint, dec, prior);
        CHECK(r.tv_bound_holds);
        CHECK(r.kl_bound_holds);
        CHECK(r.lhs_tv >= 0.0);
        CHECK(r.rhs_tv >= r.lhs_tv - 1e-12);
        if (r.lhs_tv < r.rhs_tv - 1e-9) ++strict;
    }
    // The bound is generically strict: mixing can only cancel mass.
    CHECK(strict > 900);
}

TEST_CASE("bound report is tight when decoder and prior match exactly") {
    DiscretizedLatentJoint joint;
    joint.weights = {0.5, 0.5};
    joint.conditionals.push_back(perfect_pair());
    ExactDistribution other(2, 2);
    other.p = {0.25, 0.25, 0.25, 0.25};
    joint.conditionals.push_back(other);
    const BoundReport r = check_latent_matching_bound(joint, joint.conditionals, joint.weights);
    CHECK(r.lhs_tv == doctest::Approx(0.0));
    CHECK(r.rhs_tv == doctest::Approx(0.0));
    CHECK(r.eps_dec == doctest::Approx(0.0));
    CHECK(r.eps_flow == doctest::Approx(0.0));
    CHECK(r.tv_bound_holds);
    CHECK(r.kl_bound_holds);
}
