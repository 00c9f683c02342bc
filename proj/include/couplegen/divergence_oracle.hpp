#pragma once

#include <functional>
#include <vector>

#include "couplegen/core_types.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::oracle {

// Exact distributions over {0..V-1}^T, enumerable whenever V^T stays small.
// Outcomes are indexed by base-V encoding with position 0 most significant.
struct ExactDistribution {
    int vocab_size = 0;
    int seq_len = 0;
    std::vector<double> p;

    ExactDistribution() = default;
    ExactDistribution(int v, int t);

    std::size_t support() const { return p.size(); }
    static std::size_t index_of(const TokenSequence& x, int vocab_size);
    static TokenSequence sequence_of(std::size_t idx, int vocab_size, int seq_len);
    void normalize();
    // Throws CheckFailure if entries are negative or the mass is off by > tol.
    void validate(double tol = 1e-9) const;
};

// Guard for enumerability; throws PrereqError beyond the cap.
std::size_t enumerable_support(int vocab_size, int seq_len, std::size_t cap = 1 << 16);

double exact_tv(const ExactDistribution& a, const ExactDistribution& b);
// Sum over p>0 of p*log(p/q); +inf when q vanishes on the support of p.
double exact_kl(const ExactDistribution& p, const ExactDistribution& q);

std::vector<std::vector<double>> marginals_of(const ExactDistribution& d);
ExactDistribution product_law(const std::vector<std::vector<double>>& marginals);
ExactDistribution empirical_law(const std::vector<TokenSequence>& samples, int vocab_size, int seq_len);

// Best total-variation fit within the fully factorized family, located by
// dense grid search (low-dimensional cases) refined by coordinate descent
// with multi-start. Result is an upper bound on the true infimum that is
// never worse than the product of marginals.
struct FactorizedSearchResult {
    double tv = 0.0;
    std::vector<std::vector<double>> marginals;
};
struct FactorizedSearchOptions {
    int grid_points = 1001;   // dense/per-coordinate grid resolution
    int sweeps = 200;         // coordinate-descent sweeps
    int extra_starts = 3;     // random restarts beyond marginals/uniform
};
FactorizedSearchResult best_factorized_tv(const ExactDistribution& p,
                                          const FactorizedSearchOptions& opts = {});

// Signed certificate for the two-position binary family: p00*p11 - p01*p10
// is zero for every factorized law, nonzero witnesses non-membership.
double pair_factorization_determinant(const ExactDistribution& p);

// Per-latent conditional law of a one-step decoder: maps z to [T x V]
// probability rows.
using ConditionalFn = std::function<Tensor(const std::vector<double>&)>;

struct QuadratureSpec {
    int points_per_dim = 81;
    double lo = -6.0, hi = 6.0;
    double mass_tol = 1e-6;
    int max_doublings = 3;
};

// Exact generated law of a one-step decoder under the standard normal prior,
// via trapezoid quadrature over the latent box. The unnormalized mass must
// land within mass_tol of 1 (auto-refining up to max_doublings, then throwing
// CheckFailure); the returned law is renormalized.
ExactDistribution enumerate_generated_marginal(const ConditionalFn& conditional, int latent_dim,
                                               int vocab_size, int seq_len, QuadratureSpec spec = {});

// Finite latent system for auditing the coupling bound: weights over grid
// atoms plus an exact conditional per atom.
struct DiscretizedLatentJoint {
    std::vector<double> weights;
    std::vector<ExactDistribution> conditionals;
};

struct BoundReport {
    double lhs_tv = 0.0;
    double decoder_tv_term = 0.0;
    double prior_tv_term = 0.0;
    double rhs_tv = 0.0;
    double eps_dec = 0.0;
    double eps_flow = 0.0;
    double rhs_kl = 0.0;
    bool tv_bound_holds = false;
    bool kl_bound_holds = false;
};

// Audits, on a finite system: TV(data law, generated law) against
//   (a) expected decoder TV + latent TV, and
//   (b) sqrt(eps_dec/2) + sqrt(eps_flow/2) with the KL epsilons.
BoundReport check_latent_matching_bound(const DiscretizedLatentJoint& joint,
                                        const std::vector<ExactDistribution>& decoder_conditionals,
                                        const std::vector<double>& prior_weights);

double discrete_tv(const std::vector<double>& a, const std::vector<double>& b);
double discrete_kl(const std::vector<double>& p, const std::vector<double>& q);

}  // namespace couplegen::oracle
