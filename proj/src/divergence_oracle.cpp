#include "couplegen/divergence_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "couplegen/kernels.hpp"
#include "couplegen/rng.hpp"

namespace couplegen::oracle {

ExactDistribution::ExactDistribution(int v, int t) : vocab_size(v), seq_len(t) {
    p.assign(enumerable_support(v, t), 0.0);
}

std::size_t enumerable_support(int vocab_size, int seq_len, std::size_t cap) {
    if (vocab_size < 1 || seq_len < 1) throw PrereqError("oracle: need vocab_size, seq_len >= 1");
    std::size_t n = 1;
    for (int i = 0; i < seq_len; ++i) {
        if (n > cap / std::size_t(vocab_size))
            throw PrereqError("oracle: V^T exceeds enumerable cap");
        n *= std::size_t(vocab_size);
    }
    return n;
}

std::size_t ExactDistribution::index_of(const TokenSequence& x, int vocab_size) {
    std::size_t idx = 0;
    for (int tok : x) {
        if (tok < 0 || tok >= vocab_size) throw std::invalid_argument("oracle: token out of range");
        idx = idx * std::size_t(vocab_size) + std::size_t(tok);
    }
    return idx;
}

TokenSequence ExactDistribution::sequence_of(std::size_t idx, int vocab_size, int seq_len) {
    TokenSequence x(static_cast<std::size_t>(seq_len), 0);
    for (int t = seq_len - 1; t >= 0; --t) {
        x[std::size_t(t)] = int(idx % std::size_t(vocab_size));
        idx /= std::size_t(vocab_size);
    }
    return x;
}

void ExactDistribution::normalize() {
    const double total = kernels::sum(p.data(), p.size());
    if (!(total > 0.0)) throw CheckFailure("oracle: cannot normalize zero-mass distribution");
    for (double& v : p) v /= total;
}

void ExactDistribution::validate(double tol) const {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw CheckFailure("oracle: negative probability entry");
        total += v;
    }
    if (std::abs(total - 1.0) > tol) throw CheckFailure("oracle: mass deviates from 1");
}

double discrete_tv(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("discrete_tv: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return 0.5 * s;
}

double discrete_kl(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("discrete_kl: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
        s += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(0.0, s);
}

double exact_tv(const ExactDistribution& a, const ExactDistribution& b) {
    if (a.vocab_size != b.vocab_size || a.seq_len != b.seq_len)
        throw std::invalid_argument("exact_tv: domain mismatch");
    return discrete_tv(a.p, b.p);
}

double exact_kl(const ExactDistribution& p, const ExactDistribution& q) {
    if (p.vocab_size != q.vocab_size || p.seq_len != q.seq_len)
        throw std::invalid_argument("exact_kl: domain mismatch");
    return discrete_kl(p.p, q.p);
}

std::vector<std::vector<double>> marginals_of(const ExactDistribution& d) {
    const int V = d.vocab_size, T = d.seq_len;
    std::vector<std::vector<double>> m(std::size_t(T), std::vector<double>(std::size_t(V), 0.0));
    for (std::size_t idx = 0; idx < d.p.size(); ++idx) {
        std::size_t rem = idx;
        for (int t = T - 1; t >= 0; --t) {
            m[std::size_t(t)][rem % std::size_t(V)] += d.p[idx];
            rem /= std::size_t(V);
        }
    }
    return m;
}

ExactDistribution product_law(const std::vector<std::vector<double>>& marginals) {
    const int T = int(marginals.size());
    if (T == 0) throw std::invalid_argument("product_law: empty marginals");
    const int V = int(marginals[0].size());
    ExactDistribution d(V, T);
    for (const auto& q : marginals)
        if (int(q.size()) != V) throw std::invalid_argument("product_law: ragged marginals");
    for (std::size_t idx = 0; idx < d.p.size(); ++idx) {
        double prod = 1.0;
        std::size_t rem = idx;
        for (int t = T - 1; t >= 0; --t) {
            prod *= marginals[std::size_t(t)][rem % std::size_t(V)];
            rem /= std::size_t(V);
        }
        d.p[idx] = prod;
    }
    return d;
}

ExactDistribution empirical_law(const std::vector<TokenSequence>& samples, int vocab_size, int seq_len) {
    ExactDistribution d(vocab_size, seq_len);
    if (samples.empty()) throw std::invalid_argument("empirical_law: no samples");
    const double w = 1.0 / double(samples.size());
    for (const auto& x : samples) {
        if (int(x.size()) != seq_len) throw std::invalid_argument("empirical_law: length mismatch");
        d.p[ExactDistribution::index_of(x, vocab_size)] += w;
    }
    return d;
}

namespace {

double tv_to_product(const ExactDistribution& p, const std::vector<std::vector<double>>& q) {
    const int V = p.vocab_size, T = p.seq_len;
    double s = 0.0;
    for (std::size_t idx = 0; idx < p.p.size(); ++idx) {
        double prod = 1.0;
        std::size_t rem = idx;
        for (int t = T - 1; t >= 0; --t) {
            prod *= q[std::size_t(t)][rem % std::size_t(V)];
            rem /= std::size_t(V);
        }
        s += std::abs(p.p[idx] - prod);
    }
    return 0.5 * s;
}

// All compositions of `grid` units into V buckets, emitted as simplex points.
void simplex_grid(int V, int grid, std::vector<std::vector<double>>& out) {
    std::vector<int> parts(std::size_t(V), 0);
    const double inv = 1.0 / double(grid);
    std::function<void(int, int)> rec = [&](int pos, int left) {
        if (pos == V - 1) {
            parts[std::size_t(pos)] = left;
            std::vector<double> q(static_cast<std::size_t>(V));
            for (int i = 0; i < V; ++i) q[std::size_t(i)] = parts[std::size_t(i)] * inv;
            out.push_back(std::move(q));
            return;
        }
        for (int k = 0; k <= left; ++k) {
            parts[std::size_t(pos)] = k;
            rec(pos + 1, left - k);
        }
    };
    rec(0, grid);
}

// Move mass between coordinate pairs of q[t]; the objective is piecewise
// linear in the transfer, so a grid plus two refinement passes nails the
// 1-d optimum to ~1e-8.
double refine_position(const ExactDistribution& p, std::vector<std::vector<double>>& q, int t) {
    const int V = p.vocab_size;
    double best = tv_to_product(p, q);
    for (int i = 0; i < V; ++i)
        for (int j = 0; j < V; ++j) {
            if (i == j) continue;
            double lo = -q[std::size_t(t)][std::size_t(j)];
            double hi = q[std::size_t(t)][std::size_t(i)];
            for (int level = 0; level < 3; ++level) {
                const int steps = 64;
                double best_delta = 0.0;
                double best_local = best;
                for (int s = 0; s <= steps; ++s) {
                    const double delta = lo + (hi - lo) * double(s) / double(steps);
                    auto qt = q[std::size_t(t)];
                    qt[std::size_t(i)] -= delta;
                    qt[std::size_t(j)] += delta;
                    if (qt[std::size_t(i)] < 0.0 || qt[std::size_t(j)] < 0.0) continue;
                    std::swap(q[std::size_t(t)], qt);
                    const double tv = tv_to_product(p, q);
                    std::swap(q[std::size_t(t)], qt);
                    if (tv < best_local) {
                        best_local = tv;
                        best_delta = delta;
                    }
                }
                const double width = (hi - lo) / double(steps);
                lo = best_delta - width;
                hi = best_delta + width;
                if (best_local < best) {
                    best = best_local;
                    q[std::size_t(t)][std::size_t(i)] -= best_delta;
                    q[std::size_t(t)][std::size_t(j)] += best_delta;
                    lo = -q[std::size_t(t)][std::size_t(j)];
                    hi = q[std::size_t(t)][std::size_t(i)];
                }
            }
        }
    return best;
}

double coordinate_descent(const ExactDistribution& p, std::vector<std::vector<double>>& q, int sweeps) {
    double best = tv_to_product(p, q);
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        const double before = best;
        for (int t = 0; t < p.seq_len; ++t) best = refine_position(p, q, t);
        if (before - best < 1e-12) break;
    }
    return best;
}

}  // namespace

FactorizedSearchResult best_factorized_tv(const ExactDistribution& p,
                                          const FactorizedSearchOptions& opts) {
    const int V = p.vocab_size, T = p.seq_len;
    enumerable_support(V, T);
    if (V > 8) throw PrereqError("factorized search: vocab too large for simplex grids");
    p.validate(1e-6);

    FactorizedSearchResult best;
    best.tv = std::numeric_limits<double>::infinity();
    auto consider = [&](std::vector<std::vector<double>> q) {
        const double tv = coordinate_descent(p, q, opts.sweeps);
        if (tv < best.tv) {
            best.tv = tv;
            best.marginals = std::move(q);
        }
    };

    // Dense grid over the full parameter space when it is 1- or 2-dimensional
    // (binary vocab, up to two positions); otherwise dense per-position grids
    // seed the coordinate descent below.
    if (V == 2 && T <= 2) {
        const int G = std::max(3, opts.grid_points);
        std::vector<std::vector<double>> q(std::size_t(T), std::vector<double>{0.5, 0.5});
        double coarse_best = std::numeric_limits<double>::infinity();
        std::vector<double> coarse_params(std::size_t(T), 0.5);
        std::vector<double> params(std::size_t(T), 0.0);
        const std::size_t total = T == 1 ? std::size_t(G) : std::size_t(G) * std::size_t(G);
        for (std::size_t flat = 0; flat < total; ++flat) {
            params[0] = double(flat % std::size_t(G)) / double(G - 1);
            if (T == 2) params[1] = double(flat / std::size_t(G)) / double(G - 1);
            for (int t = 0; t < T; ++t) q[std::size_t(t)] = {params[std::size_t(t)], 1.0 - params[std::size_t(t)]};
            const double tv = tv_to_product(p, q);
            if (tv < coarse_best) {
                coarse_best = tv;
                coarse_params = params;
            }
        }
        for (int t = 0; t < T; ++t)
            q[std::size_t(t)] = {coarse_params[std::size_t(t)], 1.0 - coarse_params[std::size_t(t)]};
        consider(q);
    } else {
        // Per-position dense simplex scan from the product-of-marginals start.
        const int grid = V == 2 ? std::max(3, opts.grid_points) : (V == 3 ? 60 : 24);
        auto q = marginals_of(p);
        for (int t = 0; t < T; ++t) {
            std::vector<std::vector<double>> cands;
            simplex_grid(V, grid, cands);
            double best_local = tv_to_product(p, q);
            std::vector<double> best_q = q[std::size_t(t)];
            for (auto& cand : cands) {
                std::swap(q[std::size_t(t)], cand);
                const double tv = tv_to_product(p, q);
                std::swap(q[std::size_t(t)], cand);
                if (tv < best_local) {
                    best_local = tv;
                    best_q = cand;
                }
            }
            q[std::size_t(t)] = best_q;
        }
        consider(q);
    }

    consider(marginals_of(p));
    consider(std::vector<std::vector<double>>(std::size_t(T),
                                              std::vector<double>(std::size_t(V), 1.0 / double(V))));
    Rng rng = Rng::derive(0x5eedu, 11);
    for (int s = 0; s < opts.extra_starts; ++s) {
        std::vector<std::vector<double>> q(std::size_t(T), std::vector<double>(std::size_t(V), 0.0));
        for (auto& qt : q) {
            double tot = 0.0;
            for (double& v : qt) {
                v = -std::log(rng.uniform());
                tot += v;
            }
            for (double& v : qt) v /= tot;
        }
        consider(std::move(q));
    }
    return best;
}

double pair_factorization_determinant(const ExactDistribution& p) {
    if (p.vocab_size != 2 || p.seq_len != 2)
        throw PrereqError("pair certificate: defined for V=2, T=2 only");
    return p.p[0] * p.p[3] - p.p[1] * p.p[2];
}

ExactDistribution enumerate_generated_marginal(const ConditionalFn& conditional, int latent_dim,
                                               int vocab_size, int seq_len, QuadratureSpec spec) {
    if (latent_dim < 1 || latent_dim > 2)
        throw PrereqError("enumerate: quadrature supports latent_dim 1 or 2");
    const std::size_t support = enumerable_support(vocab_size, seq_len);

    int points = std::max(3, spec.points_per_dim);
    for (int attempt = 0; ; ++attempt) {
        const double h = (spec.hi - spec.lo) / double(points - 1);
        std::vector<double> node(static_cast<std::size_t>(points));
        std::vector<double> wt(static_cast<std::size_t>(points));
        for (int k = 0; k < points; ++k) {
            const double x = spec.lo + h * double(k);
            node[std::size_t(k)] = x;
            const double phi = std::exp(-0.5 * x * x) / std::sqrt(6.283185307179586477);
            wt[std::size_t(k)] = h * phi * ((k == 0 || k == points - 1) ? 0.5 : 1.0);
        }
        const std::size_t npts = latent_dim == 1 ? std::size_t(points)
                                                 : std::size_t(points) * std::size_t(points);

        // Fixed-size chunks of grid points accumulate into private partials
        // combined in chunk order, keeping the result identical at any
        // worker count.
        const std::size_t chunk = 64;
        const std::size_t nchunks = (npts + chunk - 1) / chunk;
        std::vector<std::vector<double>> partial(nchunks);
        bool bad_conditional = false;
#pragma omp parallel for schedule(dynamic, 1) if (kernels::parallel_enabled())
        for (std::ptrdiff_t ci = 0; ci < std::ptrdiff_t(nchunks); ++ci) {
            std::vector<double> acc(support, 0.0);
            const std::size_t b = std::size_t(ci) * chunk;
            const std::size_t e = std::min(npts, b + chunk);
            for (std::size_t flat = b; flat < e; ++flat) {
                std::vector<double> z(static_cast<std::size_t>(latent_dim));
                double w = 1.0;
                if (latent_dim == 1) {
                    z[0] = node[flat];
                    w = wt[flat];
                } else {
                    const std::size_t i = flat / std::size_t(points), j = flat % std::size_t(points);
                    z[0] = node[i];
                    z[1] = node[j];
                    w = wt[i] * wt[j];
                }
                const Tensor probs = conditional(z);
                if (probs.rows() != std::size_t(seq_len) || probs.cols() != std::size_t(vocab_size)) {
#pragma omp atomic write
                    bad_conditional = true;
                    continue;
                }
                for (std::size_t idx = 0; idx < support; ++idx) {
                    double prod = w;
                    std::size_t rem = idx;
                    for (int t = seq_len - 1; t >= 0; --t) {
                        prod *= probs.at(std::size_t(t), rem % std::size_t(vocab_size));
                        rem /= std::size_t(vocab_size);
                    }
                    acc[idx] += prod;
                }
            }
            partial[std::size_t(ci)] = std::move(acc);
        }
        if (bad_conditional) throw CheckFailure("enumerate: conditional returned wrong shape");

        ExactDistribution d(vocab_size, seq_len);
        for (const auto& acc : partial)
            for (std::size_t idx = 0; idx < support; ++idx) d.p[idx] += acc[idx];

        const double mass = kernels::sum(d.p.data(), d.p.size());
        if (std::abs(mass - 1.0) <= spec.mass_tol) {
            d.normalize();
            return d;
        }
        if (attempt >= spec.max_doublings)
            throw CheckFailure("enumerate: quadrature mass off by " + std::to_string(mass - 1.0) +
                               " at max resolution");
        points = 2 * points - 1;
    }
}

BoundReport check_latent_matching_bound(const DiscretizedLatentJoint& joint,
                                        const std::vector<ExactDistribution>& decoder_conditionals,
                                        const std::vector<double>& prior_weights) {
    const std::size_t J = joint.weights.size();
    if (joint.conditionals.size() != J || decoder_conditionals.size() != J || prior_weights.size() != J)
        throw std::invalid_argument("bound check: atom count mismatch");
    if (J == 0) throw std::invalid_argument("bound check: empty system");
    const int V = joint.conditionals[0].vocab_size, T = joint.conditionals[0].seq_len;
    const std::size_t support = enumerable_support(V, T);

    auto check_weights = [](const std::vector<double>& w, const char* what) {
        double total = 0.0;
        for (double v : w) {
            if (!(v >= 0.0)) throw CheckFailure(std::string("bound check: negative ") + what);
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw CheckFailure(std::string("bound check: ") + what + " not normalized");
    };
    check_weights(joint.weights, "latent weights");
    check_weights(prior_weights, "prior weights");

    std::vector<double> p_data(support, 0.0), p_gen(support, 0.0);
    BoundReport r;
    for (std::size_t j = 0; j < J; ++j) {
        joint.conditionals[j].validate(1e-9);
        decoder_conditionals[j].validate(1e-9);
        for (std::size_t idx = 0; idx < support; ++idx) {
            p_data[idx] += joint.weights[j] * joint.conditionals[j].p[idx];
            p_gen[idx] += prior_weights[j] * decoder_conditionals[j].p[idx];
        }
        r.decoder_tv_term +=
            joint.weights[j] * discrete_tv(joint.conditionals[j].p, decoder_conditionals[j].p);
        const double kl_j = discrete_kl(joint.conditionals[j].p, decoder_conditionals[j].p);
        r.eps_dec += joint.weights[j] * kl_j;
    }
    r.lhs_tv = discrete_tv(p_data, p_gen);
    r.prior_tv_term = discrete_tv(joint.weights, prior_weights);
    r.rhs_tv = r.decoder_tv_term + r.prior_tv_term;
    r.eps_flow = discrete_kl(joint.weights, prior_weights);
    r.rhs_kl = std::sqrt(std::max(0.0, r.eps_dec) / 2.0) + std::sqrt(std::max(0.0, r.eps_flow) / 2.0);
    const double slack = 1e-12;
    r.tv_bound_holds = r.lhs_tv <= r.rhs_tv + slack;
    r.kl_bound_holds = r.lhs_tv <= r.rhs_kl + slack;
    return r;
}

}  // namespace couplegen::oracle
