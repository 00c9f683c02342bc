#pragma once

#include <cmath>
#include <vector>

#include "couplegen/rng.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::sample {

// Temperatures below this threshold short-circuit to a deterministic argmax
// that consumes no randomness.
constexpr double kArgmaxTemperature = 1e-6;

struct RowSample {
    int token = 0;
    // log softmax(logits / tau + gumbel)[token]: the perturbed-tempered
    // confidence of the drawn token; exactly 0 on the argmax path.
    double logscore = 0.0;
};

// Draws one token from softmax(logits / tau) by the Gumbel-max trick,
// consuming exactly V gumbels (none when tau is below the argmax threshold).
// Every categorical draw in the pipeline goes through this function, so
// samplers that must agree under a shared seed consume identical streams.
inline RowSample gumbel_row_sample(const double* logits, std::size_t V, double tau, Rng& rng) {
    RowSample out;
    if (tau < kArgmaxTemperature) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v)
            if (logits[v] > logits[best]) best = v;
        out.token = int(best);
        out.logscore = 0.0;
        return out;
    }
    std::vector<double> perturbed(V);
    for (std::size_t v = 0; v < V; ++v) perturbed[v] = logits[v] / tau + rng.gumbel();
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v)
        if (perturbed[v] > perturbed[best]) best = v;
    double mx = perturbed[best];
    double lse = 0.0;
    for (std::size_t v = 0; v < V; ++v) lse += std::exp(perturbed[v] - mx);
    out.token = int(best);
    out.logscore = -std::log(lse);  // (perturbed[best] - mx) - log sum = -log sum
    return out;
}

// Samples every row of a [N x V] logit matrix in row order.
inline std::vector<int> sample_rows(const Tensor& logits, double tau, Rng& rng,
                                    std::vector<double>* logscores = nullptr) {
    const std::size_t N = logits.rows(), V = logits.cols();
    std::vector<int> tokens(N);
    if (logscores) logscores->assign(N, 0.0);
    for (std::size_t r = 0; r < N; ++r) {
        const RowSample s = gumbel_row_sample(logits.data.data() + r * V, V, tau, rng);
        tokens[r] = s.token;
        if (logscores) (*logscores)[r] = s.logscore;
    }
    return tokens;
}

}  // namespace couplegen::sample
