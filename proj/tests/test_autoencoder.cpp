// Reparameterized encoder, reconstruction head, and the two closed-form
// losses (token cross-entropy, KL to the standard normal).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "couplegen/autoencoder.hpp"
#include "couplegen/config.hpp"

using namespace couplegen;
using namespace couplegen::model;

namespace {

ExperimentConfig tiny_mlp_config() {
    ExperimentConfig cfg = validate_config(profile_json("toy-motif"));  // V=4, T=4
    cfg.model.latent_dim = 3;
    cfg.model.embed_dim = 5;
    cfg.model.encoder_width = 16;
    cfg.model.encoder_depth = 1;
    cfg.stage_a.latent_noise_std = 0.5;
    return cfg;
}

ExperimentConfig tiny_conv_config() {
    ExperimentConfig cfg = validate_config(profile_json("mnist-binary-mini"));
    cfg.data.seq_len = 64;  // 8x8 grid
    cfg.model.grid_h = 8;
    cfg.model.grid_w = 8;
    cfg.model.latent_grid_h = 2;
    cfg.model.latent_grid_w = 2;
    cfg.model.latent_channels = 3;
    cfg.model.latent_dim = 12;
    cfg.model.embed_dim = 4;
    cfg.model.encoder_width = 6;
    return cfg;
}

std::vector<TokenSequence> toy_batch(int B, int T, int V, Rng& rng) {
    std::vector<TokenSequence> out;
    for (int b = 0; b < B; ++b) {
        TokenSequence x(std::size_t(T), 0);
        for (auto& tok : x) tok = int(rng.below(std::size_t(V)));
        out.push_back(x);
    }
    return out;
}

double loss_value(const ExperimentConfig& cfg, ReparamEncoder& enc, ReconstructionHead& head,
                  const std::vector<TokenSequence>& batch, const Tensor& eps) {
    ag::Tape t;
    std::vector<ag::Param*> params;
    enc.collect(params);
    head.collect(params);
    for (auto* p : params) (void)t.param(*p);
    const EncoderOutput eo = enc.encode_with_eps(t, batch, eps);
    const ag::Var logits = head.logits_rows(t, eo.sampled);
    const ag::Var rec = reconstruction_loss(t, logits, batch);
    const ag::Var kl = kl_to_standard_normal(t, eo.mean, cfg.stage_a.latent_noise_std);
    return t.val(ag::add(rec, kl)).data[0];
}

}  // namespace

TEST_CASE("kl closed form matches hand values and vanishes only at the base") {
    ag::Tape t;
    // One latent dim, zero mean, s = 0.5: KL = (0.25 - 1 - ln 0.25)/2 = 0.31815...
    ag::Var m0 = t.constant(Tensor::zeros({1, 1}));
    const double got = t.val(kl_to_standard_normal(t, m0, 0.5)).data[0];
    const double want = 0.5 * (0.25 - 1.0 - std::log(0.25));
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.3181471805599453).epsilon(1e-12));

    // Zero mean, unit noise: exactly zero.
    const double zero = t.val(kl_to_standard_normal(t, m0, 1.0)).data[0];
    CHECK(zero == doctest::Approx(0.0).epsilon(1e-15));

    // Nonzero mean adds mean^2/2 per dim, averaged over the batch.
    Tensor m({2, 2}, {0.3, -0.7, 0.1, 0.0});
    ag::Var mv = t.constant(m);
    const double got2 = t.val(kl_to_standard_normal(t, mv, 1.0)).data[0];
    const double want2 = 0.5 * (0.09 + 0.49 + 0.01) / 2.0;
    CHECK(got2 == doctest::Approx(want2).epsilon(1e-12));
}

TEST_CASE("kl closed form agrees with a monte carlo estimate") {
    // KL = E_u [ log N(u; m, s^2) - log N(u; 0, 1) ], u ~ N(m, s^2 I).
    const double s = 0.5;
    Tensor m({1, 2}, {0.3, -0.7});
    ag::Tape t;
    const double closed = t.val(kl_to_standard_normal(t, t.constant(m), s)).data[0];

    Rng rng(1234);
    const int n = 400000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double term = 0.0;
        for (int d = 0; d < 2; ++d) {
            const double u = m.data[std::size_t(d)] + s * rng.normal();
            const double lq = -0.5 * std::log(2.0 * M_PI * s * s) -
                              0.5 * (u - m.data[std::size_t(d)]) * (u - m.data[std::size_t(d)]) / (s * s);
            const double lp = -0.5 * std::log(2.0 * M_PI) - 0.5 * u * u;
            term += lq - lp;
        }
        acc += term;
    }
    CHECK(closed == doctest::Approx(acc / n).epsilon(1e-2));
}

TEST_CASE("reconstruction loss at uniform logits is seq_len * ln(vocab)") {
    ag::Tape t;
    const int B = 3, T = 4, V = 4;
    ag::Var logits = t.constant(Tensor::zeros({std::size_t(B * T), std::size_t(V)}));
    Rng rng(5);
    const auto batch = toy_batch(B, T, V, rng);
    const double got = t.val(reconstruction_loss(t, logits, batch)).data[0];
    CHECK(got == doctest::Approx(double(T) * std::log(double(V))).epsilon(1e-12));
    CHECK(got == doctest::Approx(5.545177444479562).epsilon(1e-12));
}

TEST_CASE("tape and numeric encoder paths agree bitwise") {
    for (const bool conv : {false, true}) {
        ExperimentConfig cfg = conv ? tiny_conv_config() : tiny_mlp_config();
        Rng init = Rng::derive(7, 1);
        ReparamEncoder enc(cfg, init);
        Rng rng(11);
        const auto batch = toy_batch(4, cfg.data.seq_len, cfg.data.vocab_size, rng);

        ag::Tape t;
        std::vector<ag::Param*> params;
        enc.collect(params);
        for (auto* p : params) (void)t.param(*p);
        Tensor eps = Tensor::zeros({4, std::size_t(cfg.model.latent_dim)});
        const EncoderOutput eo = enc.encode_with_eps(t, batch, eps);
        const Tensor numeric = enc.mean_numeric(batch);
        const Tensor& taped = t.val(eo.mean);
        REQUIRE(taped.same_shape(numeric));
        for (std::size_t i = 0; i < numeric.size(); ++i) CHECK(taped.data[i] == numeric.data[i]);
        // With zero eps the sampled latent equals the mean.
        for (std::size_t i = 0; i < numeric.size(); ++i)
            CHECK(t.val(eo.sampled).data[i] == numeric.data[i]);
    }
}

TEST_CASE("encoder noise enters with the configured scale") {
    ExperimentConfig cfg = tiny_mlp_config();
    Rng init = Rng::derive(7, 1);
    ReparamEncoder enc(cfg, init);
    Rng rng(11);
    const auto batch = toy_batch(2, cfg.data.seq_len, cfg.data.vocab_size, rng);
    ag::Tape t;
    Tensor eps = Tensor::full({2, 3}, 2.0);
    const EncoderOutput eo = enc.encode_with_eps(t, batch, eps);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(t.val(eo.sampled).data[i] ==
              doctest::Approx(t.val(eo.mean).data[i] + 0.5 * 2.0).epsilon(1e-15));
}

TEST_CASE("full loss gradients match central finite differences") {
    for (const bool conv : {false, true}) {
        ExperimentConfig cfg = conv ? tiny_conv_config() : tiny_mlp_config();
        Rng init = Rng::derive(42, 1);
        ReparamEncoder enc(cfg, init);
        ReconstructionHead head(cfg, init);
        Rng rng(3);
        const auto batch = toy_batch(2, cfg.data.seq_len, cfg.data.vocab_size, rng);
        Tensor eps = Tensor::zeros({2, std::size_t(cfg.model.latent_dim)});
        for (double& v : eps.data) v = rng.normal();

        std::vector<ag::Param*> params;
        enc.collect(params);
        head.collect(params);
        for (auto* p : params) {
            p->grad = Tensor::zeros(p->value.shape);
        }

        // Analytic gradients.
        {
            ag::Tape t;
            std::vector<ag::Var> vars;
            for (auto* p : params) vars.push_back(t.param(*p));
            const EncoderOutput eo = enc.encode_with_eps(t, batch, eps);
            const ag::Var logits = head.logits_rows(t, eo.sampled);
            const ag::Var loss = ag::add(reconstruction_loss(t, logits, batch),
                                         kl_to_standard_normal(t, eo.mean, cfg.stage_a.latent_noise_std));
            t.backward(loss);
        }

        // Spot-check a spread of parameter entries per tensor.
        Rng pick(99);
        const double h = 1e-5;
        int checked = 0;
        for (auto* p : params) {
            for (int rep = 0; rep < 2; ++rep) {
                const std::size_t idx = pick.below(p->value.size());
                const double saved = p->value.data[idx];
                p->value.data[idx] = saved + h;
                const double up = loss_value(cfg, enc, head, batch, eps);
                p->value.data[idx] = saved - h;
                const double dn = loss_value(cfg, enc, head, batch, eps);
                p->value.data[idx] = saved;
                const double fd = (up - dn) / (2.0 * h);
                const double an = p->grad.data[idx];
                const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
                CHECK(std::abs(fd - an) / denom < 1e-3);
                ++checked;
            }
        }
        CHECK(checked >= 10);
    }
}
