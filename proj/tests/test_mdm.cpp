// Masked-token corruption, the masked-position loss, the unmasking schedule,
// and the few-step confidence-ranked refinement sampler.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "couplegen/few_step_mdm.hpp"
#include "couplegen/sampling.hpp"
#include "couplegen/stage_a.hpp"

using namespace couplegen;
using namespace couplegen::train;

namespace {

ExperimentConfig tiny_mdm_config() {
    ExperimentConfig cfg = validate_config(profile_json("toy-motif"));  // V=4, T=4
    cfg.data.num_train = 64;
    cfg.model.latent_dim = 3;
    cfg.model.embed_dim = 5;
    cfg.model.denoiser_width = 16;
    cfg.model.denoiser_depth = 1;
    cfg.mdm.epochs = 2;
    cfg.mdm.batch_size = 16;
    return cfg;
}

std::vector<TokenSequence> random_batch(int B, int T, int V, Rng& rng) {
    std::vector<TokenSequence> out;
    for (int b = 0; b < B; ++b) {
        TokenSequence x(std::size_t(T), 0);
        for (auto& tok : x) tok = int(rng.below(std::size_t(V)));
        out.push_back(x);
    }
    return out;
}

Tensor random_latents(std::size_t B, int D, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, stream_tag::sampling, 77);
    Tensor z = Tensor::zeros({B, std::size_t(D)});
    for (double& v : z.data) v = rng.normal();
    return z;
}

Dataset synth_dataset(const ExperimentConfig& cfg, bool with_labels) {
    Dataset d;
    d.vocab_size = cfg.data.vocab_size;
    d.seq_len = cfg.data.seq_len;
    Rng rng = Rng::derive(7, stream_tag::data, 1);
    for (int i = 0; i < cfg.data.num_train; ++i) {
        TokenSequence x(std::size_t(cfg.data.seq_len), 0);
        for (auto& tok : x) tok = int(rng.below(std::size_t(cfg.data.vocab_size)));
        d.items.push_back(x);
        if (with_labels) d.labels.push_back(int(rng.below(std::size_t(cfg.data.num_classes))));
    }
    return d;
}

std::string tmp_dir(const char* leaf) {
    auto p = std::filesystem::temp_directory_path() / leaf;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

}  // namespace

TEST_CASE("corruption masks every position at rate one") {
    Rng rng = Rng::derive(1, stream_tag::corruption, 0);
    const std::vector<TokenSequence> batch = {{0, 1, 2, 3}, {3, 2, 1, 0}};
    const Corrupted cor = corrupt_with_t(batch, 4, {1.0, 1.0}, rng);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t p = 0; p < 4; ++p) {
            CHECK(cor.masked[b][p] == 1);
            CHECK(cor.tokens[b][p] == 4);
        }
}

TEST_CASE("corruption mean mask count matches the zero-excluded binomial") {
    // With rate t and length T the retry guard conditions the mask vector on
    // having at least one entry, so the mean count is tT / (1 - (1-t)^T),
    // not tT. 1e5 draws at t=0.5, T=8: the distinction is ~3.5 sigma wide.
    const int N = 100000, T = 8;
    const double t = 0.5;
    Rng seq_rng = Rng::derive(2, stream_tag::data, 0);
    const std::vector<TokenSequence> batch = random_batch(N, T, 4, seq_rng);
    Rng rng = Rng::derive(2, stream_tag::corruption, 0);
    const Corrupted cor = corrupt_with_t(batch, 4, std::vector<double>(N, t), rng);

    double total = 0.0;
    for (const auto& m : cor.masked) {
        int c = 0;
        for (char v : m) c += v;
        CHECK(c >= 1);
        total += c;
    }
    const double keep = 1.0 - std::pow(1.0 - t, T);
    const double mean = t * T / keep;                                     // E[X | X >= 1]
    const double ex2 = (T * t * (1.0 - t) + t * T * t * T) / keep;        // E[X^2 | X >= 1]
    const double sigma = std::sqrt((ex2 - mean * mean) / N);
    CHECK(std::abs(total / N - mean) < 3.0 * sigma);
}

TEST_CASE("corruption guard forces one mask when the rate is tiny") {
    Rng rng = Rng::derive(3, stream_tag::corruption, 0);
    const std::vector<TokenSequence> batch(50, TokenSequence{2});
    const Corrupted cor = corrupt_with_t(batch, 3, std::vector<double>(50, 1e-3), rng);
    for (const auto& m : cor.masked) {
        REQUIRE(m.size() == 1);
        CHECK(m[0] == 1);
    }
}

TEST_CASE("corruption draws rates inside (t_min, 1)") {
    Rng seq_rng = Rng::derive(4, stream_tag::data, 0);
    const std::vector<TokenSequence> batch = random_batch(500, 6, 3, seq_rng);
    Rng rng = Rng::derive(4, stream_tag::corruption, 0);
    const Corrupted cor = corrupt(batch, 3, 1e-3, rng);
    REQUIRE(cor.t.size() == 500);
    for (double t : cor.t) {
        CHECK(t >= 1e-3);
        CHECK(t <= 1.0);
    }
}

TEST_CASE("masked loss is the mean over masked positions only") {
    const std::size_t B = 2, T = 3, V = 4;
    std::vector<TokenSequence> clean = {{0, 1, 2}, {3, 0, 1}};
    Corrupted cor;
    cor.tokens = clean;  // content irrelevant to the loss
    cor.masked = {{1, 0, 1}, {0, 1, 0}};
    cor.t = {0.5, 0.5};

    SUBCASE("uniform logits cost ln V") {
        ag::Tape t;
        const ag::Var logits = t.constant(Tensor::zeros({B * T, V}));
        const ag::Var loss = mdm_loss(t, logits, clean, cor);
        CHECK(t.val(loss).data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }

    SUBCASE("one-hot truth costs nothing") {
        Tensor raw = Tensor::zeros({B * T, V});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < T; ++p) raw.at(b * T + p, std::size_t(clean[b][p])) = 60.0;
        ag::Tape t;
        const ag::Var loss = mdm_loss(t, t.constant(raw), clean, cor);
        CHECK(std::abs(t.val(loss).data[0]) < 1e-12);
    }

    SUBCASE("random case equals a recomputation restricted to masked indices") {
        Rng rng = Rng::derive(5, stream_tag::init, 0);
        Tensor raw = Tensor::zeros({B * T, V});
        for (double& v : raw.data) v = rng.normal();

        double expected = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            double ex = 0.0;
            int count = 0;
            for (std::size_t p = 0; p < T; ++p) {
                if (!cor.masked[b][p]) continue;
                double mx = raw.at(b * T + p, 0);
                for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, raw.at(b * T + p, v));
                double lse = 0.0;
                for (std::size_t v = 0; v < V; ++v) lse += std::exp(raw.at(b * T + p, v) - mx);
                ex += -(raw.at(b * T + p, std::size_t(clean[b][p])) - mx - std::log(lse));
                ++count;
            }
            expected += ex / count / double(B);
        }

        ag::Tape t;
        const ag::Var loss = mdm_loss(t, t.constant(raw), clean, cor);
        CHECK(t.val(loss).data[0] == doctest::Approx(expected).epsilon(1e-12));

        // Unmasked rows carry zero weight: rewriting them changes nothing.
        Tensor poked = raw;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < T; ++p)
                if (!cor.masked[b][p])
                    for (std::size_t v = 0; v < V; ++v) poked.at(b * T + p, v) = 1e6 * (double(v) - 1);
        ag::Tape t2;
        const ag::Var loss2 = mdm_loss(t2, t2.constant(poked), clean, cor);
        CHECK(t2.val(loss2).data[0] == t.val(loss).data[0]);
    }
}

TEST_CASE("unmasking schedules hit both endpoints and increase monotonically") {
    for (auto s : {UnmaskSchedule::linear, UnmaskSchedule::cosine}) {
        CHECK(unmask_fraction(s, 0, 10) == 0.0);
        CHECK(unmask_fraction(s, 10, 10) == 1.0);
        double prev = -1.0;
        for (int i = 0; i <= 10; ++i) {
            const double k = unmask_fraction(s, i, 10);
            CHECK(k >= prev);
            prev = k;
        }
    }
    CHECK(unmask_fraction(UnmaskSchedule::linear, 3, 10) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(unmask_fraction(UnmaskSchedule::cosine, 5, 10) ==
          doctest::Approx(1.0 - std::cos(3.14159265358979323846 / 4.0)).epsilon(1e-12));
}

TEST_CASE("denoiser tape and numeric paths agree bitwise") {
    auto check = [](const ExperimentConfig& cfg, int latent_dim, bool conditional) {
        ExperimentConfig c = cfg;
        c.model.conditional = conditional;
        c.data.num_classes = conditional ? 3 : 0;
        Rng init = Rng::derive(6, stream_tag::init, 2);
        LatentMaskedDenoiser den(c, latent_dim, init);

        Rng rng = Rng::derive(6, stream_tag::data, 0);
        std::vector<TokenSequence> toks = random_batch(3, c.data.seq_len, c.data.vocab_size, rng);
        toks[0][0] = den.mask_token();
        toks[2][c.data.seq_len - 1] = den.mask_token();
        const Tensor z = latent_dim > 0 ? random_latents(3, latent_dim, 8) : Tensor{};
        std::vector<int> labels;
        if (conditional) labels = {0, den.null_label(), 2};

        ag::Tape t;
        std::vector<ag::Param*> params;
        den.collect(params);
        for (auto* p : params) (void)t.param(*p);
        const Tensor tape_logits = t.val(den.logits_rows(
            t, toks, latent_dim > 0 ? t.constant(z) : ag::Var{}, labels));
        const Tensor num_logits = den.logits_rows_numeric(toks, z, labels);
        REQUIRE(tape_logits.same_shape(num_logits));
        CHECK(tape_logits.cols() == std::size_t(c.data.vocab_size));  // mask is never scored
        for (std::size_t i = 0; i < tape_logits.size(); ++i)
            CHECK(tape_logits.data[i] == num_logits.data[i]);
    };

    ExperimentConfig base = tiny_mdm_config();
    SUBCASE("mlp with latent, conditional") { check(base, 3, true); }
    SUBCASE("mlp baseline, unconditional") { check(base, 0, false); }
    SUBCASE("attention with latent, conditional") {
        ExperimentConfig cfg = base;
        cfg.model.denoiser = DenoiserArch::attention_seq;
        cfg.model.denoiser_width = 8;
        cfg.model.denoiser_heads = 2;
        check(cfg, 3, true);
    }
    SUBCASE("attention baseline") {
        ExperimentConfig cfg = base;
        cfg.model.denoiser = DenoiserArch::attention_seq;
        cfg.model.denoiser_width = 8;
        cfg.model.denoiser_heads = 2;
        check(cfg, 0, false);
    }
}

TEST_CASE("masked loss gradients match finite differences") {
    ExperimentConfig cfg = tiny_mdm_config();
    Rng init = Rng::derive(9, stream_tag::init, 2);
    LatentMaskedDenoiser den(cfg, cfg.model.latent_dim, init);
    std::vector<ag::Param*> params;
    den.collect(params);

    Rng rng = Rng::derive(9, stream_tag::data, 0);
    const std::vector<TokenSequence> clean = random_batch(2, cfg.data.seq_len, cfg.data.vocab_size, rng);
    Rng crng = Rng::derive(9, stream_tag::corruption, 0);
    const Corrupted cor = corrupt(clean, den.mask_token(), cfg.mdm.t_min, crng);
    const Tensor z = random_latents(2, cfg.model.latent_dim, 10);

    auto loss_at = [&]() {
        ag::Tape t;
        for (auto* p : params) (void)t.param(*p);
        const ag::Var logits = den.logits_rows(t, cor.tokens, t.constant(z), {});
        return t.val(mdm_loss(t, logits, clean, cor)).data[0];
    };

    ag::Tape t;
    for (auto* p : params) (void)t.param(*p);
    const ag::Var logits = den.logits_rows(t, cor.tokens, t.constant(z), {});
    const ag::Var loss = mdm_loss(t, logits, clean, cor);
    nn::zero_grads(params);
    t.backward(loss);

    const double h = 1e-5;
    Rng pick = Rng::derive(9, stream_tag::init, 5);
    for (auto* p : params) {
        for (int rep = 0; rep < 2; ++rep) {
            const std::size_t k = pick.below(p->value.size());
            const double saved = p->value.data[k];
            p->value.data[k] = saved + h;
            const double up = loss_at();
            p->value.data[k] = saved - h;
            const double dn = loss_at();
            p->value.data[k] = saved;
            const double fd = (up - dn) / (2 * h);
            const double an = p->grad.data[k];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            INFO(p->name << "[" << k << "]");
            CHECK(std::abs(fd - an) / denom < 1e-3);
        }
    }
}

TEST_CASE("refinement holds the scheduled mask counts exactly") {
    // Pure bookkeeping: for any denoiser the number of masked positions
    // after step i must be floor(T * (1 - kappa(i/k))).
    ExperimentConfig cfg = tiny_mdm_config();
    Rng init = Rng::derive(12, stream_tag::init, 2);
    LatentMaskedDenoiser den(cfg, cfg.model.latent_dim, init);
    const std::size_t B = 5;
    const Tensor z = random_latents(B, cfg.model.latent_dim, 11);

    for (auto sched : {UnmaskSchedule::linear, UnmaskSchedule::cosine}) {
        for (int K : {1, 2, 4, 7}) {
            cfg.mdm.schedule = sched;
            cfg.mdm.steps = K;
            cfg.mdm.temperatures = {0.8};
            cfg.mdm.remask_strength = 1.0;
            Rng rng = Rng::derive(12, stream_tag::sampling, std::uint64_t(K));
            den.reset_eval_count();
            const RefinementResult res = refine_from_latent(den, cfg, z, {}, rng);
            CHECK(den.eval_count() == K);  // one evaluation per step for the whole batch
            REQUIRE(res.masked_after_step.size() == std::size_t(K));
            for (int i = 1; i <= K; ++i) {
                const int want = int(std::floor(
                    cfg.data.seq_len * (1.0 - unmask_fraction(sched, i, K))));
                for (std::size_t b = 0; b < B; ++b)
                    CHECK(res.masked_after_step[std::size_t(i - 1)][b] == want);
            }
            for (const auto& x : res.tokens)
                for (int tok : x) {
                    CHECK(tok >= 0);
                    CHECK(tok < cfg.data.vocab_size);  // fully revealed, no mask symbol
                }
        }
    }
}

TEST_CASE("one-step refinement equals a parallel decode under a shared seed") {
    ExperimentConfig cfg = tiny_mdm_config();
    cfg.mdm.steps = 1;
    cfg.mdm.temperatures = {0.9};
    Rng init = Rng::derive(14, stream_tag::init, 2);
    LatentMaskedDenoiser den(cfg, cfg.model.latent_dim, init);
    const std::size_t B = 6;
    const std::size_t T = std::size_t(cfg.data.seq_len);
    const Tensor z = random_latents(B, cfg.model.latent_dim, 13);

    Rng r1 = Rng::derive(15, stream_tag::sampling, 0);
    const RefinementResult res = refine_from_latent(den, cfg, z, {}, r1);

    const std::vector<TokenSequence> all_mask(B, TokenSequence(T, den.mask_token()));
    const Tensor logits = den.logits_rows_numeric(all_mask, z, {});
    Rng r2 = Rng::derive(15, stream_tag::sampling, 0);
    const std::vector<int> flat = sample::sample_rows(logits, 0.9, r2);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < T; ++p) CHECK(res.tokens[b][p] == flat[b * T + p]);
}

TEST_CASE("infilling holds fixed positions and reveals the rest") {
    ExperimentConfig cfg = tiny_mdm_config();
    cfg.mdm.steps = 2;
    cfg.mdm.temperatures = {1.0};
    Rng init = Rng::derive(16, stream_tag::init, 2);
    LatentMaskedDenoiser den(cfg, cfg.model.latent_dim, init);
    const Tensor z = random_latents(2, cfg.model.latent_dim, 17);

    const int M = den.mask_token();
    const std::vector<TokenSequence> init_seq = {{2, M, M, 1}, {M, 0, M, M}};
    Rng rng = Rng::derive(18, stream_tag::sampling, 0);
    const RefinementResult res = refine_from_latent(den, cfg, z, {}, rng, init_seq);

    CHECK(res.tokens[0][0] == 2);
    CHECK(res.tokens[0][3] == 1);
    CHECK(res.tokens[1][1] == 0);
    for (const auto& x : res.tokens)
        for (int tok : x) CHECK(tok != M);
    // Mask budget is clamped by the number of free positions: with 2 free
    // and floor(4*(1-1/2)) = 2 to keep masked, step one reveals nothing new.
    CHECK(res.masked_after_step[0][0] == 2);
    CHECK(res.masked_after_step[1][0] == 0);
}

TEST_CASE("zero remask strength makes revealed tokens permanent") {
    // With the score of a revealed position scaled to zero it outranks every
    // fresh proposal (log-probabilities are negative), so reveals are final
    // and the trajectory is monotone even though remasking is allowed.
    ExperimentConfig cfg = tiny_mdm_config();
    cfg.mdm.steps = cfg.data.seq_len;  // one net reveal per step
    cfg.mdm.temperatures = {1.0};
    cfg.mdm.remask_strength = 0.0;
    Rng init = Rng::derive(19, stream_tag::init, 2);
    LatentMaskedDenoiser den(cfg, cfg.model.latent_dim, init);
    const Tensor z = random_latents(3, cfg.model.latent_dim, 19);
    Rng rng = Rng::derive(20, stream_tag::sampling, 0);
    const RefinementResult res = refine_from_latent(den, cfg, z, {}, rng);
    for (int i = 0; i < cfg.mdm.steps; ++i)
        for (std::size_t b = 0; b < 3; ++b)
            CHECK(res.masked_after_step[std::size_t(i)][b] == cfg.data.seq_len - i - 1);
}

TEST_CASE("latent-conditioned training checkpoints and resumes exactly") {
    ExperimentConfig cfg = tiny_mdm_config();
    const Dataset data = synth_dataset(cfg, false);
    StageAState sa;
    init_stage_a(sa, cfg);
    const PairProvider pairs(sa, cfg, data);

    MdmState full;
    init_mdm(full, cfg, true);
    const std::string dir_full = tmp_dir("cg_mdm_full");
    const auto stats = train_mdm(full, cfg, data, &pairs, dir_full);
    REQUIRE(stats.size() == 2);
    for (const auto& s : stats) CHECK(std::isfinite(s.total));
    const std::string digest_full = nn::param_digest(full.params);

    MdmState part;
    init_mdm(part, cfg, true);
    const std::string dir_part = tmp_dir("cg_mdm_part");
    (void)train_mdm(part, cfg, data, &pairs, dir_part, /*max_epochs=*/1);
    MdmState resumed;
    init_mdm(resumed, cfg, true);
    load_mdm(resumed, cfg, dir_part + "/mdm.ckpt");
    CHECK(resumed.epochs_done == 1);
    (void)train_mdm(resumed, cfg, data, &pairs, dir_part);
    CHECK(nn::param_digest(resumed.params) == digest_full);

    // A baseline state cannot absorb a latent-conditioned checkpoint.
    MdmState base;
    init_mdm(base, cfg, false);
    CHECK_THROWS_AS(load_mdm(base, cfg, dir_part + "/mdm.ckpt"), ConfigError);

    std::filesystem::remove_all(dir_full);
    std::filesystem::remove_all(dir_part);
}

TEST_CASE("baseline denoiser trains without latents or pairs") {
    ExperimentConfig cfg = tiny_mdm_config();
    const Dataset data = synth_dataset(cfg, false);
    MdmState st;
    init_mdm(st, cfg, false);
    CHECK(!st.den.has_latent());
    const auto stats = train_mdm(st, cfg, data, nullptr, "");
    REQUIRE(stats.size() == 2);
    for (const auto& s : stats) CHECK(std::isfinite(s.total));

    Rng rng = Rng::derive(22, stream_tag::sampling, 0);
    cfg.mdm.steps = 4;
    cfg.mdm.temperatures = {1.0};
    const RefinementResult res = refine_baseline(st.den, cfg, 5, {}, rng);
    CHECK(res.tokens.size() == 5);
    for (const auto& x : res.tokens)
        for (int tok : x) {
            CHECK(tok >= 0);
            CHECK(tok < cfg.data.vocab_size);
        }

    // And the latent-conditioned trainer refuses to run without pairs.
    MdmState lat;
    init_mdm(lat, cfg, true);
    CHECK_THROWS_AS((void)train_mdm(lat, cfg, data, nullptr, ""), PrereqError);
    CHECK_THROWS_AS((void)refine_baseline(lat.den, cfg, 2, {}, rng), PrereqError);
    CHECK_THROWS_AS((void)refine_from_latent(st.den, cfg, Tensor::zeros({2, 3}), {}, rng),
                    PrereqError);
}
