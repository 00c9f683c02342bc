#include "couplegen/guidance.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "couplegen/nn.hpp"
#include "couplegen/sampling.hpp"

namespace couplegen::guide {

namespace {

// Tile a per-position table [T x V] across a batch into [B*T x V].
Tensor tile_rows(const Tensor& table, std::size_t batch) {
    const std::size_t T = table.dim(0), V = table.dim(1);
    Tensor out({batch * T, V});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < T * V; ++i) out.data[b * T * V + i] = table.data[i];
    return out;
}

void check_reward_shape(const Tensor& rows, std::size_t batch, std::size_t seq_len,
                        std::size_t vocab) {
    if (rows.rank() != 2 || rows.dim(0) != batch * seq_len || rows.dim(1) != vocab)
        throw std::invalid_argument("reward: rows shape does not match [batch*seq_len x vocab]");
}

}  // namespace

// --------------------------------------------------------------------------
// Classifier-free guidance
// --------------------------------------------------------------------------

Tensor cfg_logits(const train::OneStepGenerator& gen, const Tensor& z,
                  const std::vector<int>& labels, double scale) {
    if (!gen.conditional())
        throw PrereqError("classifier-free guidance needs a conditional decoder");
    const std::vector<int> null_labels(z.dim(0), gen.null_label());
    const Tensor uncond = gen.logits_rows_numeric(z, null_labels);
    const Tensor cond = gen.logits_rows_numeric(z, labels);
    if (scale == 0.0) return uncond;
    if (scale == 1.0) return cond;
    Tensor out = uncond;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += scale * (cond.data[i] - uncond.data[i]);
    return out;
}

std::vector<TokenSequence> sample_cfg(const train::OneStepGenerator& gen,
                                      const ExperimentConfig& cfg, std::size_t count,
                                      const std::vector<int>& labels, Rng& rng) {
    const std::size_t D = std::size_t(gen.latent_dim());
    Tensor z({count, D});
    for (double& v : z.data) v = cfg.stage_b.z_scale * rng.normal();
    const Tensor logits = cfg_logits(gen, z, labels, cfg.guidance.cfg_scale);
    const std::vector<int> flat = sample::sample_rows(logits, cfg.stage_b.temperature, rng);
    const std::size_t T = std::size_t(gen.seq_len());
    std::vector<TokenSequence> out(count, TokenSequence(T, 0));
    for (std::size_t b = 0; b < count; ++b)
        for (std::size_t p = 0; p < T; ++p) out[b][p] = flat[b * T + p];
    return out;
}

// --------------------------------------------------------------------------
// Relaxed decoding
// --------------------------------------------------------------------------

ag::Var relax(ag::Tape& t, ag::Var logits_rows, const GuidanceConfig& gcfg, Rng* rng) {
    const double tau = gcfg.relaxation_temperature;
    if (!(tau > 0.0)) throw ConfigError("relaxation temperature must be positive");
    switch (gcfg.relaxation) {
        case RelaxationKind::soft:
            return ag::row_softmax(ag::scale(logits_rows, 1.0 / tau));
        case RelaxationKind::gumbel_st: {
            if (rng == nullptr)
                throw ConfigError("straight-through gumbel relaxation needs an RNG");
            const Tensor& lv = t.val(logits_rows);
            Tensor noise(lv.shape);
            for (double& g : noise.data) g = rng->gumbel();
            return ag::st_gumbel_onehot(logits_rows, noise, tau);
        }
    }
    throw ConfigError("unknown relaxation kind");
}

// --------------------------------------------------------------------------
// Reward models
// --------------------------------------------------------------------------

double RewardModel::reward_of(const std::vector<TokenSequence>& batch, int vocab,
                              const std::vector<int>& labels) const {
    if (batch.empty()) return 0.0;
    const std::size_t B = batch.size(), T = batch[0].size(), V = std::size_t(vocab);
    Tensor onehot({B * T, V});
    for (std::size_t b = 0; b < B; ++b) {
        if (batch[b].size() != T) throw std::invalid_argument("reward: ragged batch");
        for (std::size_t p = 0; p < T; ++p) {
            const int tok = batch[b][p];
            if (tok < 0 || tok >= vocab) throw std::invalid_argument("reward: token out of range");
            onehot.data[(b * T + p) * V + std::size_t(tok)] = 1.0;
        }
    }
    ag::Tape t;
    const ag::Var r = reward_sum(t, t.constant(std::move(onehot)), B, labels);
    return t.val(r).data[0];
}

LinearReward::LinearReward(int seq_len, int vocab)
    : weights({std::size_t(seq_len), std::size_t(vocab)}) {}

ag::Var LinearReward::reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                                 const std::vector<int>& /*labels*/) const {
    check_reward_shape(t.val(rows), batch, weights.dim(0), weights.dim(1));
    return ag::sum_all(ag::mul(rows, t.constant(tile_rows(weights, batch))));
}

QuadraticTargetReward::QuadraticTargetReward(int seq_len, int vocab)
    : target({std::size_t(seq_len), std::size_t(vocab)}) {}

ag::Var QuadraticTargetReward::reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                                          const std::vector<int>& /*labels*/) const {
    check_reward_shape(t.val(rows), batch, target.dim(0), target.dim(1));
    const ag::Var diff = ag::sub(rows, t.constant(tile_rows(target, batch)));
    return ag::scale(ag::sum_all(ag::mul(diff, diff)), -1.0);
}

LabelTokenReward::LabelTokenReward(int num_classes, int seq_len, int vocab) {
    if (num_classes < 1) throw ConfigError("label reward needs at least one class");
    weights.assign(std::size_t(num_classes),
                   Tensor({std::size_t(seq_len), std::size_t(vocab)}));
}

ag::Var LabelTokenReward::reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                                     const std::vector<int>& labels) const {
    const std::size_t T = weights[0].dim(0), V = weights[0].dim(1);
    check_reward_shape(t.val(rows), batch, T, V);
    if (labels.size() != batch)
        throw ConfigError("label reward needs one label per example");
    Tensor w({batch * T, V});
    for (std::size_t b = 0; b < batch; ++b) {
        const int y = labels[b];
        if (y < 0 || std::size_t(y) >= weights.size())
            throw ConfigError("label reward: label out of range");
        const Tensor& wy = weights[std::size_t(y)];
        for (std::size_t i = 0; i < T * V; ++i) w.data[b * T * V + i] = wy.data[i];
    }
    return ag::sum_all(ag::mul(rows, t.constant(std::move(w))));
}

// --------------------------------------------------------------------------
// Latent-space guidance
// --------------------------------------------------------------------------

GuidanceTrace latent_guidance(const train::OneStepGenerator& gen, const GuidanceConfig& gcfg,
                              const RewardModel& reward, Tensor z,
                              const std::vector<int>& labels, Rng* relax_rng) {
    if (gcfg.guidance_steps < 0) throw ConfigError("guidance steps must be >= 0");
    const std::size_t B = z.dim(0);
    GuidanceTrace trace;
    trace.reward_path.reserve(std::size_t(gcfg.guidance_steps));
    for (int k = 0; k < gcfg.guidance_steps; ++k) {
        ag::Tape t;
        const ag::Var zv = t.leaf(z);
        const ag::Var logits = gen.logits_rows(t, zv, labels);
        const ag::Var rows = relax(t, logits, gcfg, relax_rng);
        const ag::Var rsum = reward.reward_sum(t, rows, B, labels);
        trace.reward_path.push_back(t.val(rsum).data[0] / double(B));
        t.backward(rsum);
        const Tensor& g = t.grad(zv);
        for (double v : g.data)
            if (!std::isfinite(v))
                throw CheckFailure("latent guidance produced a non-finite gradient at step " +
                                   std::to_string(k));
        if (gcfg.step_size != 0.0)
            for (std::size_t i = 0; i < z.data.size(); ++i)
                z.data[i] += gcfg.step_size * g.data[i];
    }
    trace.z = std::move(z);
    return trace;
}

std::vector<TokenSequence> sample_with_latent_guidance(
    const train::OneStepGenerator& gen, const ExperimentConfig& cfg, const RewardModel& reward,
    std::size_t count, const std::vector<int>& labels, Rng& rng, GuidanceTrace* trace) {
    const std::size_t D = std::size_t(gen.latent_dim());
    Tensor z({count, D});
    for (double& v : z.data) v = cfg.stage_b.z_scale * rng.normal();
    GuidanceTrace tr = latent_guidance(gen, cfg.guidance, reward, std::move(z), labels, &rng);
    std::vector<TokenSequence> out = train::decode_latents(gen, cfg, tr.z, labels, rng);
    if (trace != nullptr) *trace = std::move(tr);
    return out;
}

// --------------------------------------------------------------------------
// Reward fine-tuning
// --------------------------------------------------------------------------

namespace {

// Row-wise softmax of a numeric logits matrix (used for the frozen anchor).
Tensor softmax_rows(const Tensor& logits) {
    const std::size_t R = logits.dim(0), C = logits.dim(1);
    Tensor out({R, C});
    for (std::size_t r = 0; r < R; ++r) {
        const double* in = logits.data.data() + r * C;
        double* o = out.data.data() + r * C;
        double mx = in[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < C; ++c) o[c] /= z;
    }
    return out;
}

}  // namespace

FinetuneStats reward_finetune_step(train::StageBState& st, const train::OneStepGenerator& frozen,
                                   const ExperimentConfig& cfg, const RewardModel& reward,
                                   const Tensor& z, const std::vector<int>& labels, double lr,
                                   Rng* relax_rng) {
    const GuidanceConfig& g = cfg.guidance;
    const std::size_t B = z.dim(0);

    // Anchor logits come from the frozen starting decoder; they are data
    // as far as the optimized graph is concerned.
    const Tensor anchor_logits = frozen.logits_rows_numeric(z, labels);

    ag::Tape t;
    const ag::Var logits = st.gen.logits_rows(t, t.constant(z), labels);
    const ag::Var rows = relax(t, logits, g, relax_rng);
    const ag::Var rsum = reward.reward_sum(t, rows, B, labels);

    ag::Var anchor;
    switch (g.anchor) {
        case AnchorKind::logit_mse: {
            const ag::Var diff = ag::sub(logits, t.constant(anchor_logits));
            anchor = ag::mean_all(ag::mul(diff, diff));
            break;
        }
        case AnchorKind::logit_kl: {
            // KL(anchor || current), averaged over rows: both the value and
            // the gradient vanish when the decoders agree.
            const Tensor p0 = softmax_rows(anchor_logits);
            const std::size_t R = p0.dim(0), C = p0.dim(1);
            double neg_entropy = 0.0;
            for (std::size_t i = 0; i < p0.data.size(); ++i)
                if (p0.data[i] > 0.0) neg_entropy += p0.data[i] * std::log(p0.data[i]);
            (void)C;
            const ag::Var cross =
                ag::sum_all(ag::mul(t.constant(p0), ag::row_log_softmax(logits)));
            anchor = ag::add_scalar(ag::scale(cross, -1.0 / double(R)), neg_entropy / double(R));
            break;
        }
        default:
            throw ConfigError("unknown anchor kind");
    }

    const ag::Var loss =
        ag::add(ag::scale(rsum, -g.lambda_reward / double(B)), ag::scale(anchor, g.lambda_anchor));

    nn::zero_grads(st.params);
    t.backward(loss);

    double sq = 0.0;
    for (const ag::Param* p : st.params)
        for (double v : p->grad.data) sq += v * v;

    st.opt.step(st.params, lr);

    FinetuneStats out;
    out.loss = t.val(loss).data[0];
    out.reward_mean = t.val(rsum).data[0] / double(B);
    out.anchor = t.val(anchor).data[0];
    out.grad_norm = std::sqrt(sq);
    return out;
}

}  // namespace couplegen::guide
