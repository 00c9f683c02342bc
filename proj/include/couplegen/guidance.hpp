#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "couplegen/autodiff.hpp"
#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/stage_b.hpp"

namespace couplegen::guide {

// ---------------------------------------------------------------------------
// Classifier-free guidance.
//
// The decoder is trained with label dropout, so the same network provides a
// conditional and an unconditional (null-label) branch. Guided logits blend
// the two per position:
//
//     guided = uncond + scale * (cond - uncond)
//
// scale = 0 reproduces the unconditional model, scale = 1 the conditional
// one; larger scales extrapolate toward the class. Costs exactly two network
// evaluations per batch regardless of scale.
// ---------------------------------------------------------------------------

// z [B x D], labels one per example. Requires a conditional decoder.
Tensor cfg_logits(const train::OneStepGenerator& gen, const Tensor& z,
                  const std::vector<int>& labels, double scale);

// Draw latents, blend the two branches, then sample each position
// independently at the decoder temperature. NFE per call: 2.
std::vector<TokenSequence> sample_cfg(const train::OneStepGenerator& gen,
                                      const ExperimentConfig& cfg, std::size_t count,
                                      const std::vector<int>& labels, Rng& rng);

// ---------------------------------------------------------------------------
// Differentiable relaxation of decoding.
//
// Rewards are defined on token sequences, but gradient-based guidance needs
// logits -> "soft tokens" to be differentiable. Two relaxations:
//   soft       rho(l) = row-wise softmax(l / tau_r); deterministic.
//   gumbel_st  straight-through Gumbel one-hot: the forward value is the
//              exact one-hot argmax((l + g) / tau_r), the backward pass
//              differentiates softmax((l + g) / tau_r). Needs an RNG for g.
// Both map [B*T x V] logits to [B*T x V] rows on the probability simplex
// (one-hot rows are its vertices).
// ---------------------------------------------------------------------------
ag::Var relax(ag::Tape& t, ag::Var logits_rows, const GuidanceConfig& gcfg, Rng* rng);

// ---------------------------------------------------------------------------
// Reward models.
//
// A reward scores relaxed token rows [B*T x V] (optionally per-class). To
// keep per-example latent gradients independent of batch size, reward_sum
// returns the SUM over examples; callers divide by B when they need a mean.
// ---------------------------------------------------------------------------
class RewardModel {
  public:
    virtual ~RewardModel() = default;
    // rows [B*T x V] relaxed tokens; labels one per example or empty.
    virtual ag::Var reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                               const std::vector<int>& labels) const = 0;
    // Convenience: reward of a discrete batch (rows = exact one-hots).
    double reward_of(const std::vector<TokenSequence>& batch, int vocab,
                     const std::vector<int>& labels) const;
};

// R(x) = sum_p w[p, x_p]: one learned/chosen weight per (position, token).
class LinearReward : public RewardModel {
  public:
    LinearReward(int seq_len, int vocab);
    ag::Var reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                       const std::vector<int>& labels) const override;
    Tensor weights;  // [T x V]
};

// R(x) = -sum_{p,v} (rows[p,v] - target[p,v])^2: peaks when the relaxed
// rows hit a chosen simplex point exactly. Smooth, bounded above by 0.
class QuadraticTargetReward : public RewardModel {
  public:
    QuadraticTargetReward(int seq_len, int vocab);
    ag::Var reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                       const std::vector<int>& labels) const override;
    Tensor target;  // [T x V]
};

// Label-dependent linear reward: R(x, y) = sum_p w[y][p, x_p].
class LabelTokenReward : public RewardModel {
  public:
    LabelTokenReward(int num_classes, int seq_len, int vocab);
    ag::Var reward_sum(ag::Tape& t, ag::Var rows, std::size_t batch,
                       const std::vector<int>& labels) const override;
    std::vector<Tensor> weights;  // per class, [T x V]
};

// ---------------------------------------------------------------------------
// Latent-space guidance (test-time search, decoder weights frozen).
//
// Ascends the relaxed reward through the decoder in latent space:
//
//     z_{k+1} = z_k + eta * d/dz R(rho(decode(z_k, y)), y)
//
// for guidance_steps steps, then decodes z_K once. Decoder parameters are
// never updated. NFE: guidance_steps ascent evaluations (+1 for the final
// decode in sample_with_latent_guidance).
// ---------------------------------------------------------------------------
struct GuidanceTrace {
    Tensor z;                        // final latents [B x D]
    std::vector<double> reward_path; // mean reward before each ascent step
};

GuidanceTrace latent_guidance(const train::OneStepGenerator& gen, const GuidanceConfig& gcfg,
                              const RewardModel& reward, Tensor z,
                              const std::vector<int>& labels, Rng* relax_rng);

std::vector<TokenSequence> sample_with_latent_guidance(
    const train::OneStepGenerator& gen, const ExperimentConfig& cfg, const RewardModel& reward,
    std::size_t count, const std::vector<int>& labels, Rng& rng, GuidanceTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Reward fine-tuning (updates decoder weights, anchored to the start point).
//
// One optimizer step on
//
//     L = -lambda_reward * mean_b R(rho(decode_theta(z_b, y_b)), y_b)
//         + lambda_anchor * A(theta, theta0)
//
// where the anchor A compares current logits to the frozen starting
// decoder's logits on the same (z, y):
//   logit_mse  mean squared difference over all entries;
//   logit_kl   mean KL(softmax(anchor logits) || softmax(current logits)),
//              which has zero value and zero gradient at theta = theta0.
// ---------------------------------------------------------------------------
struct FinetuneStats {
    double loss = 0.0;
    double reward_mean = 0.0;
    double anchor = 0.0;
    double grad_norm = 0.0;  // l2 norm over all decoder parameter gradients
};

FinetuneStats reward_finetune_step(train::StageBState& st, const train::OneStepGenerator& frozen,
                                   const ExperimentConfig& cfg, const RewardModel& reward,
                                   const Tensor& z, const std::vector<int>& labels, double lr,
                                   Rng* relax_rng);

}  // namespace couplegen::guide
