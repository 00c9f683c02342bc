#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/nn.hpp"
#include "couplegen/optim.hpp"
#include "couplegen/stage_a.hpp"

namespace couplegen::train {

// Masked-token denoiser, optionally conditioned on a latent z (latent_dim 0
// trains the plain unconditional baseline) and on a class label. Vocabulary
// index V is the mask symbol; inputs are token sequences over {0..V}.
class LatentMaskedDenoiser {
  public:
    LatentMaskedDenoiser() = default;
    // latent_dim 0 builds the baseline (no latent input).
    LatentMaskedDenoiser(const ExperimentConfig& cfg, int latent_dim, Rng& init_rng);

    // tokens: B sequences of length T over {0..V} (V = mask). z [B x D] must
    // be empty (size 0) when the model has no latent input. labels as in the
    // one-step decoder (null = num_classes), empty when unconditional.
    // Returns [B*T x V] logit rows. Counts one network evaluation per call.
    ag::Var logits_rows(ag::Tape& t, const std::vector<TokenSequence>& tokens, ag::Var z,
                        const std::vector<int>& labels) const;
    Tensor logits_rows_numeric(const std::vector<TokenSequence>& tokens, const Tensor& z,
                               const std::vector<int>& labels) const;

    void collect(std::vector<ag::Param*>& out);
    bool has_latent() const { return latent_dim_ > 0; }
    bool conditional() const { return conditional_; }
    int null_label() const { return num_classes_; }
    int mask_token() const { return vocab_; }
    int seq_len() const { return seq_len_; }
    int vocab_size() const { return vocab_; }
    int latent_dim() const { return latent_dim_; }

    std::int64_t eval_count() const { return evals_; }
    void reset_eval_count() const { evals_ = 0; }

  private:
    void validate_inputs(const std::vector<TokenSequence>& tokens, std::size_t z_rows,
                         const std::vector<int>& labels) const;

    DenoiserArch arch_ = DenoiserArch::mlp;
    bool conditional_ = false;
    int vocab_ = 0, seq_len_ = 0, latent_dim_ = 0, num_classes_ = 0;
    nn::EmbeddingTable tok_embed_;    // [V+1 x width-or-embed] (mask = last row)
    nn::EmbeddingTable class_embed_;  // [num_classes+1 x same]
    nn::Linear z_in_;                 // latent lift (when latent_dim > 0)
    nn::Mlp mlp_;                     // mlp arch
    nn::TransformerStack stack_;      // attention_seq arch
    nn::Linear head_;
    mutable std::int64_t evals_ = 0;
};

// One corrupted training example: the masked sequence plus which positions
// were masked.
struct Corrupted {
    std::vector<TokenSequence> tokens;      // with mask symbols substituted
    std::vector<std::vector<char>> masked;  // [B][T] 1 = masked
    std::vector<double> t;                  // per-example mask rate drawn
};

// Draws t ~ Uniform(t_min, 1) per example, masks each position independently
// with probability t. An example that comes out with no masked positions is
// redrawn (up to 100 attempts), then one uniformly chosen position is forced.
Corrupted corrupt(const std::vector<TokenSequence>& batch, int mask_token, double t_min, Rng& rng);

// Same with caller-fixed per-example rates (for calibration tests).
Corrupted corrupt_with_t(const std::vector<TokenSequence>& batch, int mask_token,
                         const std::vector<double>& t, Rng& rng);

// Cross-entropy on masked positions only: per-example mean over its masked
// positions, then mean over the batch.
ag::Var mdm_loss(ag::Tape& t, ag::Var logits_rows, const std::vector<TokenSequence>& clean,
                 const Corrupted& cor);

struct MdmState {
    LatentMaskedDenoiser den;
    std::vector<ag::Param*> params;
    optim::AdamW opt;
    int epochs_done = 0;

    MdmState() = default;
    MdmState(const MdmState&) = delete;
    MdmState& operator=(const MdmState&) = delete;
};

// latent-conditioned refiner (latent_dim from cfg) or plain baseline
// (latent_dim 0) depending on `with_latent`.
void init_mdm(MdmState& st, const ExperimentConfig& cfg, bool with_latent);

// Trains the denoiser. With a latent the inputs are pair-provider latents
// for the same items that get corrupted; without, plain masked modeling.
// Logs to <out_dir>/mdm_log.jsonl, checkpoints to <out_dir>/mdm.ckpt.
std::vector<EpochStats> train_mdm(MdmState& st, const ExperimentConfig& cfg, const Dataset& data,
                                  const PairProvider* pairs, const std::string& out_dir,
                                  int max_epochs = -1);

void save_mdm(const MdmState& st, const ExperimentConfig& cfg, const std::string& path);
void load_mdm(MdmState& st, const ExperimentConfig& cfg, const std::string& path);

// Fraction of positions revealed by schedule time t = i/k: monotone with
// value 0 at t=0 and 1 at t=1. linear is t itself; cosine is 1 - cos(pi t/2).
double unmask_fraction(UnmaskSchedule schedule, int i, int k);

struct RefinementResult {
    std::vector<TokenSequence> tokens;
    // Masked-position count after each step (per example), for audit: entry
    // [i][b] is the number of still-masked positions after step i+1 of k.
    std::vector<std::vector<int>> masked_after_step;
};

// Few-step refinement driven by a fixed latent. Runs k steps from an
// all-mask start; at step i (1-based, t = i/k) every free position draws a
// Gumbel-max proposal at the step temperature and scores it by the perturbed
// log probability; caller-fixed positions score +inf and positions revealed
// at an earlier step have their scores multiplied by `remask_strength`; the
// floor(T * (1 - kappa(t))) lowest-scoring free positions stay (or return
// to) the mask, ties broken by position index, and proposals are written
// only into positions leaving the mask this step. After the last step any
// residual mask takes its final proposal. `init` (optional) seeds infilling:
// one sequence per example where every non-mask token is held fixed.
// labels follow the decoder convention. Counts exactly k denoiser
// evaluations for the whole batch, one per step.
RefinementResult refine_from_latent(const LatentMaskedDenoiser& den, const ExperimentConfig& cfg,
                                    const Tensor& z, const std::vector<int>& labels, Rng& rng,
                                    const std::vector<TokenSequence>& init = {});

// The same loop without a latent (baseline sampler).
RefinementResult refine_baseline(const LatentMaskedDenoiser& den, const ExperimentConfig& cfg,
                                 std::size_t count, const std::vector<int>& labels, Rng& rng,
                                 const std::vector<TokenSequence>& init = {});

}  // namespace couplegen::train
