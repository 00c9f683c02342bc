#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/divergence_oracle.hpp"
#include "couplegen/nn.hpp"
#include "couplegen/optim.hpp"
#include "couplegen/stage_a.hpp"

namespace couplegen::train {

// Parallel one-step decoder: maps a latent z (plus an optional class label)
// to logits for every position at once. Sampling is a single network
// evaluation followed by independent per-position categorical draws.
class OneStepGenerator {
  public:
    OneStepGenerator() = default;
    OneStepGenerator(const ExperimentConfig& cfg, Rng& init_rng);

    // z [B x D]; labels: one per example when the model is conditional
    // (num_classes acts as the learned null label), must be empty otherwise.
    // Returns [B*T x V] logit rows. Each call counts one network evaluation.
    ag::Var logits_rows(ag::Tape& t, ag::Var z, const std::vector<int>& labels) const;
    Tensor logits_rows_numeric(const Tensor& z, const std::vector<int>& labels) const;

    void collect(std::vector<ag::Param*>& out);
    bool conditional() const { return conditional_; }
    int null_label() const { return num_classes_; }
    int seq_len() const { return seq_len_; }
    int vocab_size() const { return vocab_; }
    int latent_dim() const { return latent_dim_; }

    // Network-evaluation counter (shared by tape and numeric paths).
    std::int64_t eval_count() const { return evals_; }
    void reset_eval_count() const { evals_ = 0; }

  private:
    void validate_labels(std::size_t batch, const std::vector<int>& labels) const;
    ag::Var class_rows(ag::Tape& t, const std::vector<int>& labels) const;

    GeneratorArch arch_ = GeneratorArch::mlp;
    bool conditional_ = false;
    int vocab_ = 0, seq_len_ = 0, latent_dim_ = 0, num_classes_ = 0;
    nn::EmbeddingTable class_embed_;  // [num_classes+1 x class width]
    nn::Mlp mlp_;                     // mlp arch
    nn::Linear z_in_;                 // attention archs: latent (or token) lift
    nn::TransformerStack stack_;
    nn::Linear head_;  // width -> V (seq) or width -> block*V (grid)
    int tok_p_ = 0, tok_c_ = 0, block_h_ = 0, block_w_ = 0, grid_h_ = 0, grid_w_ = 0;
    int lat_h_ = 0, lat_w_ = 0;
    mutable std::int64_t evals_ = 0;
};

struct StageBState {
    OneStepGenerator gen;
    std::vector<ag::Param*> params;
    optim::AdamW opt;
    optim::Ema ema;
    int epochs_done = 0;

    StageBState() = default;
    StageBState(const StageBState&) = delete;
    StageBState& operator=(const StageBState&) = delete;
};

void init_stage_b(StageBState& st, const ExperimentConfig& cfg);

// Per-example sum over positions of cross-entropy against the paired
// sequence, averaged over the batch.
ag::Var stage_b_loss(ag::Tape& t, ag::Var logits_rows, const std::vector<TokenSequence>& batch);

// Trains the decoder on pairs materialized from the frozen alignment stage.
// Conditional models drop labels to the null class at the configured rate.
// Logs to <out_dir>/stage_b_log.jsonl, checkpoints to <out_dir>/stage_b.ckpt.
// max_epochs >= 0 stops early (interruption point) for resumable runs.
std::vector<EpochStats> train_stage_b(StageBState& st, const ExperimentConfig& cfg,
                                      const Dataset& data, const PairProvider& pairs,
                                      const std::string& out_dir, int max_epochs = -1);

void save_stage_b(const StageBState& st, const ExperimentConfig& cfg, const std::string& path);
void load_stage_b(StageBState& st, const ExperimentConfig& cfg, const std::string& path);

// Installs EMA weights for evaluation when enabled (no-op otherwise); call
// restore to swap the live weights back.
void install_ema(StageBState& st);
void restore_ema(StageBState& st);

// One-step generation: z ~ N(0, I) * z_scale, one decoder evaluation, then
// independent per-position draws at the configured temperature. labels may
// be empty for unconditional sampling from a conditional model (null label).
std::vector<TokenSequence> sample_one_step(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                           std::size_t count, const std::vector<int>& labels,
                                           Rng& rng);

// Same, but from caller-supplied latents (guidance, diagnostics).
// Exact law the one-step sampler induces, for enumerable tasks: per-position
// categorical probabilities (tempered softmax of the logits, or the argmax
// point mass below the argmax temperature threshold) multiplied across
// positions and integrated over the scaled latent prior by quadrature.
// label -1 = unconditional input (the null class on conditional models).
oracle::ExactDistribution generated_law(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                        int label = -1, oracle::QuadratureSpec spec = {});

std::vector<TokenSequence> decode_latents(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                          const Tensor& z, const std::vector<int>& labels, Rng& rng);

}  // namespace couplegen::train
