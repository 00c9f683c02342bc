#pragma once

#include <string>
#include <vector>

#include "couplegen/autoencoder.hpp"
#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/latent_flow.hpp"
#include "couplegen/optim.hpp"

namespace couplegen::train {

// Alignment stage: encoder + reconstruction head trained jointly with the
// coupling flow so that encoded latents (i) reconstruct their sequences and
// (ii) map to the standard normal under the flow. The total objective is
//   lambda_rec * rec + lambda_kl * kl + lambda_flow * flow_nll.
struct StageAState {
    model::ReparamEncoder encoder;
    model::ReconstructionHead recon;
    model::CouplingFlow flow;
    std::vector<ag::Param*> params;  // fixed registration order
    optim::AdamW opt;
    int epochs_done = 0;

    StageAState() = default;
    StageAState(const StageAState&) = delete;
    StageAState& operator=(const StageAState&) = delete;
};

// Builds a freshly initialized state from the config (seeded by cfg.seed).
void init_stage_a(StageAState& st, const ExperimentConfig& cfg);

struct StageALossParts {
    ag::Var total, rec, kl, flow_nll;
};

// Builds the full loss on the tape. Parameters must already be registered on
// t (train_stage_a does this each step). eps supplies the encoder noise.
StageALossParts stage_a_loss(ag::Tape& t, const StageAState& st, const ExperimentConfig& cfg,
                             const std::vector<TokenSequence>& batch, const Tensor& eps);

struct EpochStats {
    int epoch = 0;
    double total = 0.0, rec = 0.0, kl = 0.0, flow_nll = 0.0;
    double lr = 0.0;
};

// Trains from st.epochs_done to cfg.stage_a.epochs. Appends one JSONL record
// per epoch to <out_dir>/stage_a_log.jsonl and keeps a rolling checkpoint at
// <out_dir>/stage_a.ckpt (atomic). Aborts with CheckFailure on non-finite
// loss. Per-epoch RNG streams are derived from (cfg.seed, tag, epoch), so a
// resumed run continues exactly as if uninterrupted. max_epochs >= 0 stops
// the loop early (an interruption point; the schedule still follows the
// configured epoch count) so a later call can resume from the checkpoint.
std::vector<EpochStats> train_stage_a(StageAState& st, const ExperimentConfig& cfg,
                                      const Dataset& data, const std::string& out_dir,
                                      int max_epochs = -1);

// Checkpointing. load_stage_a requires st to be initialized from the same
// architecture config; it restores parameter values, optimizer moments, and
// the epoch counter, and verifies the stored config digest matches.
void save_stage_a(const StageAState& st, const ExperimentConfig& cfg, const std::string& path);
void load_stage_a(StageAState& st, const ExperimentConfig& cfg, const std::string& path);

// Digest of all stage parameters in registration order (freeze evidence).
std::string stage_a_digest(const StageAState& st);

// Materializes decoder-stage training pairs (z, x[, label]) from a frozen
// alignment stage. In frozen mode the per-item noise comes from a fixed
// stream index; in resampled mode the caller passes the epoch as the stream
// index, redrawing fresh noise each pass.
struct PairBatch {
    Tensor z;  // [B x D]
    std::vector<TokenSequence> x;
    std::vector<int> labels;  // empty when the dataset has none
};

class PairProvider {
  public:
    PairProvider(const StageAState& st, const ExperimentConfig& cfg, const Dataset& data);

    // indices select dataset items; stream_index picks the noise stream
    // (frozen mode always passes 0, resampled mode passes the epoch).
    PairBatch materialize(const std::vector<std::size_t>& indices, std::uint64_t stream_index) const;

  private:
    const StageAState* st_;
    const Dataset* data_;
    std::uint64_t seed_ = 0;
    double noise_std_ = 0.0;
};

}  // namespace couplegen::train
