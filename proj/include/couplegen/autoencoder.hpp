#pragma once

#include <vector>

#include "couplegen/autodiff.hpp"
#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/nn.hpp"
#include "couplegen/rng.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::model {

// Latent alignment stage, sequence side: a deterministic mean network plus a
// fixed isotropic noise scale. Latents are u = mean(x) + noise_std * eps with
// eps ~ N(0, I), so the per-example posterior is N(mean(x), noise_std^2 I)
// and its divergence from the standard normal has the closed form used in
// kl_to_standard_normal.
struct EncoderOutput {
    ag::Var mean;     // [B x D]
    ag::Var sampled;  // [B x D] = mean + noise_std * eps
    Tensor eps;       // [B x D] noise actually consumed (for replay/tests)
};

class ReparamEncoder {
  public:
    ReparamEncoder() = default;
    ReparamEncoder(const ExperimentConfig& cfg, Rng& init_rng);

    // Draws eps from noise_rng (one normal per latent coordinate, batch-major).
    EncoderOutput encode(ag::Tape& t, const std::vector<TokenSequence>& batch, Rng& noise_rng) const;
    // Replays a caller-supplied eps (gradient checks, resume determinism).
    EncoderOutput encode_with_eps(ag::Tape& t, const std::vector<TokenSequence>& batch,
                                  const Tensor& eps) const;

    // Tape-free mean path for pair materialization and evaluation.
    Tensor mean_numeric(const std::vector<TokenSequence>& batch) const;

    void collect(std::vector<ag::Param*>& out);
    int latent_dim() const { return latent_dim_; }
    double noise_std() const { return noise_std_; }

  private:
    ag::Var mean_from_tokens(ag::Tape& t, const std::vector<TokenSequence>& batch) const;

    EncoderArch arch_ = EncoderArch::mlp;
    int vocab_ = 0, seq_len_ = 0, latent_dim_ = 0, embed_dim_ = 0;
    double noise_std_ = 0.5;
    nn::EmbeddingTable embed_;
    nn::Mlp mlp_;  // mlp arch: [B x T*e] -> [B x D]
    // conv_grid arch: [B x e x H x W] -> stride-2 -> stride-2 -> [B x C x h x w]
    nn::Conv2d conv1_, conv2_;
    int grid_h_ = 0, grid_w_ = 0, lat_h_ = 0, lat_w_ = 0, lat_c_ = 0;
};

// Token-logit head mapping latents back to per-position vocabulary logits.
// Mirrors the encoder architecture (dense head for mlp, two transpose
// convolutions for conv_grid).
class ReconstructionHead {
  public:
    ReconstructionHead() = default;
    ReconstructionHead(const ExperimentConfig& cfg, Rng& init_rng);

    // u [B x D] -> logits [B*T x V], row r = logits of position r % T in
    // example r / T.
    ag::Var logits_rows(ag::Tape& t, ag::Var u) const;
    Tensor logits_rows_numeric(const Tensor& u) const;

    void collect(std::vector<ag::Param*>& out);

  private:
    EncoderArch arch_ = EncoderArch::mlp;
    int vocab_ = 0, seq_len_ = 0, latent_dim_ = 0;
    nn::Mlp mlp_;  // mlp arch: [B x D] -> [B x T*V]
    nn::ConvTranspose2d deconv1_, deconv2_;
    nn::Conv2d to_logits_;  // 1x1 conv to V channels
    int grid_h_ = 0, grid_w_ = 0, lat_h_ = 0, lat_w_ = 0, lat_c_ = 0;
};

// Per-example sum over positions of token cross-entropy, averaged over the
// batch. logits_rows is [B*T x V] in the layout produced by the head.
ag::Var reconstruction_loss(ag::Tape& t, ag::Var logits_rows, const std::vector<TokenSequence>& batch);

// KL(N(mean_b, s^2 I) || N(0, I)) = 1/2 sum_d (s^2 + mean_bd^2 - 1 - ln s^2),
// averaged over the batch.
ag::Var kl_to_standard_normal(ag::Tape& t, ag::Var mean, double noise_std);

}  // namespace couplegen::model
