#pragma once

#include <vector>

#include "couplegen/autodiff.hpp"
#include "couplegen/config.hpp"
#include "couplegen/nn.hpp"
#include "couplegen/rng.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::model {

// Invertible map from encoder latents u to the standard-normal base z, built
// from affine coupling blocks with column reversal between blocks. The last
// subnet layer is zero-initialized, so the flow starts as the identity with
// zero log-determinant. Scales are soft-clamped: s = c * tanh(raw / c).
class CouplingFlow {
  public:
    struct Forward {
        ag::Var z;           // [B x D]
        ag::Var sum_logdet;  // scalar: sum over the batch of log|det J|
    };

    CouplingFlow() = default;
    CouplingFlow(const ExperimentConfig& cfg, Rng& init_rng);

    Forward forward(ag::Tape& t, ag::Var u) const;
    // Tape-free forward; per-example log-determinants appended to *logdet
    // when non-null.
    Tensor forward_numeric(const Tensor& u, std::vector<double>* logdet = nullptr) const;
    // Exact inverse (z -> u); uses only numeric subnet evaluations.
    Tensor inverse(const Tensor& z) const;

    // Mean negative log-likelihood of the batch under the standard normal
    // base: D/2 ln(2 pi) + (1/2 sum ||z||^2 - sum logdet) / B.
    ag::Var nll(ag::Tape& t, const Forward& f) const;
    double nll_numeric(const Tensor& u) const;

    void collect(std::vector<ag::Param*>& out);
    int dim() const { return dim_; }
    int num_blocks() const { return int(blocks_.size()); }

  private:
    struct Block {
        std::vector<double> mask;  // [D], 1 = conditioning half (passes through)
        // Dense subnet: [*, D] -> [*, 2D] (first D columns raw scale, last D shift).
        nn::Mlp mlp;
        // Attention subnet over latent-grid tokens [P x C]: in C->width,
        // stack, out width->2C (zero-init).
        nn::Linear tok_in, tok_out;
        nn::TransformerStack stack;
    };

    ag::Var subnet_raw(ag::Tape& t, const Block& blk, ag::Var cond) const;
    Tensor subnet_raw_numeric(const Block& blk, const Tensor& cond) const;

    int dim_ = 0;
    double clamp_ = 5.0;
    FlowSubnet subnet_ = FlowSubnet::mlp;
    int tok_p_ = 0, tok_c_ = 0;  // attention tokenization: P tokens x C channels
    std::vector<Block> blocks_;
};

}  // namespace couplegen::model
