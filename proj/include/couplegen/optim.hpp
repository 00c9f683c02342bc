#pragma once

#include <cstdint>
#include <vector>

#include "couplegen/autodiff.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::optim {

// AdamW with decoupled weight decay. Moment buffers are indexed by the
// parameter list order, which is fixed per model; checkpoints serialize them
// under opt.m.<name> / opt.v.<name>.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t step_count = 0;
    std::vector<Tensor> m, v;

    void ensure_state(const std::vector<ag::Param*>& params);
    void step(std::vector<ag::Param*>& params, double lr);
};

// Cosine decay to zero with linear warmup over the first warmup_steps.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps);

// Exponential moving average of parameters; applied at eval/sampling time.
struct Ema {
    double decay = 0.0;  // 0 disables
    std::vector<Tensor> shadow;

    bool enabled() const { return decay > 0.0; }
    void init(const std::vector<ag::Param*>& params);
    void update(const std::vector<ag::Param*>& params);
    // Swap shadow <-> live values (call once to install EMA weights, again to restore).
    void swap(std::vector<ag::Param*>& params);
};

}  // namespace couplegen::optim
