#include "couplegen/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace couplegen::optim {

void AdamW::ensure_state(const std::vector<ag::Param*>& params) {
    if (!m.empty()) {
        if (m.size() != params.size()) throw std::runtime_error("adamw: parameter list changed");
        return;
    }
    m.reserve(params.size());
    v.reserve(params.size());
    for (const ag::Param* p : params) {
        m.push_back(Tensor::zeros(p->value.shape));
        v.push_back(Tensor::zeros(p->value.shape));
    }
}

void AdamW::step(std::vector<ag::Param*>& params, double lr) {
    ensure_state(params);
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, double(step_count));
    const double bc2 = 1.0 - std::pow(beta2, double(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        ag::Param& p = *params[i];
        if (p.grad.size() != p.value.size()) p.grad = Tensor::zeros(p.value.shape);
        double* mv = m[i].data.data();
        double* vv = v[i].data.data();
        double* pv = p.value.data.data();
        const double* gv = p.grad.data.data();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            mv[j] = beta1 * mv[j] + (1.0 - beta1) * gv[j];
            vv[j] = beta2 * vv[j] + (1.0 - beta2) * gv[j] * gv[j];
            const double mhat = mv[j] / bc1;
            const double vhat = vv[j] / bc2;
            pv[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pv[j]);
        }
    }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (total_steps <= 0) return base_lr;
    if (warmup_steps > 0 && step < warmup_steps) return base_lr * double(step + 1) / double(warmup_steps);
    const double span = double(std::max<std::int64_t>(1, total_steps - warmup_steps));
    const double frac = double(step - warmup_steps) / span;
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979324 * std::min(1.0, std::max(0.0, frac))));
}

void Ema::init(const std::vector<ag::Param*>& params) {
    shadow.clear();
    shadow.reserve(params.size());
    for (const ag::Param* p : params) shadow.push_back(p->value);
}

void Ema::update(const std::vector<ag::Param*>& params) {
    if (!enabled()) return;
    if (shadow.empty()) init(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* sv = shadow[i].data.data();
        const double* pv = params[i]->value.data.data();
        for (std::size_t j = 0; j < shadow[i].size(); ++j)
            sv[j] = decay * sv[j] + (1.0 - decay) * pv[j];
    }
}

void Ema::swap(std::vector<ag::Param*>& params) {
    if (!enabled() || shadow.empty()) return;
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value.data.swap(shadow[i].data);
}

}  // namespace couplegen::optim
