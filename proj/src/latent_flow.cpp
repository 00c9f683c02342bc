#include "couplegen/latent_flow.hpp"

#include <cmath>
#include <stdexcept>

#include "couplegen/kernels.hpp"

namespace couplegen::model {

namespace {
constexpr double kLn2Pi = 1.8378770664093454836;
}

CouplingFlow::CouplingFlow(const ExperimentConfig& cfg, Rng& init_rng)
    : dim_(cfg.model.latent_dim), clamp_(cfg.flow.scale_clamp), subnet_(cfg.flow.subnet) {
    if (dim_ < 2) throw ConfigError("flow: latent_dim must be at least 2");
    const std::size_t D = std::size_t(dim_);
    if (subnet_ == FlowSubnet::attention) {
        tok_c_ = cfg.model.latent_channels;
        if (tok_c_ < 2 || dim_ % tok_c_ != 0)
            throw ConfigError("flow: attention subnet needs latent_dim divisible by latent_channels >= 2");
        tok_p_ = dim_ / tok_c_;
    }
    blocks_.resize(std::size_t(cfg.flow.num_blocks));
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        Block& blk = blocks_[k];
        blk.mask.assign(D, 0.0);
        if (subnet_ == FlowSubnet::mlp) {
            // Contiguous halves, alternating which half conditions.
            const std::size_t half = (D + 1) / 2;
            for (std::size_t d = 0; d < D; ++d)
                blk.mask[d] = ((d < half) == (k % 2 == 0)) ? 1.0 : 0.0;
            std::vector<std::size_t> dims;
            dims.push_back(D);
            for (int l = 0; l < cfg.flow.layers_per_block; ++l)
                dims.push_back(std::size_t(cfg.flow.hidden_width));
            dims.push_back(2 * D);
            blk.mlp = nn::Mlp("flow.b" + std::to_string(k) + ".subnet", dims, nn::Act::gelu,
                              init_rng, /*zero_init_last=*/true);
        } else {
            // Channel halves within each latent-grid token, alternating.
            const int chalf = (tok_c_ + 1) / 2;
            for (std::size_t d = 0; d < D; ++d) {
                const int c = int(d % std::size_t(tok_c_));
                blk.mask[d] = ((c < chalf) == (k % 2 == 0)) ? 1.0 : 0.0;
            }
            const std::string base = "flow.b" + std::to_string(k);
            const std::size_t w = std::size_t(cfg.flow.hidden_width);
            blk.tok_in = nn::Linear(base + ".tok_in", std::size_t(tok_c_), w, init_rng);
            blk.stack = nn::TransformerStack(base + ".stack", std::size_t(tok_p_), w,
                                             std::size_t(cfg.flow.layers_per_block),
                                             std::size_t(cfg.flow.heads), init_rng);
            blk.tok_out = nn::Linear::zero_init(base + ".tok_out", w, 2 * std::size_t(tok_c_));
        }
    }
}

ag::Var CouplingFlow::subnet_raw(ag::Tape& t, const Block& blk, ag::Var cond) const {
    if (subnet_ == FlowSubnet::mlp) return blk.mlp.forward(t, cond);
    const std::size_t B = t.val(cond).dim(0);
    const std::size_t P = std::size_t(tok_p_), C = std::size_t(tok_c_), D = std::size_t(dim_);
    ag::Var flat = ag::reshape(cond, {1, B * D});
    std::vector<ag::Var> s_rows, shift_rows;
    for (std::size_t b = 0; b < B; ++b) {
        ag::Var ex = ag::reshape(ag::slice_cols(flat, b * D, (b + 1) * D), {P, C});
        ag::Var h = blk.tok_in.forward(t, ex);
        h = blk.stack.forward(t, h);
        ag::Var out = blk.tok_out.forward(t, h);  // [P x 2C]
        s_rows.push_back(ag::reshape(ag::slice_cols(out, 0, C), {1, D}));
        shift_rows.push_back(ag::reshape(ag::slice_cols(out, C, 2 * C), {1, D}));
    }
    ag::Var s_all = ag::reshape(ag::concat_cols(s_rows), {B, D});
    ag::Var shift_all = ag::reshape(ag::concat_cols(shift_rows), {B, D});
    return ag::concat_cols({s_all, shift_all});  // [B x 2D]
}

Tensor CouplingFlow::subnet_raw_numeric(const Block& blk, const Tensor& cond) const {
    if (subnet_ == FlowSubnet::mlp) return blk.mlp.forward_numeric(cond);
    const std::size_t B = cond.dim(0);
    const std::size_t P = std::size_t(tok_p_), C = std::size_t(tok_c_), D = std::size_t(dim_);
    Tensor raw = Tensor::zeros({B, 2 * D});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor ex = Tensor::zeros({P, C});
        for (std::size_t i = 0; i < D; ++i) ex.data[i] = cond.data[b * D + i];
        Tensor h = blk.tok_in.forward_numeric(ex);
        h = blk.stack.forward_numeric(h);
        Tensor out = blk.tok_out.forward_numeric(h);  // [P x 2C]
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                raw.at(b, p * C + c) = out.at(p, c);
                raw.at(b, D + p * C + c) = out.at(p, C + c);
            }
    }
    return raw;
}

CouplingFlow::Forward CouplingFlow::forward(ag::Tape& t, ag::Var u) const {
    const Tensor& uv = t.val(u);
    if (uv.rank() != 2 || uv.dim(1) != std::size_t(dim_))
        throw std::invalid_argument("flow: expected [B x D] input");
    const std::size_t D = std::size_t(dim_);

    ag::Var h = u;
    ag::Var sum_logdet = t.constant(Tensor::scalar(0.0));
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const Block& blk = blocks_[k];
        Tensor mask_row({D}, blk.mask);
        Tensor free_row({D}, blk.mask);
        for (double& v : free_row.data) v = 1.0 - v;

        ag::Var cond = ag::mul_rowvec_const(h, mask_row);
        ag::Var raw = subnet_raw(t, blk, cond);
        ag::Var s_raw = ag::slice_cols(raw, 0, D);
        ag::Var shift = ag::slice_cols(raw, D, 2 * D);
        // Soft-clamped log-scale restricted to the free half.
        ag::Var s = ag::scale(ag::tanh_(ag::scale(s_raw, 1.0 / clamp_)), clamp_);
        s = ag::mul_rowvec_const(s, free_row);
        shift = ag::mul_rowvec_const(shift, free_row);
        h = ag::add(ag::mul(h, ag::exp_(s)), shift);
        sum_logdet = ag::add(sum_logdet, ag::sum_all(s));
        if (k + 1 < blocks_.size()) h = ag::reverse_cols(h);
    }
    return {h, sum_logdet};
}

Tensor CouplingFlow::forward_numeric(const Tensor& u, std::vector<double>* logdet) const {
    if (u.rank() != 2 || u.dim(1) != std::size_t(dim_))
        throw std::invalid_argument("flow: expected [B x D] input");
    const std::size_t B = u.dim(0), D = std::size_t(dim_);
    // Match the tape's rounding exactly: it multiplies by 1/clamp rather than
    // dividing, so the numeric path must too for bitwise agreement.
    const double inv_clamp = 1.0 / clamp_;
    Tensor h = u;
    std::vector<double> ld(B, 0.0);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const Block& blk = blocks_[k];
        Tensor cond = h;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) cond.at(b, d) *= blk.mask[d];
        const Tensor raw = subnet_raw_numeric(blk, cond);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) {
                if (blk.mask[d] != 0.0) continue;
                const double s = std::tanh(raw.at(b, d) * inv_clamp) * clamp_;
                h.at(b, d) = h.at(b, d) * std::exp(s) + raw.at(b, D + d);
                ld[b] += s;
            }
        if (k + 1 < blocks_.size())
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D / 2; ++d) std::swap(h.at(b, d), h.at(b, D - 1 - d));
    }
    if (logdet) *logdet = std::move(ld);
    return h;
}

Tensor CouplingFlow::inverse(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != std::size_t(dim_))
        throw std::invalid_argument("flow: expected [B x D] input");
    const std::size_t B = z.dim(0), D = std::size_t(dim_);
    Tensor h = z;
    for (std::size_t kk = blocks_.size(); kk-- > 0;) {
        if (kk + 1 < blocks_.size())
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D / 2; ++d) std::swap(h.at(b, d), h.at(b, D - 1 - d));
        const Block& blk = blocks_[kk];
        Tensor cond = h;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) cond.at(b, d) *= blk.mask[d];
        const Tensor raw = subnet_raw_numeric(blk, cond);
        const double inv_clamp = 1.0 / clamp_;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) {
                if (blk.mask[d] != 0.0) continue;
                const double s = std::tanh(raw.at(b, d) * inv_clamp) * clamp_;
                h.at(b, d) = (h.at(b, d) - raw.at(b, D + d)) * std::exp(-s);
            }
    }
    return h;
}

ag::Var CouplingFlow::nll(ag::Tape& t, const Forward& f) const {
    const std::size_t B = t.val(f.z).dim(0);
    ag::Var sq = ag::scale(ag::sum_all(ag::mul(f.z, f.z)), 0.5);
    ag::Var centered = ag::scale(ag::sub(sq, f.sum_logdet), 1.0 / double(B));
    return ag::add_scalar(centered, 0.5 * kLn2Pi * double(dim_));
}

double CouplingFlow::nll_numeric(const Tensor& u) const {
    std::vector<double> ld;
    const Tensor z = forward_numeric(u, &ld);
    const std::size_t B = u.dim(0);
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double sq = 0.0;
        for (std::size_t d = 0; d < std::size_t(dim_); ++d) sq += z.at(b, d) * z.at(b, d);
        acc += 0.5 * sq - ld[b];
    }
    return 0.5 * kLn2Pi * double(dim_) + acc / double(B);
}

void CouplingFlow::collect(std::vector<ag::Param*>& out) {
    for (auto& blk : blocks_) {
        if (subnet_ == FlowSubnet::mlp) {
            blk.mlp.collect(out);
        } else {
            blk.tok_in.collect(out);
            blk.stack.collect(out);
            blk.tok_out.collect(out);
        }
    }
}

}  // namespace couplegen::model
