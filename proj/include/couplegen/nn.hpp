#pragma once

#include <memory>
#include <string>
#include <vector>

#include "couplegen/autodiff.hpp"
#include "couplegen/rng.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::nn {

// Small layer library on top of the tape. Every layer exposes both a tape
// forward (training, input gradients) and a tape-free numeric forward (flow
// inversion, samplers, exact enumeration), sharing the same kernels so the
// two paths agree bitwise.

enum class Act { tanh, gelu, none };

struct Layer {
    virtual ~Layer() = default;
    virtual void collect(std::vector<ag::Param*>& out) = 0;
};

struct Linear : Layer {
    ag::Param w;  // [in x out]
    ag::Param b;  // [out]

    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double w_scale = 1.0);
    static Linear zero_init(const std::string& name, std::size_t in, std::size_t out);

    ag::Var forward(ag::Tape& t, ag::Var x) const;
    ag::Var forward(ag::Tape& t, ag::Var x, ag::Var w_var, ag::Var b_var) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override {
        out.push_back(&w);
        out.push_back(&b);
    }
    std::size_t in_dim() const { return w.value.dim(0); }
    std::size_t out_dim() const { return w.value.dim(1); }
};

struct Mlp : Layer {
    std::vector<Linear> layers;
    Act hidden_act = Act::tanh;

    Mlp() = default;
    // dims = {in, h1, ..., out}; final layer linear (no activation).
    Mlp(const std::string& name, const std::vector<std::size_t>& dims, Act act, Rng& rng,
        bool zero_init_last = false);

    ag::Var forward(ag::Tape& t, ag::Var x) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override {
        for (auto& l : layers) l.collect(out);
    }
};

struct EmbeddingTable : Layer {
    ag::Param table;  // [rows x dim]

    EmbeddingTable() = default;
    EmbeddingTable(const std::string& name, std::size_t rows, std::size_t dim, Rng& rng);
    ag::Var forward(ag::Tape& t, const std::vector<int>& tokens) const;
    Tensor forward_numeric(const std::vector<int>& tokens) const;
    void collect(std::vector<ag::Param*>& out) override { out.push_back(&table); }
};

struct LayerNorm : Layer {
    ag::Param gamma, beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, std::size_t dim);
    ag::Var forward(ag::Tape& t, ag::Var x) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// Pre-norm bidirectional self-attention block: x + proj(mha(ln1 x)), then
// x + ffn(ln2 x). Operates on a single sequence [T x width].
struct AttentionBlock : Layer {
    std::size_t width = 0, heads = 1;
    LayerNorm ln1, ln2;
    Linear qkv;   // width -> 3*width
    Linear proj;  // width -> width
    Mlp ffn;      // width -> 4*width -> width

    AttentionBlock() = default;
    AttentionBlock(const std::string& name, std::size_t width, std::size_t heads, Rng& rng);
    ag::Var forward(ag::Tape& t, ag::Var x) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override;
};

struct TransformerStack : Layer {
    std::vector<AttentionBlock> blocks;
    ag::Param pos;  // [T x width] learned positions

    TransformerStack() = default;
    TransformerStack(const std::string& name, std::size_t seq_len, std::size_t width, std::size_t depth,
                     std::size_t heads, Rng& rng);
    ag::Var forward(ag::Tape& t, ag::Var x) const;  // x [T x width]
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override;
};

struct Conv2d : Layer {
    ag::Param w;  // [cout x cin x kh x kw]
    ag::Param b;  // [cout]
    std::size_t stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
           std::size_t pad, Rng& rng);
    ag::Var forward(ag::Tape& t, ag::Var x) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct ConvTranspose2d : Layer {
    ag::Param w;  // [cin x cout x kh x kw]
    ag::Param b;  // [cout]
    std::size_t stride = 1, pad = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t stride, std::size_t pad, Rng& rng);
    ag::Var forward(ag::Tape& t, ag::Var x) const;
    Tensor forward_numeric(const Tensor& x) const;
    void collect(std::vector<ag::Param*>& out) override {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// Canonical digest over a parameter list: name, dims, raw little-endian
// payload, in registration order. Used for freeze checks and no-update proofs.
std::string param_digest(const std::vector<ag::Param*>& params);

void zero_grads(std::vector<ag::Param*>& params);

}  // namespace couplegen::nn
