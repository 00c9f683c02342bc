#include "couplegen/nn.hpp"

#include <cmath>
#include <cstring>

#include "couplegen/kernels.hpp"
#include "couplegen/sha256.hpp"

namespace couplegen::nn {

namespace kn = couplegen::kernels;

namespace {
Tensor randn(std::vector<std::size_t> shape, Rng& rng, double std) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = std * rng.normal();
    return t;
}
}  // namespace

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double w_scale)
    : w(name + ".w", randn({in, out}, rng, w_scale / std::sqrt(double(in)))),
      b(name + ".b", Tensor::zeros({out})) {}

Linear Linear::zero_init(const std::string& name, std::size_t in, std::size_t out) {
    Linear l;
    l.w = ag::Param(name + ".w", Tensor::zeros({in, out}));
    l.b = ag::Param(name + ".b", Tensor::zeros({out}));
    return l;
}

ag::Var Linear::forward(ag::Tape& t, ag::Var x) const {
    ag::Var wv = t.param(const_cast<ag::Param&>(w));
    ag::Var bv = t.param(const_cast<ag::Param&>(b));
    return forward(t, x, wv, bv);
}

ag::Var Linear::forward(ag::Tape&, ag::Var x, ag::Var w_var, ag::Var b_var) const {
    return ag::add_rowvec(ag::matmul(x, w_var), b_var);
}

Tensor Linear::forward_numeric(const Tensor& x) const {
    const std::size_t m = x.rows(), k = x.cols(), n = w.value.dim(1);
    Tensor out({m, n});
    kn::matmul_nn(x.data.data(), w.value.data.data(), out.data.data(), m, k, n);
    Tensor res({m, n});
    kn::add_row_bias(out.data.data(), b.value.data.data(), res.data.data(), m, n);
    return res;
}

Mlp::Mlp(const std::string& name, const std::vector<std::size_t>& dims, Act act, Rng& rng,
         bool zero_init_last)
    : hidden_act(act) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const std::string lname = name + ".l" + std::to_string(i);
        const bool last = (i + 2 == dims.size());
        if (last && zero_init_last)
            layers.push_back(Linear::zero_init(lname, dims[i], dims[i + 1]));
        else
            layers.push_back(Linear(lname, dims[i], dims[i + 1], rng));
    }
}

ag::Var Mlp::forward(ag::Tape& t, ag::Var x) const {
    ag::Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(t, h);
        if (i + 1 < layers.size()) {
            if (hidden_act == Act::tanh) h = ag::tanh_(h);
            else if (hidden_act == Act::gelu) h = ag::gelu(h);
        }
    }
    return h;
}

Tensor Mlp::forward_numeric(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward_numeric(h);
        if (i + 1 < layers.size()) {
            if (hidden_act == Act::tanh) {
                kn::map_tanh(h.data.data(), h.data.data(), h.size());
            } else if (hidden_act == Act::gelu) {
                constexpr double kA = 0.7978845608028654, kB = 0.044715;
                for (double& v : h.data) v = 0.5 * v * (1.0 + std::tanh(kA * (v + kB * v * v * v)));
            }
        }
    }
    return h;
}

EmbeddingTable::EmbeddingTable(const std::string& name, std::size_t rows, std::size_t dim, Rng& rng)
    : table(name + ".table", randn({rows, dim}, rng, 1.0)) {}

ag::Var EmbeddingTable::forward(ag::Tape& t, const std::vector<int>& tokens) const {
    return ag::embedding(t.param(const_cast<ag::Param&>(table)), tokens);
}

Tensor EmbeddingTable::forward_numeric(const std::vector<int>& tokens) const {
    const std::size_t d = table.value.dim(1);
    Tensor out({tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i)
        std::memcpy(out.data.data() + i * d, table.value.data.data() + std::size_t(tokens[i]) * d,
                    d * sizeof(double));
    return out;
}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim)
    : gamma(name + ".gamma", Tensor::full({dim}, 1.0)), beta(name + ".beta", Tensor::zeros({dim})) {}

ag::Var LayerNorm::forward(ag::Tape& t, ag::Var x) const {
    return ag::layer_norm(x, t.param(const_cast<ag::Param&>(gamma)), t.param(const_cast<ag::Param&>(beta)));
}

Tensor LayerNorm::forward_numeric(const Tensor& x) const {
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out(x.shape);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x.data.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xi[j];
        mu /= double(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= double(n);
        const double is = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < n; ++j)
            out.data[i * n + j] = gamma.value.data[j] * ((xi[j] - mu) * is) + beta.value.data[j];
    }
    return out;
}

AttentionBlock::AttentionBlock(const std::string& name, std::size_t width_, std::size_t heads_, Rng& rng)
    : width(width_),
      heads(heads_),
      ln1(name + ".ln1", width_),
      ln2(name + ".ln2", width_),
      qkv(name + ".qkv", width_, 3 * width_, rng),
      proj(name + ".proj", width_, width_, rng),
      ffn(name + ".ffn", {width_, 4 * width_, width_}, Act::gelu, rng) {
    if (width_ % heads_ != 0) throw std::invalid_argument("attention: width must divide by heads");
}

ag::Var AttentionBlock::forward(ag::Tape& t, ag::Var x) const {
    const std::size_t dh = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    ag::Var h = ln1.forward(t, x);
    ag::Var qkv_out = qkv.forward(t, h);  // [T x 3w]
    ag::Var q = ag::slice_cols(qkv_out, 0, width);
    ag::Var k = ag::slice_cols(qkv_out, width, 2 * width);
    ag::Var v = ag::slice_cols(qkv_out, 2 * width, 3 * width);
    std::vector<ag::Var> head_outs;
    head_outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        ag::Var qh = ag::slice_cols(q, hd * dh, (hd + 1) * dh);
        ag::Var kh = ag::slice_cols(k, hd * dh, (hd + 1) * dh);
        ag::Var vh = ag::slice_cols(v, hd * dh, (hd + 1) * dh);
        ag::Var att = ag::row_softmax(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt));
        head_outs.push_back(ag::matmul(att, vh));
    }
    ag::Var mha = proj.forward(t, ag::concat_cols(head_outs));
    ag::Var y = ag::add(x, mha);
    ag::Var f = ffn.forward(t, ln2.forward(t, y));
    return ag::add(y, f);
}

Tensor AttentionBlock::forward_numeric(const Tensor& x) const {
    const std::size_t T = x.rows(), dh = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    Tensor h = ln1.forward_numeric(x);
    Tensor qkv_out = qkv.forward_numeric(h);
    Tensor mha_in({T, width});
    for (std::size_t hd = 0; hd < heads; ++hd) {
        // Extract per-head q/k/v slabs.
        Tensor qh({T, dh}), kh({T, dh}), vh({T, dh});
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < dh; ++j) {
                qh.data[i * dh + j] = qkv_out.data[i * 3 * width + hd * dh + j];
                kh.data[i * dh + j] = qkv_out.data[i * 3 * width + width + hd * dh + j];
                vh.data[i * dh + j] = qkv_out.data[i * 3 * width + 2 * width + hd * dh + j];
            }
        Tensor scores({T, T});
        kn::matmul_nt(qh.data.data(), kh.data.data(), scores.data.data(), T, dh, T);
        kn::scale(inv_sqrt, scores.data.data(), scores.size());
        Tensor att(scores.shape);
        kn::row_softmax(scores.data.data(), att.data.data(), T, T);
        Tensor oh({T, dh});
        kn::matmul_nn(att.data.data(), vh.data.data(), oh.data.data(), T, T, dh);
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < dh; ++j) mha_in.data[i * width + hd * dh + j] = oh.data[i * dh + j];
    }
    Tensor mha = proj.forward_numeric(mha_in);
    Tensor y(x.shape);
    kn::ewise_add(x.data.data(), mha.data.data(), y.data.data(), y.size());
    Tensor f = ffn.forward_numeric(ln2.forward_numeric(y));
    Tensor out(y.shape);
    kn::ewise_add(y.data.data(), f.data.data(), out.data.data(), out.size());
    return out;
}

void AttentionBlock::collect(std::vector<ag::Param*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    qkv.collect(out);
    proj.collect(out);
    ffn.collect(out);
}

TransformerStack::TransformerStack(const std::string& name, std::size_t seq_len, std::size_t width,
                                   std::size_t depth, std::size_t heads, Rng& rng)
    : pos(name + ".pos", Tensor(std::vector<std::size_t>{seq_len, width})) {
    for (double& v : pos.value.data) v = 0.02 * rng.normal();
    for (std::size_t i = 0; i < depth; ++i)
        blocks.push_back(AttentionBlock(name + ".blk" + std::to_string(i), width, heads, rng));
}

ag::Var TransformerStack::forward(ag::Tape& t, ag::Var x) const {
    ag::Var h = ag::add(x, t.param(const_cast<ag::Param&>(pos)));
    for (const auto& b : blocks) h = b.forward(t, h);
    return h;
}

Tensor TransformerStack::forward_numeric(const Tensor& x) const {
    Tensor h(x.shape);
    kn::ewise_add(x.data.data(), pos.value.data.data(), h.data.data(), h.size());
    for (const auto& b : blocks) h = b.forward_numeric(h);
    return h;
}

void TransformerStack::collect(std::vector<ag::Param*>& out) {
    out.push_back(&pos);
    for (auto& b : blocks) b.collect(out);
}

Conv2d::Conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               std::size_t stride_, std::size_t pad_, Rng& rng)
    : w(name + ".w", randn({cout, cin, k, k}, rng, 1.0 / std::sqrt(double(cin * k * k)))),
      b(name + ".b", Tensor::zeros({cout})),
      stride(stride_),
      pad(pad_) {}

ag::Var Conv2d::forward(ag::Tape& t, ag::Var x) const {
    return ag::conv2d(x, t.param(const_cast<ag::Param&>(w)), t.param(const_cast<ag::Param&>(b)), stride,
                      pad);
}

Tensor Conv2d::forward_numeric(const Tensor& x) const {
    ag::Tape t;
    return t.val(ag::conv2d(t.constant(x), t.constant(w.value), t.constant(b.value), stride, pad));
}

ConvTranspose2d::ConvTranspose2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                                 std::size_t stride_, std::size_t pad_, Rng& rng)
    : w(name + ".w", randn({cin, cout, k, k}, rng, 1.0 / std::sqrt(double(cin * k * k)))),
      b(name + ".b", Tensor::zeros({cout})),
      stride(stride_),
      pad(pad_) {}

ag::Var ConvTranspose2d::forward(ag::Tape& t, ag::Var x) const {
    return ag::conv_transpose2d(x, t.param(const_cast<ag::Param&>(w)), t.param(const_cast<ag::Param&>(b)),
                                stride, pad);
}

Tensor ConvTranspose2d::forward_numeric(const Tensor& x) const {
    ag::Tape t;
    return t.val(ag::conv_transpose2d(t.constant(x), t.constant(w.value), t.constant(b.value), stride, pad));
}

std::string param_digest(const std::vector<ag::Param*>& params) {
    Sha256 h;
    for (const ag::Param* p : params) {
        h.update(p->name.data(), p->name.size());
        const std::uint64_t rank = p->value.rank();
        h.update(&rank, sizeof(rank));
        for (std::size_t d : p->value.shape) {
            const std::uint64_t dd = d;
            h.update(&dd, sizeof(dd));
        }
        h.update(p->value.data.data(), p->value.data.size() * sizeof(double));
    }
    return h.hex_digest();
}

void zero_grads(std::vector<ag::Param*>& params) {
    for (ag::Param* p : params) {
        if (p->grad.size() != p->value.size()) p->grad = Tensor::zeros(p->value.shape);
        std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }
}

}  // namespace couplegen::nn
