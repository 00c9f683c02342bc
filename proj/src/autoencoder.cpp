#include "couplegen/autoencoder.hpp"

#include <cmath>
#include <stdexcept>

namespace couplegen::model {

namespace {

void gelu_inplace(Tensor& h) {
    constexpr double kA = 0.7978845608028654, kB = 0.044715;
    for (double& v : h.data) v = 0.5 * v * (1.0 + std::tanh(kA * (v + kB * v * v * v)));
}

Tensor permute_numeric(const Tensor& in, const std::vector<std::size_t>& perm,
                       std::vector<std::size_t> out_shape) {
    Tensor out;
    out.shape = std::move(out_shape);
    out.data.resize(in.data.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out.data[i] = in.data[perm[i]];
    return out;
}

// [B*T x e] token rows -> [B x e x H x W] channel-major grid.
std::vector<std::size_t> perm_tokens_to_grid(std::size_t B, std::size_t T, std::size_t e) {
    std::vector<std::size_t> perm(B * T * e);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < e; ++c)
            for (std::size_t p = 0; p < T; ++p)
                perm[b * e * T + c * T + p] = (b * T + p) * e + c;
    return perm;
}

// [B x C x h x w] -> [B x (h*w*C)] position-major latent rows.
std::vector<std::size_t> perm_grid_to_latent(std::size_t B, std::size_t C, std::size_t P) {
    std::vector<std::size_t> perm(B * C * P);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c)
                perm[b * P * C + p * C + c] = b * C * P + c * P + p;
    return perm;
}

// [B x (h*w*C)] position-major latents -> [B x C x h x w].
std::vector<std::size_t> perm_latent_to_grid(std::size_t B, std::size_t C, std::size_t P) {
    std::vector<std::size_t> perm(B * C * P);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p)
                perm[b * C * P + c * P + p] = b * P * C + p * C + c;
    return perm;
}

// [B x V x H x W] channel logits -> [B*T x V] per-position rows.
std::vector<std::size_t> perm_grid_to_rows(std::size_t B, std::size_t V, std::size_t T) {
    std::vector<std::size_t> perm(B * V * T);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < T; ++p)
            for (std::size_t v = 0; v < V; ++v)
                perm[(b * T + p) * V + v] = b * V * T + v * T + p;
    return perm;
}

std::vector<int> flatten_tokens(const std::vector<TokenSequence>& batch, int vocab, int seq_len) {
    std::vector<int> out;
    out.reserve(batch.size() * std::size_t(seq_len));
    for (const auto& x : batch) {
        if (int(x.size()) != seq_len) throw std::invalid_argument("encoder: sequence length mismatch");
        validate_tokens(x, vocab, /*allow_mask=*/false);
        out.insert(out.end(), x.begin(), x.end());
    }
    return out;
}

}  // namespace

ReparamEncoder::ReparamEncoder(const ExperimentConfig& cfg, Rng& init_rng)
    : arch_(cfg.model.encoder),
      vocab_(cfg.data.vocab_size),
      seq_len_(cfg.data.seq_len),
      latent_dim_(cfg.model.latent_dim),
      embed_dim_(cfg.model.embed_dim),
      noise_std_(cfg.stage_a.latent_noise_std),
      embed_("enc.embed", std::size_t(cfg.data.vocab_size), std::size_t(cfg.model.embed_dim), init_rng) {
    if (arch_ == EncoderArch::mlp) {
        std::vector<std::size_t> dims;
        dims.push_back(std::size_t(seq_len_) * std::size_t(embed_dim_));
        for (int i = 0; i < cfg.model.encoder_depth; ++i)
            dims.push_back(std::size_t(cfg.model.encoder_width));
        dims.push_back(std::size_t(latent_dim_));
        mlp_ = nn::Mlp("enc.mlp", dims, nn::Act::gelu, init_rng);
    } else {
        grid_h_ = cfg.model.grid_h;
        grid_w_ = cfg.model.grid_w;
        lat_h_ = cfg.model.latent_grid_h;
        lat_w_ = cfg.model.latent_grid_w;
        lat_c_ = cfg.model.latent_channels;
        if (grid_h_ != 4 * lat_h_ || grid_w_ != 4 * lat_w_)
            throw ConfigError("grid encoder: token grid must be 4x the latent grid (two stride-2 stages)");
        const std::size_t w = std::size_t(cfg.model.encoder_width);
        conv1_ = nn::Conv2d("enc.conv1", std::size_t(embed_dim_), w, 3, 2, 1, init_rng);
        conv2_ = nn::Conv2d("enc.conv2", w, std::size_t(lat_c_), 3, 2, 1, init_rng);
    }
}

ag::Var ReparamEncoder::mean_from_tokens(ag::Tape& t, const std::vector<TokenSequence>& batch) const {
    const std::size_t B = batch.size(), T = std::size_t(seq_len_), e = std::size_t(embed_dim_);
    const std::vector<int> toks = flatten_tokens(batch, vocab_, seq_len_);
    ag::Var emb = embed_.forward(t, toks);  // [B*T x e]
    if (arch_ == EncoderArch::mlp) {
        ag::Var flat = ag::reshape(emb, {B, T * e});
        return mlp_.forward(t, flat);
    }
    ag::Var grid = ag::permute_elements(emb, perm_tokens_to_grid(B, T, e),
                                        {B, e, std::size_t(grid_h_), std::size_t(grid_w_)});
    ag::Var h1 = ag::gelu(conv1_.forward(t, grid));
    ag::Var h2 = conv2_.forward(t, h1);  // [B x C x lh x lw]
    const std::size_t P = std::size_t(lat_h_) * std::size_t(lat_w_);
    ag::Var rows = ag::permute_elements(h2, perm_grid_to_latent(B, std::size_t(lat_c_), P),
                                        {B * P, std::size_t(lat_c_)});
    return ag::reshape(rows, {B, std::size_t(latent_dim_)});
}

EncoderOutput ReparamEncoder::encode(ag::Tape& t, const std::vector<TokenSequence>& batch,
                                     Rng& noise_rng) const {
    Tensor eps = Tensor::zeros({batch.size(), std::size_t(latent_dim_)});
    for (double& v : eps.data) v = noise_rng.normal();
    return encode_with_eps(t, batch, eps);
}

EncoderOutput ReparamEncoder::encode_with_eps(ag::Tape& t, const std::vector<TokenSequence>& batch,
                                              const Tensor& eps) const {
    EncoderOutput out;
    out.mean = mean_from_tokens(t, batch);
    require_same_shape(t.val(out.mean), eps, "encoder eps");
    Tensor scaled = eps;
    for (double& v : scaled.data) v *= noise_std_;
    out.sampled = ag::add(out.mean, t.constant(std::move(scaled)));
    out.eps = eps;
    return out;
}

Tensor ReparamEncoder::mean_numeric(const std::vector<TokenSequence>& batch) const {
    const std::size_t B = batch.size(), T = std::size_t(seq_len_), e = std::size_t(embed_dim_);
    const std::vector<int> toks = flatten_tokens(batch, vocab_, seq_len_);
    Tensor emb = embed_.forward_numeric(toks);
    if (arch_ == EncoderArch::mlp) {
        emb.shape = {B, T * e};
        return mlp_.forward_numeric(emb);
    }
    Tensor grid = permute_numeric(emb, perm_tokens_to_grid(B, T, e),
                                  {B, e, std::size_t(grid_h_), std::size_t(grid_w_)});
    Tensor h1 = conv1_.forward_numeric(grid);
    gelu_inplace(h1);
    Tensor h2 = conv2_.forward_numeric(h1);
    const std::size_t P = std::size_t(lat_h_) * std::size_t(lat_w_);
    Tensor rows = permute_numeric(h2, perm_grid_to_latent(B, std::size_t(lat_c_), P),
                                  {B, std::size_t(latent_dim_)});
    return rows;
}

void ReparamEncoder::collect(std::vector<ag::Param*>& out) {
    embed_.collect(out);
    if (arch_ == EncoderArch::mlp) {
        mlp_.collect(out);
    } else {
        conv1_.collect(out);
        conv2_.collect(out);
    }
}

ReconstructionHead::ReconstructionHead(const ExperimentConfig& cfg, Rng& init_rng)
    : arch_(cfg.model.encoder),
      vocab_(cfg.data.vocab_size),
      seq_len_(cfg.data.seq_len),
      latent_dim_(cfg.model.latent_dim) {
    if (arch_ == EncoderArch::mlp) {
        std::vector<std::size_t> dims;
        dims.push_back(std::size_t(latent_dim_));
        for (int i = 0; i < cfg.model.encoder_depth; ++i)
            dims.push_back(std::size_t(cfg.model.encoder_width));
        dims.push_back(std::size_t(seq_len_) * std::size_t(vocab_));
        mlp_ = nn::Mlp("rec.mlp", dims, nn::Act::gelu, init_rng);
    } else {
        grid_h_ = cfg.model.grid_h;
        grid_w_ = cfg.model.grid_w;
        lat_h_ = cfg.model.latent_grid_h;
        lat_w_ = cfg.model.latent_grid_w;
        lat_c_ = cfg.model.latent_channels;
        const std::size_t w = std::size_t(cfg.model.encoder_width);
        deconv1_ = nn::ConvTranspose2d("rec.deconv1", std::size_t(lat_c_), w, 4, 2, 1, init_rng);
        deconv2_ = nn::ConvTranspose2d("rec.deconv2", w, w, 4, 2, 1, init_rng);
        to_logits_ = nn::Conv2d("rec.to_logits", w, std::size_t(vocab_), 1, 1, 0, init_rng);
    }
}

ag::Var ReconstructionHead::logits_rows(ag::Tape& t, ag::Var u) const {
    const std::size_t B = t.val(u).dim(0);
    if (arch_ == EncoderArch::mlp) {
        ag::Var flat = mlp_.forward(t, u);  // [B x T*V]
        return ag::reshape(flat, {B * std::size_t(seq_len_), std::size_t(vocab_)});
    }
    const std::size_t P = std::size_t(lat_h_) * std::size_t(lat_w_);
    ag::Var grid = ag::permute_elements(u, perm_latent_to_grid(B, std::size_t(lat_c_), P),
                                        {B, std::size_t(lat_c_), std::size_t(lat_h_), std::size_t(lat_w_)});
    ag::Var h1 = ag::gelu(deconv1_.forward(t, grid));
    ag::Var h2 = ag::gelu(deconv2_.forward(t, h1));
    ag::Var lg = to_logits_.forward(t, h2);  // [B x V x H x W]
    return ag::permute_elements(lg, perm_grid_to_rows(B, std::size_t(vocab_), std::size_t(seq_len_)),
                                {B * std::size_t(seq_len_), std::size_t(vocab_)});
}

Tensor ReconstructionHead::logits_rows_numeric(const Tensor& u) const {
    const std::size_t B = u.dim(0);
    if (arch_ == EncoderArch::mlp) {
        Tensor flat = mlp_.forward_numeric(u);
        flat.shape = {B * std::size_t(seq_len_), std::size_t(vocab_)};
        return flat;
    }
    const std::size_t P = std::size_t(lat_h_) * std::size_t(lat_w_);
    Tensor grid = permute_numeric(u, perm_latent_to_grid(B, std::size_t(lat_c_), P),
                                  {B, std::size_t(lat_c_), std::size_t(lat_h_), std::size_t(lat_w_)});
    Tensor h1 = deconv1_.forward_numeric(grid);
    gelu_inplace(h1);
    Tensor h2 = deconv2_.forward_numeric(h1);
    gelu_inplace(h2);
    Tensor lg = to_logits_.forward_numeric(h2);
    return permute_numeric(lg, perm_grid_to_rows(B, std::size_t(vocab_), std::size_t(seq_len_)),
                           {B * std::size_t(seq_len_), std::size_t(vocab_)});
}

void ReconstructionHead::collect(std::vector<ag::Param*>& out) {
    if (arch_ == EncoderArch::mlp) {
        mlp_.collect(out);
    } else {
        deconv1_.collect(out);
        deconv2_.collect(out);
        to_logits_.collect(out);
    }
}

ag::Var reconstruction_loss(ag::Tape& t, ag::Var logits_rows,
                            const std::vector<TokenSequence>& batch) {
    const std::size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("reconstruction_loss: empty batch");
    const std::size_t T = batch[0].size();
    if (t.val(logits_rows).dim(0) != B * T)
        throw std::invalid_argument("reconstruction_loss: row count mismatch");
    std::vector<int> targets;
    targets.reserve(B * T);
    for (const auto& x : batch) targets.insert(targets.end(), x.begin(), x.end());
    const std::vector<double> weights(B * T, 1.0 / double(B));
    return ag::nll(logits_rows, targets, weights);
}

ag::Var kl_to_standard_normal(ag::Tape& t, ag::Var mean, double noise_std) {
    const std::size_t B = t.val(mean).dim(0);
    const std::size_t D = t.val(mean).dim(1);
    const double s2 = noise_std * noise_std;
    const double per_dim_const = 0.5 * (s2 - 1.0 - std::log(s2));
    ag::Var sq = ag::mul(mean, mean);
    ag::Var mean_term = ag::scale(ag::sum_all(sq), 0.5 / double(B));
    return ag::add_scalar(mean_term, per_dim_const * double(D));
}

}  // namespace couplegen::model
