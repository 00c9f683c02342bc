#include "couplegen/few_step_mdm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "couplegen/sampling.hpp"
#include "couplegen/serialize.hpp"
#include "couplegen/sha256.hpp"

namespace couplegen::train {

namespace {

constexpr std::uint64_t kMdmStream = std::uint64_t(2) << 32;
constexpr double kPi = 3.14159265358979323846;

void append_jsonl(const std::string& path, const nlohmann::json& record) {
    std::ofstream out(path, std::ios::app);
    out << record.dump() << "\n";
}

}  // namespace

LatentMaskedDenoiser::LatentMaskedDenoiser(const ExperimentConfig& cfg, int latent_dim,
                                           Rng& init_rng)
    : arch_(cfg.model.denoiser),
      conditional_(cfg.model.conditional),
      vocab_(cfg.data.vocab_size),
      seq_len_(cfg.data.seq_len),
      latent_dim_(latent_dim),
      num_classes_(cfg.data.num_classes) {
    const std::size_t width = std::size_t(cfg.model.denoiser_width);
    const std::size_t depth = std::size_t(cfg.model.denoiser_depth);
    const std::size_t T = std::size_t(seq_len_), V = std::size_t(vocab_);
    if (arch_ == DenoiserArch::mlp) {
        const std::size_t e = std::size_t(cfg.model.embed_dim);
        tok_embed_ = nn::EmbeddingTable("den.tok", V + 1, e, init_rng);
        const std::size_t class_dim = conditional_ ? e : 0;
        if (conditional_)
            class_embed_ = nn::EmbeddingTable("den.class", std::size_t(num_classes_) + 1, e, init_rng);
        std::vector<std::size_t> dims;
        dims.push_back(T * e + std::size_t(latent_dim_) + class_dim);
        for (std::size_t i = 0; i < depth; ++i) dims.push_back(width);
        dims.push_back(T * V);
        mlp_ = nn::Mlp("den.mlp", dims, nn::Act::gelu, init_rng);
    } else {  // attention_seq
        tok_embed_ = nn::EmbeddingTable("den.tok", V + 1, width, init_rng);
        if (conditional_)
            class_embed_ =
                nn::EmbeddingTable("den.class", std::size_t(num_classes_) + 1, width, init_rng);
        if (latent_dim_ > 0) z_in_ = nn::Linear("den.z_in", std::size_t(latent_dim_), width, init_rng);
        stack_ = nn::TransformerStack("den.stack", T, width, depth,
                                      std::size_t(cfg.model.denoiser_heads), init_rng);
        head_ = nn::Linear("den.head", width, V, init_rng);
    }
}

void LatentMaskedDenoiser::validate_inputs(const std::vector<TokenSequence>& tokens,
                                           std::size_t z_rows, const std::vector<int>& labels) const {
    const std::size_t B = tokens.size();
    if (B == 0) throw std::invalid_argument("denoiser: empty batch");
    for (const auto& x : tokens) {
        if (x.size() != std::size_t(seq_len_))
            throw std::invalid_argument("denoiser: sequence length mismatch");
        for (int tok : x)
            if (tok < 0 || tok > vocab_)  // vocab_ is the mask symbol
                throw std::invalid_argument("denoiser: token out of range");
    }
    if (has_latent() && z_rows != B)
        throw std::invalid_argument("denoiser: need one latent row per example");
    if (!conditional_) {
        if (!labels.empty()) throw std::invalid_argument("denoiser: unconditional model got labels");
    } else {
        if (labels.size() != B)
            throw std::invalid_argument("denoiser: conditional model needs one label per example");
        for (int y : labels)
            if (y < 0 || y > num_classes_)
                throw std::invalid_argument("denoiser: label out of range (null = num_classes)");
    }
}

ag::Var LatentMaskedDenoiser::logits_rows(ag::Tape& t, const std::vector<TokenSequence>& tokens,
                                          ag::Var z, const std::vector<int>& labels) const {
    ++evals_;
    validate_inputs(tokens, has_latent() ? t.val(z).dim(0) : 0, labels);
    const std::size_t B = tokens.size();
    const std::size_t T = std::size_t(seq_len_), V = std::size_t(vocab_);

    std::vector<int> flat;
    flat.reserve(B * T);
    for (const auto& x : tokens) flat.insert(flat.end(), x.begin(), x.end());
    const ag::Var emb = tok_embed_.forward(t, flat);  // [B*T x e-or-width]

    if (arch_ == DenoiserArch::mlp) {
        const std::size_t e = tok_embed_.table.value.dim(1);
        std::vector<ag::Var> parts;
        parts.push_back(ag::reshape(emb, {B, T * e}));
        if (has_latent()) parts.push_back(z);
        if (conditional_) parts.push_back(class_embed_.forward(t, labels));
        const ag::Var in = parts.size() == 1 ? parts[0] : ag::concat_cols(parts);
        return ag::reshape(mlp_.forward(t, in), {B * T, V});
    }

    const std::size_t width = tok_embed_.table.value.dim(1);
    const ag::Var emb_flat = ag::reshape(emb, {1, B * T * width});
    ag::Var zflat, cflat;  // [1 x B*width] each, sliced per example below
    if (has_latent()) zflat = ag::reshape(z_in_.forward(t, z), {1, B * width});
    if (conditional_) cflat = ag::reshape(class_embed_.forward(t, labels), {1, B * width});
    std::vector<ag::Var> rows;
    rows.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        ag::Var x = ag::reshape(ag::slice_cols(emb_flat, b * T * width, (b + 1) * T * width),
                                {T, width});
        if (has_latent())
            x = ag::add_rowvec(x, ag::slice_cols(zflat, b * width, (b + 1) * width));
        if (conditional_)
            x = ag::add_rowvec(x, ag::slice_cols(cflat, b * width, (b + 1) * width));
        const ag::Var h = stack_.forward(t, x);
        rows.push_back(ag::reshape(head_.forward(t, h), {1, T * V}));
    }
    return ag::reshape(ag::concat_cols(rows), {B * T, V});
}

Tensor LatentMaskedDenoiser::logits_rows_numeric(const std::vector<TokenSequence>& tokens,
                                                 const Tensor& z,
                                                 const std::vector<int>& labels) const {
    ++evals_;
    validate_inputs(tokens, z.rank() == 2 ? z.dim(0) : 0, labels);
    const std::size_t B = tokens.size();
    const std::size_t T = std::size_t(seq_len_), V = std::size_t(vocab_);

    std::vector<int> flat;
    flat.reserve(B * T);
    for (const auto& x : tokens) flat.insert(flat.end(), x.begin(), x.end());
    const Tensor emb = tok_embed_.forward_numeric(flat);

    if (arch_ == DenoiserArch::mlp) {
        const std::size_t e = tok_embed_.table.value.dim(1);
        const std::size_t D = has_latent() ? std::size_t(latent_dim_) : 0;
        Tensor cls;
        if (conditional_) cls = class_embed_.forward_numeric(labels);
        const std::size_t C = conditional_ ? cls.dim(1) : 0;
        Tensor in = Tensor::zeros({B, T * e + D + C});
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t k = 0; k < T * e; ++k) in.at(b, k) = emb.data[b * T * e + k];
            for (std::size_t d = 0; d < D; ++d) in.at(b, T * e + d) = z.at(b, d);
            for (std::size_t c = 0; c < C; ++c) in.at(b, T * e + D + c) = cls.at(b, c);
        }
        Tensor out = mlp_.forward_numeric(in);
        out.shape = {B * T, V};
        return out;
    }

    const std::size_t width = tok_embed_.table.value.dim(1);
    Tensor zrows, crows;
    if (has_latent()) zrows = z_in_.forward_numeric(z);
    if (conditional_) crows = class_embed_.forward_numeric(labels);
    Tensor result = Tensor::zeros({B * T, V});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor x = Tensor::zeros({T, width});
        for (std::size_t p = 0; p < T; ++p)
            for (std::size_t w = 0; w < width; ++w) {
                double v = emb.data[(b * T + p) * width + w];
                if (has_latent()) v += zrows.at(b, w);
                if (conditional_) v += crows.at(b, w);
                x.at(p, w) = v;
            }
        const Tensor h = stack_.forward_numeric(x);
        const Tensor out = head_.forward_numeric(h);
        for (std::size_t p = 0; p < T; ++p)
            for (std::size_t v = 0; v < V; ++v) result.at(b * T + p, v) = out.at(p, v);
    }
    return result;
}

void LatentMaskedDenoiser::collect(std::vector<ag::Param*>& out) {
    tok_embed_.collect(out);
    if (conditional_) class_embed_.collect(out);
    if (arch_ == DenoiserArch::mlp) {
        mlp_.collect(out);
    } else {
        if (has_latent()) z_in_.collect(out);
        stack_.collect(out);
        head_.collect(out);
    }
}

Corrupted corrupt_with_t(const std::vector<TokenSequence>& batch, int mask_token,
                         const std::vector<double>& t, Rng& rng) {
    if (t.size() != batch.size())
        throw std::invalid_argument("corrupt: need one rate per example");
    Corrupted out;
    out.t = t;
    out.tokens.reserve(batch.size());
    out.masked.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TokenSequence& x = batch[b];
        const std::size_t T = x.size();
        std::vector<char> m(T, 0);
        bool any = false;
        for (int attempt = 0; attempt < 100 && !any; ++attempt) {
            for (std::size_t p = 0; p < T; ++p) {
                m[p] = rng.bernoulli(t[b]) ? 1 : 0;
                any = any || m[p];
            }
        }
        if (!any) m[rng.below(T)] = 1;  // forced single mask after the retry cap
        TokenSequence xt = x;
        for (std::size_t p = 0; p < T; ++p)
            if (m[p]) xt[p] = mask_token;
        out.tokens.push_back(std::move(xt));
        out.masked.push_back(std::move(m));
    }
    return out;
}

Corrupted corrupt(const std::vector<TokenSequence>& batch, int mask_token, double t_min, Rng& rng) {
    std::vector<double> t(batch.size());
    for (double& v : t) v = t_min + (1.0 - t_min) * rng.uniform();
    return corrupt_with_t(batch, mask_token, t, rng);
}

ag::Var mdm_loss(ag::Tape& /*t*/, ag::Var logits_rows, const std::vector<TokenSequence>& clean,
                 const Corrupted& cor) {
    const std::size_t B = clean.size();
    if (cor.masked.size() != B) throw std::invalid_argument("masked-token loss: batch mismatch");
    std::vector<int> targets;
    std::vector<double> weights;
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t T = clean[b].size();
        std::size_t count = 0;
        for (std::size_t p = 0; p < T; ++p) count += cor.masked[b][p] ? 1 : 0;
        if (count == 0) throw std::invalid_argument("masked-token loss: example with no mask");
        const double w = 1.0 / (double(B) * double(count));
        for (std::size_t p = 0; p < T; ++p) {
            targets.push_back(clean[b][p]);
            weights.push_back(cor.masked[b][p] ? w : 0.0);
        }
    }
    return ag::nll(logits_rows, targets, weights);
}

void init_mdm(MdmState& st, const ExperimentConfig& cfg, bool with_latent) {
    Rng init = Rng::derive(std::uint64_t(cfg.seed), stream_tag::init, 2);
    st.den = LatentMaskedDenoiser(cfg, with_latent ? cfg.model.latent_dim : 0, init);
    st.params.clear();
    st.den.collect(st.params);
    st.opt = optim::AdamW{};
    st.opt.weight_decay = cfg.mdm.weight_decay;
    st.opt.ensure_state(st.params);
    st.epochs_done = 0;
}

std::vector<EpochStats> train_mdm(MdmState& st, const ExperimentConfig& cfg, const Dataset& data,
                                  const PairProvider* pairs, const std::string& out_dir,
                                  int max_epochs) {
    const std::size_t n = data.items.size();
    if (n == 0) throw PrereqError("masked denoiser: empty dataset");
    if (st.den.has_latent() && pairs == nullptr)
        throw PrereqError("masked denoiser: latent-conditioned training needs a pair provider");
    if (st.den.conditional() && data.labels.size() != n)
        throw PrereqError("masked denoiser: conditional model needs labels");
    const std::size_t bs = std::size_t(cfg.mdm.batch_size);
    const std::int64_t steps_per_epoch = std::int64_t((n + bs - 1) / bs);
    const std::int64_t total_steps = steps_per_epoch * cfg.mdm.epochs;
    const std::int64_t warmup = steps_per_epoch;
    const bool frozen = cfg.stage_a.pair_mode == PairMode::frozen;
    const int stop_epoch = max_epochs < 0 ? cfg.mdm.epochs : std::min(cfg.mdm.epochs, max_epochs);

    std::vector<EpochStats> out;
    for (int epoch = st.epochs_done; epoch < stop_epoch; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t(0));
        Rng shuffle_rng = Rng::derive(std::uint64_t(cfg.seed), stream_tag::shuffle,
                                      kMdmStream + std::uint64_t(epoch));
        shuffle_rng.shuffle(order);
        Rng corrupt_rng = Rng::derive(std::uint64_t(cfg.seed), stream_tag::corruption,
                                      kMdmStream + std::uint64_t(epoch));
        Rng drop_rng = Rng::derive(std::uint64_t(cfg.seed), stream_tag::cond_dropout,
                                   kMdmStream + std::uint64_t(epoch));
        const std::uint64_t pair_stream = frozen ? 0 : 1 + std::uint64_t(epoch);

        EpochStats stats;
        stats.epoch = epoch;
        for (std::size_t b0 = 0; b0 < n; b0 += bs) {
            const std::size_t b1 = std::min(n, b0 + bs);
            const std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(b0),
                                               order.begin() + std::ptrdiff_t(b1));
            std::vector<TokenSequence> clean;
            Tensor z;
            std::vector<int> labels;
            if (st.den.has_latent()) {
                PairBatch pb = pairs->materialize(idx, pair_stream);
                clean = std::move(pb.x);
                z = std::move(pb.z);
                if (st.den.conditional()) labels = std::move(pb.labels);
            } else {
                for (std::size_t i : idx) clean.push_back(data.items[i]);
                if (st.den.conditional())
                    for (std::size_t i : idx) labels.push_back(data.labels[i]);
            }
            if (st.den.conditional())
                for (int& y : labels)
                    if (drop_rng.bernoulli(cfg.guidance.cond_dropout_rate)) y = st.den.null_label();

            const Corrupted cor = corrupt(clean, st.den.mask_token(), cfg.mdm.t_min, corrupt_rng);

            ag::Tape t;
            for (auto* p : st.params) (void)t.param(*p);
            const ag::Var logits =
                st.den.logits_rows(t, cor.tokens, st.den.has_latent() ? t.constant(z) : ag::Var{},
                                   labels);
            const ag::Var loss = mdm_loss(t, logits, clean, cor);
            const double loss_v = t.val(loss).data[0];
            if (!std::isfinite(loss_v))
                throw CheckFailure("masked denoiser: non-finite loss at epoch " +
                                   std::to_string(epoch));

            nn::zero_grads(st.params);
            t.backward(loss);
            const double lr =
                optim::cosine_lr(cfg.mdm.learning_rate, st.opt.step_count, warmup, total_steps);
            st.opt.step(st.params, lr);

            const double w = double(b1 - b0) / double(n);
            stats.total += w * loss_v;
            stats.lr = lr;
        }
        st.epochs_done = epoch + 1;
        out.push_back(stats);
        if (!out_dir.empty()) {
            append_jsonl(out_dir + "/mdm_log.jsonl",
                         nlohmann::json{{"epoch", stats.epoch},
                                        {"masked_cross_entropy", stats.total},
                                        {"lr", stats.lr}});
            save_mdm(st, cfg, out_dir + "/mdm.ckpt");
        }
    }
    return out;
}

void save_mdm(const MdmState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar;
    for (const auto* p : st.params) ar.put(p->name, p->value);
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        ar.put("opt.m." + st.params[i]->name, st.opt.m[i]);
        ar.put("opt.v." + st.params[i]->name, st.opt.v[i]);
    }
    const std::string config_json = config_to_json(cfg);
    nlohmann::json meta{{"schema_version", 1},
                        {"kind", "mdm"},
                        {"has_latent", st.den.has_latent()},
                        {"epochs_done", st.epochs_done},
                        {"opt_step", st.opt.step_count},
                        {"seed", cfg.seed},
                        {"config_digest", Sha256::of_string(config_json)}};
    ar.put_blob("__meta__", meta.dump());
    ar.put_blob("__config__", config_json);
    ar.save(path);
}

void load_mdm(MdmState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar = io::Archive::load(path);
    if (!ar.blobs.count("__meta__")) throw CheckFailure("checkpoint: missing metadata");
    const nlohmann::json meta = nlohmann::json::parse(ar.blobs.at("__meta__"));
    if (meta.at("kind") != "mdm") throw ConfigError("checkpoint: not a masked-denoiser file");
    if (meta.at("has_latent").get<bool>() != st.den.has_latent())
        throw ConfigError("checkpoint: latent conditioning does not match");
    if (meta.at("config_digest") != Sha256::of_string(config_to_json(cfg)))
        throw ConfigError("checkpoint: config does not match the one it was written with");
    for (auto* p : st.params) {
        auto it = ar.tensors.find(p->name);
        if (it == ar.tensors.end()) throw CheckFailure("checkpoint: missing tensor " + p->name);
        if (!it->second.same_shape(p->value))
            throw CheckFailure("checkpoint: shape mismatch for " + p->name);
        p->value = it->second;
        p->grad = Tensor::zeros(p->value.shape);
    }
    st.opt.ensure_state(st.params);
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        st.opt.m[i] = ar.tensors.at("opt.m." + st.params[i]->name);
        st.opt.v[i] = ar.tensors.at("opt.v." + st.params[i]->name);
    }
    st.opt.step_count = meta.at("opt_step").get<std::int64_t>();
    st.epochs_done = meta.at("epochs_done").get<int>();
}

double unmask_fraction(UnmaskSchedule schedule, int i, int k) {
    if (k < 1 || i < 0 || i > k) throw std::invalid_argument("schedule: step out of range");
    if (i == 0) return 0.0;  // endpoints are exact by contract (cos(pi/2)
    if (i == k) return 1.0;  // rounds to 6e-17 in floating point otherwise)
    const double t = double(i) / double(k);
    switch (schedule) {
        case UnmaskSchedule::linear: return t;
        case UnmaskSchedule::cosine: return 1.0 - std::cos(kPi * t / 2.0);
    }
    throw std::logic_error("schedule: unknown variant");
}

namespace {

RefinementResult refine_core(const LatentMaskedDenoiser& den, const ExperimentConfig& cfg,
                             const Tensor& z, const std::vector<int>& labels, Rng& rng,
                             const std::vector<TokenSequence>& init, std::size_t B) {
    const int K = cfg.mdm.steps;
    if (K < 1) throw ConfigError("refinement: need at least one step");
    const std::size_t T = std::size_t(den.seq_len());
    const std::size_t V = std::size_t(den.vocab_size());
    const int mask = den.mask_token();
    const double eta = cfg.mdm.remask_strength;

    std::vector<int> use_labels = labels;
    if (den.conditional() && use_labels.empty())
        use_labels.assign(B, den.null_label());

    std::vector<TokenSequence> x(B, TokenSequence(T, mask));
    std::vector<std::vector<char>> fixed(B, std::vector<char>(T, 0));
    if (!init.empty()) {
        if (init.size() != B) throw std::invalid_argument("refinement: init batch mismatch");
        for (std::size_t b = 0; b < B; ++b) {
            if (init[b].size() != T)
                throw std::invalid_argument("refinement: init sequence length mismatch");
            for (std::size_t p = 0; p < T; ++p)
                if (init[b][p] != mask) {
                    x[b][p] = init[b][p];
                    fixed[b][p] = 1;
                }
        }
    }

    RefinementResult res;
    std::vector<std::vector<int>> proposal(B, std::vector<int>(T, 0));
    std::vector<std::vector<double>> score(B, std::vector<double>(T, 0.0));

    for (int i = 1; i <= K; ++i) {
        const double tau = cfg.mdm_temperature(i, K);
        const double kappa = unmask_fraction(cfg.mdm.schedule, i, K);
        const Tensor logits = den.logits_rows_numeric(x, z, use_labels);

        // Proposals and confidence scores for every free position, in row
        // order so shared-seed samplers consume identical streams.
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < T; ++p) {
                if (fixed[b][p]) continue;
                const sample::RowSample rs =
                    sample::gumbel_row_sample(&logits.data[(b * T + p) * V], V, tau, rng);
                proposal[b][p] = rs.token;
                score[b][p] = rs.logscore;
            }

        const std::size_t m_i = std::size_t(std::floor(double(T) * (1.0 - kappa)));
        std::vector<int> masked_count(B, 0);
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<double> s(T);
            std::vector<std::size_t> free_pos;
            for (std::size_t p = 0; p < T; ++p) {
                if (fixed[b][p]) {
                    s[p] = std::numeric_limits<double>::infinity();
                    continue;
                }
                s[p] = score[b][p];
                if (x[b][p] != mask) s[p] *= eta;  // previously revealed
                free_pos.push_back(p);
            }
            // Lowest-score free positions stay masked; stable sort keeps the
            // position-index order on ties.
            std::stable_sort(free_pos.begin(), free_pos.end(),
                             [&s](std::size_t a, std::size_t c) { return s[a] < s[c]; });
            const std::size_t keep_masked = std::min(m_i, free_pos.size());
            std::vector<char> remask(T, 0);
            for (std::size_t r = 0; r < keep_masked; ++r) remask[free_pos[r]] = 1;

            for (std::size_t p = 0; p < T; ++p) {
                if (fixed[b][p]) continue;
                if (remask[p]) {
                    x[b][p] = mask;
                } else if (x[b][p] == mask) {
                    x[b][p] = proposal[b][p];  // newly revealed this step
                }
                // revealed and kept: token untouched (write discipline)
            }
            for (std::size_t p = 0; p < T; ++p) masked_count[b] += x[b][p] == mask ? 1 : 0;
        }
        res.masked_after_step.push_back(std::move(masked_count));
    }

    // Any residue (possible only with fixed positions and a clamped mask
    // budget) takes the final proposal.
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < T; ++p)
            if (x[b][p] == mask) x[b][p] = proposal[b][p];

    res.tokens = std::move(x);
    return res;
}

}  // namespace

RefinementResult refine_from_latent(const LatentMaskedDenoiser& den, const ExperimentConfig& cfg,
                                    const Tensor& z, const std::vector<int>& labels, Rng& rng,
                                    const std::vector<TokenSequence>& init) {
    if (!den.has_latent()) throw PrereqError("refinement: this denoiser takes no latent");
    return refine_core(den, cfg, z, labels, rng, init, z.dim(0));
}

RefinementResult refine_baseline(const LatentMaskedDenoiser& den, const ExperimentConfig& cfg,
                                 std::size_t count, const std::vector<int>& labels, Rng& rng,
                                 const std::vector<TokenSequence>& init) {
    if (den.has_latent()) throw PrereqError("refinement: this denoiser needs latents");
    return refine_core(den, cfg, Tensor{}, labels, rng, init, count);
}

}  // namespace couplegen::train
