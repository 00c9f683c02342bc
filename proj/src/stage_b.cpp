#include "couplegen/stage_b.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "couplegen/autoencoder.hpp"
#include "couplegen/sampling.hpp"
#include "couplegen/serialize.hpp"
#include "couplegen/sha256.hpp"

namespace couplegen::train {

namespace {

// Keeps decoder-stage shuffle/dropout streams disjoint from the alignment
// stage, which owns plain epoch indices.
constexpr std::uint64_t kStageBStream = std::uint64_t(1) << 32;

// [P x block*V] per-token block logits -> [T x V] per-pixel rows.
std::vector<std::size_t> perm_blocks_to_pixels(std::size_t grid_h, std::size_t grid_w,
                                               std::size_t lat_w, std::size_t bh, std::size_t bw,
                                               std::size_t V) {
    std::vector<std::size_t> perm(grid_h * grid_w * V);
    const std::size_t block = bh * bw;
    for (std::size_t y = 0; y < grid_h; ++y)
        for (std::size_t x = 0; x < grid_w; ++x) {
            const std::size_t tk = (y / bh) * lat_w + (x / bw);
            const std::size_t intra = (y % bh) * bw + (x % bw);
            for (std::size_t v = 0; v < V; ++v)
                perm[(y * grid_w + x) * V + v] = tk * (block * V) + intra * V + v;
        }
    return perm;
}

Tensor permute_numeric(const Tensor& in, const std::vector<std::size_t>& perm,
                       std::vector<std::size_t> out_shape) {
    Tensor out;
    out.shape = std::move(out_shape);
    out.data.resize(in.data.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out.data[i] = in.data[perm[i]];
    return out;
}

void append_jsonl(const std::string& path, const nlohmann::json& record) {
    std::ofstream out(path, std::ios::app);
    out << record.dump() << "\n";
}

}  // namespace

OneStepGenerator::OneStepGenerator(const ExperimentConfig& cfg, Rng& init_rng)
    : arch_(cfg.model.generator),
      conditional_(cfg.model.conditional),
      vocab_(cfg.data.vocab_size),
      seq_len_(cfg.data.seq_len),
      latent_dim_(cfg.model.latent_dim),
      num_classes_(cfg.data.num_classes) {
    const std::size_t width = std::size_t(cfg.model.generator_width);
    const std::size_t depth = std::size_t(cfg.model.generator_depth);
    if (arch_ == GeneratorArch::mlp) {
        const std::size_t class_dim = conditional_ ? std::size_t(cfg.model.embed_dim) : 0;
        if (conditional_)
            class_embed_ = nn::EmbeddingTable("gen.class", std::size_t(num_classes_) + 1,
                                              class_dim, init_rng);
        std::vector<std::size_t> dims;
        dims.push_back(std::size_t(latent_dim_) + class_dim);
        for (std::size_t i = 0; i < depth; ++i) dims.push_back(width);
        dims.push_back(std::size_t(seq_len_) * std::size_t(vocab_));
        mlp_ = nn::Mlp("gen.mlp", dims, nn::Act::gelu, init_rng);
        return;
    }
    if (conditional_)
        class_embed_ = nn::EmbeddingTable("gen.class", std::size_t(num_classes_) + 1, width, init_rng);
    if (arch_ == GeneratorArch::attention_seq) {
        z_in_ = nn::Linear("gen.z_in", std::size_t(latent_dim_), width, init_rng);
        stack_ = nn::TransformerStack("gen.stack", std::size_t(seq_len_), width, depth,
                                      std::size_t(cfg.model.generator_heads), init_rng);
        head_ = nn::Linear("gen.head", width, std::size_t(vocab_), init_rng);
    } else {  // attention_grid
        tok_c_ = cfg.model.latent_channels;
        lat_h_ = cfg.model.latent_grid_h;
        lat_w_ = cfg.model.latent_grid_w;
        tok_p_ = lat_h_ * lat_w_;
        grid_h_ = cfg.model.grid_h;
        grid_w_ = cfg.model.grid_w;
        if (grid_h_ % lat_h_ != 0 || grid_w_ % lat_w_ != 0)
            throw ConfigError("grid generator: token grid must tile the latent grid");
        block_h_ = grid_h_ / lat_h_;
        block_w_ = grid_w_ / lat_w_;
        z_in_ = nn::Linear("gen.z_in", std::size_t(tok_c_), width, init_rng);
        stack_ = nn::TransformerStack("gen.stack", std::size_t(tok_p_), width, depth,
                                      std::size_t(cfg.model.generator_heads), init_rng);
        head_ = nn::Linear("gen.head", width,
                           std::size_t(block_h_) * std::size_t(block_w_) * std::size_t(vocab_),
                           init_rng);
    }
}

void OneStepGenerator::validate_labels(std::size_t batch, const std::vector<int>& labels) const {
    if (!conditional_) {
        if (!labels.empty())
            throw std::invalid_argument("generator: unconditional model got labels");
        return;
    }
    if (labels.size() != batch)
        throw std::invalid_argument("generator: conditional model needs one label per example");
    for (int y : labels)
        if (y < 0 || y > num_classes_)
            throw std::invalid_argument("generator: label out of range (null = num_classes)");
}

ag::Var OneStepGenerator::class_rows(ag::Tape& t, const std::vector<int>& labels) const {
    return class_embed_.forward(t, labels);  // [B x class width]
}

ag::Var OneStepGenerator::logits_rows(ag::Tape& t, ag::Var z, const std::vector<int>& labels) const {
    ++evals_;
    const std::size_t B = t.val(z).dim(0);
    validate_labels(B, labels);
    const std::size_t T = std::size_t(seq_len_), V = std::size_t(vocab_);

    if (arch_ == GeneratorArch::mlp) {
        ag::Var in = z;
        if (conditional_) in = ag::concat_cols({z, class_rows(t, labels)});
        ag::Var flat = mlp_.forward(t, in);  // [B x T*V]
        return ag::reshape(flat, {B * T, V});
    }

    ag::Var cls;  // [B x width] when conditional
    if (conditional_) cls = class_rows(t, labels);
    ag::Var zflat = ag::reshape(z, {1, B * std::size_t(latent_dim_)});
    std::vector<ag::Var> rows;
    rows.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        ag::Var ze = ag::slice_cols(zflat, b * std::size_t(latent_dim_), (b + 1) * std::size_t(latent_dim_));
        ag::Var x;  // [tokens x width]
        if (arch_ == GeneratorArch::attention_seq) {
            ag::Var zrow = z_in_.forward(t, ze);  // [1 x width]
            x = ag::add_rowvec(t.constant(Tensor::zeros({T, z_in_.out_dim()})), zrow);
        } else {
            ag::Var toks = ag::reshape(ze, {std::size_t(tok_p_), std::size_t(tok_c_)});
            x = z_in_.forward(t, toks);  // [P x width]
        }
        if (conditional_) {
            ag::Var crow = ag::slice_cols(ag::reshape(cls, {1, B * z_in_.out_dim()}),
                                          b * z_in_.out_dim(), (b + 1) * z_in_.out_dim());
            x = ag::add_rowvec(x, crow);
        }
        ag::Var h = stack_.forward(t, x);
        ag::Var out = head_.forward(t, h);
        if (arch_ == GeneratorArch::attention_grid) {
            out = ag::permute_elements(
                out,
                perm_blocks_to_pixels(std::size_t(grid_h_), std::size_t(grid_w_), std::size_t(lat_w_),
                                      std::size_t(block_h_), std::size_t(block_w_), V),
                {T, V});
        }
        rows.push_back(ag::reshape(out, {1, T * V}));
    }
    return ag::reshape(ag::concat_cols(rows), {B * T, V});
}

Tensor OneStepGenerator::logits_rows_numeric(const Tensor& z, const std::vector<int>& labels) const {
    ++evals_;
    const std::size_t B = z.dim(0);
    validate_labels(B, labels);
    const std::size_t T = std::size_t(seq_len_), V = std::size_t(vocab_);

    if (arch_ == GeneratorArch::mlp) {
        Tensor in = z;
        if (conditional_) {
            const Tensor cls = class_embed_.forward_numeric(labels);
            const std::size_t D = z.dim(1), C = cls.dim(1);
            Tensor cat = Tensor::zeros({B, D + C});
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t d = 0; d < D; ++d) cat.at(b, d) = z.at(b, d);
                for (std::size_t c = 0; c < C; ++c) cat.at(b, D + c) = cls.at(b, c);
            }
            in = std::move(cat);
        }
        Tensor flat = mlp_.forward_numeric(in);
        flat.shape = {B * T, V};
        return flat;
    }

    Tensor cls;
    if (conditional_) cls = class_embed_.forward_numeric(labels);
    const std::size_t width = z_in_.out_dim();
    Tensor result = Tensor::zeros({B * T, V});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor x;
        if (arch_ == GeneratorArch::attention_seq) {
            Tensor ze = Tensor::zeros({1, std::size_t(latent_dim_)});
            for (std::size_t d = 0; d < ze.size(); ++d) ze.data[d] = z.at(b, d);
            const Tensor zrow = z_in_.forward_numeric(ze);
            x = Tensor::zeros({T, width});
            for (std::size_t p = 0; p < T; ++p)
                for (std::size_t w = 0; w < width; ++w) x.at(p, w) = 0.0 + zrow.data[w];
        } else {
            Tensor toks = Tensor::zeros({std::size_t(tok_p_), std::size_t(tok_c_)});
            for (std::size_t d = 0; d < toks.size(); ++d) toks.data[d] = z.at(b, d);
            x = z_in_.forward_numeric(toks);
        }
        if (conditional_)
            for (std::size_t p = 0; p < x.dim(0); ++p)
                for (std::size_t w = 0; w < width; ++w) x.at(p, w) += cls.at(b, w);
        Tensor h = stack_.forward_numeric(x);
        Tensor out = head_.forward_numeric(h);
        if (arch_ == GeneratorArch::attention_grid)
            out = permute_numeric(
                out,
                perm_blocks_to_pixels(std::size_t(grid_h_), std::size_t(grid_w_), std::size_t(lat_w_),
                                      std::size_t(block_h_), std::size_t(block_w_), V),
                {T, V});
        for (std::size_t p = 0; p < T; ++p)
            for (std::size_t v = 0; v < V; ++v) result.at(b * T + p, v) = out.at(p, v);
    }
    return result;
}

void OneStepGenerator::collect(std::vector<ag::Param*>& out) {
    if (conditional_) class_embed_.collect(out);
    if (arch_ == GeneratorArch::mlp) {
        mlp_.collect(out);
    } else {
        z_in_.collect(out);
        stack_.collect(out);
        head_.collect(out);
    }
}

void init_stage_b(StageBState& st, const ExperimentConfig& cfg) {
    Rng init = Rng::derive(std::uint64_t(cfg.seed), stream_tag::init, 1);
    st.gen = OneStepGenerator(cfg, init);
    st.params.clear();
    st.gen.collect(st.params);
    st.opt = optim::AdamW{};
    st.opt.weight_decay = cfg.stage_b.weight_decay;
    st.opt.ensure_state(st.params);
    st.ema = optim::Ema{};
    st.ema.decay = cfg.stage_b.ema_decay;
    if (st.ema.enabled()) st.ema.init(st.params);
    st.epochs_done = 0;
}

ag::Var stage_b_loss(ag::Tape& t, ag::Var logits_rows, const std::vector<TokenSequence>& batch) {
    return model::reconstruction_loss(t, logits_rows, batch);
}

std::vector<EpochStats> train_stage_b(StageBState& st, const ExperimentConfig& cfg,
                                      const Dataset& data, const PairProvider& pairs,
                                      const std::string& out_dir, int max_epochs) {
    const std::size_t n = data.items.size();
    if (n == 0) throw PrereqError("stage b: empty dataset");
    if (st.gen.conditional() && data.labels.size() != n)
        throw PrereqError("stage b: conditional model needs labels");
    const std::size_t bs = std::size_t(cfg.stage_b.batch_size);
    const std::int64_t steps_per_epoch = std::int64_t((n + bs - 1) / bs);
    const std::int64_t total_steps = steps_per_epoch * cfg.stage_b.epochs;
    const std::int64_t warmup = steps_per_epoch;
    const bool frozen = cfg.stage_a.pair_mode == PairMode::frozen;
    const int stop_epoch =
        max_epochs < 0 ? cfg.stage_b.epochs : std::min(cfg.stage_b.epochs, max_epochs);

    std::vector<EpochStats> out;
    for (int epoch = st.epochs_done; epoch < stop_epoch; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng = Rng::derive(std::uint64_t(cfg.seed), stream_tag::shuffle,
                                      kStageBStream + std::uint64_t(epoch));
        shuffle_rng.shuffle(order);
        Rng drop_rng = Rng::derive(std::uint64_t(cfg.seed), stream_tag::cond_dropout,
                                   kStageBStream + std::uint64_t(epoch));
        const std::uint64_t pair_stream = frozen ? 0 : 1 + std::uint64_t(epoch);

        EpochStats stats;
        stats.epoch = epoch;
        for (std::size_t b0 = 0; b0 < n; b0 += bs) {
            const std::size_t b1 = std::min(n, b0 + bs);
            const std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(b0),
                                               order.begin() + std::ptrdiff_t(b1));
            PairBatch pb = pairs.materialize(idx, pair_stream);
            std::vector<int> labels;
            if (st.gen.conditional()) {
                labels = pb.labels;
                for (int& y : labels)
                    if (drop_rng.bernoulli(cfg.guidance.cond_dropout_rate)) y = st.gen.null_label();
            }

            ag::Tape t;
            for (auto* p : st.params) (void)t.param(*p);
            const ag::Var logits = st.gen.logits_rows(t, t.constant(pb.z), labels);
            const ag::Var loss = stage_b_loss(t, logits, pb.x);
            const double loss_v = t.val(loss).data[0];
            if (!std::isfinite(loss_v))
                throw CheckFailure("stage b: non-finite loss at epoch " + std::to_string(epoch));

            nn::zero_grads(st.params);
            t.backward(loss);
            const double lr = optim::cosine_lr(cfg.stage_b.learning_rate, st.opt.step_count, warmup,
                                               total_steps);
            st.opt.step(st.params, lr);
            if (st.ema.enabled()) st.ema.update(st.params);

            const double w = double(b1 - b0) / double(n);
            stats.total += w * loss_v;
            stats.lr = lr;
        }
        st.epochs_done = epoch + 1;
        out.push_back(stats);
        if (!out_dir.empty()) {
            append_jsonl(out_dir + "/stage_b_log.jsonl",
                         nlohmann::json{{"epoch", stats.epoch},
                                        {"cross_entropy", stats.total},
                                        {"lr", stats.lr}});
            save_stage_b(st, cfg, out_dir + "/stage_b.ckpt");
        }
    }
    return out;
}

void save_stage_b(const StageBState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar;
    for (const auto* p : st.params) ar.put(p->name, p->value);
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        ar.put("opt.m." + st.params[i]->name, st.opt.m[i]);
        ar.put("opt.v." + st.params[i]->name, st.opt.v[i]);
        if (st.ema.enabled()) ar.put("ema." + st.params[i]->name, st.ema.shadow[i]);
    }
    const std::string config_json = config_to_json(cfg);
    nlohmann::json meta{{"schema_version", 1},
                        {"kind", "stage_b"},
                        {"epochs_done", st.epochs_done},
                        {"opt_step", st.opt.step_count},
                        {"seed", cfg.seed},
                        {"ema", st.ema.enabled()},
                        {"config_digest", Sha256::of_string(config_json)}};
    ar.put_blob("__meta__", meta.dump());
    ar.put_blob("__config__", config_json);
    ar.save(path);
}

void load_stage_b(StageBState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar = io::Archive::load(path);
    if (!ar.blobs.count("__meta__")) throw CheckFailure("checkpoint: missing metadata");
    const nlohmann::json meta = nlohmann::json::parse(ar.blobs.at("__meta__"));
    if (meta.at("kind") != "stage_b") throw ConfigError("checkpoint: not a decoder-stage file");
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
        if (st.ema.enabled()) st.ema.shadow[i] = ar.tensors.at("ema." + st.params[i]->name);
    }
    st.opt.step_count = meta.at("opt_step").get<std::int64_t>();
    st.epochs_done = meta.at("epochs_done").get<int>();
}

void install_ema(StageBState& st) {
    if (st.ema.enabled()) st.ema.swap(st.params);
}
void restore_ema(StageBState& st) {
    if (st.ema.enabled()) st.ema.swap(st.params);
}

std::vector<TokenSequence> decode_latents(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                          const Tensor& z, const std::vector<int>& labels, Rng& rng) {
    std::vector<int> use_labels = labels;
    if (gen.conditional() && use_labels.empty())
        use_labels.assign(z.dim(0), gen.null_label());
    const Tensor logits = gen.logits_rows_numeric(z, use_labels);
    const std::vector<int> flat = sample::sample_rows(logits, cfg.stage_b.temperature, rng);
    const std::size_t T = std::size_t(gen.seq_len());
    std::vector<TokenSequence> out(z.dim(0), TokenSequence(T, 0));
    for (std::size_t b = 0; b < out.size(); ++b)
        for (std::size_t p = 0; p < T; ++p) out[b][p] = flat[b * T + p];
    return out;
}

std::vector<TokenSequence> sample_one_step(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                           std::size_t count, const std::vector<int>& labels,
                                           Rng& rng) {
    Tensor z = Tensor::zeros({count, std::size_t(gen.latent_dim())});
    for (double& v : z.data) v = cfg.stage_b.z_scale * rng.normal();
    return decode_latents(gen, cfg, z, labels, rng);
}

oracle::ExactDistribution generated_law(const OneStepGenerator& gen, const ExperimentConfig& cfg,
                                        int label, oracle::QuadratureSpec spec) {
    if (label >= 0 && !gen.conditional())
        throw PrereqError("generated_law: class label given but the decoder is unconditional");
    const std::size_t T = std::size_t(gen.seq_len()), V = std::size_t(gen.vocab_size());
    const double tau = cfg.stage_b.temperature;
    const double z_scale = cfg.stage_b.z_scale;
    std::vector<int> labels;
    if (gen.conditional()) labels.assign(1, label >= 0 ? label : gen.null_label());
    // The quadrature integrates over a standard normal latent; the sampler
    // draws scaled latents, so the scale is applied inside the conditional.
    oracle::ConditionalFn conditional = [&](const std::vector<double>& unit_z) {
        Tensor z = Tensor::zeros({1, unit_z.size()});
        for (std::size_t d = 0; d < unit_z.size(); ++d) z.data[d] = z_scale * unit_z[d];
        const Tensor logits = gen.logits_rows_numeric(z, labels);
        Tensor rows = Tensor::zeros({T, V});
        for (std::size_t p = 0; p < T; ++p) {
            const double* lr = logits.data.data() + p * V;
            double* pr = rows.data.data() + p * V;
            if (tau < sample::kArgmaxTemperature) {
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (lr[v] > lr[best]) best = v;
                pr[best] = 1.0;
            } else {
                double mx = lr[0];
                for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, lr[v]);
                double sum = 0.0;
                for (std::size_t v = 0; v < V; ++v) sum += pr[v] = std::exp((lr[v] - mx) / tau);
                for (std::size_t v = 0; v < V; ++v) pr[v] /= sum;
            }
        }
        return rows;
    };
    return oracle::enumerate_generated_marginal(conditional, gen.latent_dim(), int(V), int(T), spec);
}

}  // namespace couplegen::train
