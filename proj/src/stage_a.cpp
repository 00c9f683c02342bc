#include "couplegen/stage_a.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "couplegen/serialize.hpp"
#include "couplegen/sha256.hpp"

namespace couplegen::train {

namespace {

bool all_finite(std::initializer_list<double> vals) {
    for (double v : vals)
        if (!std::isfinite(v)) return false;
    return true;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng::derive(seed, stream_tag::shuffle, epoch);
    rng.shuffle(idx);
    return idx;
}

void append_jsonl(const std::string& path, const nlohmann::json& record) {
    std::ofstream out(path, std::ios::app);
    out << record.dump() << "\n";
}

}  // namespace

void init_stage_a(StageAState& st, const ExperimentConfig& cfg) {
    Rng init = Rng::derive(std::uint64_t(cfg.seed), stream_tag::init, 0);
    st.encoder = model::ReparamEncoder(cfg, init);
    st.recon = model::ReconstructionHead(cfg, init);
    st.flow = model::CouplingFlow(cfg, init);
    st.params.clear();
    st.encoder.collect(st.params);
    st.recon.collect(st.params);
    st.flow.collect(st.params);
    st.opt = optim::AdamW{};
    st.opt.weight_decay = cfg.stage_a.weight_decay;
    st.opt.ensure_state(st.params);
    st.epochs_done = 0;
}

StageALossParts stage_a_loss(ag::Tape& t, const StageAState& st, const ExperimentConfig& cfg,
                             const std::vector<TokenSequence>& batch, const Tensor& eps) {
    StageALossParts parts;
    const model::EncoderOutput eo = st.encoder.encode_with_eps(t, batch, eps);
    const ag::Var logits = st.recon.logits_rows(t, eo.sampled);
    parts.rec = model::reconstruction_loss(t, logits, batch);
    parts.kl = model::kl_to_standard_normal(t, eo.mean, cfg.stage_a.latent_noise_std);
    const model::CouplingFlow::Forward f = st.flow.forward(t, eo.sampled);
    parts.flow_nll = st.flow.nll(t, f);
    parts.total = ag::add(ag::add(ag::scale(parts.rec, cfg.stage_a.lambda_rec),
                                  ag::scale(parts.kl, cfg.stage_a.lambda_kl)),
                          ag::scale(parts.flow_nll, cfg.stage_a.lambda_flow));
    return parts;
}

std::vector<EpochStats> train_stage_a(StageAState& st, const ExperimentConfig& cfg,
                                      const Dataset& data, const std::string& out_dir,
                                      int max_epochs) {
    const std::size_t n = data.items.size();
    if (n == 0) throw PrereqError("stage a: empty dataset");
    const std::size_t bs = std::size_t(cfg.stage_a.batch_size);
    const std::int64_t steps_per_epoch = std::int64_t((n + bs - 1) / bs);
    const std::int64_t total_steps = steps_per_epoch * cfg.stage_a.epochs;
    const std::int64_t warmup = steps_per_epoch;  // one-epoch linear warmup
    const int stop_epoch =
        max_epochs < 0 ? cfg.stage_a.epochs : std::min(cfg.stage_a.epochs, max_epochs);

    std::vector<EpochStats> out;
    for (int epoch = st.epochs_done; epoch < stop_epoch; ++epoch) {
        const std::vector<std::size_t> order = shuffled_indices(n, std::uint64_t(cfg.seed), std::uint64_t(epoch));
        Rng noise = Rng::derive(std::uint64_t(cfg.seed), stream_tag::encoder_noise, std::uint64_t(epoch));

        EpochStats stats;
        stats.epoch = epoch;
        for (std::size_t b0 = 0; b0 < n; b0 += bs) {
            const std::size_t b1 = std::min(n, b0 + bs);
            std::vector<TokenSequence> batch;
            batch.reserve(b1 - b0);
            for (std::size_t i = b0; i < b1; ++i) batch.push_back(data.items[order[i]]);

            Tensor eps = Tensor::zeros({batch.size(), std::size_t(cfg.model.latent_dim)});
            for (double& v : eps.data) v = noise.normal();

            ag::Tape t;
            for (auto* p : st.params) (void)t.param(*p);
            const StageALossParts parts = stage_a_loss(t, st, cfg, batch, eps);
            const double total = t.val(parts.total).data[0];
            const double rec = t.val(parts.rec).data[0];
            const double kl = t.val(parts.kl).data[0];
            const double fnll = t.val(parts.flow_nll).data[0];
            if (!all_finite({total, rec, kl, fnll}))
                throw CheckFailure("stage a: non-finite loss at epoch " + std::to_string(epoch));

            nn::zero_grads(st.params);
            t.backward(parts.total);
            const double lr = optim::cosine_lr(cfg.stage_a.learning_rate, st.opt.step_count, warmup,
                                               total_steps);
            st.opt.step(st.params, lr);

            const double w = double(batch.size()) / double(n);
            stats.total += w * total;
            stats.rec += w * rec;
            stats.kl += w * kl;
            stats.flow_nll += w * fnll;
            stats.lr = lr;
        }
        st.epochs_done = epoch + 1;
        out.push_back(stats);

        if (!out_dir.empty()) {
            append_jsonl(out_dir + "/stage_a_log.jsonl",
                         nlohmann::json{{"epoch", stats.epoch},
                                        {"total", stats.total},
                                        {"rec", stats.rec},
                                        {"kl", stats.kl},
                                        {"flow_nll", stats.flow_nll},
                                        {"lr", stats.lr}});
            save_stage_a(st, cfg, out_dir + "/stage_a.ckpt");
        }
    }
    return out;
}

void save_stage_a(const StageAState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar;
    for (const auto* p : st.params) ar.put(p->name, p->value);
    for (std::size_t i = 0; i < st.params.size(); ++i) {
        ar.put("opt.m." + st.params[i]->name, st.opt.m[i]);
        ar.put("opt.v." + st.params[i]->name, st.opt.v[i]);
    }
    const std::string config_json = config_to_json(cfg);
    nlohmann::json meta{{"schema_version", 1},
                        {"kind", "stage_a"},
                        {"epochs_done", st.epochs_done},
                        {"opt_step", st.opt.step_count},
                        {"seed", cfg.seed},
                        {"config_digest", Sha256::of_string(config_json)}};
    ar.put_blob("__meta__", meta.dump());
    ar.put_blob("__config__", config_json);
    ar.save(path);
}

void load_stage_a(StageAState& st, const ExperimentConfig& cfg, const std::string& path) {
    io::Archive ar = io::Archive::load(path);
    if (!ar.blobs.count("__meta__")) throw CheckFailure("checkpoint: missing metadata");
    const nlohmann::json meta = nlohmann::json::parse(ar.blobs.at("__meta__"));
    if (meta.at("kind") != "stage_a") throw ConfigError("checkpoint: not an alignment-stage file");
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

std::string stage_a_digest(const StageAState& st) { return nn::param_digest(st.params); }

PairProvider::PairProvider(const StageAState& st, const ExperimentConfig& cfg, const Dataset& data)
    : st_(&st), data_(&data), seed_(std::uint64_t(cfg.seed)), noise_std_(cfg.stage_a.latent_noise_std) {}

PairBatch PairProvider::materialize(const std::vector<std::size_t>& indices,
                                    std::uint64_t stream_index) const {
    PairBatch out;
    out.x.reserve(indices.size());
    for (std::size_t i : indices) out.x.push_back(data_->items.at(i));
    if (!data_->labels.empty())
        for (std::size_t i : indices) out.labels.push_back(data_->labels.at(i));

    Tensor u = st_->encoder.mean_numeric(out.x);
    const std::size_t D = u.dim(1);
    // Noise is a function of the dataset index (not the batch position), so a
    // given stream index defines one fixed pair set regardless of batching.
    const std::uint64_t n_items = data_->items.size();
    for (std::size_t row = 0; row < indices.size(); ++row) {
        Rng rng = Rng::derive(seed_, stream_tag::pairs, stream_index * n_items + indices[row]);
        for (std::size_t d = 0; d < D; ++d) u.at(row, d) += noise_std_ * rng.normal();
    }
    out.z = st_->flow.forward_numeric(u);
    return out;
}

}  // namespace couplegen::train
