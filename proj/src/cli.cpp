#include "couplegen/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/data_eval.hpp"
#include "couplegen/divergence_oracle.hpp"
#include "couplegen/few_step_mdm.hpp"
#include "couplegen/guidance.hpp"
#include "couplegen/kernels.hpp"
#include "couplegen/manifest.hpp"
#include "couplegen/rng.hpp"
#include "couplegen/serialize.hpp"
#include "couplegen/stage_a.hpp"
#include "couplegen/stage_b.hpp"

namespace couplegen::cli {

namespace {

using train::MdmState;
using train::PairProvider;
using train::StageAState;
using train::StageBState;

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return (v && *v) ? std::string(v) : fallback;
}

bool env_flag(const char* name) {
    const char* v = std::getenv(name);
    if (!v) return false;
    std::string s(v);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s == "1" || s == "true" || s == "on" || s == "yes";
}

// Flags shared by every artifact-producing subcommand.
struct CommonOpts {
    std::string profile;
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool deterministic = false;
    std::vector<std::string> raw_args;  // for the manifest command line
};

void apply_determinism(bool flag) {
    if (flag || env_flag("COUPLEGEN_DETERMINISTIC")) kernels::set_parallel(false);
}

// Exactly one of --profile / --config selects the configuration.
ExperimentConfig resolve_config(const CommonOpts& c) {
    if (!c.profile.empty() && !c.config_path.empty())
        throw ConfigError("pass either --profile or --config, not both");
    std::string text;
    if (!c.profile.empty()) {
        text = profile_json(c.profile);
    } else if (!c.config_path.empty()) {
        if (!io::file_exists(c.config_path))
            throw ConfigError("config file not found: " + c.config_path);
        text = io::read_file(c.config_path);
    } else {
        throw ConfigError("a configuration is required: pass --profile NAME or --config FILE");
    }
    ExperimentConfig cfg = validate_config(text);
    if (c.seed_set) cfg.seed = c.seed;
    return cfg;
}

// Configuration snapshot embedded in a checkpoint by the stage that wrote it.
ExperimentConfig config_from_checkpoint(const std::string& ckpt_path) {
    if (!io::file_exists(ckpt_path))
        throw PrereqError("checkpoint not found: " + ckpt_path);
    io::Archive ar = io::Archive::load(ckpt_path);
    if (!ar.blobs.count("__config__"))
        throw CheckFailure("checkpoint has no embedded configuration: " + ckpt_path);
    return validate_config(ar.blobs.at("__config__"));
}

bool checkpoint_meta_flag(const std::string& ckpt_path, const std::string& key) {
    io::Archive ar = io::Archive::load(ckpt_path);
    if (!ar.blobs.count("__meta__"))
        throw CheckFailure("checkpoint has no metadata: " + ckpt_path);
    const nlohmann::json meta = nlohmann::json::parse(ar.blobs.at("__meta__"));
    return meta.value(key, false);
}

Dataset load_dataset(const ExperimentConfig& cfg, const std::string& data_dir,
                     const std::string& split) {
    if (cfg.data.task == TaskKind::mnist_binary) {
        if (data_dir.empty())
            throw PrereqError(
                "this task loads images from disk: pass --data-dir or set COUPLEGEN_DATA_DIR");
        return data::load_binary_images(data_dir, cfg.data, split);
    }
    Rng rng = Rng::derive(cfg.seed, stream_tag::data, 0);
    return data::synth_dataset(cfg, rng);
}

std::vector<int> make_labels(const ExperimentConfig& cfg, std::size_t count, int label) {
    if (label < 0) return {};
    if (cfg.data.num_classes <= 0)
        throw ConfigError("--label given but the model is unconditional (data.num_classes = 0)");
    if (label >= cfg.data.num_classes)
        throw ConfigError("--label " + std::to_string(label) + " out of range: data.num_classes = " +
                          std::to_string(cfg.data.num_classes));
    return std::vector<int>(count, label);
}

// Collects the common manifest fields and times the run.
struct RunScope {
    io::RunManifest m;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    RunScope(const std::string& command, const CommonOpts& c) {
        m.command = command;
        for (const std::string& a : c.raw_args) m.command += " " + a;
        m.deterministic = !kernels::parallel_enabled();
        m.threads = kernels::worker_count();
        m.code_version = io::code_version();
    }
    void set_config(const ExperimentConfig& cfg) {
        m.config_json = config_to_json(cfg);
        m.seed = cfg.seed;
    }
    void finish(const std::string& path) {
        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        m.write(path);
        std::cerr << "manifest: " << path << "\n";
    }
};

void dump_samples(const std::string& path, const std::vector<TokenSequence>& samples) {
    if (samples.empty()) throw CheckFailure("no samples to write");
    const std::size_t T = samples.front().size();
    std::vector<std::int32_t> flat;
    flat.reserve(samples.size() * T);
    for (const TokenSequence& s : samples)
        for (int v : s) flat.push_back(v);
    io::write_array_i32(path, flat, {samples.size(), T});
}

std::vector<TokenSequence> read_samples(const std::string& path, int vocab_size) {
    if (!io::file_exists(path)) throw PrereqError("sample dump not found: " + path);
    std::vector<std::size_t> dims;
    const std::vector<std::int32_t> flat = io::read_array_i32(path, dims);
    if (dims.size() != 2) throw CheckFailure("sample dump: expected a rank-2 array: " + path);
    std::vector<TokenSequence> out(dims[0], TokenSequence(dims[1], 0));
    for (std::size_t b = 0; b < dims[0]; ++b)
        for (std::size_t p = 0; p < dims[1]; ++p) {
            const std::int32_t v = flat[b * dims[1] + p];
            if (v < 0 || v >= vocab_size)
                throw CheckFailure("sample dump: token " + std::to_string(v) +
                                   " outside vocabulary of size " + std::to_string(vocab_size));
            out[b][p] = int(v);
        }
    return out;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    CommonOpts common;
    std::string stage;  // a | b | mdm
    std::string data_dir;
    bool baseline = false;
    bool resume = false;
    int max_epochs = -1;
};

void record_epoch_metrics(io::RunManifest& m, const std::vector<train::EpochStats>& stats,
                          bool with_parts) {
    if (stats.empty()) return;
    const train::EpochStats& last = stats.back();
    m.metrics["epochs_trained"] = double(stats.size());
    m.metrics["loss"] = last.total;
    if (with_parts) {
        m.metrics["loss_rec"] = last.rec;
        m.metrics["loss_kl"] = last.kl;
        m.metrics["loss_flow_nll"] = last.flow_nll;
    }
}

void cmd_train(const TrainOpts& o) {
    apply_determinism(o.common.deterministic);
    ExperimentConfig cfg = resolve_config(o.common);
    if (o.common.out.empty()) throw ConfigError("--out directory is required");
    const std::string out = o.common.out;
    RunScope scope("train", o.common);
    scope.set_config(cfg);
    const Dataset dataset = load_dataset(cfg, o.data_dir, "train");
    scope.m.notes["dataset_digest"] = data::dataset_digest(dataset);

    if (o.stage == "a") {
        StageAState st;
        train::init_stage_a(st, cfg);
        const std::string ckpt = out + "/stage_a.ckpt";
        if (o.resume) {
            if (!io::file_exists(ckpt))
                throw PrereqError("--resume: no checkpoint at " + ckpt);
            train::load_stage_a(st, cfg, ckpt);
        }
        const auto stats = train::train_stage_a(st, cfg, dataset, out, o.max_epochs);
        record_epoch_metrics(scope.m, stats, true);
        scope.m.metrics["epochs_done"] = st.epochs_done;
        scope.m.notes["alignment_digest"] = train::stage_a_digest(st);
        scope.m.add_output(ckpt);
        scope.m.add_output(out + "/stage_a_log.jsonl");
        scope.finish(out + "/manifest_train_a.json");
        return;
    }

    if (o.stage == "b") {
        const std::string a_ckpt = out + "/stage_a.ckpt";
        if (!io::file_exists(a_ckpt))
            throw PrereqError("decoder training needs the alignment stage first: missing " +
                              a_ckpt);
        StageAState sa;
        train::init_stage_a(sa, cfg);
        train::load_stage_a(sa, cfg, a_ckpt);
        scope.m.notes["alignment_digest"] = train::stage_a_digest(sa);
        PairProvider pairs(sa, cfg, dataset);

        StageBState st;
        train::init_stage_b(st, cfg);
        const std::string ckpt = out + "/stage_b.ckpt";
        if (o.resume) {
            if (!io::file_exists(ckpt))
                throw PrereqError("--resume: no checkpoint at " + ckpt);
            train::load_stage_b(st, cfg, ckpt);
        }
        const auto stats = train::train_stage_b(st, cfg, dataset, pairs, out, o.max_epochs);
        record_epoch_metrics(scope.m, stats, false);
        scope.m.metrics["epochs_done"] = st.epochs_done;
        scope.m.add_output(ckpt);
        scope.m.add_output(out + "/stage_b_log.jsonl");
        scope.finish(out + "/manifest_train_b.json");
        return;
    }

    if (o.stage == "mdm") {
        MdmState st;
        train::init_mdm(st, cfg, !o.baseline);
        const std::string ckpt = out + "/mdm.ckpt";
        if (o.resume) {
            if (!io::file_exists(ckpt))
                throw PrereqError("--resume: no checkpoint at " + ckpt);
            train::load_mdm(st, cfg, ckpt);
        }
        std::vector<train::EpochStats> stats;
        if (o.baseline) {
            stats = train::train_mdm(st, cfg, dataset, nullptr, out, o.max_epochs);
        } else {
            const std::string a_ckpt = out + "/stage_a.ckpt";
            if (!io::file_exists(a_ckpt))
                throw PrereqError(
                    "latent-conditioned refiner training needs the alignment stage first: "
                    "missing " +
                    a_ckpt);
            StageAState sa;
            train::init_stage_a(sa, cfg);
            train::load_stage_a(sa, cfg, a_ckpt);
            scope.m.notes["alignment_digest"] = train::stage_a_digest(sa);
            PairProvider pairs(sa, cfg, dataset);
            stats = train::train_mdm(st, cfg, dataset, &pairs, out, o.max_epochs);
        }
        record_epoch_metrics(scope.m, stats, false);
        scope.m.metrics["epochs_done"] = st.epochs_done;
        scope.m.notes["denoiser"] = o.baseline ? "baseline" : "latent-conditioned";
        scope.m.add_output(ckpt);
        scope.m.add_output(out + "/mdm_log.jsonl");
        scope.finish(out + "/manifest_train_mdm.json");
        return;
    }

    throw ConfigError("--stage must be a, b, or mdm (got '" + o.stage + "')");
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleOpts {
    CommonOpts common;
    std::string dir;
    std::string mode = "one-step";
    int count = 64;
    int steps = 0;  // 0 = keep configured refinement step count
    int label = -1;
    double temperature = -1.0;  // <0 = keep configured
    std::uint64_t stream = 0;
    bool grid = false;
};

void maybe_write_grid(const SampleOpts& o, const ExperimentConfig& cfg,
                      const std::vector<TokenSequence>& samples, RunScope& scope,
                      const std::string& out) {
    if (!o.grid) return;
    const int h = cfg.model.grid_h, w = cfg.model.grid_w;
    if (std::size_t(h) * std::size_t(w) != std::size_t(cfg.data.seq_len))
        throw ConfigError("--grid needs grid_h*grid_w == seq_len (" + std::to_string(h) + "x" +
                          std::to_string(w) + " vs " + std::to_string(cfg.data.seq_len) + ")");
    const int cols = std::max(1, int(std::ceil(std::sqrt(double(samples.size())))));
    const std::string path = out + "/samples.pgm";
    eval::write_image_grid(path, samples, h, w, cols);
    scope.m.add_output(path);
}

void cmd_sample(const SampleOpts& o) {
    apply_determinism(o.common.deterministic);
    if (o.count <= 0) throw ConfigError("--count must be positive");
    const std::string out = o.common.out.empty() ? o.dir : o.common.out;
    RunScope scope("sample", o.common);

    std::vector<TokenSequence> samples;
    std::int64_t nfe = -1;
    ExperimentConfig cfg;

    if (o.mode == "one-step") {
        const std::string ckpt = o.dir + "/stage_b.ckpt";
        cfg = config_from_checkpoint(ckpt);
        if (o.common.seed_set) cfg.seed = o.common.seed;
        if (o.temperature >= 0.0) cfg.stage_b.temperature = o.temperature;
        StageBState st;
        train::init_stage_b(st, cfg);
        train::load_stage_b(st, cfg, ckpt);
        train::install_ema(st);
        const std::vector<int> labels = make_labels(cfg, std::size_t(o.count), o.label);
        Rng rng = Rng::derive(cfg.seed, stream_tag::sampling, o.stream);
        st.gen.reset_eval_count();
        samples = train::sample_one_step(st.gen, cfg, std::size_t(o.count), labels, rng);
        nfe = st.gen.eval_count();
    } else if (o.mode == "refine") {
        const std::string ckpt = o.dir + "/mdm.ckpt";
        cfg = config_from_checkpoint(ckpt);
        if (o.common.seed_set) cfg.seed = o.common.seed;
        if (o.steps > 0) cfg.mdm.steps = o.steps;
        const bool with_latent = checkpoint_meta_flag(ckpt, "has_latent");
        MdmState st;
        train::init_mdm(st, cfg, with_latent);
        train::load_mdm(st, cfg, ckpt);
        const std::vector<int> labels = make_labels(cfg, std::size_t(o.count), o.label);
        Rng rng = Rng::derive(cfg.seed, stream_tag::sampling, o.stream);
        st.den.reset_eval_count();
        if (with_latent) {
            Tensor z = Tensor::zeros({std::size_t(o.count), std::size_t(st.den.latent_dim())});
            for (double& v : z.data) v = cfg.stage_b.z_scale * rng.normal();
            samples = train::refine_from_latent(st.den, cfg, z, labels, rng).tokens;
        } else {
            samples = train::refine_baseline(st.den, cfg, std::size_t(o.count), labels, rng).tokens;
        }
        nfe = st.den.eval_count();
        scope.m.notes["denoiser"] = with_latent ? "latent-conditioned" : "baseline";
        scope.m.metrics["steps"] = cfg.mdm.steps;
    } else {
        throw ConfigError("--mode must be one-step or refine (got '" + o.mode + "')");
    }

    scope.set_config(cfg);
    scope.m.nfe = nfe;
    scope.m.metrics["count"] = o.count;
    scope.m.notes["mode"] = o.mode;
    const std::string dump = out + "/samples.bin";
    dump_samples(dump, samples);
    scope.m.add_output(dump);
    maybe_write_grid(o, cfg, samples, scope, out);
    scope.finish(out + "/manifest_sample.json");
}

// ---------------------------------------------------------------------------
// guide
// ---------------------------------------------------------------------------

struct GuideOpts {
    CommonOpts common;
    std::string dir;
    std::string mode;  // cfg | latent | reward-ft
    int count = 64;
    int label = -1;
    std::uint64_t stream = 0;
    // configuration overrides (NaN / negative sentinels = keep configured)
    double scale = std::numeric_limits<double>::quiet_NaN();
    int steps = -1;
    double eta = std::numeric_limits<double>::quiet_NaN();
    std::string relax;       // soft | gumbel
    double relax_temp = -1;  // > 0 overrides
    double lambda_reward = std::numeric_limits<double>::quiet_NaN();
    double lambda_anchor = std::numeric_limits<double>::quiet_NaN();
    std::string anchor;  // mse | kl
    // reward selection
    std::string reward = "quadratic";  // quadratic | linear
    std::string target;                // csv of per-position tokens (quadratic)
    std::string reward_file;           // archive with a [T x V] "weights" tensor (linear)
    // fine-tuning
    int ft_iters = 50;
    double lr = 1e-4;
};

void apply_guidance_overrides(ExperimentConfig& cfg, const GuideOpts& o) {
    if (!std::isnan(o.scale)) cfg.guidance.cfg_scale = o.scale;
    if (o.steps >= 0) cfg.guidance.guidance_steps = o.steps;
    if (!std::isnan(o.eta)) cfg.guidance.step_size = o.eta;
    if (!o.relax.empty()) {
        if (o.relax == "soft")
            cfg.guidance.relaxation = RelaxationKind::soft;
        else if (o.relax == "gumbel")
            cfg.guidance.relaxation = RelaxationKind::gumbel_st;
        else
            throw ConfigError("--relax must be soft or gumbel (got '" + o.relax + "')");
    }
    if (o.relax_temp > 0) cfg.guidance.relaxation_temperature = o.relax_temp;
    if (!std::isnan(o.lambda_reward)) cfg.guidance.lambda_reward = o.lambda_reward;
    if (!std::isnan(o.lambda_anchor)) cfg.guidance.lambda_anchor = o.lambda_anchor;
    if (!o.anchor.empty()) {
        if (o.anchor == "mse")
            cfg.guidance.anchor = AnchorKind::logit_mse;
        else if (o.anchor == "kl")
            cfg.guidance.anchor = AnchorKind::logit_kl;
        else
            throw ConfigError("--anchor must be mse or kl (got '" + o.anchor + "')");
    }
}

std::unique_ptr<guide::RewardModel> build_reward(const GuideOpts& o, const ExperimentConfig& cfg) {
    const int T = cfg.data.seq_len, V = cfg.data.vocab_size;
    if (o.reward == "quadratic") {
        if (o.target.empty())
            throw ConfigError("--reward quadratic needs --target \"t0,t1,...\" (one token per "
                              "position)");
        std::vector<int> toks;
        std::stringstream ss(o.target);
        std::string part;
        while (std::getline(ss, part, ',')) {
            try {
                toks.push_back(std::stoi(part));
            } catch (const std::exception&) {
                throw ConfigError("--target: '" + part + "' is not an integer token");
            }
        }
        if (int(toks.size()) != T)
            throw ConfigError("--target needs exactly " + std::to_string(T) + " tokens, got " +
                              std::to_string(toks.size()));
        auto r = std::make_unique<guide::QuadraticTargetReward>(T, V);
        for (int p = 0; p < T; ++p) {
            if (toks[std::size_t(p)] < 0 || toks[std::size_t(p)] >= V)
                throw ConfigError("--target token out of vocabulary at position " +
                                  std::to_string(p));
            r->target.at(std::size_t(p), std::size_t(toks[std::size_t(p)])) = 1.0;
        }
        return r;
    }
    if (o.reward == "linear") {
        if (o.reward_file.empty())
            throw ConfigError("--reward linear needs --reward-file (archive with a \"weights\" "
                              "tensor)");
        if (!io::file_exists(o.reward_file))
            throw PrereqError("reward file not found: " + o.reward_file);
        io::Archive ar = io::Archive::load(o.reward_file);
        auto it = ar.tensors.find("weights");
        if (it == ar.tensors.end())
            throw CheckFailure("reward file has no \"weights\" tensor: " + o.reward_file);
        if (it->second.rank() != 2 || int(it->second.dim(0)) != T || int(it->second.dim(1)) != V)
            throw CheckFailure("reward weights must be [" + std::to_string(T) + " x " +
                               std::to_string(V) + "]");
        auto r = std::make_unique<guide::LinearReward>(T, V);
        r->weights = it->second;
        return r;
    }
    throw ConfigError("--reward must be quadratic or linear (got '" + o.reward + "')");
}

void cmd_guide(const GuideOpts& o) {
    apply_determinism(o.common.deterministic);
    if (o.count <= 0) throw ConfigError("--count must be positive");
    const std::string out = o.common.out.empty() ? o.dir : o.common.out;
    const std::string ckpt = o.dir + "/stage_b.ckpt";
    ExperimentConfig cfg = config_from_checkpoint(ckpt);
    if (o.common.seed_set) cfg.seed = o.common.seed;
    apply_guidance_overrides(cfg, o);

    RunScope scope("guide", o.common);
    scope.set_config(cfg);
    scope.m.notes["mode"] = o.mode;

    StageBState st;
    train::init_stage_b(st, cfg);
    train::load_stage_b(st, cfg, ckpt);
    train::install_ema(st);
    Rng rng = Rng::derive(cfg.seed, stream_tag::sampling, o.stream);

    if (o.mode == "cfg") {
        if (o.label < 0) throw ConfigError("classifier-free guidance needs --label");
        const std::vector<int> labels = make_labels(cfg, std::size_t(o.count), o.label);
        st.gen.reset_eval_count();
        const auto samples = guide::sample_cfg(st.gen, cfg, std::size_t(o.count), labels, rng);
        scope.m.nfe = st.gen.eval_count();
        scope.m.metrics["count"] = o.count;
        scope.m.metrics["scale"] = cfg.guidance.cfg_scale;
        const std::string dump = out + "/samples.bin";
        dump_samples(dump, samples);
        scope.m.add_output(dump);
        scope.finish(out + "/manifest_guide.json");
        return;
    }

    const auto reward = build_reward(o, cfg);

    if (o.mode == "latent") {
        const std::vector<int> labels = make_labels(cfg, std::size_t(o.count), o.label);
        guide::GuidanceTrace trace;
        st.gen.reset_eval_count();
        const auto samples = guide::sample_with_latent_guidance(
            st.gen, cfg, *reward, std::size_t(o.count), labels, rng, &trace);
        scope.m.nfe = st.gen.eval_count();
        scope.m.metrics["count"] = o.count;
        scope.m.metrics["guidance_steps"] = cfg.guidance.guidance_steps;
        if (!trace.reward_path.empty()) {
            scope.m.metrics["reward_start"] = trace.reward_path.front();
            scope.m.metrics["reward_end"] = trace.reward_path.back();
        }
        scope.m.metrics["reward_of_samples"] =
            reward->reward_of(samples, cfg.data.vocab_size, labels) / double(o.count);
        const std::string dump = out + "/samples.bin";
        dump_samples(dump, samples);
        scope.m.add_output(dump);
        scope.finish(out + "/manifest_guide.json");
        return;
    }

    if (o.mode == "reward-ft") {
        if (o.ft_iters <= 0) throw ConfigError("--ft-iters must be positive");
        if (o.lr <= 0) throw ConfigError("--lr must be positive");
        StageBState frozen;
        train::init_stage_b(frozen, cfg);
        train::load_stage_b(frozen, cfg, ckpt);
        const std::vector<int> labels = make_labels(cfg, std::size_t(o.count), o.label);
        guide::FinetuneStats first{}, last{};
        for (int it = 0; it < o.ft_iters; ++it) {
            Tensor z = Tensor::zeros({std::size_t(o.count), std::size_t(st.gen.latent_dim())});
            for (double& v : z.data) v = cfg.stage_b.z_scale * rng.normal();
            last = guide::reward_finetune_step(st, frozen.gen, cfg, *reward, z, labels, o.lr,
                                               &rng);
            if (it == 0) first = last;
        }
        const std::string tuned = out + "/stage_b_tuned.ckpt";
        train::save_stage_b(st, cfg, tuned);
        scope.m.metrics["iterations"] = o.ft_iters;
        scope.m.metrics["loss_start"] = first.loss;
        scope.m.metrics["loss_end"] = last.loss;
        scope.m.metrics["reward_start"] = first.reward_mean;
        scope.m.metrics["reward_end"] = last.reward_mean;
        scope.m.metrics["anchor_end"] = last.anchor;
        scope.m.metrics["grad_norm_end"] = last.grad_norm;
        scope.m.add_output(tuned);
        scope.finish(out + "/manifest_guide.json");
        return;
    }

    throw ConfigError("--mode must be cfg, latent, or reward-ft (got '" + o.mode + "')");
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    CommonOpts common;
    std::string dir;
    std::string samples_path;
    std::string metrics = "entropy";
    std::string data_dir;
    std::string split = "test";
    int label = -1;
    int count = 2048;  // latent sample budget for the gaussianity probe
    // embedding protocol for the distributional distance
    std::string fid_embed = "random";  // pixels | random | file
    int fid_dim = 2048;
    std::string fid_embeddings_samples;
    std::string fid_embeddings_reference;
};

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) out.push_back(part);
    return out;
}

void cmd_eval(const EvalOpts& o) {
    apply_determinism(o.common.deterministic);
    const std::string out = o.common.out.empty() ? o.dir : o.common.out;
    const std::vector<std::string> wanted = split_csv(o.metrics);
    if (wanted.empty()) throw ConfigError("--metrics is empty");

    // The evaluated model's configuration comes from whichever checkpoint the
    // metric needs; default to the decoder, falling back to the alignment
    // stage for latent-only diagnostics.
    std::string cfg_source = o.dir + "/stage_b.ckpt";
    if (!io::file_exists(cfg_source)) cfg_source = o.dir + "/stage_a.ckpt";
    ExperimentConfig cfg = config_from_checkpoint(cfg_source);
    if (o.common.seed_set) cfg.seed = o.common.seed;

    RunScope scope("eval", o.common);
    scope.set_config(cfg);

    std::vector<nlohmann::json> records;
    for (const std::string& name : wanted) {
        if (name == "entropy") {
            const auto samples = read_samples(o.samples_path, cfg.data.vocab_size);
            const double h = eval::unigram_entropy(samples, cfg.data.vocab_size);
            scope.m.metrics["unigram_entropy"] = h;
            records.push_back({{"metric", "unigram_entropy"},
                               {"value", h},
                               {"sample_count", samples.size()}});
        } else if (name == "tv") {
            if (o.label >= 0)
                throw ConfigError("tv compares the unconditional laws; omit --label");
            const std::string b_ckpt = o.dir + "/stage_b.ckpt";
            ExperimentConfig bcfg = config_from_checkpoint(b_ckpt);
            StageBState st;
            train::init_stage_b(st, bcfg);
            train::load_stage_b(st, bcfg, b_ckpt);
            train::install_ema(st);
            const oracle::ExactDistribution gen_law = train::generated_law(st.gen, bcfg);
            const oracle::ExactDistribution data_law = data::exact_law(bcfg);
            const double tv = oracle::exact_tv(gen_law, data_law);
            scope.m.metrics["tv_to_data_law"] = tv;
            records.push_back({{"metric", "tv_to_data_law"}, {"value", tv}});
        } else if (name == "fid") {
            const auto samples = read_samples(o.samples_path, cfg.data.vocab_size);
            const std::string ref_dir = o.data_dir;
            Dataset reference = load_dataset(cfg, ref_dir, o.split);
            eval::FidProtocol proto;
            proto.embed_dim = o.fid_dim;
            proto.image_h = cfg.model.grid_h;
            proto.image_w = cfg.model.grid_w;
            if (o.fid_embed == "pixels")
                proto.embedding = eval::EmbeddingKind::pixels;
            else if (o.fid_embed == "random")
                proto.embedding = eval::EmbeddingKind::random_projection;
            else if (o.fid_embed == "file") {
                proto.embedding = eval::EmbeddingKind::file;
                proto.embeddings_file_samples = o.fid_embeddings_samples;
                proto.embeddings_file_reference = o.fid_embeddings_reference;
            } else {
                throw ConfigError("--fid-embed must be pixels, random, or file");
            }
            const eval::FidReport rep = eval::compute_fid(samples, reference.items, proto);
            scope.m.metrics["fid"] = rep.value;
            scope.m.notes["fid_protocol"] = rep.protocol;
            scope.m.notes["fid_protocol_digest"] = rep.protocol_digest;
            records.push_back({{"metric", "fid"},
                               {"value", rep.value},
                               {"sample_count", rep.sample_count},
                               {"reference_count", rep.reference_count},
                               {"protocol_digest", rep.protocol_digest}});
        } else if (name == "gaussianity") {
            const std::string a_ckpt = o.dir + "/stage_a.ckpt";
            ExperimentConfig acfg = config_from_checkpoint(a_ckpt);
            StageAState sa;
            train::init_stage_a(sa, acfg);
            train::load_stage_a(sa, acfg, a_ckpt);
            const Dataset dataset = load_dataset(acfg, o.data_dir, "train");
            PairProvider pairs(sa, acfg, dataset);
            const std::size_t n = std::min<std::size_t>(std::size_t(std::max(1, o.count)),
                                                        dataset.items.size());
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = i;
            const Tensor z = pairs.materialize(idx, 0).z;
            const eval::GaussianityReport rep = eval::gaussianity_diagnostics(z);
            double worst_mean = 0.0, worst_std = 0.0;
            for (double v : rep.per_dim_mean) worst_mean = std::max(worst_mean, std::abs(v));
            for (double v : rep.per_dim_std) worst_std = std::max(worst_std, std::abs(v - 1.0));
            scope.m.metrics["latent_worst_abs_mean"] = worst_mean;
            scope.m.metrics["latent_worst_std_gap"] = worst_std;
            scope.m.metrics["latent_max_abs_offdiag_corr"] = rep.max_abs_offdiag_corr;
            scope.m.metrics["latent_ks_stat_max"] = rep.ks_stat_max;
            records.push_back({{"metric", "gaussianity"},
                               {"worst_abs_mean", worst_mean},
                               {"worst_std_gap", worst_std},
                               {"max_abs_offdiag_corr", rep.max_abs_offdiag_corr},
                               {"ks_stat_max", rep.ks_stat_max},
                               {"degenerate", rep.degenerate},
                               {"latent_count", n}});
        } else {
            throw ConfigError("unknown metric '" + name +
                              "' (known: entropy, tv, fid, gaussianity)");
        }
    }

    std::string lines;
    for (const auto& r : records) lines += r.dump() + "\n";
    const std::string metrics_path = out + "/metrics.jsonl";
    io::write_file_atomic(metrics_path, lines);
    scope.m.add_output(metrics_path);
    scope.finish(out + "/manifest_eval.json");
    std::cout << lines;
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

struct OracleOpts {
    CommonOpts common;
    std::string suite = "all";
    int count = 1000;
    std::uint64_t seed = 424242;
};

oracle::ExactDistribution random_law(int V, int T, Rng& rng) {
    oracle::ExactDistribution d(V, T);
    double tot = 0.0;
    for (double& v : d.p) {
        v = -std::log(rng.uniform());
        tot += v;
    }
    for (double& v : d.p) v /= tot;
    return d;
}

// TV(p, q) <= sqrt(KL(p || q) / 2) on random distribution pairs.
void run_pinsker(int count, Rng& rng, io::RunManifest& m) {
    double max_gap = -1.0;
    for (int i = 0; i < count; ++i) {
        const int V = 2 + int(rng.below(4));
        const int T = 1 + int(rng.below(3));
        const oracle::ExactDistribution p = random_law(V, T, rng);
        const oracle::ExactDistribution q = random_law(V, T, rng);
        const double tv = oracle::exact_tv(p, q);
        const double kl = oracle::exact_kl(p, q);
        const double gap = tv - std::sqrt(kl / 2.0);
        max_gap = std::max(max_gap, gap);
        if (gap > 1e-12)
            throw CheckFailure("total variation exceeded the divergence bound on draw " +
                               std::to_string(i) + ": tv=" + std::to_string(tv) +
                               " bound=" + std::to_string(std::sqrt(kl / 2.0)));
    }
    m.metrics["pinsker_draws"] = count;
    m.metrics["pinsker_max_gap"] = max_gap;
    std::cout << "[ok] pinsker: " << count << " draws, max gap " << max_gap << "\n";
}

// TV(data law, generated law) <= E_z TV(decoder laws) + TV(latent laws), and
// the KL-epsilon form, on random finite latent systems.
void run_bound(int count, Rng& rng, io::RunManifest& m) {
    int strict = 0;
    const std::vector<std::pair<int, int>> shapes = {{2, 2}, {3, 2}, {2, 8}};
    for (int i = 0; i < count; ++i) {
        const auto [V, T] = shapes[std::size_t(rng.below(shapes.size()))];
        const int J = 2 + int(rng.below(7));
        oracle::DiscretizedLatentJoint joint;
        std::vector<oracle::ExactDistribution> dec;
        std::vector<double> prior(std::size_t(J), 0.0);
        double wtot = 0.0, ptot = 0.0;
        for (int j = 0; j < J; ++j) {
            joint.weights.push_back(-std::log(rng.uniform()));
            wtot += joint.weights.back();
            prior[std::size_t(j)] = -std::log(rng.uniform());
            ptot += prior[std::size_t(j)];
            joint.conditionals.push_back(random_law(V, T, rng));
            dec.push_back(random_law(V, T, rng));
        }
        for (double& v : joint.weights) v /= wtot;
        for (double& v : prior) v /= ptot;
        const oracle::BoundReport r = oracle::check_latent_matching_bound(joint, dec, prior);
        if (!r.tv_bound_holds)
            throw CheckFailure("coupling TV bound failed on system " + std::to_string(i));
        if (!r.kl_bound_holds)
            throw CheckFailure("coupling KL bound failed on system " + std::to_string(i));
        if (r.lhs_tv < r.rhs_tv - 1e-9) ++strict;
    }
    m.metrics["bound_systems"] = count;
    m.metrics["bound_strict"] = strict;
    std::cout << "[ok] bound: " << count << " systems, strict on " << strict << "\n";
}

// The two-position matched law sits outside the factorized family: nonzero
// determinant certificate, and the best factorized fit stays far away.
void run_barrier(io::RunManifest& m) {
    oracle::ExactDistribution pair(2, 2);
    pair.p = {0.5, 0.0, 0.0, 0.5};
    const double det = oracle::pair_factorization_determinant(pair);
    if (std::abs(det - 0.25) > 1e-12)
        throw CheckFailure("factorization certificate expected 0.25, got " + std::to_string(det));
    const oracle::FactorizedSearchResult best = oracle::best_factorized_tv(pair);
    const double expect = std::sqrt(2.0) - 1.0;  // optimum puts 1/sqrt(2) on one symbol per slot
    if (std::abs(best.tv - expect) > 1e-6)
        throw CheckFailure("best factorized fit of the matched pair law expected tv " +
                           std::to_string(expect) + ", got " + std::to_string(best.tv));
    // The product of the marginals (both uniform) is twice as far.
    const oracle::ExactDistribution prod = oracle::product_law(oracle::marginals_of(pair));
    const double tv_prod = oracle::exact_tv(pair, prod);
    if (std::abs(tv_prod - 0.5) > 1e-12)
        throw CheckFailure("product-of-marginals distance expected 0.5, got " +
                           std::to_string(tv_prod));
    m.metrics["barrier_certificate"] = det;
    m.metrics["barrier_best_factorized_tv"] = best.tv;
    m.metrics["barrier_product_tv"] = tv_prod;
    std::cout << "[ok] barrier: certificate " << det << ", best factorized tv " << best.tv
              << ", product tv " << tv_prod << "\n";
}

void cmd_oracle(const OracleOpts& o) {
    apply_determinism(o.common.deterministic);
    if (o.count <= 0) throw ConfigError("--count must be positive");
    RunScope scope("oracle", o.common);
    scope.m.seed = o.seed;
    Rng rng(o.seed);
    const bool all = o.suite == "all";
    bool ran = false;
    if (all || o.suite == "pinsker") {
        run_pinsker(o.count, rng, scope.m);
        ran = true;
    }
    if (all || o.suite == "bound") {
        run_bound(o.count, rng, scope.m);
        ran = true;
    }
    if (all || o.suite == "barrier") {
        run_barrier(scope.m);
        ran = true;
    }
    if (!ran)
        throw ConfigError("--suite must be all, pinsker, bound, or barrier (got '" + o.suite +
                          "')");
    if (!o.common.out.empty()) scope.finish(o.common.out + "/manifest_oracle.json");
    std::cout << "oracle suite passed\n";
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportOpts {
    std::string manifest_path;
};

void cmd_report(const ReportOpts& o) {
    if (!io::file_exists(o.manifest_path))
        throw PrereqError("manifest not found: " + o.manifest_path);
    const io::RunManifest m = io::RunManifest::read(o.manifest_path);
    std::cout << "command:      " << m.command << "\n";
    std::cout << "code version: " << m.code_version << "\n";
    std::cout << "seed:         " << m.seed << "\n";
    if (m.nfe >= 0) std::cout << "nfe:          " << m.nfe << "\n";
    for (const auto& [k, v] : m.metrics) std::cout << "metric " << k << " = " << v << "\n";
    std::vector<std::string> problems;
    for (const io::RunManifest::Output& out : m.outputs) {
        if (!io::file_exists(out.path)) {
            problems.push_back("missing: " + out.path);
            std::cout << "output " << out.path << "  MISSING\n";
            continue;
        }
        const std::string now = io::sha256_file(out.path);
        if (now != out.sha256) {
            problems.push_back("drifted: " + out.path);
            std::cout << "output " << out.path << "  DRIFTED\n";
        } else {
            std::cout << "output " << out.path << "  ok\n";
        }
    }
    if (!problems.empty()) {
        std::string msg = "manifest verification failed:";
        for (const std::string& p : problems) msg += "\n  " + p;
        throw CheckFailure(msg);
    }
    std::cout << "all " << m.outputs.size() << " outputs verified\n";
}

// ---------------------------------------------------------------------------
// wiring
// ---------------------------------------------------------------------------

void add_common(CLI::App* sub, CommonOpts& c, bool with_config) {
    if (with_config) {
        sub->add_option("--profile", c.profile, "built-in configuration profile");
        sub->add_option("--config", c.config_path, "configuration JSON file");
    }
    sub->add_option("--out", c.out, "output directory");
    sub->add_flag("--deterministic", c.deterministic,
                  "bitwise-reproducible mode: serial kernels only");
    sub->add_option("--seed", c.seed, "seed override")->each([&c](const std::string&) {
        c.seed_set = true;
    });
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"two-stage one-step discrete generator: latent alignment + parallel decoding"};
    app.require_subcommand(1);
    app.set_version_flag("--version", io::code_version());

    TrainOpts train_o;
    train_o.common.raw_args = args;
    CLI::App* t = app.add_subcommand("train", "train a pipeline stage");
    t->add_option("--stage", train_o.stage, "a (alignment), b (decoder), or mdm (refiner)")
        ->required();
    t->add_flag("--baseline", train_o.baseline, "mdm only: train without latent conditioning");
    t->add_flag("--resume", train_o.resume, "continue from the rolling checkpoint in --out");
    t->add_option("--max-epochs", train_o.max_epochs, "stop after this many epochs (resumable)");
    t->add_option("--data-dir", train_o.data_dir, "dataset directory for image tasks")
        ->default_val(env_or("COUPLEGEN_DATA_DIR", ""));
    add_common(t, train_o.common, true);
    t->callback([&train_o] { cmd_train(train_o); });

    SampleOpts sample_o;
    sample_o.common.raw_args = args;
    CLI::App* s = app.add_subcommand("sample", "draw sequences from trained models");
    s->add_option("--dir", sample_o.dir, "checkpoint directory")->required();
    s->add_option("--mode", sample_o.mode, "one-step (decoder) or refine (masked refiner)");
    s->add_option("--count", sample_o.count, "number of samples");
    s->add_option("--steps", sample_o.steps, "refine only: refinement step count");
    s->add_option("--label", sample_o.label, "class label (conditional models)");
    s->add_option("--temperature", sample_o.temperature, "decoder sampling temperature");
    s->add_option("--stream", sample_o.stream, "sampling stream index (new batch per index)");
    s->add_flag("--grid", sample_o.grid, "also render an image grid (grid tasks)");
    add_common(s, sample_o.common, false);
    s->callback([&sample_o] { cmd_sample(sample_o); });

    GuideOpts guide_o;
    guide_o.common.raw_args = args;
    CLI::App* g = app.add_subcommand("guide", "guided generation and reward fine-tuning");
    g->add_option("--dir", guide_o.dir, "checkpoint directory")->required();
    g->add_option("--mode", guide_o.mode, "cfg, latent, or reward-ft")->required();
    g->add_option("--count", guide_o.count, "number of samples (or fine-tune batch size)");
    g->add_option("--label", guide_o.label, "class label");
    g->add_option("--stream", guide_o.stream, "sampling stream index");
    g->add_option("--scale", guide_o.scale, "cfg: guidance scale");
    g->add_option("--steps", guide_o.steps, "latent: ascent step count");
    g->add_option("--eta", guide_o.eta, "latent: ascent step size");
    g->add_option("--relax", guide_o.relax, "soft or gumbel");
    g->add_option("--relax-temp", guide_o.relax_temp, "relaxation temperature");
    g->add_option("--reward", guide_o.reward, "quadratic or linear");
    g->add_option("--target", guide_o.target, "quadratic: csv of per-position target tokens");
    g->add_option("--reward-file", guide_o.reward_file, "linear: archive with a weights tensor");
    g->add_option("--ft-iters", guide_o.ft_iters, "reward-ft: optimizer steps");
    g->add_option("--lr", guide_o.lr, "reward-ft: learning rate");
    g->add_option("--lambda-reward", guide_o.lambda_reward, "reward-ft: reward weight");
    g->add_option("--lambda-anchor", guide_o.lambda_anchor, "reward-ft: anchor weight");
    g->add_option("--anchor", guide_o.anchor, "reward-ft: mse or kl");
    add_common(g, guide_o.common, false);
    g->callback([&guide_o] { cmd_guide(guide_o); });

    EvalOpts eval_o;
    eval_o.common.raw_args = args;
    CLI::App* e = app.add_subcommand("eval", "compute metrics for a run");
    e->add_option("--dir", eval_o.dir, "checkpoint directory")->required();
    e->add_option("--samples", eval_o.samples_path, "sample dump (entropy, fid)");
    e->add_option("--metrics", eval_o.metrics, "csv of entropy,tv,fid,gaussianity");
    e->add_option("--data-dir", eval_o.data_dir, "reference dataset directory")
        ->default_val(env_or("COUPLEGEN_DATA_DIR", ""));
    e->add_option("--split", eval_o.split, "reference split (train or test)");
    e->add_option("--label", eval_o.label, "class label");
    e->add_option("--count", eval_o.count, "gaussianity: latent sample budget");
    e->add_option("--fid-embed", eval_o.fid_embed, "pixels, random, or file");
    e->add_option("--fid-dim", eval_o.fid_dim, "random embedding dimension");
    e->add_option("--fid-embeddings-samples", eval_o.fid_embeddings_samples,
                  "file embed: archive for the sample side");
    e->add_option("--fid-embeddings-reference", eval_o.fid_embeddings_reference,
                  "file embed: archive for the reference side");
    add_common(e, eval_o.common, false);
    e->callback([&eval_o] { cmd_eval(eval_o); });

    OracleOpts oracle_o;
    oracle_o.common.raw_args = args;
    CLI::App* r = app.add_subcommand("oracle", "exact-divergence verification suite");
    r->add_option("--suite", oracle_o.suite, "all, pinsker, bound, or barrier");
    r->add_option("--count", oracle_o.count, "random draws per suite");
    r->add_option("--seed", oracle_o.seed, "suite seed");
    r->add_option("--out", oracle_o.common.out, "output directory for the manifest");
    r->add_flag("--deterministic", oracle_o.common.deterministic,
                "bitwise-reproducible mode: serial kernels only");
    r->callback([&oracle_o] { cmd_oracle(oracle_o); });

    ReportOpts report_o;
    CLI::App* p = app.add_subcommand("report", "verify a run manifest against its outputs");
    p->add_option("--manifest", report_o.manifest_path, "manifest JSON path")->required();
    p->callback([&report_o] { cmd_report(report_o); });

    CLI::App* profs = app.add_subcommand("profiles", "list built-in configuration profiles");
    std::string show_profile;
    profs->add_option("--show", show_profile, "print one profile's JSON");
    profs->callback([&show_profile] {
        if (!show_profile.empty()) {
            std::cout << profile_json(show_profile);
            return;
        }
        for (const std::string& name : profile_names()) std::cout << name << "\n";
    });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const PrereqError& e) {
        std::cerr << "missing prerequisite: " << e.what() << "\n";
        return 3;
    } catch (const CheckFailure& e) {
        std::cerr << "verification failed: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace couplegen::cli
