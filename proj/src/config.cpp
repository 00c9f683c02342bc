#include "couplegen/config.hpp"

#include <json.hpp>

#include <cmath>
#include <set>

namespace couplegen {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
    throw ConfigError("config: " + path + ": " + why);
}

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) fail(path, "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key())) fail(path + "." + it.key(), "unknown key");
}

double get_num(const json& obj, const std::string& path, const char* key, double dflt, double lo,
               double hi, bool lo_open = false) {
    double v = dflt;
    if (obj.contains(key)) {
        if (!obj[key].is_number()) fail(path + "." + key, "expected a number");
        v = obj[key].get<double>();
    }
    if (!std::isfinite(v)) fail(path + "." + key, "must be finite");
    if (lo_open ? (v <= lo) : (v < lo)) fail(path + "." + key, "below allowed range");
    if (v > hi) fail(path + "." + key, "above allowed range");
    return v;
}

int get_int(const json& obj, const std::string& path, const char* key, int dflt, int lo, int hi) {
    int v = dflt;
    if (obj.contains(key)) {
        if (!obj[key].is_number_integer()) fail(path + "." + key, "expected an integer");
        v = obj[key].get<int>();
    }
    if (v < lo || v > hi) fail(path + "." + key, "out of range");
    return v;
}

bool get_bool(const json& obj, const std::string& path, const char* key, bool dflt) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_boolean()) fail(path + "." + key, "expected a boolean");
    return obj[key].get<bool>();
}

std::string get_enum(const json& obj, const std::string& path, const char* key, const std::string& dflt,
                     const std::set<std::string>& allowed) {
    std::string v = dflt;
    if (obj.contains(key)) {
        if (!obj[key].is_string()) fail(path + "." + key, "expected a string");
        v = obj[key].get<std::string>();
    }
    if (!allowed.count(v)) {
        std::string opts;
        for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
        fail(path + "." + key, "must be one of " + opts);
    }
    return v;
}

}  // namespace

double ExperimentConfig::mdm_temperature(int i, int k) const {
    if (mdm.temperatures.empty()) return 1.0;
    if (mdm.temperatures.size() == 1) return mdm.temperatures[0];
    if (int(mdm.temperatures.size()) < k)
        throw ConfigError("config: mdm.temperatures: need 1 or >= steps entries");
    return mdm.temperatures[std::size_t(i - 1)];
}

ExperimentConfig validate_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(root, "(root)",
               {"schema_version", "seed", "data", "model", "stage_a", "flow", "stage_b", "mdm",
                "guidance"});

    ExperimentConfig c;
    c.schema_version = get_int(root, "(root)", "schema_version", 1, 1, 1);
    if (root.contains("seed")) {
        if (!root["seed"].is_number_unsigned() && !root["seed"].is_number_integer())
            fail("seed", "expected a non-negative integer");
        const auto s = root["seed"].get<std::int64_t>();
        if (s < 0) fail("seed", "must be >= 0");
        c.seed = std::uint64_t(s);
    }

    const json data = root.value("data", json::object());
    check_keys(data, "data",
               {"task", "vocab_size", "seq_len", "num_train", "motif_count", "motif_weights",
                "binarize_threshold", "num_classes"});
    {
        const std::string task = get_enum(data, "data", "task", "toy_pair",
                                          {"toy_pair", "toy_motif", "mnist_binary"});
        c.data.task = task == "toy_pair"    ? TaskKind::toy_pair
                      : task == "toy_motif" ? TaskKind::toy_motif
                                            : TaskKind::mnist_binary;
        c.data.vocab_size = get_int(data, "data", "vocab_size", 2, 2, 4096);
        c.data.seq_len = get_int(data, "data", "seq_len", 2, 1, 4096);
        c.data.num_train = get_int(data, "data", "num_train", 2048, 0, 1 << 26);
        c.data.motif_count = get_int(data, "data", "motif_count", 4, 1, 1 << 16);
        c.data.binarize_threshold = get_num(data, "data", "binarize_threshold", 0.5, 0.0, 1.0);
        c.data.num_classes = get_int(data, "data", "num_classes", 0, 0, 1 << 16);
        if (data.contains("motif_weights")) {
            if (!data["motif_weights"].is_array()) fail("data.motif_weights", "expected an array");
            double total = 0.0;
            for (const auto& w : data["motif_weights"]) {
                if (!w.is_number()) fail("data.motif_weights", "expected numbers");
                const double wv = w.get<double>();
                if (!(wv > 0.0)) fail("data.motif_weights", "weights must be positive");
                c.data.motif_weights.push_back(wv);
                total += wv;
            }
            if (int(c.data.motif_weights.size()) != c.data.motif_count)
                fail("data.motif_weights", "length must equal motif_count");
            for (double& w : c.data.motif_weights) w /= total;
        }
        if (c.data.task == TaskKind::mnist_binary) {
            if (c.data.vocab_size != 2) fail("data.vocab_size", "mnist_binary requires vocab_size 2");
            if (c.data.seq_len != 784) fail("data.seq_len", "mnist_binary requires seq_len 784");
        }
    }

    const json model = root.value("model", json::object());
    check_keys(model, "model",
               {"latent_dim", "embed_dim", "encoder", "encoder_width", "encoder_depth", "generator",
                "generator_width", "generator_depth", "generator_heads", "denoiser", "denoiser_width",
                "denoiser_depth", "denoiser_heads", "conditional", "grid_h", "grid_w", "latent_grid_h",
                "latent_grid_w", "latent_channels"});
    {
        c.model.latent_dim = get_int(model, "model", "latent_dim", 2, 1, 1 << 16);
        c.model.embed_dim = get_int(model, "model", "embed_dim", 8, 1, 4096);
        const std::string enc = get_enum(model, "model", "encoder", "mlp", {"mlp", "conv_grid"});
        c.model.encoder = enc == "mlp" ? EncoderArch::mlp : EncoderArch::conv_grid;
        c.model.encoder_width = get_int(model, "model", "encoder_width", 64, 1, 1 << 16);
        c.model.encoder_depth = get_int(model, "model", "encoder_depth", 2, 1, 64);
        const std::string gen = get_enum(model, "model", "generator", "mlp",
                                         {"mlp", "attention_seq", "attention_grid"});
        c.model.generator = gen == "mlp"             ? GeneratorArch::mlp
                            : gen == "attention_seq" ? GeneratorArch::attention_seq
                                                     : GeneratorArch::attention_grid;
        c.model.generator_width = get_int(model, "model", "generator_width", 64, 1, 1 << 16);
        c.model.generator_depth = get_int(model, "model", "generator_depth", 2, 1, 64);
        c.model.generator_heads = get_int(model, "model", "generator_heads", 4, 1, 64);
        const std::string den = get_enum(model, "model", "denoiser", "mlp", {"mlp", "attention_seq"});
        c.model.denoiser = den == "mlp" ? DenoiserArch::mlp : DenoiserArch::attention_seq;
        c.model.denoiser_width = get_int(model, "model", "denoiser_width", 64, 1, 1 << 16);
        c.model.denoiser_depth = get_int(model, "model", "denoiser_depth", 2, 1, 64);
        c.model.denoiser_heads = get_int(model, "model", "denoiser_heads", 4, 1, 64);
        c.model.conditional = get_bool(model, "model", "conditional", false);
        c.model.grid_h = get_int(model, "model", "grid_h", 28, 1, 4096);
        c.model.grid_w = get_int(model, "model", "grid_w", 28, 1, 4096);
        c.model.latent_grid_h = get_int(model, "model", "latent_grid_h", 7, 1, 4096);
        c.model.latent_grid_w = get_int(model, "model", "latent_grid_w", 7, 1, 4096);
        c.model.latent_channels = get_int(model, "model", "latent_channels", 16, 1, 4096);
        if (c.model.conditional && c.data.num_classes <= 0)
            fail("model.conditional", "requires data.num_classes > 0");
        if (c.model.encoder == EncoderArch::conv_grid &&
            c.model.latent_dim != c.model.latent_grid_h * c.model.latent_grid_w * c.model.latent_channels)
            fail("model.latent_dim", "conv_grid requires latent_grid_h*latent_grid_w*latent_channels");
        if (c.model.encoder == EncoderArch::conv_grid &&
            c.data.seq_len != c.model.grid_h * c.model.grid_w)
            fail("model.grid_h", "conv_grid requires seq_len = grid_h*grid_w");
    }

    const json sa = root.value("stage_a", json::object());
    check_keys(sa, "stage_a",
               {"lambda_rec", "lambda_kl", "lambda_flow", "latent_noise_std", "epochs", "batch_size",
                "learning_rate", "weight_decay", "pair_mode"});
    {
        c.stage_a.lambda_rec = get_num(sa, "stage_a", "lambda_rec", 1.0, 0.0, 1e6);
        c.stage_a.lambda_kl = get_num(sa, "stage_a", "lambda_kl", 1.0, 0.0, 1e6);
        c.stage_a.lambda_flow = get_num(sa, "stage_a", "lambda_flow", 1.0, 0.0, 1e6);
        c.stage_a.latent_noise_std = get_num(sa, "stage_a", "latent_noise_std", 0.5, 0.0, 1e3, true);
        c.stage_a.epochs = get_int(sa, "stage_a", "epochs", 100, 0, 1 << 20);
        c.stage_a.batch_size = get_int(sa, "stage_a", "batch_size", 256, 1, 1 << 20);
        c.stage_a.learning_rate = get_num(sa, "stage_a", "learning_rate", 2e-4, 0.0, 10.0, true);
        c.stage_a.weight_decay = get_num(sa, "stage_a", "weight_decay", 1e-4, 0.0, 10.0);
        c.stage_a.pair_mode = get_enum(sa, "stage_a", "pair_mode", "resampled",
                                       {"resampled", "frozen"}) == "resampled"
                                  ? PairMode::resampled
                                  : PairMode::frozen;
    }

    const json fl = root.value("flow", json::object());
    check_keys(fl, "flow", {"num_blocks", "hidden_width", "layers_per_block", "subnet", "heads",
                            "scale_clamp"});
    {
        c.flow.num_blocks = get_int(fl, "flow", "num_blocks", 5, 1, 256);
        c.flow.hidden_width = get_int(fl, "flow", "hidden_width", 128, 1, 1 << 16);
        c.flow.layers_per_block = get_int(fl, "flow", "layers_per_block", 5, 1, 64);
        c.flow.subnet = get_enum(fl, "flow", "subnet", "mlp", {"mlp", "attention"}) == "mlp"
                            ? FlowSubnet::mlp
                            : FlowSubnet::attention;
        c.flow.heads = get_int(fl, "flow", "heads", 4, 1, 64);
        c.flow.scale_clamp = get_num(fl, "flow", "scale_clamp", 5.0, 0.0, 100.0, true);
        if (c.model.latent_dim < 2) fail("model.latent_dim", "coupling flow needs latent_dim >= 2");
    }

    const json sb = root.value("stage_b", json::object());
    check_keys(sb, "stage_b", {"epochs", "batch_size", "learning_rate", "weight_decay", "z_scale",
                               "temperature", "ema_decay"});
    {
        c.stage_b.epochs = get_int(sb, "stage_b", "epochs", 100, 0, 1 << 20);
        c.stage_b.batch_size = get_int(sb, "stage_b", "batch_size", 256, 1, 1 << 20);
        c.stage_b.learning_rate = get_num(sb, "stage_b", "learning_rate", 2e-4, 0.0, 10.0, true);
        c.stage_b.weight_decay = get_num(sb, "stage_b", "weight_decay", 1e-4, 0.0, 10.0);
        c.stage_b.z_scale = get_num(sb, "stage_b", "z_scale", 1.0, 0.0, 100.0, true);
        c.stage_b.temperature = get_num(sb, "stage_b", "temperature", 1.0, 0.0, 100.0);
        c.stage_b.ema_decay = get_num(sb, "stage_b", "ema_decay", 0.0, 0.0, 1.0);
        if (c.stage_b.ema_decay >= 1.0) fail("stage_b.ema_decay", "must be < 1");
    }

    const json md = root.value("mdm", json::object());
    check_keys(md, "mdm", {"schedule", "steps", "temperatures", "remask_strength", "t_min", "epochs",
                           "batch_size", "learning_rate", "weight_decay"});
    {
        c.mdm.schedule = get_enum(md, "mdm", "schedule", "linear", {"linear", "cosine"}) == "linear"
                             ? UnmaskSchedule::linear
                             : UnmaskSchedule::cosine;
        c.mdm.steps = get_int(md, "mdm", "steps", 8, 1, 1 << 16);
        if (md.contains("temperatures")) {
            if (md["temperatures"].is_number()) {
                c.mdm.temperatures = {md["temperatures"].get<double>()};
            } else if (md["temperatures"].is_array()) {
                for (const auto& t : md["temperatures"]) {
                    if (!t.is_number()) fail("mdm.temperatures", "expected numbers");
                    c.mdm.temperatures.push_back(t.get<double>());
                }
            } else {
                fail("mdm.temperatures", "expected a number or array");
            }
            for (double tv : c.mdm.temperatures)
                if (!(tv >= 0.0) || tv > 100.0) fail("mdm.temperatures", "entries must be in [0,100]");
        }
        c.mdm.remask_strength = get_num(md, "mdm", "remask_strength", 1.0, 0.0, 100.0, true);
        c.mdm.t_min = get_num(md, "mdm", "t_min", 1e-3, 0.0, 0.5, true);
        c.mdm.epochs = get_int(md, "mdm", "epochs", 100, 0, 1 << 20);
        c.mdm.batch_size = get_int(md, "mdm", "batch_size", 256, 1, 1 << 20);
        c.mdm.learning_rate = get_num(md, "mdm", "learning_rate", 2e-4, 0.0, 10.0, true);
        c.mdm.weight_decay = get_num(md, "mdm", "weight_decay", 1e-4, 0.0, 10.0);
    }

    const json gd = root.value("guidance", json::object());
    check_keys(gd, "guidance",
               {"cfg_scale", "guidance_steps", "step_size", "relaxation", "relaxation_temperature",
                "lambda_reward", "lambda_anchor", "anchor", "cond_dropout_rate"});
    {
        c.guidance.cfg_scale = get_num(gd, "guidance", "cfg_scale", 1.0, -100.0, 100.0);
        c.guidance.guidance_steps = get_int(gd, "guidance", "guidance_steps", 5, 0, 1 << 16);
        c.guidance.step_size = get_num(gd, "guidance", "step_size", 0.1, 0.0, 1e3);
        c.guidance.relaxation = get_enum(gd, "guidance", "relaxation", "soft",
                                         {"soft", "gumbel_st"}) == "soft"
                                    ? RelaxationKind::soft
                                    : RelaxationKind::gumbel_st;
        c.guidance.relaxation_temperature =
            get_num(gd, "guidance", "relaxation_temperature", 1.0, 0.0, 100.0, true);
        c.guidance.lambda_reward = get_num(gd, "guidance", "lambda_reward", 1.0, 0.0, 1e6);
        c.guidance.lambda_anchor = get_num(gd, "guidance", "lambda_anchor", 1.0, 0.0, 1e6);
        c.guidance.anchor = get_enum(gd, "guidance", "anchor", "logit_mse",
                                     {"logit_mse", "logit_kl"}) == "logit_mse"
                                ? AnchorKind::logit_mse
                                : AnchorKind::logit_kl;
        c.guidance.cond_dropout_rate = get_num(gd, "guidance", "cond_dropout_rate", 0.1, 0.0, 1.0);
    }

    return c;
}

std::string config_to_json(const ExperimentConfig& c) {
    json root;
    root["schema_version"] = c.schema_version;
    root["seed"] = c.seed;
    json& d = root["data"];
    d["task"] = c.data.task == TaskKind::toy_pair    ? "toy_pair"
                : c.data.task == TaskKind::toy_motif ? "toy_motif"
                                                     : "mnist_binary";
    d["vocab_size"] = c.data.vocab_size;
    d["seq_len"] = c.data.seq_len;
    d["num_train"] = c.data.num_train;
    d["motif_count"] = c.data.motif_count;
    if (!c.data.motif_weights.empty()) d["motif_weights"] = c.data.motif_weights;
    d["binarize_threshold"] = c.data.binarize_threshold;
    d["num_classes"] = c.data.num_classes;
    json& m = root["model"];
    m["latent_dim"] = c.model.latent_dim;
    m["embed_dim"] = c.model.embed_dim;
    m["encoder"] = c.model.encoder == EncoderArch::mlp ? "mlp" : "conv_grid";
    m["encoder_width"] = c.model.encoder_width;
    m["encoder_depth"] = c.model.encoder_depth;
    m["generator"] = c.model.generator == GeneratorArch::mlp             ? "mlp"
                     : c.model.generator == GeneratorArch::attention_seq ? "attention_seq"
                                                                         : "attention_grid";
    m["generator_width"] = c.model.generator_width;
    m["generator_depth"] = c.model.generator_depth;
    m["generator_heads"] = c.model.generator_heads;
    m["denoiser"] = c.model.denoiser == DenoiserArch::mlp ? "mlp" : "attention_seq";
    m["denoiser_width"] = c.model.denoiser_width;
    m["denoiser_depth"] = c.model.denoiser_depth;
    m["denoiser_heads"] = c.model.denoiser_heads;
    m["conditional"] = c.model.conditional;
    m["grid_h"] = c.model.grid_h;
    m["grid_w"] = c.model.grid_w;
    m["latent_grid_h"] = c.model.latent_grid_h;
    m["latent_grid_w"] = c.model.latent_grid_w;
    m["latent_channels"] = c.model.latent_channels;
    json& a = root["stage_a"];
    a["lambda_rec"] = c.stage_a.lambda_rec;
    a["lambda_kl"] = c.stage_a.lambda_kl;
    a["lambda_flow"] = c.stage_a.lambda_flow;
    a["latent_noise_std"] = c.stage_a.latent_noise_std;
    a["epochs"] = c.stage_a.epochs;
    a["batch_size"] = c.stage_a.batch_size;
    a["learning_rate"] = c.stage_a.learning_rate;
    a["weight_decay"] = c.stage_a.weight_decay;
    a["pair_mode"] = c.stage_a.pair_mode == PairMode::resampled ? "resampled" : "frozen";
    json& f = root["flow"];
    f["num_blocks"] = c.flow.num_blocks;
    f["hidden_width"] = c.flow.hidden_width;
    f["layers_per_block"] = c.flow.layers_per_block;
    f["subnet"] = c.flow.subnet == FlowSubnet::mlp ? "mlp" : "attention";
    f["heads"] = c.flow.heads;
    f["scale_clamp"] = c.flow.scale_clamp;
    json& b = root["stage_b"];
    b["epochs"] = c.stage_b.epochs;
    b["batch_size"] = c.stage_b.batch_size;
    b["learning_rate"] = c.stage_b.learning_rate;
    b["weight_decay"] = c.stage_b.weight_decay;
    b["z_scale"] = c.stage_b.z_scale;
    b["temperature"] = c.stage_b.temperature;
    b["ema_decay"] = c.stage_b.ema_decay;
    json& md = root["mdm"];
    md["schedule"] = c.mdm.schedule == UnmaskSchedule::linear ? "linear" : "cosine";
    md["steps"] = c.mdm.steps;
    if (!c.mdm.temperatures.empty()) md["temperatures"] = c.mdm.temperatures;
    md["remask_strength"] = c.mdm.remask_strength;
    md["t_min"] = c.mdm.t_min;
    md["epochs"] = c.mdm.epochs;
    md["batch_size"] = c.mdm.batch_size;
    md["learning_rate"] = c.mdm.learning_rate;
    md["weight_decay"] = c.mdm.weight_decay;
    json& g = root["guidance"];
    g["cfg_scale"] = c.guidance.cfg_scale;
    g["guidance_steps"] = c.guidance.guidance_steps;
    g["step_size"] = c.guidance.step_size;
    g["relaxation"] = c.guidance.relaxation == RelaxationKind::soft ? "soft" : "gumbel_st";
    g["relaxation_temperature"] = c.guidance.relaxation_temperature;
    g["lambda_reward"] = c.guidance.lambda_reward;
    g["lambda_anchor"] = c.guidance.lambda_anchor;
    g["anchor"] = c.guidance.anchor == AnchorKind::logit_mse ? "logit_mse" : "logit_kl";
    g["cond_dropout_rate"] = c.guidance.cond_dropout_rate;
    return root.dump(2);
}

std::vector<std::string> profile_names() {
    return {"toy-pair", "toy-motif", "mnist-binary", "mnist-binary-mini"};
}

std::string profile_json(const std::string& name) {
    if (name == "toy-pair") {
        return R"({
  "schema_version": 1,
  "seed": 0,
  "data": {"task": "toy_pair", "vocab_size": 2, "seq_len": 2, "num_train": 2048},
  "model": {"latent_dim": 2, "embed_dim": 8,
            "encoder": "mlp", "encoder_width": 64, "encoder_depth": 2,
            "generator": "mlp", "generator_width": 64, "generator_depth": 2,
            "denoiser": "mlp", "denoiser_width": 64, "denoiser_depth": 2},
  "stage_a": {"lambda_rec": 1.0, "lambda_kl": 0.1, "lambda_flow": 1.0,
              "latent_noise_std": 0.3, "epochs": 200, "batch_size": 128,
              "learning_rate": 3e-3, "weight_decay": 1e-5, "pair_mode": "resampled"},
  "flow": {"num_blocks": 6, "hidden_width": 48, "layers_per_block": 2, "subnet": "mlp"},
  "stage_b": {"epochs": 200, "batch_size": 128, "learning_rate": 3e-3, "weight_decay": 1e-5,
              "z_scale": 1.0, "temperature": 1.0},
  "mdm": {"schedule": "linear", "steps": 2, "temperatures": 1.0, "remask_strength": 1.0,
          "epochs": 200, "batch_size": 128, "learning_rate": 3e-3, "weight_decay": 1e-5},
  "guidance": {"cfg_scale": 1.0, "guidance_steps": 5, "step_size": 0.1,
               "relaxation": "soft", "relaxation_temperature": 1.0,
               "lambda_reward": 1.0, "lambda_anchor": 1.0, "cond_dropout_rate": 0.1}
})";
    }
    if (name == "toy-motif") {
        return R"({
  "schema_version": 1,
  "seed": 0,
  "data": {"task": "toy_motif", "vocab_size": 4, "seq_len": 4, "num_train": 4096, "motif_count": 4},
  "model": {"latent_dim": 2, "embed_dim": 8,
            "encoder": "mlp", "encoder_width": 96, "encoder_depth": 2,
            "generator": "mlp", "generator_width": 96, "generator_depth": 2,
            "denoiser": "mlp", "denoiser_width": 96, "denoiser_depth": 2},
  "stage_a": {"lambda_rec": 1.0, "lambda_kl": 0.1, "lambda_flow": 1.0,
              "latent_noise_std": 0.3, "epochs": 200, "batch_size": 128,
              "learning_rate": 3e-3, "weight_decay": 1e-5, "pair_mode": "resampled"},
  "flow": {"num_blocks": 6, "hidden_width": 48, "layers_per_block": 2, "subnet": "mlp"},
  "stage_b": {"epochs": 200, "batch_size": 128, "learning_rate": 3e-3, "weight_decay": 1e-5,
              "z_scale": 1.0, "temperature": 1.0},
  "mdm": {"schedule": "linear", "steps": 4, "temperatures": 1.0, "remask_strength": 1.0,
          "epochs": 200, "batch_size": 128, "learning_rate": 3e-3, "weight_decay": 1e-5},
  "guidance": {"cfg_scale": 1.0, "guidance_steps": 5, "step_size": 0.1,
               "relaxation": "soft", "relaxation_temperature": 1.0,
               "lambda_reward": 1.0, "lambda_anchor": 1.0, "cond_dropout_rate": 0.1}
})";
    }
    if (name == "mnist-binary") {
        return R"({
  "schema_version": 1,
  "seed": 0,
  "data": {"task": "mnist_binary", "vocab_size": 2, "seq_len": 784, "num_train": 0,
           "binarize_threshold": 0.5, "num_classes": 10},
  "model": {"latent_dim": 784, "embed_dim": 16,
            "encoder": "conv_grid", "encoder_width": 64, "encoder_depth": 2,
            "generator": "attention_grid", "generator_width": 512, "generator_depth": 8,
            "generator_heads": 8,
            "denoiser": "attention_seq", "denoiser_width": 512, "denoiser_depth": 8,
            "denoiser_heads": 8, "conditional": true,
            "grid_h": 28, "grid_w": 28,
            "latent_grid_h": 7, "latent_grid_w": 7, "latent_channels": 16},
  "stage_a": {"lambda_rec": 1.0, "lambda_kl": 1.0, "lambda_flow": 1.0,
              "latent_noise_std": 0.5, "epochs": 100, "batch_size": 256,
              "learning_rate": 2e-4, "weight_decay": 1e-4, "pair_mode": "resampled"},
  "flow": {"num_blocks": 5, "hidden_width": 128, "layers_per_block": 5,
           "subnet": "attention", "heads": 4},
  "stage_b": {"epochs": 100, "batch_size": 256, "learning_rate": 2e-4, "weight_decay": 1e-4,
              "z_scale": 0.9, "temperature": 1.0, "ema_decay": 0.999},
  "mdm": {"schedule": "linear", "steps": 4, "temperatures": 1.0, "remask_strength": 1.0,
          "epochs": 100, "batch_size": 256, "learning_rate": 2e-4, "weight_decay": 1e-4},
  "guidance": {"cfg_scale": 2.0, "guidance_steps": 5, "step_size": 0.1,
               "relaxation": "soft", "relaxation_temperature": 1.0,
               "lambda_reward": 1.0, "lambda_anchor": 1.0, "cond_dropout_rate": 0.1}
})";
    }
    if (name == "mnist-binary-mini") {
        return R"({
  "schema_version": 1,
  "seed": 0,
  "data": {"task": "mnist_binary", "vocab_size": 2, "seq_len": 784, "num_train": 8192,
           "binarize_threshold": 0.5, "num_classes": 10},
  "model": {"latent_dim": 196, "embed_dim": 8,
            "encoder": "conv_grid", "encoder_width": 32, "encoder_depth": 2,
            "generator": "mlp", "generator_width": 256, "generator_depth": 3,
            "denoiser": "mlp", "denoiser_width": 256, "denoiser_depth": 3,
            "conditional": true,
            "grid_h": 28, "grid_w": 28,
            "latent_grid_h": 7, "latent_grid_w": 7, "latent_channels": 4},
  "stage_a": {"lambda_rec": 1.0, "lambda_kl": 1.0, "lambda_flow": 1.0,
              "latent_noise_std": 0.5, "epochs": 4, "batch_size": 64,
              "learning_rate": 1e-3, "weight_decay": 1e-4, "pair_mode": "resampled"},
  "flow": {"num_blocks": 4, "hidden_width": 96, "layers_per_block": 2, "subnet": "mlp"},
  "stage_b": {"epochs": 4, "batch_size": 64, "learning_rate": 1e-3, "weight_decay": 1e-4,
              "z_scale": 1.0, "temperature": 1.0},
  "mdm": {"schedule": "linear", "steps": 4, "temperatures": 1.0, "remask_strength": 1.0,
          "epochs": 2, "batch_size": 64, "learning_rate": 1e-3, "weight_decay": 1e-4},
  "guidance": {"cfg_scale": 2.0, "guidance_steps": 5, "step_size": 0.1,
               "relaxation": "soft", "relaxation_temperature": 1.0,
               "lambda_reward": 1.0, "lambda_anchor": 1.0, "cond_dropout_rate": 0.1}
})";
    }
    throw ConfigError("config: unknown profile '" + name + "'");
}

}  // namespace couplegen
