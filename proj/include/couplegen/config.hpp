#pragma once

#include <string>
#include <vector>

#include "couplegen/core_types.hpp"

namespace couplegen {

// Validated experiment configuration. JSON in, defaults applied, every field
// range-checked; validation throws ConfigError naming the offending path and
// is idempotent (validating a validated config changes nothing).

enum class TaskKind { toy_pair, toy_motif, mnist_binary };
enum class EncoderArch { mlp, conv_grid };
enum class GeneratorArch { mlp, attention_seq, attention_grid };
enum class DenoiserArch { mlp, attention_seq };
enum class PairMode { resampled, frozen };
enum class FlowSubnet { mlp, attention };
enum class UnmaskSchedule { linear, cosine };
enum class RelaxationKind { soft, gumbel_st };
enum class AnchorKind { logit_mse, logit_kl };

struct DataConfig {
    TaskKind task = TaskKind::toy_pair;
    int vocab_size = 2;
    int seq_len = 2;
    int num_train = 2048;
    int motif_count = 4;                  // toy_motif only
    std::vector<double> motif_weights;    // optional; uniform when empty
    double binarize_threshold = 0.5;      // mnist only
    int num_classes = 0;                  // 0 = unconditional
};

struct ModelConfig {
    int latent_dim = 2;
    int embed_dim = 8;
    EncoderArch encoder = EncoderArch::mlp;
    int encoder_width = 64;
    int encoder_depth = 2;
    GeneratorArch generator = GeneratorArch::mlp;
    int generator_width = 64;
    int generator_depth = 2;
    int generator_heads = 4;
    DenoiserArch denoiser = DenoiserArch::mlp;
    int denoiser_width = 64;
    int denoiser_depth = 2;
    int denoiser_heads = 4;
    bool conditional = false;
    // conv_grid / attention_grid geometry (image tasks)
    int grid_h = 28, grid_w = 28;
    int latent_grid_h = 7, latent_grid_w = 7, latent_channels = 16;
};

struct StageAConfig {
    double lambda_rec = 1.0;
    double lambda_kl = 1.0;
    double lambda_flow = 1.0;
    double latent_noise_std = 0.5;
    int epochs = 100;
    int batch_size = 256;
    double learning_rate = 2e-4;
    double weight_decay = 1e-4;
    PairMode pair_mode = PairMode::resampled;
};

struct FlowConfig {
    int num_blocks = 5;
    int hidden_width = 128;
    int layers_per_block = 5;
    FlowSubnet subnet = FlowSubnet::mlp;
    int heads = 4;
    double scale_clamp = 5.0;
};

struct StageBConfig {
    int epochs = 100;
    int batch_size = 256;
    double learning_rate = 2e-4;
    double weight_decay = 1e-4;
    double z_scale = 1.0;
    double temperature = 1.0;
    double ema_decay = 0.0;
};

struct MdmConfig {
    UnmaskSchedule schedule = UnmaskSchedule::linear;
    int steps = 8;
    std::vector<double> temperatures;  // broadcast from scalar when size 1
    double remask_strength = 1.0;
    double t_min = 1e-3;
    int epochs = 100;
    int batch_size = 256;
    double learning_rate = 2e-4;
    double weight_decay = 1e-4;
};

struct GuidanceConfig {
    double cfg_scale = 1.0;
    int guidance_steps = 5;
    double step_size = 0.1;
    RelaxationKind relaxation = RelaxationKind::soft;
    double relaxation_temperature = 1.0;
    double lambda_reward = 1.0;
    double lambda_anchor = 1.0;
    AnchorKind anchor = AnchorKind::logit_mse;
    double cond_dropout_rate = 0.1;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::uint64_t seed = 0;
    DataConfig data;
    ModelConfig model;
    StageAConfig stage_a;
    FlowConfig flow;
    StageBConfig stage_b;
    MdmConfig mdm;
    GuidanceConfig guidance;

    // Effective per-step temperature for refinement step i (1-based) of K.
    double mdm_temperature(int i, int k) const;
};

// Parse + validate a JSON document (text). Unknown keys are errors; all
// violations report the dotted field path of the first offender.
ExperimentConfig validate_config(const std::string& json_text);

// Render back to canonical JSON (round-trips through validate_config).
std::string config_to_json(const ExperimentConfig& c);

// Built-in profiles: toy-pair, toy-motif, mnist-binary, mnist-binary-mini.
std::vector<std::string> profile_names();
std::string profile_json(const std::string& name);  // throws ConfigError if unknown

}  // namespace couplegen
