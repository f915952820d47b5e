#pragma once

#include <node/common.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <string>

namespace node::arch {

// Encoder/decoder layout shared by the noise-estimation sub-networks and the
// denoiser. Channel width at depth k (k >= 1) is base_channels * 2^k; the
// full-resolution decoder width is base_channels.
struct NetworkConfig {
    int in_channels = 4;
    int out_channels = 4;
    int base_channels = 8;
    int head_conv_count = 2;
    bool bottleneck = true;
    int shuffle_stages = 1;
    int pool_stages = 1;
    int kernel_size = 3;
    int convs_per_stage = 2;
    double leaky_slope = 0.2;
    bool identity_init = true;
    double init_noise_scale = 0.05;

    int downsampling_factor() const { return 1 << (shuffle_stages + pool_stages); }

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline NetworkConfig toy_subnet_config() { return {}; }

inline NetworkConfig toy_denoiser_config() {
    NetworkConfig c;
    c.in_channels = 12;
    c.head_conv_count = 0;
    return c;
}

// Reconstruction of a full-size layout (wider, three pooling stages). The
// exact published widths are not known.
inline NetworkConfig full_scale_subnet_config() {
    NetworkConfig c;
    c.base_channels = 32;
    c.pool_stages = 3;
    return c;
}

inline NetworkConfig full_scale_denoiser_config() {
    NetworkConfig c = full_scale_subnet_config();
    c.in_channels = 12;
    c.head_conv_count = 0;
    return c;
}

inline void validate_common(const NetworkConfig& c) {
    if (c.in_channels < 1 || c.out_channels < 1 || c.base_channels < 2) throw ConfigError("network channel counts must be positive");
    if (c.head_conv_count < 0 || c.pool_stages < 0 || c.convs_per_stage < 1) throw ConfigError("network stage counts must be non-negative");
    if (c.kernel_size < 1 || c.kernel_size % 2 == 0) throw ConfigError("kernel size must be odd and positive");
    if (!(c.leaky_slope >= 0.0 && c.leaky_slope < 1.0)) throw ConfigError("leaky slope must lie in [0, 1)");
    if (!(c.init_noise_scale >= 0.0)) throw ConfigError("init noise scale must be non-negative");
}

inline void validate_subnet(const NetworkConfig& c) {
    validate_common(c);
    if (c.shuffle_stages < 1) throw ConfigError("sub-network needs at least one shuffle stage");
    if (c.in_channels != 4 || c.out_channels != 4) throw ConfigError("sub-network maps 4 packed channels to 4");
}

inline void validate_denoiser(const NetworkConfig& c) {
    validate_common(c);
    if (c.in_channels != 12) throw ConfigError("denoiser input must have 12 channels (noisy + two noise estimates), got " + std::to_string(c.in_channels));
    if (c.out_channels != 4) throw ConfigError("denoiser must output 4 channels");
    if (c.head_conv_count != 0) throw ConfigError("denoiser has no full-resolution head convolutions");
    if (c.shuffle_stages != 1) throw ConfigError("denoiser has exactly one shuffle/deshuffle pair");
}

inline nlohmann::json to_json(const NetworkConfig& c) {
    return {{"in_channels", c.in_channels},       {"out_channels", c.out_channels},   {"base_channels", c.base_channels},
            {"head_conv_count", c.head_conv_count}, {"bottleneck", c.bottleneck},   {"shuffle_stages", c.shuffle_stages},
            {"pool_stages", c.pool_stages},       {"kernel_size", c.kernel_size},     {"convs_per_stage", c.convs_per_stage},
            {"leaky_slope", c.leaky_slope},
            {"identity_init", c.identity_init},
            {"init_noise_scale", c.init_noise_scale}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j, NetworkConfig c = {}) {
    static const char* keys[] = {"in_channels", "out_channels", "base_channels", "head_conv_count", "bottleneck",
                                 "shuffle_stages", "pool_stages", "kernel_size", "convs_per_stage", "leaky_slope",
                                 "identity_init", "init_noise_scale"};
    if (!j.is_object()) throw ConfigError("network config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(std::begin(keys), std::end(keys), it.key()) == std::end(keys)) {
            throw ConfigError("unknown network config key '" + it.key() + "'");
        }
    }
    try {
        c.in_channels = j.value("in_channels", c.in_channels);
        c.out_channels = j.value("out_channels", c.out_channels);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.head_conv_count = j.value("head_conv_count", c.head_conv_count);
        c.bottleneck = j.value("bottleneck", c.bottleneck);
        c.shuffle_stages = j.value("shuffle_stages", c.shuffle_stages);
        c.pool_stages = j.value("pool_stages", c.pool_stages);
        c.kernel_size = j.value("kernel_size", c.kernel_size);
        c.convs_per_stage = j.value("convs_per_stage", c.convs_per_stage);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
        c.identity_init = j.value("identity_init", c.identity_init);
        c.init_noise_scale = j.value("init_noise_scale", c.init_noise_scale);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad network config: ") + e.what());
    }
    return c;
}

struct TrainConfig {
    int patch_size = 64; // packed-domain pixels
    int batch_size = 4;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t max_steps = 2000;
    std::uint64_t seed = 0;
    bool augment = true;
    // Ablation: keep both sub-networks fixed during fine-tuning.
    bool freeze_subnets = false;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"patch_size", c.patch_size}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},           {"beta2", c.beta2},           {"epsilon", c.epsilon},
            {"max_steps", c.max_steps},   {"seed", c.seed},             {"augment", c.augment},
            {"freeze_subnets", c.freeze_subnets}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    static const char* keys[] = {"patch_size", "batch_size", "learning_rate", "beta1", "beta2",
                                 "epsilon", "max_steps", "seed", "augment", "freeze_subnets"};
    if (!j.is_object()) throw ConfigError("train config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(std::begin(keys), std::end(keys), it.key()) == std::end(keys)) {
            throw ConfigError("unknown train config key '" + it.key() + "'");
        }
    }
    try {
        c.patch_size = j.value("patch_size", c.patch_size);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.epsilon = j.value("epsilon", c.epsilon);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.seed = j.value("seed", c.seed);
        c.augment = j.value("augment", c.augment);
        c.freeze_subnets = j.value("freeze_subnets", c.freeze_subnets);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad train config: ") + e.what());
    }
    if (c.patch_size < 2 || c.batch_size < 1 || c.max_steps < 0 || !(c.learning_rate > 0.0)) {
        throw ConfigError("train config values out of range");
    }
    return c;
}

} // namespace node::arch
