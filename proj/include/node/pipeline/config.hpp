#pragma once

#include <node/arch/config.hpp>
#include <node/arch/inference.hpp>
#include <node/arch/model.hpp>
#include <node/common.hpp>
#include <node/noise_lab.hpp>
#include <node/random.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

namespace node::pipeline {

struct CalibrationConfig {
    noise::RansacParams ransac;
    double confidence = 0.99;
};

struct SynthesisConfig {
    noise::DefectSynthesisParams defects;
    std::vector<std::string> variants{"gp", "dp", "mixed"};
    double test_fraction = 0.25;
};

// CPU-sized default: 32-pixel packed patches, batch 4, 2000 steps per stage.
inline arch::TrainConfig toy_budget() {
    arch::TrainConfig c;
    c.patch_size = 32;
    c.batch_size = 4;
    c.learning_rate = 5e-4;
    c.max_steps = 2000;
    return c;
}

struct PipelineConfig {
    std::uint64_t seed = 0;
    CalibrationConfig calibration;
    SynthesisConfig synthesis;
    arch::ModelConfig model;
    arch::TrainConfig pretrain = toy_budget();
    arch::TrainConfig finetune = toy_budget();
    arch::InferenceOptions inference;
};

// Per-stage seed fanned out from the global one.
inline std::uint64_t stage_seed(const PipelineConfig& c, std::string_view stage) { return rng::derive_seed(c.seed, stage); }

namespace detail {

inline void only_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : keys) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

} // namespace detail

inline const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> v{"gp", "dp", "mixed"};
    return v;
}

inline void validate(const PipelineConfig& c) {
    if (c.synthesis.variants.empty()) throw ConfigError("synthesis.variants must not be empty");
    for (const auto& v : c.synthesis.variants) {
        if (std::find(known_variants().begin(), known_variants().end(), v) == known_variants().end()) {
            throw ConfigError("unknown synthesis variant '" + v + "'");
        }
    }
    if (!(c.synthesis.test_fraction >= 0.0 && c.synthesis.test_fraction < 1.0)) {
        throw ConfigError("synthesis.test_fraction must lie in [0, 1)");
    }
    if (!(c.calibration.confidence > 0.0 && c.calibration.confidence < 1.0)) {
        throw ConfigError("calibration.confidence must lie in (0, 1)");
    }
    if (c.calibration.ransac.iterations < 1 || c.calibration.ransac.bins < 2) throw ConfigError("calibration RANSAC settings out of range");
    try {
        noise::validate(c.synthesis.defects);
    } catch (const RangeError& e) {
        throw ConfigError(std::string("synthesis: ") + e.what());
    }
    arch::validate(c.model);
    if (c.inference.tile_size < 1 || c.inference.overlap < 1 || c.inference.overlap >= c.inference.tile_size) {
        throw ConfigError("inference tile settings out of range");
    }
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
    using detail::only_keys;
    using detail::read;
    only_keys(j, "config", {"seed", "calibration", "synthesis", "model", "pretrain", "finetune", "inference"});
    PipelineConfig c;
    read(j, "seed", c.seed, "config");
    if (j.contains("calibration")) {
        const auto& s = j["calibration"];
        only_keys(s, "calibration", {"ransac_iterations", "threshold_scale", "min_inlier_fraction", "bins", "confidence"});
        read(s, "ransac_iterations", c.calibration.ransac.iterations, "calibration");
        read(s, "threshold_scale", c.calibration.ransac.threshold_scale, "calibration");
        read(s, "min_inlier_fraction", c.calibration.ransac.min_inlier_fraction, "calibration");
        read(s, "bins", c.calibration.ransac.bins, "calibration");
        read(s, "confidence", c.calibration.confidence, "calibration");
    }
    if (j.contains("synthesis")) {
        const auto& s = j["synthesis"];
        only_keys(s, "synthesis", {"density", "hot_fraction", "dead_fraction", "variants", "test_fraction"});
        read(s, "density", c.synthesis.defects.density, "synthesis");
        read(s, "hot_fraction", c.synthesis.defects.hot_fraction, "synthesis");
        read(s, "dead_fraction", c.synthesis.defects.dead_fraction, "synthesis");
        read(s, "variants", c.synthesis.variants, "synthesis");
        read(s, "test_fraction", c.synthesis.test_fraction, "synthesis");
    }
    if (j.contains("model")) c.model = arch::model_config_from_json(j["model"]);
    if (j.contains("pretrain")) c.pretrain = arch::train_config_from_json(j["pretrain"], c.pretrain);
    if (j.contains("finetune")) c.finetune = arch::train_config_from_json(j["finetune"], c.finetune);
    if (j.contains("inference")) {
        const auto& s = j["inference"];
        only_keys(s, "inference", {"tile_size", "overlap"});
        read(s, "tile_size", c.inference.tile_size, "inference");
        read(s, "overlap", c.inference.overlap, "inference");
    }
    validate(c);
    return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
    return {{"seed", c.seed},
            {"calibration",
             {{"ransac_iterations", c.calibration.ransac.iterations},
              {"threshold_scale", c.calibration.ransac.threshold_scale},
              {"min_inlier_fraction", c.calibration.ransac.min_inlier_fraction},
              {"bins", c.calibration.ransac.bins},
              {"confidence", c.calibration.confidence}}},
            {"synthesis",
             {{"density", c.synthesis.defects.density},
              {"hot_fraction", c.synthesis.defects.hot_fraction},
              {"dead_fraction", c.synthesis.defects.dead_fraction},
              {"variants", c.synthesis.variants},
              {"test_fraction", c.synthesis.test_fraction}}},
            {"model", arch::to_json(c.model)},
            {"pretrain", arch::to_json(c.pretrain)},
            {"finetune", arch::to_json(c.finetune)},
            {"inference", {{"tile_size", c.inference.tile_size}, {"overlap", c.inference.overlap}}}};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline PipelineConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

} // namespace node::pipeline
