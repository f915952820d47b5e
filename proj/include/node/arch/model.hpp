#pragma once

#include <node/arch/network.hpp>
#include <node/raw_core.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace node::arch {

inline constexpr const char* kModelFormat = "node/v1";

// Working grid of the noise wiring. Inputs and sub-network outputs are kept on
// multiples of this quantum, so y - s and y - (y - s) are exact as long as the
// magnitudes stay below 2^(mantissa bits) * quantum (64 for float, 8192 for
// double). The quantum is far below one DN after normalisation.
template <class T>
constexpr T wiring_quantum() {
    if constexpr (sizeof(T) == 4) {
        return T(1) / T(1 << 18);
    } else {
        return T(1) / T(1ULL << 40);
    }
}

template <class T>
T snap_value(T v) {
    const T q = wiring_quantum<T>();
    // + 0 folds -0 into +0 so the wiring identity also holds bit-wise at zero.
    return std::nearbyint(v / q) * q + T(0);
}

// Rounds onto the wiring grid; gradient passes straight through.
template <class T>
ag::Tensor<T> snap_to_grid(const ag::Tensor<T>& x) {
    return ag::make_op<T>(
        "snap", x.shape(), {x},
        [](ag::Node<T>& out) {
            const auto& in = out.inputs[0]->data;
            for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = snap_value(in[i]);
        },
        [](ag::Node<T>& out) {
            auto& g = out.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        });
}

// Maps DN to (v - black) / (white - black), snapped to the wiring grid.
struct Normalizer {
    double black = 0.0;
    double white = 1023.0;

    static Normalizer of(const raw::RawMeta& m) { return {m.black_level, m.white_level()}; }
    double range() const { return white - black; }

    template <class T>
    T forward(double dn) const {
        return snap_value(static_cast<T>((dn - black) / range()));
    }
    double inverse(double y) const { return y * range() + black; }
};

// Copies packed planes into batch slot `n` of a (N, 4, h, w) buffer.
template <class T>
void write_packed(const raw::PackedImage& img, std::span<T> dst, int n = 0) {
    const auto norm = Normalizer::of(img.meta);
    const std::size_t plane = static_cast<std::size_t>(img.width_half) * img.height_half;
    for (int c = 0; c < raw::kPackedChannels; ++c) {
        const auto& src = img.planes[static_cast<std::size_t>(c)];
        T* out = dst.data() + (static_cast<std::size_t>(n) * raw::kPackedChannels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) out[i] = norm.forward<T>(src[i]);
    }
}

template <class T>
ag::Tensor<T> packed_to_tensor(const raw::PackedImage& img) {
    raw::validate(img);
    auto t = ag::Tensor<T>::zeros({1, raw::kPackedChannels, img.height_half, img.width_half});
    write_packed<T>(img, t.data());
    return t;
}

// Inverse normalisation, clamped to [0, white] and rounded to DN.
template <class T>
raw::PackedImage tensor_to_packed(const ag::Tensor<T>& t, const raw::RawMeta& meta, int n = 0) {
    const auto& s = t.shape();
    if (s.c != raw::kPackedChannels) throw ShapeError("packed output needs 4 channels, got " + s.str());
    const auto norm = Normalizer::of(meta);
    raw::PackedImage out(s.w, s.h, meta);
    const std::size_t plane = s.plane();
    const auto data = t.data();
    for (int c = 0; c < raw::kPackedChannels; ++c) {
        auto& dst = out.planes[static_cast<std::size_t>(c)];
        const T* src = data.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = std::clamp(norm.inverse(static_cast<double>(src[i])), 0.0, norm.white);
            dst[i] = static_cast<std::uint16_t>(std::lround(v));
        }
    }
    return out;
}

struct ModelConfig {
    NetworkConfig subnet = toy_subnet_config();
    NetworkConfig denoiser = toy_denoiser_config();
    // Ablation: sub-networks regress the noise directly instead of the
    // complementary image.
    bool noise_regression = false;
    // Ablation: the denoiser predicts a correction added to the noisy input.
    bool residual_denoiser = false;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
    validate_subnet(c.subnet);
    validate_denoiser(c.denoiser);
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"subnet", to_json(c.subnet)},
            {"denoiser", to_json(c.denoiser)},
            {"noise_regression", c.noise_regression},
            {"residual_denoiser", c.residual_denoiser}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k != "subnet" && k != "denoiser" && k != "noise_regression" && k != "residual_denoiser") {
            throw ConfigError("unknown model config key '" + k + "'");
        }
    }
    ModelConfig c;
    if (j.contains("subnet")) c.subnet = network_config_from_json(j["subnet"], c.subnet);
    if (j.contains("denoiser")) c.denoiser = network_config_from_json(j["denoiser"], c.denoiser);
    try {
        c.noise_regression = j.value("noise_regression", false);
        c.residual_denoiser = j.value("residual_denoiser", false);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    validate(c);
    return c;
}

enum class Branch { gp, dp };

inline const char* to_string(Branch b) { return b == Branch::gp ? "gp" : "dp"; }

inline Branch branch_from_string(const std::string& s) {
    if (s == "gp") return Branch::gp;
    if (s == "dp") return Branch::dp;
    throw ConfigError("unknown branch '" + s + "' (expected gp or dp)");
}

template <class T>
struct NodeModel {
    ModelConfig config;
    Network<T> subnet_gp;
    Network<T> subnet_dp;
    Network<T> denoiser;
    // Seeds, dataset hashes and step counts of every stage that touched the weights.
    nlohmann::json provenance = nlohmann::json::object();

    const Network<T>& subnet(Branch b) const { return b == Branch::gp ? subnet_gp : subnet_dp; }

    int downsampling_factor() const {
        return std::max({subnet_gp.config().downsampling_factor(), subnet_dp.config().downsampling_factor(),
                         denoiser.config().downsampling_factor()});
    }

    // Parameters under "gp/", "dp/" and "den/" prefixes, sharing storage with the networks.
    ag::ParameterList<T> parameters(bool subnets = true, bool den = true) const {
        ag::ParameterList<T> out;
        auto append = [&](const Network<T>& net, const std::string& prefix) {
            for (const auto& p : net.parameters()) out.push_back({prefix + p.name, p.tensor});
        };
        if (subnets) {
            append(subnet_gp, "gp/");
            append(subnet_dp, "dp/");
        }
        if (den) append(denoiser, "den/");
        return out;
    }

    ag::ParameterList<T> branch_parameters(Branch b) const {
        ag::ParameterList<T> out;
        const std::string prefix = std::string(to_string(b)) + "/";
        for (const auto& p : subnet(b).parameters()) out.push_back({prefix + p.name, p.tensor});
        return out;
    }
};

template <class T>
NodeModel<T> make_node_model(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    NodeModel<T> m;
    m.config = cfg;
    m.subnet_gp = build_subnetwork<T>(cfg.subnet, rng::derive_seed(seed, "init/gp"));
    m.subnet_dp = build_subnetwork<T>(cfg.subnet, rng::derive_seed(seed, "init/dp"));
    m.denoiser = build_denoiser<T>(cfg.denoiser, rng::derive_seed(seed, "init/den"));
    m.provenance["init_seed"] = seed;
    return m;
}

// Sub-network output on the wiring grid: the complementary image R(y) by
// default, or the noise itself under the noise-regression ablation.
template <class T>
ag::Tensor<T> subnet_output(const NodeModel<T>& m, Branch b, const ag::Tensor<T>& y) {
    if (y.shape().c != 4) throw ShapeError("noise estimation expects 4 packed channels, got " + y.shape().str());
    return snap_to_grid(m.subnet(b)(y));
}

template <class T>
ag::Tensor<T> estimate_noise(const NodeModel<T>& m, Branch b, const ag::Tensor<T>& y) {
    auto s = subnet_output(m, b, y);
    return m.config.noise_regression ? s : ag::sub(y, s);
}

// Complementary image R(y) = y - noise estimate; what pre-training fits.
template <class T>
ag::Tensor<T> complementary_image(const NodeModel<T>& m, Branch b, const ag::Tensor<T>& y) {
    auto s = subnet_output(m, b, y);
    return m.config.noise_regression ? ag::sub(y, s) : s;
}

template <class T>
ag::Tensor<T> estimate_gp_noise(const NodeModel<T>& m, const ag::Tensor<T>& y) {
    return estimate_noise(m, Branch::gp, y);
}

template <class T>
ag::Tensor<T> estimate_dp_noise(const NodeModel<T>& m, const ag::Tensor<T>& y) {
    return estimate_noise(m, Branch::dp, y);
}

template <class T>
struct NodeOutput {
    ag::Tensor<T> v_gp;
    ag::Tensor<T> v_dp;
    ag::Tensor<T> denoised;
};

template <class T>
NodeOutput<T> node_forward(const NodeModel<T>& m, const ag::Tensor<T>& y) {
    NodeOutput<T> out;
    out.v_gp = estimate_gp_noise(m, y);
    out.v_dp = estimate_dp_noise(m, y);
    auto d = m.denoiser(ag::concat_channels<T>({y, out.v_gp, out.v_dp}));
    out.denoised = m.config.residual_denoiser ? ag::add(y, d) : d;
    return out;
}

// ---- persistence ---------------------------------------------------------

template <class T>
ag::Checkpoint model_checkpoint(const NodeModel<T>& m) {
    ag::Checkpoint ck;
    ck.header["format"] = kModelFormat;
    ck.header["architecture"] = to_json(m.config);
    ck.header["provenance"] = m.provenance;
    ag::store_parameters(ck, m.parameters());
    return ck;
}

inline ModelConfig checkpoint_architecture(const ag::Checkpoint& ck) {
    if (ck.header.value("format", std::string{}) != kModelFormat) {
        throw CompatibilityError("checkpoint format is not " + std::string(kModelFormat));
    }
    try {
        return model_config_from_json(ck.header.at("architecture"));
    } catch (const ConfigError& e) {
        throw CompatibilityError(std::string("checkpoint architecture invalid: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw CompatibilityError(std::string("checkpoint architecture missing: ") + e.what());
    }
}

template <class T>
NodeModel<T> model_from_checkpoint(const ag::Checkpoint& ck) {
    auto m = make_node_model<T>(checkpoint_architecture(ck), 0);
    ag::restore_parameters(ck, m.parameters());
    m.provenance = ck.header.value("provenance", nlohmann::json::object());
    return m;
}

template <class T>
void save_model(const NodeModel<T>& m, const std::filesystem::path& path) {
    ag::save_checkpoint(model_checkpoint(m), path);
}

template <class T>
NodeModel<T> load_model(const std::filesystem::path& path) {
    return model_from_checkpoint<T>(ag::load_checkpoint(path));
}

} // namespace node::arch
