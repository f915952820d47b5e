#pragma once

#include <node/arch/model.hpp>
#include <node/autograd.hpp>
#include <node/random.hpp>
#include <node/raw_core.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace node::arch {

struct TrainPair {
    raw::PackedImage noisy;
    raw::PackedImage target;
};

using PairDataset = std::vector<TrainPair>;

// Order-sensitive FNV hash over every sample and the metadata levels.
inline std::string dataset_hash(const PairDataset& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            h ^= (v >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : data) {
        for (const auto* img : {&p.noisy, &p.target}) {
            mix(static_cast<std::uint64_t>(img->width_half));
            mix(static_cast<std::uint64_t>(img->height_half));
            mix(std::bit_cast<std::uint64_t>(img->meta.black_level));
            mix(static_cast<std::uint64_t>(img->meta.bit_depth));
            for (const auto& plane : img->planes)
                for (auto v : plane) mix(v);
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void validate_dataset(const PairDataset& data, const TrainConfig& cfg, int factor) {
    if (data.empty()) throw ConfigError("training dataset is empty");
    if (cfg.patch_size % factor != 0) {
        throw ConfigError("patch size " + std::to_string(cfg.patch_size) + " is not divisible by the downsampling factor " +
                          std::to_string(factor));
    }
    if (cfg.batch_size < 1) throw ConfigError("batch size must be positive");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& p = data[i];
        if (p.noisy.width_half != p.target.width_half || p.noisy.height_half != p.target.height_half) {
            throw DimensionError("dataset pair " + std::to_string(i) + ": noisy and target sizes differ");
        }
        if (p.noisy.width_half < cfg.patch_size || p.noisy.height_half < cfg.patch_size) {
            throw DimensionError("dataset pair " + std::to_string(i) + " is smaller than the patch size");
        }
    }
}

struct PatchDraw {
    std::size_t image = 0;
    int row = 0;
    int col = 0;
    raw::FlipMode flip = raw::FlipMode::none;
};

template <class T>
struct Batch {
    ag::Tensor<T> noisy;
    ag::Tensor<T> target;
    std::vector<PatchDraw> draws;
};

// Draw `slot` of step `step` depends only on (seed, step, slot), so a resumed
// run sees exactly the batches an uninterrupted one would.
inline PatchDraw draw_patch(const PairDataset& data, const TrainConfig& cfg, std::int64_t step, int slot) {
    rng::Stream s(rng::derive_seed(cfg.seed, "batch"),
                  static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch_size) + static_cast<std::uint64_t>(slot));
    PatchDraw d;
    d.image = static_cast<std::size_t>(s.below(data.size()));
    const auto& img = data[d.image].noisy;
    d.row = static_cast<int>(s.below(static_cast<std::uint64_t>(img.height_half - cfg.patch_size + 1)));
    d.col = static_cast<int>(s.below(static_cast<std::uint64_t>(img.width_half - cfg.patch_size + 1)));
    d.flip = cfg.augment ? static_cast<raw::FlipMode>(s.below(4)) : raw::FlipMode::none;
    return d;
}

template <class T>
Batch<T> sample_batch(const PairDataset& data, const TrainConfig& cfg, std::int64_t step) {
    const int p = cfg.patch_size;
    const ag::Shape shape{cfg.batch_size, raw::kPackedChannels, p, p};
    Batch<T> b{ag::Tensor<T>::zeros(shape), ag::Tensor<T>::zeros(shape), {}};
    for (int n = 0; n < cfg.batch_size; ++n) {
        const auto d = draw_patch(data, cfg, step, n);
        const auto& pair = data[d.image];
        write_packed<T>(raw::augment(raw::crop(pair.noisy, d.row, d.col, p, p), d.flip), b.noisy.data(), n);
        write_packed<T>(raw::augment(raw::crop(pair.target, d.row, d.col, p, p), d.flip), b.target.data(), n);
        b.draws.push_back(d);
    }
    return b;
}

struct TrainLogEntry {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
    return {{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"wall_ms", e.wall_ms}};
}

using TrainLogger = std::function<void(const TrainLogEntry&)>;

template <class T>
struct TrainOutcome {
    std::vector<double> losses; // one per executed step
    ag::AdamState<T> adam;      // adam.step counts every step so far, including resumed ones
    std::string stage;
};

inline ag::AdamHyper adam_hyper(const TrainConfig& cfg) {
    return {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
}

namespace detail {

template <class T, class LossFn>
std::vector<double> run_steps(const ag::ParameterList<T>& params, ag::AdamState<T>& adam, const PairDataset& data,
                              const TrainConfig& cfg, LossFn&& loss_fn, const TrainLogger& log) {
    std::vector<double> losses;
    const auto t0 = std::chrono::steady_clock::now();
    while (adam.step < cfg.max_steps) {
        const std::int64_t step = adam.step;
        auto batch = sample_batch<T>(data, cfg, step);
        auto loss = loss_fn(batch);
        ag::zero_grad(params);
        loss.backward();
        ag::adam_step(params, adam);
        losses.push_back(static_cast<double>(loss.item()));
        if (log) {
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            log({step, losses.back(), adam.hyper.learning_rate, ms});
        }
    }
    return losses;
}

template <class T>
ag::AdamState<T> start_state(const ag::ParameterList<T>& params, const TrainConfig& cfg, std::optional<ag::AdamState<T>> resume) {
    if (!resume) return ag::make_adam(params, adam_hyper(cfg));
    if (resume->m.size() != params.size()) throw CompatibilityError("optimizer state does not match the trained parameters");
    return std::move(*resume);
}

// Disables gradient tracking on a parameter set for the lifetime of the guard.
template <class T>
class FreezeGuard {
public:
    explicit FreezeGuard(ag::ParameterList<T> params) : params_(std::move(params)) {
        for (auto& p : params_) p.tensor.node()->requires_grad = false;
    }
    ~FreezeGuard() {
        for (auto& p : params_) p.tensor.node()->requires_grad = true;
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    ag::ParameterList<T> params_;
};

} // namespace detail

inline std::string pretrain_stage(Branch b) { return std::string("pretrain_") + to_string(b); }

// Fits one sub-network so that its complementary image R(y) matches the target
// under L1. Targets are clean images for single-noise synthetic data.
template <class T>
TrainOutcome<T> pretrain_subnetwork(NodeModel<T>& m, Branch branch, const PairDataset& data, const TrainConfig& cfg,
                                    std::type_identity_t<std::optional<ag::AdamState<T>>> resume = std::nullopt,
                                    const TrainLogger& log = {}) {
    validate_dataset(data, cfg, m.subnet(branch).config().downsampling_factor());
    const auto params = m.branch_parameters(branch);
    TrainOutcome<T> out{{}, detail::start_state(params, cfg, std::move(resume)), pretrain_stage(branch)};
    out.losses = detail::run_steps(
        params, out.adam, data, cfg,
        [&](const Batch<T>& b) { return ag::l1_loss(complementary_image(m, branch, b.noisy), b.target); }, log);
    m.provenance[out.stage] = {{"seed", cfg.seed}, {"steps", out.adam.step}, {"dataset", dataset_hash(data)}};
    return out;
}

// End-to-end L1 between the denoiser output and the clean target. Gradients
// reach both sub-networks through the subtraction wiring unless frozen.
template <class T>
TrainOutcome<T> finetune_node(NodeModel<T>& m, const PairDataset& data, const TrainConfig& cfg,
                              std::type_identity_t<std::optional<ag::AdamState<T>>> resume = std::nullopt,
                                    const TrainLogger& log = {}) {
    validate_dataset(data, cfg, m.downsampling_factor());
    const auto params = m.parameters(!cfg.freeze_subnets, true);
    std::optional<detail::FreezeGuard<T>> frozen;
    if (cfg.freeze_subnets) frozen.emplace(m.parameters(true, false));
    TrainOutcome<T> out{{}, detail::start_state(params, cfg, std::move(resume)), "finetune"};
    out.losses = detail::run_steps(
        params, out.adam, data, cfg, [&](const Batch<T>& b) { return ag::l1_loss(node_forward(m, b.noisy).denoised, b.target); },
        log);
    m.provenance["finetune"] = {
        {"seed", cfg.seed}, {"steps", out.adam.step}, {"dataset", dataset_hash(data)}, {"freeze_subnets", cfg.freeze_subnets}};
    return out;
}

// Parameters trained in a stage, matching the optimizer-state layout.
template <class T>
ag::ParameterList<T> stage_parameters(const NodeModel<T>& m, const std::string& stage, bool freeze_subnets) {
    if (stage == "pretrain_gp") return m.branch_parameters(Branch::gp);
    if (stage == "pretrain_dp") return m.branch_parameters(Branch::dp);
    if (stage == "finetune") return m.parameters(!freeze_subnets, true);
    throw CompatibilityError("unknown training stage '" + stage + "'");
}

// Model weights plus the optimizer state of an in-progress stage.
template <class T>
ag::Checkpoint training_checkpoint(const NodeModel<T>& m, const TrainOutcome<T>& t, const TrainConfig& cfg) {
    auto ck = model_checkpoint(m);
    ck.header["training"] = {{"stage", t.stage}, {"step", t.adam.step}, {"config", to_json(cfg)}};
    ag::store_adam(ck, t.adam, stage_parameters(m, t.stage, cfg.freeze_subnets));
    return ck;
}

template <class T>
struct ResumePoint {
    NodeModel<T> model;
    std::string stage;
    TrainConfig config;
    ag::AdamState<T> adam;
};

// Restores a training checkpoint; `expected` guards against resuming with a
// different architecture.
template <class T>
ResumePoint<T> resume_training(const ag::Checkpoint& ck, const std::optional<ModelConfig>& expected = std::nullopt) {
    auto model = model_from_checkpoint<T>(ck);
    if (expected && !(*expected == model.config)) {
        throw CompatibilityError("checkpoint architecture does not match the configured model");
    }
    if (!ck.header.contains("training")) throw CompatibilityError("checkpoint has no training state");
    const auto& tr = ck.header.at("training");
    ResumePoint<T> r{std::move(model), tr.at("stage").get<std::string>(), {}, {}};
    try {
        r.config = train_config_from_json(tr.at("config"));
    } catch (const ConfigError& e) {
        throw CompatibilityError(std::string("checkpoint training config invalid: ") + e.what());
    }
    r.adam = ag::restore_adam(ck, stage_parameters(r.model, r.stage, r.config.freeze_subnets));
    return r;
}

} // namespace node::arch
