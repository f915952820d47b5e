#pragma once

#include <node/arch.hpp>
#include <node/metrics.hpp>
#include <node/noise_lab.hpp>
#include <node/pipeline/config.hpp>
#include <node/pipeline/manifest.hpp>
#include <node/raw_core.hpp>
#include <node/synthetic.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace node::pipeline {

namespace fs = std::filesystem;

// A required artifact from an earlier stage is absent.
class MissingArtifactError : public CompatibilityError {
public:
    using CompatibilityError::CompatibilityError;
};

// JSON-lines event sink. A null stream silences it.
class Log {
public:
    explicit Log(std::ostream* os = nullptr) : os_(os) {}
    void operator()(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
        if (!os_) return;
        fields["event"] = event;
        *os_ << fields.dump() << '\n';
        os_->flush();
    }

private:
    std::ostream* os_;
};

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw MissingArtifactError(what + " '" + p.string() + "' does not exist");
}

// Raw images in a directory (PGM with sidecar), ordered by file name.
inline std::vector<fs::path> raw_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("'" + dir.string() + "' is not a directory");
    std::vector<fs::path> out;
    for (const auto& f : fs::directory_iterator(dir)) {
        const auto& p = f.path();
        if (p.extension() == ".pgm" && p.stem().extension() != ".mask") out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

// Manifest ids may contain '/', output files may not.
inline std::string file_stem(const std::string& id) {
    std::string s = id;
    std::replace(s.begin(), s.end(), '/', '_');
    return s;
}

inline arch::PairDataset load_pairs(const Manifest& m, Split split, const std::string& variant) {
    arch::PairDataset out;
    for (const auto* e : m.select(split, variant)) {
        if (e->noisy_path.empty() || e->clean_path.empty()) throw ConfigError("entry '" + e->id + "' lacks a noisy/clean pair");
        out.push_back({raw::pack_bayer(raw::load_raw(m.resolve(e->noisy_path))), raw::pack_bayer(raw::load_raw(m.resolve(e->clean_path)))});
    }
    if (out.empty()) throw ConfigError("manifest has no " + to_string(split) + " entries of variant '" + variant + "'");
    return out;
}

inline arch::TrainLogger train_logger(const Log& log, const std::string& stage, std::int64_t every) {
    return [&log, stage, every](const arch::TrainLogEntry& e) {
        if (every > 0 && (e.step % every == 0)) {
            auto j = arch::to_json(e);
            j["stage"] = stage;
            log("train_step", j);
        }
    };
}

inline arch::ModelConfig checkpoint_model_config(const ag::Checkpoint& ck, const arch::ModelConfig& expected) {
    const auto got = arch::checkpoint_architecture(ck);
    if (!(got == expected)) {
        const auto have = arch::to_json(got), want = arch::to_json(expected);
        std::string detail;
        for (const auto& op : nlohmann::json::diff(have, want)) {
            const nlohmann::json::json_pointer ptr(op.at("path").get<std::string>());
            detail += (detail.empty() ? "" : "; ") + ptr.to_string() + " checkpoint " + (have.contains(ptr) ? have.at(ptr).dump() : "absent") +
                      " vs config " + (want.contains(ptr) ? want.at(ptr).dump() : "absent");
        }
        throw CompatibilityError("architecture mismatch: " + detail);
    }
    return got;
}

} // namespace detail

// ---- sample --------------------------------------------------------------

struct SampleOptions {
    int count = 16;
    int packed_size = 64;
    int burst_frames = 0; // > 0 also writes a calibration burst
    int burst_size = 256; // raw pixels per side of the burst frames
};

// Default metadata of the bundled synthetic data.
inline raw::RawMeta sample_meta() {
    raw::RawMeta m;
    m.black_level = 64.0;
    m.iso = 12800;
    m.exposure_tag = "synthetic";
    return m;
}

inline noise::NoiseModel sample_noise_model() {
    noise::NoiseModel m;
    m.sigma_r_sq = 4.0;
    m.sigma_s = 0.5;
    m.black_level = 64.0;
    m.white_level = 1023.0;
    return m;
}

// Clean scenes into out/clean and, optionally, a static-scene burst of a
// horizontal intensity ramp into out/burst for calibration.
inline void cmd_sample(const SampleOptions& opt, std::uint64_t seed, const fs::path& out, const Log& log = Log{}) {
    if (opt.count < 1 || opt.packed_size < 8) throw ConfigError("sample needs count >= 1 and packed size >= 8");
    fs::create_directories(out / "clean");
    synth::SceneParams p;
    p.width = p.height = 2 * opt.packed_size;
    for (int i = 0; i < opt.count; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%03d.pgm", i);
        raw::save_raw(synth::scene(p, rng::hash_combine(rng::derive_seed(seed, "sample"), static_cast<std::uint64_t>(i)), sample_meta()),
                      out / "clean" / name);
    }
    if (opt.burst_frames > 0) {
        fs::create_directories(out / "burst");
        raw::RawImage ramp(opt.burst_size, opt.burst_size, sample_meta());
        const double lo = ramp.meta.black_level, hi = 0.9 * ramp.white_level();
        for (int r = 0; r < ramp.height; ++r)
            for (int c = 0; c < ramp.width; ++c) ramp.at(r, c) = static_cast<std::uint16_t>(std::lround(lo + (hi - lo) * c / (ramp.width - 1)));
        const auto model = sample_noise_model();
        for (int f = 0; f < opt.burst_frames; ++f) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%02d.pgm", f);
            raw::save_raw(noise::synthesize_gp(ramp, model, rng::hash_combine(rng::derive_seed(seed, "burst"), static_cast<std::uint64_t>(f))),
                          out / "burst" / name);
        }
    }
    log("sample_done", {{"count", opt.count}, {"packed_size", opt.packed_size}, {"burst_frames", opt.burst_frames}});
}

// ---- calibrate -----------------------------------------------------------

struct CalibrationResult {
    noise::NoiseModel model;
    noise::DefectiveMask mask;
};

inline CalibrationResult cmd_calibrate(const fs::path& burst_dir, const PipelineConfig& cfg, const fs::path& out, const Log& log = Log{}) {
    std::vector<raw::RawImage> frames;
    for (const auto& f : detail::raw_files(burst_dir)) frames.push_back(raw::load_raw(f));
    if (frames.size() < 2) throw DimensionError("need ≥ 2 frames, found " + std::to_string(frames.size()) + " in '" + burst_dir.string() + "'");
    const auto stats = noise::burst_statistics(frames);
    auto ransac = cfg.calibration.ransac;
    ransac.seed = stage_seed(cfg, "calibrate");
    CalibrationResult r{noise::fit_noise_model(stats, ransac), {}};
    r.model.confidence = cfg.calibration.confidence;
    r.mask = noise::detect_defective(stats, r.model);
    fs::create_directories(out);
    detail::write_json(out / "noise_model.json", noise::to_json(r.model));
    noise::save_mask(r.mask, out / "defect_mask.pgm");
    log("calibrate_done", {{"frames", frames.size()},
                           {"sigma_r_sq", r.model.sigma_r_sq},
                           {"sigma_s", r.model.sigma_s},
                           {"fit_stats", noise::to_json(r.model)["fit_stats"]},
                           {"defective", r.mask.popcount()}});
    return r;
}

// ---- synthesize ----------------------------------------------------------

// One noisy image per clean input and variant, masks for defect-bearing
// variants, then the manifest. Splits are drawn per clean image so the same
// scene never appears in both.
inline Manifest cmd_synthesize(const fs::path& clean_dir, const fs::path& model_path, const PipelineConfig& cfg, const fs::path& out,
                               const Log& log = Log{}) {
    detail::require_file(model_path, "noise model");
    const auto model = noise::noise_model_from_json(read_json_file(model_path));
    const auto inputs = detail::raw_files(clean_dir);
    if (inputs.empty()) throw ConfigError("no clean images in '" + clean_dir.string() + "'");

    fs::create_directories(out / "clean");
    const auto splits = assign_splits(inputs.size(), cfg.synthesis.test_fraction, stage_seed(cfg, "split"));
    Manifest m;
    const std::uint64_t base = stage_seed(cfg, "synthesize");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto clean = raw::load_raw(inputs[i]);
        const std::string stem = inputs[i].stem().string();
        const std::string clean_rel = "clean/" + stem + ".pgm";
        raw::save_raw(clean, out / clean_rel);
        const std::uint64_t s = rng::derive_seed(base, stem);
        for (const auto& v : cfg.synthesis.variants) {
            fs::create_directories(out / v);
            auto dp = cfg.synthesis.defects;
            dp.seed = rng::derive_seed(s, "defects");
            raw::RawImage noisy;
            std::optional<noise::DefectiveMask> mask;
            if (v == "gp") {
                noisy = noise::synthesize_gp(clean, model, rng::derive_seed(s, "gp"));
            } else if (v == "dp") {
                std::tie(noisy, mask.emplace()) = noise::synthesize_defective(clean, dp);
            } else {
                std::tie(noisy, mask.emplace()) = noise::synthesize_mixed(clean, model, dp, rng::derive_seed(s, "gp"));
            }
            ManifestEntry e;
            e.id = v + "/" + stem;
            e.noisy_path = v + "/" + stem + ".pgm";
            e.clean_path = clean_rel;
            e.split = splits[i];
            e.variant = v;
            raw::save_raw(noisy, out / e.noisy_path);
            if (mask) {
                e.mask_path = v + "/" + stem + ".mask.pgm";
                noise::save_mask(*mask, out / e.mask_path);
            }
            m.entries.push_back(std::move(e));
        }
    }
    save_manifest(m, out / "manifest.json");
    auto done = load_manifest(out / "manifest.json");
    log("synthesize_done", {{"images", inputs.size()}, {"entries", done.entries.size()}, {"hash", done.hash}});
    return done;
}

// ---- training ------------------------------------------------------------

struct TrainOptions {
    std::optional<fs::path> init;   // start from this model checkpoint
    std::optional<fs::path> resume; // continue an interrupted stage
    std::int64_t checkpoint_every = 0;
    std::int64_t log_every = 100;
};

namespace detail {

// Runs one stage in chunks, persisting a resumable training checkpoint after
// each chunk. Batch draws depend only on (seed, step), so chunking does not
// change the result.
template <class Fn>
arch::TrainOutcome<float> chunked(arch::NodeModel<float>& m, arch::TrainConfig cfg, std::optional<ag::AdamState<float>> state,
                                  std::int64_t every, const fs::path& state_path, Fn&& run) {
    const std::int64_t target = cfg.max_steps;
    arch::TrainOutcome<float> total;
    for (;;) {
        const std::int64_t at = state ? state->step : 0;
        cfg.max_steps = every > 0 ? std::min(target, at + every) : target;
        auto r = run(cfg, std::move(state));
        total.losses.insert(total.losses.end(), r.losses.begin(), r.losses.end());
        total.stage = r.stage;
        ag::save_checkpoint(arch::training_checkpoint(m, r, cfg), state_path);
        state = r.adam;
        if (r.adam.step >= target) {
            total.adam = std::move(r.adam);
            return total;
        }
    }
}

} // namespace detail

inline arch::TrainConfig stage_train_config(arch::TrainConfig c, const PipelineConfig& cfg, const std::string& stage) {
    c.seed = stage_seed(cfg, stage);
    return c;
}

// Pre-trains the requested branches ("gp", "dp" or "both") on the train split
// of the matching synthetic variant. Writes out/pretrained.ckpt.
inline arch::NodeModel<float> cmd_pretrain(const fs::path& manifest_path, const std::string& branches, const PipelineConfig& cfg,
                                           const fs::path& out, const TrainOptions& opt = {}, const Log& log = Log{}) {
    if (branches != "gp" && branches != "dp" && branches != "both") throw ConfigError("branch must be gp, dp or both");
    detail::require_file(manifest_path, "manifest");
    const auto manifest = load_manifest(manifest_path);
    fs::create_directories(out);

    std::optional<arch::ResumePoint<float>> resumed;
    arch::NodeModel<float> model = [&] {
        if (opt.resume) {
            detail::require_file(*opt.resume, "resume checkpoint");
            const auto ck = ag::load_checkpoint(*opt.resume);
            detail::checkpoint_model_config(ck, cfg.model);
            resumed.emplace(arch::resume_training<float>(ck, cfg.model));
            return resumed->model;
        }
        if (opt.init) {
            detail::require_file(*opt.init, "initial model");
            const auto ck = ag::load_checkpoint(*opt.init);
            detail::checkpoint_model_config(ck, cfg.model);
            return arch::model_from_checkpoint<float>(ck);
        }
        return arch::make_node_model<float>(cfg.model, stage_seed(cfg, "model"));
    }();

    std::vector<arch::Branch> todo;
    if (branches != "dp") todo.push_back(arch::Branch::gp);
    if (branches != "gp") todo.push_back(arch::Branch::dp);
    if (resumed) {
        const auto it = std::find_if(todo.begin(), todo.end(), [&](arch::Branch b) { return arch::pretrain_stage(b) == resumed->stage; });
        if (it == todo.end()) throw CompatibilityError("resume checkpoint is from stage '" + resumed->stage + "', not a requested pretrain branch");
        todo.erase(todo.begin(), it);
    }

    for (const auto b : todo) {
        const std::string stage = arch::pretrain_stage(b);
        const auto data = detail::load_pairs(manifest, Split::train, arch::to_string(b));
        auto tc = stage_train_config(cfg.pretrain, cfg, stage);
        std::optional<ag::AdamState<float>> state;
        if (resumed && resumed->stage == stage) {
            state = std::move(resumed->adam);
            resumed.reset();
        }
        log("stage_start", {{"stage", stage}, {"images", data.size()}, {"steps", tc.max_steps}, {"seed", tc.seed}});
        const auto logger = detail::train_logger(log, stage, opt.log_every);
        const auto r = detail::chunked(model, tc, std::move(state), opt.checkpoint_every, out / (stage + ".state.ckpt"),
                                       [&](const arch::TrainConfig& c, std::optional<ag::AdamState<float>> s) {
                                           return arch::pretrain_subnetwork(model, b, data, c, std::move(s), logger);
                                       });
        log("stage_done", {{"stage", stage}, {"step", r.adam.step}, {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}});
    }
    model.provenance["manifest"] = manifest.hash;
    arch::save_model(model, out / "pretrained.ckpt");
    log("pretrain_done", {{"model", (out / "pretrained.ckpt").string()}});
    return model;
}

// End-to-end fine-tuning on the mixed-noise train split. The input model must
// have completed both pretraining stages. Writes out/finetuned.ckpt.
inline arch::NodeModel<float> cmd_finetune(const fs::path& model_path, const fs::path& manifest_path, const PipelineConfig& cfg,
                                           const fs::path& out, const TrainOptions& opt = {}, const Log& log = Log{}) {
    detail::require_file(manifest_path, "manifest");
    const auto manifest = load_manifest(manifest_path);
    fs::create_directories(out);
    const auto tc = stage_train_config(cfg.finetune, cfg, "finetune");

    std::optional<ag::AdamState<float>> state;
    arch::NodeModel<float> model = [&] {
        if (opt.resume) {
            detail::require_file(*opt.resume, "resume checkpoint");
            const auto ck = ag::load_checkpoint(*opt.resume);
            detail::checkpoint_model_config(ck, cfg.model);
            auto r = arch::resume_training<float>(ck, cfg.model);
            if (r.stage != "finetune") throw CompatibilityError("resume checkpoint is from stage '" + r.stage + "', not finetune");
            state = std::move(r.adam);
            return std::move(r.model);
        }
        detail::require_file(model_path, "pretrained model");
        const auto ck = ag::load_checkpoint(model_path);
        detail::checkpoint_model_config(ck, cfg.model);
        auto m = arch::model_from_checkpoint<float>(ck);
        for (const char* stage : {"pretrain_gp", "pretrain_dp"}) {
            if (!m.provenance.contains(stage)) throw MissingArtifactError("model '" + model_path.string() + "' has not completed " + stage);
        }
        return m;
    }();

    const auto data = detail::load_pairs(manifest, Split::train, "mixed");
    log("stage_start", {{"stage", "finetune"}, {"images", data.size()}, {"steps", tc.max_steps}, {"seed", tc.seed}});
    const auto logger = detail::train_logger(log, "finetune", opt.log_every);
    const auto r = detail::chunked(model, tc, std::move(state), opt.checkpoint_every, out / "finetune.state.ckpt",
                                   [&](const arch::TrainConfig& c, std::optional<ag::AdamState<float>> s) {
                                       return arch::finetune_node(model, data, c, std::move(s), logger);
                                   });
    log("stage_done", {{"stage", "finetune"}, {"step", r.adam.step}, {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}});
    model.provenance["manifest_finetune"] = manifest.hash;
    arch::save_model(model, out / "finetuned.ckpt");
    log("finetune_done", {{"model", (out / "finetuned.ckpt").string()}});
    return model;
}

// ---- denoise ---------------------------------------------------------------

struct DenoiseInputs {
    std::optional<fs::path> manifest; // with split/variant filters
    std::optional<Split> split = Split::test;
    std::string variant = "mixed";
    std::vector<fs::path> files; // explicit images or directories
};

inline arch::NodeModel<float> load_trained_model(const fs::path& path, const std::optional<arch::ModelConfig>& expected) {
    detail::require_file(path, "model");
    const auto ck = ag::load_checkpoint(path);
    if (expected) detail::checkpoint_model_config(ck, *expected);
    return arch::model_from_checkpoint<float>(ck);
}

// Writes one denoised raw image per input, named after the manifest id or
// the input file stem. Returns the written paths in input order.
inline std::vector<fs::path> cmd_denoise(const fs::path& model_path, const DenoiseInputs& in, const PipelineConfig& cfg,
                                         const fs::path& out, const Log& log = Log{}) {
    const auto model = load_trained_model(model_path, cfg.model);
    std::vector<std::pair<std::string, fs::path>> jobs;
    if (in.manifest) {
        detail::require_file(*in.manifest, "manifest");
        const auto m = load_manifest(*in.manifest);
        for (const auto* e : m.select(in.split, in.variant)) {
            if (e->noisy_path.empty()) throw ConfigError("entry '" + e->id + "' has no single noisy image");
            jobs.emplace_back(detail::file_stem(e->id), m.resolve(e->noisy_path));
        }
    }
    for (const auto& f : in.files) {
        if (fs::is_directory(f)) {
            for (const auto& p : detail::raw_files(f)) jobs.emplace_back(p.stem().string(), p);
        } else {
            jobs.emplace_back(f.stem().string(), f);
        }
    }
    if (jobs.empty()) throw ConfigError("nothing to denoise");
    fs::create_directories(out);
    std::vector<fs::path> written;
    for (const auto& [name, path] : jobs) {
        const auto noisy = raw::load_raw(path);
        const auto den = arch::denoise_image(model, noisy, cfg.inference);
        written.push_back(out / (name + ".pgm"));
        raw::save_raw(den, written.back());
        log("denoised", {{"input", path.string()}, {"output", written.back().string()}});
    }
    return written;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateResult {
    std::vector<metrics::MetricReport> rows;
    metrics::MetricReport mean;
};

namespace detail {

inline double mean_or_inf(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) {
        if (std::isinf(x)) return metrics::kInf;
        s += x;
    }
    return s / static_cast<double>(v.size());
}

inline metrics::MetricReport mean_row(const std::vector<metrics::MetricReport>& rows) {
    metrics::MetricReport m;
    m.image_id = "mean";
    std::vector<double> p, pm, s, sm;
    for (const auto& r : rows) {
        p.push_back(r.psnr);
        pm.push_back(r.psnr_masked);
        if (r.ssim) s.push_back(*r.ssim);
        if (r.ssim_masked) sm.push_back(*r.ssim_masked);
        m.pixel_count += r.pixel_count;
        m.masked_count += r.masked_count;
    }
    m.psnr = mean_or_inf(p);
    m.psnr_masked = mean_or_inf(pm);
    if (!s.empty()) m.ssim = mean_or_inf(s);
    if (!sm.empty()) m.ssim_masked = mean_or_inf(sm);
    return m;
}

} // namespace detail

// Scores each selected manifest entry against its clean image, using the
// denoised output in `denoised_dir` (or the noisy input itself when no
// directory is given). Writes out/metrics.csv and out/metrics.json.
inline EvaluateResult cmd_evaluate(const fs::path& manifest_path, const std::optional<fs::path>& denoised_dir, std::optional<Split> split,
                                   const std::string& variant, const fs::path& out, const Log& log = Log{}) {
    detail::require_file(manifest_path, "manifest");
    const auto m = load_manifest(manifest_path);
    EvaluateResult res;
    for (const auto* e : m.select(split, variant)) {
        if (e->clean_path.empty() || e->noisy_path.empty()) throw ConfigError("entry '" + e->id + "' lacks a noisy/clean pair");
        const auto ref = raw::load_raw(m.resolve(e->clean_path));
        fs::path candidate = m.resolve(e->noisy_path);
        if (denoised_dir) {
            candidate = *denoised_dir / (detail::file_stem(e->id) + ".pgm");
            detail::require_file(candidate, "denoised image");
        }
        const auto img = raw::load_raw(candidate);
        const auto mask = e->mask_path.empty() ? noise::DefectiveMask(ref.width, ref.height) : noise::load_mask(m.resolve(e->mask_path));
        res.rows.push_back(metrics::evaluate_pair(img, ref, mask, {}, e->id));
    }
    if (res.rows.empty()) throw ConfigError("no manifest entries match the evaluation filter");
    res.mean = detail::mean_row(res.rows);
    fs::create_directories(out);
    auto rows = res.rows;
    rows.push_back(res.mean);
    {
        std::ofstream csv(out / "metrics.csv", std::ios::binary);
        if (!csv) throw Error("cannot write metrics.csv");
        csv << metrics::csv_summary(rows);
    }
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back(metrics::to_json(r));
    detail::write_json(out / "metrics.json", {{"manifest", m.hash}, {"rows", j}});
    log("evaluate_done", metrics::to_json(res.mean));
    return res;
}

} // namespace node::pipeline
