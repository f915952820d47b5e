// Command-line front end for the denoising workflow.
//
// Exit codes: 0 success, 2 usage or input error, 3 missing or incompatible
// artifact from an earlier stage. Progress is logged as JSON lines on stderr.

#include <node/pipeline/commands.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
namespace pl = node::pipeline;

namespace {

constexpr int kUsage = 2;
constexpr int kState = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "pipeline config JSON (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "global seed, overrides the config value");
    auto* out = cmd->add_option("--out", c.out, "output directory for artifacts");
    if (out_required) out->required();
    cmd->add_option("--threads", c.threads, "worker threads (execution is single-threaded; accepted for interface stability)")
        ->check(CLI::PositiveNumber);
}

pl::PipelineConfig resolve(const Common& c) {
    auto cfg = c.config.empty() ? pl::PipelineConfig{} : pl::load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    return cfg;
}

std::optional<pl::Split> split_filter(const std::string& s) {
    if (s == "all") return std::nullopt;
    return pl::split_from_string(s);
}

int fail(int code, const std::string& msg) {
    std::cerr << nlohmann::json{{"event", "error"}, {"exit_code", code}, {"message", msg}}.dump() << '\n';
    std::cerr << "error: " << msg << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Raw-image denoising with noise decomposition"};
    app.require_subcommand(1);
    const pl::Log log(&std::cerr);

    Common common;
    std::function<void()> action;

    // sample
    pl::SampleOptions sample;
    auto* c_sample = app.add_subcommand("sample", "generate the synthetic clean image set and an optional calibration burst");
    add_common(c_sample, common);
    c_sample->add_option("--count", sample.count, "number of clean scenes");
    c_sample->add_option("--size", sample.packed_size, "packed (half-resolution) side length");
    c_sample->add_option("--burst-frames", sample.burst_frames, "frames in the calibration burst (0 = none)");
    c_sample->add_option("--burst-size", sample.burst_size, "raw side length of burst frames");
    c_sample->callback([&] { action = [&] { pl::cmd_sample(sample, resolve(common).seed, common.out, log); }; });

    // calibrate
    std::string burst;
    auto* c_cal = app.add_subcommand("calibrate", "fit the noise model and defect mask from a static burst");
    add_common(c_cal, common);
    c_cal->add_option("--burst", burst, "directory of aligned raw frames (PGM + JSON sidecar)")->required();
    c_cal->callback([&] {
        action = [&] {
            const auto r = pl::cmd_calibrate(burst, resolve(common), common.out, log);
            std::cout << node::noise::to_json(r.model)["fit_stats"].dump() << '\n';
        };
    });

    // synthesize
    std::string clean_dir, noise_model;
    auto* c_syn = app.add_subcommand("synthesize", "write GP-only, defect-only and mixed datasets with masks and a manifest");
    add_common(c_syn, common);
    c_syn->add_option("--clean", clean_dir, "directory of clean raw images")->required();
    c_syn->add_option("--noise-model", noise_model, "noise model JSON from calibrate")->required();
    c_syn->callback([&] { action = [&] { pl::cmd_synthesize(clean_dir, noise_model, resolve(common), common.out, log); }; });

    // pretrain / finetune
    std::string manifest, branch = "both", model;
    std::string init, resume;
    pl::TrainOptions topt;
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--resume", resume, "training checkpoint (*.state.ckpt) to continue from");
        cmd->add_option("--checkpoint-every", topt.checkpoint_every, "steps between resumable checkpoints (0 = end of stage only)");
        cmd->add_option("--log-every", topt.log_every, "steps between train_step log lines (0 = none)");
    };
    auto train_opts = [&] {
        auto o = topt;
        if (!init.empty()) o.init = init;
        if (!resume.empty()) o.resume = resume;
        return o;
    };
    auto* c_pre = app.add_subcommand("pretrain", "pre-train the noise estimation sub-networks on single-noise data");
    add_common(c_pre, common);
    c_pre->add_option("--data", manifest, "dataset manifest")->required();
    c_pre->add_option("--branch", branch, "gp, dp or both")->check(CLI::IsMember({"gp", "dp", "both"}));
    c_pre->add_option("--init", init, "start from this model checkpoint instead of a fresh initialisation");
    add_train_flags(c_pre);
    c_pre->callback([&] { action = [&] { pl::cmd_pretrain(manifest, branch, resolve(common), common.out, train_opts(), log); }; });

    auto* c_ft = app.add_subcommand("finetune", "fine-tune the assembled model end to end on mixed-noise data");
    add_common(c_ft, common);
    c_ft->add_option("--model", model, "pre-trained model checkpoint");
    c_ft->add_option("--data", manifest, "dataset manifest")->required();
    add_train_flags(c_ft);
    c_ft->callback([&] {
        action = [&] {
            if (model.empty() && resume.empty()) throw CLI::ValidationError("--model", "finetune needs --model or --resume");
            pl::cmd_finetune(model, manifest, resolve(common), common.out, train_opts(), log);
        };
    });

    // denoise
    std::vector<std::string> inputs;
    std::string split = "test", variant = "mixed";
    auto* c_den = app.add_subcommand("denoise", "denoise raw images with a trained model");
    add_common(c_den, common);
    c_den->add_option("--model", model, "trained model checkpoint")->required();
    c_den->add_option("--data", manifest, "manifest whose noisy entries are denoised");
    c_den->add_option("--input", inputs, "raw image files or directories");
    c_den->add_option("--split", split, "manifest split: train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    c_den->add_option("--variant", variant, "manifest variant to select");
    c_den->callback([&] {
        action = [&] {
            pl::DenoiseInputs in;
            if (!manifest.empty()) in.manifest = manifest;
            in.split = split_filter(split);
            in.variant = variant;
            for (const auto& f : inputs) in.files.emplace_back(f);
            if (!in.manifest && in.files.empty()) throw CLI::ValidationError("--input", "denoise needs --data or --input");
            pl::cmd_denoise(model, in, resolve(common), common.out, log);
        };
    });

    // evaluate
    std::string denoised;
    auto* c_eval = app.add_subcommand("evaluate", "score denoised images against clean references (PSNR/SSIM, masked and unmasked)");
    add_common(c_eval, common);
    c_eval->add_option("--data", manifest, "dataset manifest")->required();
    c_eval->add_option("--denoised", denoised, "directory of denoised images; omit to score the noisy inputs");
    c_eval->add_option("--split", split, "manifest split: train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    c_eval->add_option("--variant", variant, "manifest variant to select (empty = all)");
    c_eval->callback([&] {
        action = [&] {
            std::optional<fs::path> dir;
            if (!denoised.empty()) dir = denoised;
            const auto r = pl::cmd_evaluate(manifest, dir, split_filter(split), variant, common.out, log);
            std::cout << node::metrics::csv_summary({r.mean});
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (action) action();
        return 0;
    } catch (const CLI::ValidationError& e) {
        return fail(kUsage, e.what());
    } catch (const node::CompatibilityError& e) {
        return fail(kState, e.what());
    } catch (const node::Error& e) {
        return fail(kUsage, e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(kUsage, e.what());
    } catch (const std::exception& e) {
        return fail(1, e.what());
    }
}
