#pragma once

// Full-reference quality metrics on raw mosaics with optional defect masking.
// SSIM is evaluated per packed CFA channel and averaged; PSNR pools the
// squared error over every unmasked sample, which is the same in the mosaic
// and packed layouts.

#include <node/common.hpp>
#include <node/noise_lab.hpp>
#include <node/raw_core.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace node::metrics {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

namespace detail {

inline void require_same_dims(const raw::RawImage& a, const raw::RawImage& b) {
    if (a.width != b.width || a.height != b.height) {
        throw DimensionError("image sizes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                             std::to_string(b.width) + "x" + std::to_string(b.height));
    }
    if (a.meta.bit_depth != b.meta.bit_depth) throw RangeError("images have different bit depths");
}

inline void require_mask_dims(const raw::RawImage& a, const noise::DefectiveMask* mask) {
    if (mask && (mask->width != a.width || mask->height != a.height)) {
        throw DimensionError("mask size does not match the images");
    }
}

} // namespace detail

inline double psnr_from_mse(double mse, double peak) { return mse == 0.0 ? kInf : 10.0 * std::log10(peak * peak / mse); }

// Peak is the white level. Samples under a set mask bit are ignored.
inline double psnr(const raw::RawImage& a, const raw::RawImage& b, const noise::DefectiveMask* mask = nullptr) {
    detail::require_same_dims(a, b);
    detail::require_mask_dims(a, mask);
    double se = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (mask && mask->bits[i]) continue;
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        se += d * d;
        ++n;
    }
    if (n == 0) throw RangeError("mask excludes every pixel");
    return psnr_from_mse(se / static_cast<double>(n), a.white_level());
}

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    // Drop every window that touches a masked pixel, not only masked centres.
    bool strict_mask = false;
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(size));
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double x = i - (size - 1) / 2.0;
        k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Separable "valid" filtering of an h x w plane; output (h-k+1) x (w-k+1).
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k) {
    const int ks = static_cast<int>(k.size()), oh = h - ks + 1, ow = w - ks + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0), out(static_cast<std::size_t>(oh) * ow, 0.0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int j = 0; j < ks; ++j) s += k[static_cast<std::size_t>(j)] * img[static_cast<std::size_t>(r) * w + c + j];
            tmp[static_cast<std::size_t>(r) * ow + c] = s;
        }
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int j = 0; j < ks; ++j) s += k[static_cast<std::size_t>(j)] * tmp[static_cast<std::size_t>(r + j) * ow + c];
            out[static_cast<std::size_t>(r) * ow + c] = s;
        }
    return out;
}

// Mean SSIM over the kept windows of one packed channel, with the number of
// windows kept.
inline std::pair<double, std::size_t> ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                                                 const std::vector<std::uint8_t>* masked, double peak, const SsimOptions& opt) {
    const auto k = gaussian_kernel(opt.window, opt.sigma);
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto ma = filter_valid(a, h, w, k), mb = filter_valid(b, h, w, k);
    const auto maa = filter_valid(aa, h, w, k), mbb = filter_valid(bb, h, w, k), mab = filter_valid(ab, h, w, k);
    const double c1 = (opt.k1 * peak) * (opt.k1 * peak), c2 = (opt.k2 * peak) * (opt.k2 * peak);
    const int ow = w - opt.window + 1, oh = h - opt.window + 1, half = opt.window / 2;

    // Count of masked pixels in each window, for the strict rule.
    std::vector<int> touched;
    if (masked && opt.strict_mask) {
        std::vector<int> integral(static_cast<std::size_t>(h + 1) * (w + 1), 0);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                integral[static_cast<std::size_t>(r + 1) * (w + 1) + c + 1] = (*masked)[static_cast<std::size_t>(r) * w + c] +
                                                                            integral[static_cast<std::size_t>(r) * (w + 1) + c + 1] +
                                                                            integral[static_cast<std::size_t>(r + 1) * (w + 1) + c] -
                                                                            integral[static_cast<std::size_t>(r) * (w + 1) + c];
        touched.resize(static_cast<std::size_t>(oh) * ow);
        const int s = opt.window;
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c) {
                auto at = [&](int rr, int cc) { return integral[static_cast<std::size_t>(rr) * (w + 1) + cc]; };
                touched[static_cast<std::size_t>(r) * ow + c] = at(r + s, c + s) - at(r, c + s) - at(r + s, c) + at(r, c);
            }
    }

    double sum = 0.0;
    std::size_t kept = 0;
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            const std::size_t o = static_cast<std::size_t>(r) * ow + c;
            if (masked) {
                if (opt.strict_mask ? touched[o] > 0 : (*masked)[static_cast<std::size_t>(r + half) * w + c + half] != 0) continue;
            }
            const double mu_a = ma[o], mu_b = mb[o];
            const double var_a = maa[o] - mu_a * mu_a, var_b = mbb[o] - mu_b * mu_b, cov = mab[o] - mu_a * mu_b;
            const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            sum += num / den;
            ++kept;
        }
    return {sum, kept};
}

} // namespace detail

inline bool ssim_defined(const raw::RawImage& a, const SsimOptions& opt = {}) {
    return a.width / 2 >= opt.window && a.height / 2 >= opt.window;
}

// Average over packed channels of the mean windowed SSIM. With a mask, a
// window is dropped when its centre sample is masked (or, in strict mode,
// when any sample in it is).
inline double ssim(const raw::RawImage& a, const raw::RawImage& b, const noise::DefectiveMask* mask = nullptr,
                   const SsimOptions& opt = {}) {
    detail::require_same_dims(a, b);
    detail::require_mask_dims(a, mask);
    if (!ssim_defined(a, opt)) {
        throw DimensionError("image " + std::to_string(a.width) + "x" + std::to_string(a.height) + " is smaller than the " +
                             std::to_string(opt.window) + "x" + std::to_string(opt.window) + " SSIM window per packed channel");
    }
    const int h = a.height / 2, w = a.width / 2;
    double total = 0.0;
    int channels = 0;
    for (int ch = 0; ch < raw::kPackedChannels; ++ch) {
        const int dr = ch / 2, dc = ch % 2;
        std::vector<double> pa(static_cast<std::size_t>(h) * w), pb(pa.size());
        std::vector<std::uint8_t> pm;
        if (mask) pm.resize(pa.size());
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * w + c;
                pa[i] = a.at(2 * r + dr, 2 * c + dc);
                pb[i] = b.at(2 * r + dr, 2 * c + dc);
                if (mask) pm[i] = mask->at(2 * r + dr, 2 * c + dc) ? 1 : 0;
            }
        const auto [sum, kept] = detail::ssim_plane(pa, pb, h, w, mask ? &pm : nullptr, a.white_level(), opt);
        if (kept == 0) continue;
        total += sum / static_cast<double>(kept);
        ++channels;
    }
    if (channels == 0) throw RangeError("mask excludes every SSIM window");
    return total / channels;
}

struct MetricReport {
    std::string image_id;
    double psnr = 0.0;
    std::optional<double> ssim; // absent when the image is smaller than the window
    double psnr_masked = 0.0;
    std::optional<double> ssim_masked;
    std::size_t pixel_count = 0;
    std::size_t masked_count = 0;
};

inline MetricReport evaluate_pair(const raw::RawImage& denoised, const raw::RawImage& reference, const noise::DefectiveMask& mask,
                                  const SsimOptions& opt = {}, std::string image_id = {}) {
    MetricReport r;
    r.image_id = std::move(image_id);
    r.psnr = psnr(denoised, reference);
    r.psnr_masked = psnr(denoised, reference, &mask);
    if (ssim_defined(reference, opt)) {
        r.ssim = ssim(denoised, reference, nullptr, opt);
        r.ssim_masked = ssim(denoised, reference, &mask, opt);
    }
    r.pixel_count = reference.data.size();
    r.masked_count = mask.popcount();
    return r;
}

inline nlohmann::json metric_to_json(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

inline nlohmann::json metric_to_json(const std::optional<double>& v) { return v ? metric_to_json(*v) : nlohmann::json(nullptr); }

inline double metric_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return kInf;
        if (s == "-inf") return -kInf;
        throw FormatError("bad metric value '" + s + "'");
    }
    return j.get<double>();
}

inline nlohmann::json to_json(const MetricReport& r) {
    return {{"image_id", r.image_id},
            {"psnr", metric_to_json(r.psnr)},
            {"ssim", metric_to_json(r.ssim)},
            {"psnr_masked", metric_to_json(r.psnr_masked)},
            {"ssim_masked", metric_to_json(r.ssim_masked)},
            {"pixel_count", r.pixel_count},
            {"masked_count", r.masked_count}};
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
    try {
        MetricReport r;
        r.image_id = j.at("image_id").get<std::string>();
        r.psnr = metric_from_json(j.at("psnr"));
        if (!j.at("ssim").is_null()) r.ssim = metric_from_json(j.at("ssim"));
        r.psnr_masked = metric_from_json(j.at("psnr_masked"));
        if (!j.at("ssim_masked").is_null()) r.ssim_masked = metric_from_json(j.at("ssim_masked"));
        r.pixel_count = j.at("pixel_count").get<std::size_t>();
        r.masked_count = j.at("masked_count").get<std::size_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad metric report: ") + e.what());
    }
}

namespace detail {

inline std::string csv_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string csv_number(const std::optional<double>& v) { return v ? csv_number(*v) : std::string(); }

} // namespace detail

inline std::string csv_summary(const std::vector<MetricReport>& reports) {
    std::string out = "image_id,psnr,ssim,psnr_masked,ssim_masked\n";
    for (const auto& r : reports) {
        out += r.image_id + "," + detail::csv_number(r.psnr) + "," + detail::csv_number(r.ssim) + "," +
               detail::csv_number(r.psnr_masked) + "," + detail::csv_number(r.ssim_masked) + "\n";
    }
    return out;
}

} // namespace node::metrics
