#pragma once

// Gaussian+Poisson sensor noise: burst calibration, robust variance-line fit,
// defective pixel detection and noise synthesis.

#include <node/common.hpp>
#include <node/random.hpp>
#include <node/raw_core.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace node::noise {

// Standard normal quantile. Acklam's rational approximation followed by one
// Halley step against erfc.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw RangeError("normal quantile requires p in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

struct FitStats {
    std::size_t inlier_count = 0;
    std::size_t total_count = 0;
    double residual_rms = 0.0;

    friend bool operator==(const FitStats&, const FitStats&) = default;
};

// Variance model v(mu) = sigma_r_sq + sigma_s * (mu - black_level).
struct NoiseModel {
    double sigma_r_sq = 0.0;
    double sigma_s = 0.0;
    double black_level = 0.0;
    double white_level = 1023.0;
    double confidence = 0.99;
    FitStats fit_stats;

    double variance_at(double mu) const { return sigma_r_sq + sigma_s * (mu - black_level); }

    friend bool operator==(const NoiseModel&, const NoiseModel&) = default;
};

inline void validate(const NoiseModel& m) {
    if (!(m.sigma_r_sq >= 0.0) || !(m.sigma_s >= 0.0)) throw RangeError("noise model parameters must be non-negative");
    if (!(m.confidence > 0.0 && m.confidence < 1.0)) throw RangeError("confidence must lie in (0, 1)");
    if (!(m.white_level > m.black_level)) throw RangeError("white level must exceed black level");
}

inline nlohmann::json to_json(const NoiseModel& m) {
    return nlohmann::json{{"sigma_r_sq", m.sigma_r_sq},
                          {"sigma_s", m.sigma_s},
                          {"black_level", m.black_level},
                          {"white_level", m.white_level},
                          {"confidence", m.confidence},
                          {"fit_stats",
                           {{"inlier_count", m.fit_stats.inlier_count},
                            {"total_count", m.fit_stats.total_count},
                            {"residual_rms", m.fit_stats.residual_rms}}}};
}

inline NoiseModel noise_model_from_json(const nlohmann::json& j) {
    NoiseModel m;
    try {
        m.sigma_r_sq = j.at("sigma_r_sq").get<double>();
        m.sigma_s = j.at("sigma_s").get<double>();
        m.black_level = j.at("black_level").get<double>();
        m.white_level = j.at("white_level").get<double>();
        m.confidence = j.value("confidence", 0.99);
        if (j.contains("fit_stats")) {
            const auto& f = j.at("fit_stats");
            m.fit_stats.inlier_count = f.at("inlier_count").get<std::size_t>();
            m.fit_stats.total_count = f.at("total_count").get<std::size_t>();
            m.fit_stats.residual_rms = f.at("residual_rms").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed noise model: ") + e.what());
    }
    validate(m);
    return m;
}

struct BurstStats {
    int width = 0;
    int height = 0;
    std::vector<double> mean;
    std::vector<double> variance; // unbiased, n - 1
    int frame_count = 0;
    double black_level = 0.0;
    double white_level = 1023.0;
    // Sample quantization step of the source frames (1 DN for integer raw
    // data, 0 for already-continuous statistics). The fit removes the
    // step^2 / 12 rounding variance so synthesis, which rounds again, does
    // not count it twice.
    double quantization_step = 0.0;
};

inline BurstStats burst_statistics(std::span<const raw::RawImage> frames) {
    if (frames.size() < 2) throw DimensionError("need >= 2 frames, got " + std::to_string(frames.size()));
    const auto& first = frames.front();
    raw::validate(first);
    for (const auto& f : frames) {
        if (f.width != first.width || f.height != first.height) throw DimensionError("burst frames differ in dimensions");
        if (!(f.meta == first.meta)) throw MetadataError("burst", "burst frames differ in metadata");
    }
    BurstStats s;
    s.width = first.width;
    s.height = first.height;
    s.frame_count = static_cast<int>(frames.size());
    s.black_level = first.meta.black_level;
    s.white_level = first.white_level();
    s.quantization_step = 1.0;
    const std::size_t n = first.size();
    s.mean.assign(n, 0.0);
    s.variance.assign(n, 0.0);
    const double count = static_cast<double>(frames.size());
    for (const auto& f : frames) {
        for (std::size_t i = 0; i < n; ++i) s.mean[i] += f.data[i];
    }
    for (auto& m : s.mean) m /= count;
    for (const auto& f : frames) {
        for (std::size_t i = 0; i < n; ++i) {
            const double d = f.data[i] - s.mean[i];
            s.variance[i] += d * d;
        }
    }
    for (auto& v : s.variance) v /= (count - 1.0);
    return s;
}

struct RansacParams {
    int iterations = 500;
    // Absolute residual bound in squared DN; when unset it is
    // threshold_scale times the median absolute residual of a plain
    // least-squares fit.
    std::optional<double> inlier_threshold;
    double threshold_scale = 3.0;
    double min_inlier_fraction = 0.5;
    std::uint64_t seed = 0;
    int bins = 256;
};

struct IntensityVariance {
    double mean = 0.0;
    double variance = 0.0;
    friend auto operator<=>(const IntensityVariance&, const IntensityVariance&) = default;
};

namespace detail {

struct Line {
    double intercept = 0.0;
    double slope = 0.0;
    double operator()(double x) const { return intercept + slope * x; }
};

inline Line weighted_line(std::span<const double> x, std::span<const double> y, std::span<const double> w) {
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        sx += w[i] * x[i];
        sy += w[i] * y[i];
        sxx += w[i] * x[i] * x[i];
        sxy += w[i] * x[i] * y[i];
    }
    const double det = sw * sxx - sx * sx;
    if (!(std::fabs(det) > 0.0)) throw FitError("degenerate variance fit: all intensities equal");
    Line l;
    l.slope = (sw * sxy - sx * sy) / det;
    l.intercept = (sy - l.slope * sx) / sw;
    // Enforce sigma_r_sq >= 0 and sigma_s >= 0 by falling back to the
    // one-parameter fits on the boundary.
    if (l.slope < 0.0) {
        l.slope = 0.0;
        l.intercept = std::max(0.0, sy / sw);
    } else if (l.intercept < 0.0) {
        l.intercept = 0.0;
        l.slope = sxx > 0.0 ? std::max(0.0, sxy / sxx) : 0.0;
    }
    return l;
}

// Least squares with inverse-variance weights, iterated since the weights
// depend on the fitted line.
inline Line reweighted_line(std::span<const double> x, std::span<const double> y) {
    std::vector<double> w(x.size(), 1.0);
    Line l = weighted_line(x, y, w);
    double scale = 0.0;
    for (double v : y) scale = std::max(scale, std::fabs(v));
    const double floor = 1e-3 * scale + 1e-12;
    for (int it = 0; it < 4; ++it) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double p = std::max(l(x[i]), floor);
            w[i] = 1.0 / (p * p);
        }
        l = weighted_line(x, y, w);
    }
    return l;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

} // namespace detail

// Robust fit of variance against intensity. Pairs are put into canonical
// (mean, variance) order first so that the seeded sampling, and therefore
// the result, does not depend on input order.
inline NoiseModel fit_variance_line(std::span<const IntensityVariance> input, double black_level, double white_level,
                                    const RansacParams& params) {
    if (params.iterations < 1) throw RangeError("RANSAC iterations must be >= 1");
    if (!(params.min_inlier_fraction > 0.0 && params.min_inlier_fraction <= 1.0)) {
        throw RangeError("min_inlier_fraction must lie in (0, 1]");
    }
    if (params.inlier_threshold && !(*params.inlier_threshold > 0.0)) throw RangeError("inlier threshold must be positive");
    std::vector<IntensityVariance> pairs(input.begin(), input.end());
    std::sort(pairs.begin(), pairs.end());
    const std::size_t n = pairs.size();
    if (n < 2 || pairs.front().mean == pairs.back().mean) {
        throw FitError("degenerate variance fit: need at least two distinct mean intensities");
    }
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = pairs[i].mean - black_level;
        y[i] = pairs[i].variance;
    }

    double threshold = 0.0;
    if (params.inlier_threshold) {
        threshold = *params.inlier_threshold;
    } else {
        const detail::Line ls = detail::weighted_line(x, y, std::vector<double>(n, 1.0));
        std::vector<double> abs_res(n);
        for (std::size_t i = 0; i < n; ++i) abs_res[i] = std::fabs(y[i] - ls(x[i]));
        double scale = 1.0;
        for (double v : y) scale = std::max(scale, std::fabs(v));
        threshold = std::max(params.threshold_scale * detail::median(std::move(abs_res)), 1e-9 * scale);
    }

    std::vector<char> best_inliers;
    std::size_t best_count = 0;
    double best_sse = 0.0;
    std::vector<char> inliers(n);
    for (int it = 0; it < params.iterations; ++it) {
        rng::Stream s(params.seed, static_cast<std::uint64_t>(it));
        const std::size_t a = s.below(n);
        std::size_t b = s.below(n - 1);
        if (b >= a) ++b;
        if (x[a] == x[b]) continue;
        detail::Line cand;
        cand.slope = (y[b] - y[a]) / (x[b] - x[a]);
        cand.intercept = y[a] - cand.slope * x[a];
        std::size_t count = 0;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = y[i] - cand(x[i]);
            inliers[i] = std::fabs(r) <= threshold;
            if (inliers[i]) {
                ++count;
                sse += r * r;
            }
        }
        if (count > best_count || (count == best_count && count > 0 && sse < best_sse)) {
            best_count = count;
            best_sse = sse;
            best_inliers = inliers;
        }
    }
    if (best_count < 2) throw FitError("RANSAC found no consensus set");

    std::vector<double> xi, yi;
    for (std::size_t i = 0; i < n; ++i) {
        if (best_inliers[i]) {
            xi.push_back(x[i]);
            yi.push_back(y[i]);
        }
    }
    const bool distinct = std::any_of(xi.begin(), xi.end(), [&](double v) { return v != xi.front(); });
    if (!distinct) throw FitError("degenerate variance fit: inliers share one intensity");
    const detail::Line fit = detail::reweighted_line(xi, yi);

    NoiseModel m;
    m.sigma_r_sq = fit.intercept;
    m.sigma_s = fit.slope;
    m.black_level = black_level;
    m.white_level = white_level;
    m.fit_stats.inlier_count = best_count;
    m.fit_stats.total_count = n;
    double ss = 0.0;
    for (std::size_t i = 0; i < xi.size(); ++i) {
        const double r = yi[i] - fit(xi[i]);
        ss += r * r;
    }
    m.fit_stats.residual_rms = std::sqrt(ss / static_cast<double>(xi.size()));
    const double fraction = static_cast<double>(best_count) / static_cast<double>(n);
    if (fraction < params.min_inlier_fraction) {
        throw QualityError("RANSAC inlier fraction " + std::to_string(fraction) + " below minimum " +
                               std::to_string(params.min_inlier_fraction),
                           fraction);
    }
    return m;
}

// Aggregate per-pixel (mean, variance) into equal-population bins ordered by
// mean intensity.
inline std::vector<IntensityVariance> bin_statistics(const BurstStats& stats, int bins) {
    const std::size_t n = stats.mean.size();
    if (n == 0 || stats.variance.size() != n) throw DimensionError("burst statistics are empty or inconsistent");
    std::vector<IntensityVariance> px(n);
    for (std::size_t i = 0; i < n; ++i) px[i] = {stats.mean[i], stats.variance[i]};
    std::sort(px.begin(), px.end());
    const std::size_t nb = std::min<std::size_t>(static_cast<std::size_t>(std::max(bins, 1)), n);
    std::vector<IntensityVariance> out;
    out.reserve(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t lo = b * n / nb;
        const std::size_t hi = (b + 1) * n / nb;
        double sm = 0.0, sv = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            sm += px[i].mean;
            sv += px[i].variance;
        }
        const double cnt = static_cast<double>(hi - lo);
        out.push_back({sm / cnt, sv / cnt});
    }
    return out;
}

inline NoiseModel fit_noise_model(const BurstStats& stats, const RansacParams& params = {}) {
    auto bins = bin_statistics(stats, params.bins);
    const double q = stats.quantization_step * stats.quantization_step / 12.0;
    for (auto& b : bins) b.variance -= q;
    return fit_variance_line(bins, stats.black_level, stats.white_level, params);
}

// Two-sided Gaussian interval mu +/- z * sqrt(variance_at(mu)), clamped to
// [0, white_level].
inline std::pair<double, double> confidence_bounds(const NoiseModel& model, double mu) {
    if (!(mu >= model.black_level && mu <= model.white_level)) {
        throw RangeError("intensity " + std::to_string(mu) + " outside [black_level, white_level]");
    }
    const double z = normal_quantile(0.5 * (1.0 + model.confidence));
    const double half = z * std::sqrt(std::max(0.0, model.variance_at(mu)));
    return {std::max(0.0, mu - half), std::min(model.white_level, mu + half)};
}

struct DefectiveMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bits; // 1 = defective

    DefectiveMask() = default;
    DefectiveMask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

    std::size_t popcount() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
    bool at(int row, int col) const { return bits[static_cast<std::size_t>(row) * width + col] != 0; }

    friend bool operator==(const DefectiveMask&, const DefectiveMask&) = default;
};

inline void save_mask(const DefectiveMask& mask, const std::filesystem::path& path) {
    raw::pgm::Image img{mask.width, mask.height, 255, {}};
    img.data.reserve(mask.bits.size());
    for (auto b : mask.bits) img.data.push_back(b ? 255 : 0);
    raw::pgm::write(path, img);
}

inline DefectiveMask load_mask(const std::filesystem::path& path) {
    const auto img = raw::pgm::read(path);
    if (img.maxval != 255) throw FormatError("mask '" + path.string() + "' must have maxval 255");
    DefectiveMask m(img.width, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        if (img.data[i] != 0 && img.data[i] != 255) throw FormatError("mask '" + path.string() + "' has values other than 0/255");
        m.bits[i] = img.data[i] ? 1 : 0;
    }
    return m;
}

// Median of the burst mean over the 5x5 same-channel neighbourhood (mosaic
// offsets -4..4 in steps of 2), excluding the centre pixel.
inline std::vector<double> local_reference(const BurstStats& stats) {
    std::vector<double> ref(stats.mean.size());
    std::vector<double> nb;
    nb.reserve(24);
    for (int r = 0; r < stats.height; ++r) {
        for (int c = 0; c < stats.width; ++c) {
            nb.clear();
            for (int dr = -4; dr <= 4; dr += 2) {
                const int rr = r + dr;
                if (rr < 0 || rr >= stats.height) continue;
                for (int dc = -4; dc <= 4; dc += 2) {
                    const int cc = c + dc;
                    if ((dr == 0 && dc == 0) || cc < 0 || cc >= stats.width) continue;
                    nb.push_back(stats.mean[static_cast<std::size_t>(rr) * stats.width + cc]);
                }
            }
            ref[static_cast<std::size_t>(r) * stats.width + c] = detail::median(nb);
        }
    }
    return ref;
}

inline DefectiveMask detect_defective(const BurstStats& stats, const NoiseModel& model) {
    validate(model);
    const auto ref = local_reference(stats);
    DefectiveMask mask(stats.width, stats.height);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double mu = std::clamp(ref[i], model.black_level, model.white_level);
        const auto [lo, hi] = confidence_bounds(model, mu);
        const double m = stats.mean[i];
        mask.bits[i] = (m < lo || m > hi) ? 1 : 0;
    }
    return mask;
}

inline DefectiveMask detect_defective(std::span<const raw::RawImage> frames, const NoiseModel& model) {
    return detect_defective(burst_statistics(frames), model);
}

// ---------------------------------------------------------------------------
// Synthesis

inline std::uint16_t quantize(double v, double white) {
    return static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, white));
}

// Per pixel: Poisson shot noise on the signal above black level with gain
// sigma_s, Gaussian read noise of variance sigma_r_sq, then round and clamp.
// Each pixel draws from its own counter-based stream keyed by (seed, index).
inline raw::RawImage synthesize_gp(const raw::RawImage& clean, const NoiseModel& model, std::uint64_t seed) {
    raw::validate(clean);
    validate(model);
    raw::RawImage out = clean;
    const double white = clean.white_level();
    const double black = model.black_level;
    const double read_sd = std::sqrt(model.sigma_r_sq);
    for (std::size_t i = 0; i < clean.size(); ++i) {
        rng::Stream s(seed, i);
        double signal = clean.data[i] - black;
        if (model.sigma_s > 0.0) {
            const double lambda = std::max(signal, 0.0) / model.sigma_s;
            signal = static_cast<double>(s.poisson(lambda)) * model.sigma_s;
        }
        double v = black + signal;
        if (read_sd > 0.0) v += read_sd * s.normal();
        out.data[i] = quantize(v, white);
    }
    return out;
}

struct DefectSynthesisParams {
    double density = 0.003;
    double hot_fraction = 0.25;
    double dead_fraction = 0.25;
    std::uint64_t seed = 0;
};

inline void validate(const DefectSynthesisParams& p) {
    if (!(p.density > 0.0 && p.density < 1.0)) throw RangeError("defect density must lie in (0, 1)");
    if (p.hot_fraction < 0.0 || p.dead_fraction < 0.0 || p.hot_fraction + p.dead_fraction > 1.0) {
        throw RangeError("hot_fraction + dead_fraction must lie in [0, 1]");
    }
}

// Picks round(density * N) distinct sites by a seeded partial Fisher-Yates
// shuffle. The first round(hot * k) chosen sites go to white level, the next
// round(dead * k) to black level, the rest uniform strictly between.
inline std::pair<raw::RawImage, DefectiveMask> synthesize_defective(const raw::RawImage& clean,
                                                                    const DefectSynthesisParams& params) {
    raw::validate(clean);
    validate(params);
    const std::size_t n = clean.size();
    const auto k = static_cast<std::size_t>(std::llround(params.density * static_cast<double>(n)));
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    rng::Stream s(params.seed, 0);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + s.below(n - i);
        std::swap(idx[i], idx[j]);
    }
    const auto hot = static_cast<std::size_t>(std::llround(params.hot_fraction * static_cast<double>(k)));
    const auto dead = std::min(k - std::min(hot, k), static_cast<std::size_t>(std::llround(params.dead_fraction * static_cast<double>(k))));
    const auto white = static_cast<std::uint16_t>(clean.white_level());
    const auto black = static_cast<std::uint16_t>(std::clamp(std::round(clean.meta.black_level), 0.0, clean.white_level()));
    raw::RawImage out = clean;
    DefectiveMask mask(clean.width, clean.height);
    for (std::size_t i = 0; i < k; ++i) {
        const std::uint32_t p = idx[i];
        mask.bits[p] = 1;
        if (i < hot) {
            out.data[p] = white;
        } else if (i < hot + dead) {
            out.data[p] = black;
        } else {
            const std::uint64_t span = white > black + 1u ? static_cast<std::uint64_t>(white - black - 1) : 1;
            out.data[p] = static_cast<std::uint16_t>(std::min<std::uint64_t>(black + 1 + s.below(span), white));
        }
    }
    return {std::move(out), std::move(mask)};
}

// y = x + v_GP + v_D with the defects written last, so stuck sites override
// whatever the sensor noise produced there.
inline std::pair<raw::RawImage, DefectiveMask> synthesize_mixed(const raw::RawImage& clean, const NoiseModel& model,
                                                                const DefectSynthesisParams& params, std::uint64_t seed) {
    return synthesize_defective(synthesize_gp(clean, model, seed), params);
}

} // namespace node::noise
