#pragma once

// Procedural clean raw scenes for demos, tests and toy training.

#include <node/random.hpp>
#include <node/raw_core.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace node::synth {

struct SceneParams {
    int width = 128; // raw mosaic pixels, even
    int height = 128;
    int shapes = 12;
    double min_level = 0.05; // fraction of the usable range above black
    double max_level = 0.7;
};

// Piecewise-smooth scene: a tilted background plus random discs and
// rectangles, each with its own per-CFA-channel colour gain.
inline raw::RawImage scene(const SceneParams& p, std::uint64_t seed, raw::RawMeta meta = {}) {
    if (p.width < 2 || p.height < 2 || p.width % 2 || p.height % 2) throw DimensionError("scene size must be even and positive");
    rng::Stream s(rng::derive_seed(seed, "scene"), 0);
    auto uni = [&](double a, double b) { return a + (b - a) * s.uniform(); };
    struct Shape {
        bool disc;
        double cy, cx, ry, rx, level;
        double gain[4];
    };
    std::vector<Shape> shapes(static_cast<std::size_t>(p.shapes));
    for (auto& sh : shapes) {
        sh.disc = s.uniform() < 0.5;
        sh.cy = uni(0, p.height);
        sh.cx = uni(0, p.width);
        sh.ry = uni(0.05, 0.3) * p.height;
        sh.rx = uni(0.05, 0.3) * p.width;
        sh.level = uni(p.min_level, p.max_level);
        for (double& g : sh.gain) g = uni(0.6, 1.0);
    }
    const double gx = uni(-0.3, 0.3), gy = uni(-0.3, 0.3), base = uni(p.min_level, 0.5 * (p.min_level + p.max_level));
    const double range = meta.white_level() - meta.black_level;
    raw::RawImage img(p.width, p.height, meta);
    for (int r = 0; r < p.height; ++r) {
        for (int c = 0; c < p.width; ++c) {
            const int ch = (r % 2) * 2 + (c % 2);
            double v = base + gx * (c / double(p.width) - 0.5) + gy * (r / double(p.height) - 0.5);
            for (const auto& sh : shapes) {
                const double dy = (r - sh.cy) / sh.ry, dx = (c - sh.cx) / sh.rx;
                const bool inside = sh.disc ? dy * dy + dx * dx <= 1.0 : std::fabs(dy) <= 1.0 && std::fabs(dx) <= 1.0;
                if (inside) v = sh.level * sh.gain[ch];
            }
            v = std::clamp(v, 0.0, 1.0);
            img.at(r, c) = static_cast<std::uint16_t>(std::lround(meta.black_level + v * range));
        }
    }
    return img;
}

} // namespace node::synth
