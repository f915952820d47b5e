#pragma once

#include <node/arch/model.hpp>
#include <node/raw_core.hpp>

#include <algorithm>
#include <vector>

namespace node::arch {

struct InferenceOptions {
    // Largest packed-domain side processed in one pass; bigger inputs are tiled.
    int tile_size = 256;
    int overlap = 32;
    // Tile even when the whole image would fit (used to compare both paths).
    bool force_tiling = false;
};

namespace detail {

inline std::vector<int> tile_starts(int length, int tile, int overlap) {
    if (length <= tile) return {0};
    std::vector<int> starts;
    for (int s = 0; s + tile < length; s += tile - overlap) starts.push_back(s);
    starts.push_back(length - tile);
    return starts;
}

// Linear feathering across `overlap` pixels on sides that meet another tile.
inline std::vector<double> feather(int tile, int overlap, bool ramp_in, bool ramp_out) {
    std::vector<double> w(static_cast<std::size_t>(tile), 1.0);
    for (int i = 0; i < tile; ++i) {
        if (ramp_in) w[static_cast<std::size_t>(i)] = std::min(w[static_cast<std::size_t>(i)], (i + 0.5) / overlap);
        if (ramp_out) w[static_cast<std::size_t>(i)] = std::min(w[static_cast<std::size_t>(i)], (tile - i - 0.5) / overlap);
    }
    return w;
}

// Edge-replicates a (1, C, h, w) tensor to (1, C, H, W).
template <class T>
ag::Tensor<T> pad_replicate(const ag::Tensor<T>& x, int H, int W) {
    const auto& s = x.shape();
    if (s.h == H && s.w == W) return x;
    auto out = ag::Tensor<T>::zeros({1, s.c, H, W});
    auto src = x.data();
    auto dst = out.data();
    for (int c = 0; c < s.c; ++c)
        for (int r = 0; r < H; ++r)
            for (int q = 0; q < W; ++q) {
                const int rr = std::min(r, s.h - 1), qq = std::min(q, s.w - 1);
                dst[(static_cast<std::size_t>(c) * H + r) * W + q] = src[(static_cast<std::size_t>(c) * s.h + rr) * s.w + qq];
            }
    return out;
}

template <class T>
ag::Tensor<T> crop_tensor(const ag::Tensor<T>& x, int r0, int c0, int h, int w) {
    const auto& s = x.shape();
    auto out = ag::Tensor<T>::zeros({1, s.c, h, w});
    auto src = x.data();
    auto dst = out.data();
    for (int c = 0; c < s.c; ++c)
        for (int r = 0; r < h; ++r)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * s.h + r0 + r) * s.w + c0), w,
                        dst.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * h + r) * w));
    return out;
}

inline int round_up(int v, int f) { return (v + f - 1) / f * f; }

} // namespace detail

// Denoised packed tensor in the normalised domain, same size as `y`.
template <class T>
ag::Tensor<T> denoise_tensor(const NodeModel<T>& m, const ag::Tensor<T>& y, const InferenceOptions& opt = {}) {
    const auto& s = y.shape();
    if (s.n != 1 || s.c != 4) throw ShapeError("denoise expects a single 4-channel packed image, got " + s.str());
    const int f = m.downsampling_factor();
    if (opt.tile_size < f || opt.tile_size % f != 0) {
        throw ConfigError("tile size must be a positive multiple of " + std::to_string(f));
    }
    if (opt.overlap < 1 || opt.overlap >= opt.tile_size) throw ConfigError("tile overlap must lie in [1, tile size)");
    const int H = detail::round_up(s.h, f), W = detail::round_up(s.w, f);
    const auto padded = detail::pad_replicate(y, H, W);

    ag::Tensor<T> full;
    if (!opt.force_tiling && H <= opt.tile_size && W <= opt.tile_size) {
        full = node_forward(m, padded).denoised;
    } else {
        const int th = std::min(opt.tile_size, H), tw = std::min(opt.tile_size, W);
        const auto rows = detail::tile_starts(H, th, opt.overlap);
        const auto cols = detail::tile_starts(W, tw, opt.overlap);
        std::vector<double> acc(static_cast<std::size_t>(4) * H * W, 0.0), wsum(static_cast<std::size_t>(H) * W, 0.0);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto wr = detail::feather(th, opt.overlap, i > 0, i + 1 < rows.size());
            for (std::size_t j = 0; j < cols.size(); ++j) {
                const auto wc = detail::feather(tw, opt.overlap, j > 0, j + 1 < cols.size());
                const auto out = node_forward(m, detail::crop_tensor(padded, rows[i], cols[j], th, tw)).denoised;
                const auto d = out.data();
                for (int r = 0; r < th; ++r)
                    for (int q = 0; q < tw; ++q) {
                        const double w = wr[static_cast<std::size_t>(r)] * wc[static_cast<std::size_t>(q)];
                        const std::size_t pix = static_cast<std::size_t>(rows[i] + r) * W + cols[j] + q;
                        wsum[pix] += w;
                        for (int c = 0; c < 4; ++c) {
                            acc[static_cast<std::size_t>(c) * H * W + pix] +=
                                w * static_cast<double>(d[(static_cast<std::size_t>(c) * th + r) * tw + q]);
                        }
                    }
            }
        }
        full = ag::Tensor<T>::zeros({1, 4, H, W});
        auto fd = full.data();
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t p = 0; p < wsum.size(); ++p) fd[c * wsum.size() + p] = static_cast<T>(acc[c * wsum.size() + p] / wsum[p]);
    }
    return detail::crop_tensor(full, 0, 0, s.h, s.w);
}

template <class T>
raw::PackedImage denoise_packed(const NodeModel<T>& m, const raw::PackedImage& y, const InferenceOptions& opt = {}) {
    return tensor_to_packed(denoise_tensor(m, packed_to_tensor<T>(y), opt), y.meta);
}

template <class T>
raw::RawImage denoise_image(const NodeModel<T>& m, const raw::RawImage& raw, const InferenceOptions& opt = {}) {
    raw::validate(raw);
    return raw::unpack_bayer(denoise_packed(m, raw::pack_bayer(raw), opt));
}

} // namespace node::arch
