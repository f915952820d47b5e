#pragma once

// Raw Bayer mosaics, 4-channel packing, file I/O, patch extraction and flips.

#include <node/common.hpp>
#include <node/random.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace node::raw {

enum class Cfa { RGGB };

inline std::string to_string(Cfa cfa) {
    switch (cfa) {
        case Cfa::RGGB:
            return "RGGB";
    }
    return "?";
}

inline Cfa cfa_from_string(const std::string& s) {
    if (s == "RGGB") return Cfa::RGGB;
    throw FormatError("unsupported CFA pattern '" + s + "'");
}

struct RawMeta {
    Cfa cfa = Cfa::RGGB;
    int bit_depth = 10;
    double black_level = 0.0;
    std::int64_t iso = 0;
    std::string exposure_tag;

    double white_level() const { return static_cast<double>((std::uint32_t{1} << bit_depth) - 1); }

    friend bool operator==(const RawMeta&, const RawMeta&) = default;
};

struct RawImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> data; // row-major, width * height
    RawMeta meta;

    RawImage() = default;
    RawImage(int w, int h, RawMeta m = {}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0), meta(std::move(m)) {}

    std::size_t size() const { return data.size(); }
    std::uint16_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
    std::uint16_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
    double white_level() const { return meta.white_level(); }

    friend bool operator==(const RawImage&, const RawImage&) = default;
};

inline void validate(const RawImage& raw) {
    if (raw.meta.bit_depth < 1 || raw.meta.bit_depth > 16) {
        throw RangeError("bit depth " + std::to_string(raw.meta.bit_depth) + " outside [1, 16]");
    }
    if (raw.width <= 0 || raw.height <= 0 || raw.width % 2 != 0 || raw.height % 2 != 0) {
        throw DimensionError("raw image dimensions must be positive and even, got " + std::to_string(raw.width) + "x" +
                             std::to_string(raw.height));
    }
    if (raw.data.size() != static_cast<std::size_t>(raw.width) * raw.height) {
        throw DimensionError("raw sample count does not match width*height");
    }
    const auto white = static_cast<std::uint32_t>(raw.white_level());
    for (std::uint16_t s : raw.data) {
        if (s > white) throw RangeError("sample " + std::to_string(s) + " exceeds white level " + std::to_string(white));
    }
}

// Channel order R, G1, G2, B for RGGB; channel c sits at mosaic offset
// (c / 2, c % 2) inside each 2x2 tile.
inline constexpr int kPackedChannels = 4;

struct PackedImage {
    int width_half = 0;
    int height_half = 0;
    std::array<std::vector<std::uint16_t>, kPackedChannels> planes;
    RawMeta meta;

    PackedImage() = default;
    PackedImage(int wh, int hh, RawMeta m = {}) : width_half(wh), height_half(hh), meta(std::move(m)) {
        for (auto& p : planes) p.assign(static_cast<std::size_t>(wh) * hh, 0);
    }

    std::size_t plane_size() const { return static_cast<std::size_t>(width_half) * height_half; }
    std::uint16_t at(int c, int row, int col) const { return planes[c][static_cast<std::size_t>(row) * width_half + col]; }
    std::uint16_t& at(int c, int row, int col) { return planes[c][static_cast<std::size_t>(row) * width_half + col]; }

    friend bool operator==(const PackedImage&, const PackedImage&) = default;
};

inline void validate(const PackedImage& p) {
    if (p.width_half <= 0 || p.height_half <= 0) throw DimensionError("packed image must be non-empty");
    for (const auto& plane : p.planes) {
        if (plane.size() != p.plane_size()) throw DimensionError("packed planes must share dimensions");
    }
}

inline PackedImage pack_bayer(const RawImage& raw) {
    validate(raw);
    PackedImage out(raw.width / 2, raw.height / 2, raw.meta);
    for (int r = 0; r < out.height_half; ++r) {
        for (int c = 0; c < out.width_half; ++c) {
            for (int ch = 0; ch < kPackedChannels; ++ch) {
                out.at(ch, r, c) = raw.at(2 * r + ch / 2, 2 * c + ch % 2);
            }
        }
    }
    return out;
}

inline RawImage unpack_bayer(const PackedImage& packed) {
    validate(packed);
    RawImage out(packed.width_half * 2, packed.height_half * 2, packed.meta);
    for (int r = 0; r < packed.height_half; ++r) {
        for (int c = 0; c < packed.width_half; ++c) {
            for (int ch = 0; ch < kPackedChannels; ++ch) {
                out.at(2 * r + ch / 2, 2 * c + ch % 2) = packed.at(ch, r, c);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PGM (P5) and JSON sidecar I/O

namespace pgm {

struct Image {
    int width = 0;
    int height = 0;
    std::uint32_t maxval = 0;
    std::vector<std::uint16_t> data;
};

inline void write(const std::filesystem::path& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
    const bool wide = img.maxval > 255;
    std::vector<char> buf;
    buf.reserve(img.data.size() * (wide ? 2 : 1));
    for (std::uint16_t s : img.data) {
        if (wide) buf.push_back(static_cast<char>(s >> 8));
        buf.push_back(static_cast<char>(s & 0xff));
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw Error("failed writing '" + path.string() + "'");
}

namespace detail {

inline void skip_space_and_comments(std::istream& is) {
    for (;;) {
        int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            is.get();
        } else {
            return;
        }
    }
}

inline long read_header_int(std::istream& is, const std::string& path, const char* field) {
    skip_space_and_comments(is);
    long v = -1;
    if (!(is >> v) || v < 0) throw FormatError("malformed PGM header in '" + path + "': bad " + field);
    return v;
}

} // namespace detail

inline Image read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    char magic[2] = {0, 0};
    is.read(magic, 2);
    if (!is || magic[0] != 'P' || magic[1] != '5') {
        throw FormatError("malformed PGM header in '" + path.string() + "': expected magic P5");
    }
    Image img;
    const long w = detail::read_header_int(is, path.string(), "width");
    const long h = detail::read_header_int(is, path.string(), "height");
    const long maxval = detail::read_header_int(is, path.string(), "maxval");
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) {
        throw FormatError("malformed PGM header in '" + path.string() + "': out-of-range field");
    }
    const int sep = is.get();
    if (sep != ' ' && sep != '\n' && sep != '\t' && sep != '\r') {
        throw FormatError("malformed PGM header in '" + path.string() + "': missing separator");
    }
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.maxval = static_cast<std::uint32_t>(maxval);
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    const bool wide = maxval > 255;
    std::vector<unsigned char> bytes(n * (wide ? 2 : 1));
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(is.gcount()) != bytes.size()) {
        throw TruncatedError("truncated PGM payload in '" + path.string() + "': expected " + std::to_string(bytes.size()) +
                             " bytes, got " + std::to_string(is.gcount()));
    }
    img.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint16_t s = wide ? static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]) : bytes[i];
        if (s > maxval) {
            throw RangeError("sample " + std::to_string(s) + " at index " + std::to_string(i) + " exceeds maxval " +
                             std::to_string(maxval) + " in '" + path.string() + "'");
        }
        img.data[i] = s;
    }
    return img;
}

} // namespace pgm

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    auto p = path;
    p.replace_extension(".json");
    return p;
}

inline nlohmann::json meta_to_json(const RawMeta& m) {
    return nlohmann::json{{"cfa", to_string(m.cfa)},
                          {"bit_depth", m.bit_depth},
                          {"black_level", m.black_level},
                          {"iso", m.iso},
                          {"exposure_tag", m.exposure_tag}};
}

inline RawMeta meta_from_json(const nlohmann::json& j, const std::string& path) {
    if (!j.is_object()) throw MetadataError(path, "sidecar must be a JSON object");
    RawMeta m;
    try {
        m.cfa = cfa_from_string(j.at("cfa").get<std::string>());
        m.bit_depth = j.at("bit_depth").get<int>();
        m.black_level = j.at("black_level").get<double>();
        m.iso = j.at("iso").get<std::int64_t>();
        m.exposure_tag = j.at("exposure_tag").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw MetadataError(path, e.what());
    } catch (const FormatError& e) {
        throw MetadataError(path, e.what());
    }
    if (m.bit_depth < 1 || m.bit_depth > 16) throw MetadataError(path, "bit_depth outside [1, 16]");
    return m;
}

inline void save_raw(const RawImage& raw, const std::filesystem::path& path) {
    validate(raw);
    pgm::write(path, {raw.width, raw.height, static_cast<std::uint32_t>(raw.white_level()), raw.data});
    std::ofstream js(sidecar_path(path), std::ios::binary);
    if (!js) throw Error("cannot write sidecar for '" + path.string() + "'");
    js << meta_to_json(raw.meta).dump(2) << '\n';
}

inline RawImage load_raw(const std::filesystem::path& path) {
    const auto side = sidecar_path(path);
    if (!std::filesystem::exists(side)) throw MetadataError(side.string(), "missing metadata sidecar");
    nlohmann::json j;
    {
        std::ifstream js(side);
        try {
            j = nlohmann::json::parse(js);
        } catch (const nlohmann::json::exception& e) {
            throw MetadataError(side.string(), e.what());
        }
    }
    RawMeta meta = meta_from_json(j, side.string());
    pgm::Image img = pgm::read(path);
    if (img.maxval != static_cast<std::uint32_t>(meta.white_level())) {
        throw MetadataError(side.string(), "bit_depth " + std::to_string(meta.bit_depth) + " disagrees with PGM maxval " +
                                               std::to_string(img.maxval));
    }
    RawImage raw;
    raw.width = img.width;
    raw.height = img.height;
    raw.data = std::move(img.data);
    raw.meta = std::move(meta);
    validate(raw);
    return raw;
}

// ---------------------------------------------------------------------------
// Patches and augmentation (packed domain)

struct PatchSpec {
    int size = 64;
    std::optional<int> stride; // grid mode when set
    int count = 1;             // random mode: number of patches
    std::uint64_t seed = 0;
};

inline PackedImage crop(const PackedImage& img, int row0, int col0, int h, int w) {
    PackedImage out(w, h, img.meta);
    for (int ch = 0; ch < kPackedChannels; ++ch) {
        for (int r = 0; r < h; ++r) {
            const auto* src = img.planes[ch].data() + static_cast<std::size_t>(row0 + r) * img.width_half + col0;
            std::copy(src, src + w, out.planes[ch].data() + static_cast<std::size_t>(r) * w);
        }
    }
    return out;
}

inline std::vector<PackedImage> extract_patches(const PackedImage& img, const PatchSpec& spec) {
    validate(img);
    if (spec.size < 2) throw DimensionError("patch size must be >= 2");
    if (spec.size > std::min(img.width_half, img.height_half)) {
        throw DimensionError("patch size " + std::to_string(spec.size) + " exceeds image " + std::to_string(img.width_half) +
                             "x" + std::to_string(img.height_half));
    }
    std::vector<PackedImage> out;
    if (spec.stride) {
        const int stride = *spec.stride;
        if (stride < 1) throw DimensionError("patch stride must be >= 1");
        for (int r = 0; r + spec.size <= img.height_half; r += stride) {
            for (int c = 0; c + spec.size <= img.width_half; c += stride) out.push_back(crop(img, r, c, spec.size, spec.size));
        }
        return out;
    }
    for (int i = 0; i < spec.count; ++i) {
        rng::Stream s(spec.seed, static_cast<std::uint64_t>(i));
        const int r = static_cast<int>(s.below(static_cast<std::uint64_t>(img.height_half - spec.size + 1)));
        const int c = static_cast<int>(s.below(static_cast<std::uint64_t>(img.width_half - spec.size + 1)));
        out.push_back(crop(img, r, c, spec.size, spec.size));
    }
    return out;
}

enum class FlipMode { none, flip_h, flip_v, flip_hv };

// flip_h mirrors left/right, flip_v top/bottom. Applied per packed channel so
// the CFA phase of each plane is untouched.
inline PackedImage augment(const PackedImage& patch, FlipMode mode) {
    validate(patch);
    if (mode == FlipMode::none) return patch;
    const bool h = mode == FlipMode::flip_h || mode == FlipMode::flip_hv;
    const bool v = mode == FlipMode::flip_v || mode == FlipMode::flip_hv;
    PackedImage out(patch.width_half, patch.height_half, patch.meta);
    for (int ch = 0; ch < kPackedChannels; ++ch) {
        for (int r = 0; r < patch.height_half; ++r) {
            const int sr = v ? patch.height_half - 1 - r : r;
            for (int c = 0; c < patch.width_half; ++c) {
                const int sc = h ? patch.width_half - 1 - c : c;
                out.at(ch, r, c) = patch.at(ch, sr, sc);
            }
        }
    }
    return out;
}

} // namespace node::raw
