#include <node/raw_core.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

using namespace node;
using namespace node::raw;

namespace {

RawImage random_raw(std::uint64_t seed, int w, int h, int bits = 10) {
    RawMeta meta;
    meta.bit_depth = bits;
    meta.black_level = 64;
    meta.iso = 12800;
    meta.exposure_tag = "short-" + std::to_string(seed);
    RawImage img(w, h, meta);
    rng::Stream s(seed, 0);
    for (auto& v : img.data) v = static_cast<std::uint16_t>(s.below(static_cast<std::uint64_t>(meta.white_level()) + 1));
    return img;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("node_raw_core_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST(PackBayer, SingleTile) {
    RawImage raw(2, 2);
    raw.data = {10, 20, 30, 40};
    const auto p = pack_bayer(raw);
    EXPECT_EQ(p.width_half, 1);
    EXPECT_EQ(p.height_half, 1);
    EXPECT_EQ(p.planes[0], std::vector<std::uint16_t>{10});
    EXPECT_EQ(p.planes[1], std::vector<std::uint16_t>{20});
    EXPECT_EQ(p.planes[2], std::vector<std::uint16_t>{30});
    EXPECT_EQ(p.planes[3], std::vector<std::uint16_t>{40});
    EXPECT_EQ(unpack_bayer(p), raw);
}

TEST(PackBayer, ConstantStaysConstant) {
    RawImage raw(4, 4);
    std::fill(raw.data.begin(), raw.data.end(), 77);
    const auto p = pack_bayer(raw);
    for (const auto& plane : p.planes) {
        EXPECT_EQ(plane.size(), 4u);
        EXPECT_TRUE(std::all_of(plane.begin(), plane.end(), [](auto v) { return v == 77; }));
    }
}

TEST(PackBayer, RejectsOddDimensions) {
    RawImage raw(3, 4);
    EXPECT_THROW(pack_bayer(raw), DimensionError);
    RawImage raw2(4, 5);
    EXPECT_THROW(pack_bayer(raw2), DimensionError);
}

TEST(PackBayer, RoundTripAndMultiset) {
    for (std::uint64_t t = 0; t < 1000; ++t) {
        const auto raw = random_raw(t, 8, 8);
        const auto p = pack_bayer(raw);
        ASSERT_EQ(unpack_bayer(p), raw);
        std::vector<std::uint16_t> a = raw.data, b;
        for (const auto& plane : p.planes) b.insert(b.end(), plane.begin(), plane.end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        ASSERT_EQ(a, b);
    }
}

TEST(UnpackBayer, InverseOnPacked) {
    PackedImage zero(3, 2);
    const auto r = unpack_bayer(zero);
    EXPECT_EQ(r.width, 6);
    EXPECT_EQ(r.height, 4);
    EXPECT_TRUE(std::all_of(r.data.begin(), r.data.end(), [](auto v) { return v == 0; }));
    for (std::uint64_t t = 0; t < 200; ++t) {
        const auto p = pack_bayer(random_raw(t + 5000, 6, 10));
        EXPECT_EQ(pack_bayer(unpack_bayer(p)), p);
    }
}

TEST(RawIo, SaveLoadRoundTrip) {
    const auto dir = temp_dir("roundtrip");
    for (std::uint64_t t = 0; t < 20; ++t) {
        const auto raw = random_raw(t, 16, 16);
        const auto path = dir / ("img" + std::to_string(t) + ".pgm");
        save_raw(raw, path);
        EXPECT_EQ(load_raw(path), raw);
    }
    const auto eight = random_raw(99, 4, 6, 8);
    save_raw(eight, dir / "eight.pgm");
    EXPECT_EQ(load_raw(dir / "eight.pgm"), eight);
}

TEST(RawIo, SampleAboveMaxvalIsRangeError) {
    const auto dir = temp_dir("range");
    const auto path = dir / "bad.pgm";
    RawImage raw(2, 2);
    save_raw(raw, path);
    {
        std::ofstream os(path, std::ios::binary);
        os << "P5\n2 2\n1023\n";
        const unsigned char bytes[] = {0, 1, 0x04, 0x00, 0, 3, 0, 4}; // 1024 in second sample
        os.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
    }
    EXPECT_THROW(load_raw(path), RangeError);
}

TEST(RawIo, TruncatedAndMalformed) {
    const auto dir = temp_dir("trunc");
    const auto path = dir / "t.pgm";
    save_raw(RawImage(4, 4), path);
    {
        std::ofstream os(path, std::ios::binary);
        os << "P5\n4 4\n1023\n";
        os.write("\0\0\0", 3);
    }
    EXPECT_THROW(load_raw(path), TruncatedError);
    {
        std::ofstream os(path, std::ios::binary);
        os << "P6\n4 4\n1023\n";
    }
    try {
        load_raw(path);
        FAIL() << "expected FormatError";
    } catch (const TruncatedError&) {
        FAIL() << "bad magic must not be reported as truncation";
    } catch (const FormatError&) {
    }
}

TEST(RawIo, MissingSidecarNamesPath) {
    const auto dir = temp_dir("sidecar");
    const auto path = dir / "nometa.pgm";
    save_raw(RawImage(2, 2), path);
    std::filesystem::remove(sidecar_path(path));
    try {
        load_raw(path);
        FAIL() << "expected MetadataError";
    } catch (const MetadataError& e) {
        EXPECT_NE(std::string(e.what()).find("nometa.json"), std::string::npos);
    }
}

TEST(Patches, WholeImageAndTiles) {
    auto raw = random_raw(3, 8, 8);
    const auto p = pack_bayer(raw);
    PatchSpec whole{4, 4, 1, 0};
    const auto one = extract_patches(p, whole);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], p);

    PatchSpec tiles{2, 2, 1, 0};
    const auto four = extract_patches(p, tiles);
    ASSERT_EQ(four.size(), 4u);
    PackedImage rebuilt(4, 4, p.meta);
    for (int t = 0; t < 4; ++t) {
        const int r0 = (t / 2) * 2, c0 = (t % 2) * 2;
        for (int ch = 0; ch < 4; ++ch)
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) rebuilt.at(ch, r0 + r, c0 + c) = four[t].at(ch, r, c);
    }
    EXPECT_EQ(rebuilt, p);
}

TEST(Patches, DeterministicUnderSeed) {
    const auto p = pack_bayer(random_raw(11, 64, 64));
    PatchSpec spec{8, std::nullopt, 16, 1234};
    const auto a = extract_patches(p, spec);
    const auto b = extract_patches(p, spec);
    EXPECT_EQ(a, b);
    spec.seed = 1235;
    EXPECT_NE(extract_patches(p, spec), a);
}

TEST(Patches, TooLargeIsDimensionError) {
    const auto p = pack_bayer(random_raw(1, 8, 8));
    EXPECT_THROW(extract_patches(p, PatchSpec{5, 1, 1, 0}), DimensionError);
    EXPECT_THROW(extract_patches(p, PatchSpec{1, 1, 1, 0}), DimensionError);
}

TEST(Augment, InvolutionsAndComposition) {
    for (std::uint64_t t = 0; t < 100; ++t) {
        const auto p = pack_bayer(random_raw(t, 10, 6));
        EXPECT_EQ(augment(p, FlipMode::none), p);
        EXPECT_EQ(augment(augment(p, FlipMode::flip_h), FlipMode::flip_h), p);
        EXPECT_EQ(augment(augment(p, FlipMode::flip_v), FlipMode::flip_v), p);
        EXPECT_EQ(augment(augment(p, FlipMode::flip_hv), FlipMode::flip_hv), p);
        EXPECT_EQ(augment(p, FlipMode::flip_hv), augment(augment(p, FlipMode::flip_v), FlipMode::flip_h));
    }
}

TEST(Augment, FlipIsPerChannel) {
    RawImage raw(4, 2);
    raw.data = {1, 2, 3, 4, 5, 6, 7, 8};
    const auto f = augment(pack_bayer(raw), FlipMode::flip_h);
    // R plane was [1, 3]; mirrored left/right it becomes [3, 1].
    EXPECT_EQ(f.planes[0], (std::vector<std::uint16_t>{3, 1}));
    EXPECT_EQ(f.planes[3], (std::vector<std::uint16_t>{8, 6}));
}
