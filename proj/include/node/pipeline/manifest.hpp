#pragma once

#include <node/common.hpp>
#include <node/random.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace node::pipeline {

inline constexpr const char* kManifestFormat = "node-manifest/v1";

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw FormatError("split must be 'train' or 'test', got '" + s + "'");
}

// Paths are stored relative to the manifest's directory.
struct ManifestEntry {
    std::string id;
    std::string noisy_path; // empty when burst_dir is set
    std::string burst_dir;
    std::string clean_path;
    std::string mask_path;
    Split split = Split::train;
    std::string variant;
    std::string device;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
    std::filesystem::path root; // directory the relative paths resolve against
    std::vector<ManifestEntry> entries;
    std::string hash;

    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    std::vector<const ManifestEntry*> select(std::optional<Split> split, const std::string& variant = {}) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries) {
            if (split && e.split != *split) continue;
            if (!variant.empty() && e.variant != variant) continue;
            out.push_back(&e);
        }
        return out;
    }
};

// 64-bit FNV-1a, used for content hashes written into artifacts.
class Fnv64 {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= b[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void text(const std::string& s) {
        const std::uint64_t n = s.size();
        bytes(&n, sizeof n);
        bytes(s.data(), s.size());
    }
    void file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot read '" + path.string() + "'");
        const std::string content{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        text(content);
    }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
    nlohmann::json j{{"id", e.id}, {"split", to_string(e.split)}};
    if (!e.noisy_path.empty()) j["noisy_path"] = e.noisy_path;
    if (!e.burst_dir.empty()) j["burst_dir"] = e.burst_dir;
    if (!e.clean_path.empty()) j["clean_path"] = e.clean_path;
    if (!e.mask_path.empty()) j["mask_path"] = e.mask_path;
    if (!e.variant.empty()) j["variant"] = e.variant;
    if (!e.device.empty()) j["device"] = e.device;
    return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
    static const std::set<std::string> keys{"id", "noisy_path", "burst_dir", "clean_path", "mask_path", "split", "variant", "device"};
    if (!j.is_object()) throw FormatError("manifest entry must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!keys.count(it.key())) throw FormatError("unknown manifest entry key '" + it.key() + "'");
    }
    ManifestEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.split = split_from_string(j.at("split").get<std::string>());
        e.noisy_path = j.value("noisy_path", std::string{});
        e.burst_dir = j.value("burst_dir", std::string{});
        e.clean_path = j.value("clean_path", std::string{});
        e.mask_path = j.value("mask_path", std::string{});
        e.variant = j.value("variant", std::string{});
        e.device = j.value("device", std::string{});
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(std::string("malformed manifest entry: ") + ex.what());
    }
    if (e.id.empty()) throw FormatError("manifest entry id is empty");
    if (e.noisy_path.empty() == e.burst_dir.empty()) {
        throw FormatError("manifest entry '" + e.id + "' needs exactly one of noisy_path and burst_dir");
    }
    return e;
}

// Hash over the entry list and the bytes of every referenced file, in order.
inline std::string content_hash(const Manifest& m) {
    Fnv64 h;
    for (const auto& e : m.entries) {
        h.text(to_json(e).dump());
        for (const auto* rel : {&e.noisy_path, &e.clean_path, &e.mask_path}) {
            if (!rel->empty()) h.file(m.resolve(*rel));
        }
        if (!e.burst_dir.empty()) {
            std::vector<std::filesystem::path> files;
            for (const auto& f : std::filesystem::directory_iterator(m.resolve(e.burst_dir))) files.push_back(f.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) h.file(f);
        }
    }
    return h.hex();
}

inline void validate(const Manifest& m) {
    std::set<std::string> ids;
    std::map<std::string, Split> sources;
    for (const auto& e : m.entries) {
        if (!ids.insert(e.id).second) throw FormatError("duplicate manifest id '" + e.id + "'");
        for (const auto* rel : {&e.noisy_path, &e.burst_dir, &e.clean_path, &e.mask_path}) {
            if (!rel->empty() && !std::filesystem::exists(m.resolve(*rel))) {
                throw FormatError("manifest entry '" + e.id + "' references missing '" + *rel + "'");
            }
        }
        // The same source (clean image or capture) may not straddle splits.
        for (const auto* rel : {&e.clean_path, &e.noisy_path, &e.burst_dir}) {
            if (rel->empty()) continue;
            const auto [it, fresh] = sources.emplace(*rel, e.split);
            if (!fresh && it->second != e.split) throw FormatError("'" + *rel + "' appears in both train and test splits");
        }
    }
}

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) entries.push_back(to_json(e));
    return {{"format", kManifestFormat}, {"hash", m.hash}, {"entries", entries}};
}

// Writes through a temporary file and a rename so a manifest on disk always
// marks a completed dataset.
inline void save_manifest(Manifest m, const std::filesystem::path& path) {
    m.root = path.parent_path();
    validate(m);
    m.hash = content_hash(m);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
        out << to_json(m).dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

inline Manifest load_manifest(const std::filesystem::path& path, bool verify_hash = true) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!j.is_object() || j.value("format", std::string{}) != kManifestFormat) {
        throw FormatError("'" + path.string() + "' is not a " + std::string(kManifestFormat) + " manifest");
    }
    Manifest m;
    m.root = path.parent_path();
    m.hash = j.value("hash", std::string{});
    for (const auto& e : j.at("entries")) m.entries.push_back(entry_from_json(e));
    validate(m);
    if (verify_hash && !m.hash.empty() && content_hash(m) != m.hash) {
        throw FormatError("manifest '" + path.string() + "' content hash mismatch");
    }
    return m;
}

// Seeded assignment of `count` sources to splits; exactly round(fraction *
// count) land in test.
inline std::vector<Split> assign_splits(std::size_t count, double test_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    rng::Stream s(seed, 0);
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[s.below(i)]);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(count)));
    std::vector<Split> out(count, Split::train);
    for (std::size_t i = 0; i < n_test; ++i) out[order[i]] = Split::test;
    return out;
}

} // namespace node::pipeline
