#pragma once

// Binary checkpoint container:
//   "NODEckpt" | u32 version | u64 header length | JSON header | payloads
// The header carries caller metadata plus a "tensors" manifest of
// {name, shape, dtype}; payloads follow in manifest order as little-endian
// IEEE-754 values.

#include <node/autograd/adam.hpp>
#include <node/autograd/tensor.hpp>
#include <node/common.hpp>

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace node::ag {

inline constexpr char kCheckpointMagic[8] = {'N', 'O', 'D', 'E', 'c', 'k', 'p', 't'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) {
        return "f32";
    } else {
        static_assert(std::is_same_v<T, double>, "only f32 and f64 tensors are stored");
        return "f64";
    }
}

struct StoredTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::string dtype;
    std::vector<unsigned char> bytes; // little-endian payload

    std::size_t count() const {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }

    template <class T>
    static StoredTensor from(std::string name, std::vector<std::int64_t> shape, std::span<const T> values) {
        using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        StoredTensor s{std::move(name), std::move(shape), dtype_name<T>(), {}};
        s.bytes.resize(values.size() * sizeof(T));
        for (std::size_t i = 0; i < values.size(); ++i) {
            const U bits = std::bit_cast<U>(values[i]);
            for (std::size_t b = 0; b < sizeof(T); ++b) s.bytes[i * sizeof(T) + b] = static_cast<unsigned char>(bits >> (8 * b));
        }
        return s;
    }

    template <class T>
    std::vector<T> values() const {
        if (dtype != dtype_name<T>()) throw CompatibilityError("tensor '" + name + "' stored as " + dtype + ", requested " + dtype_name<T>());
        using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        std::vector<T> out(count());
        for (std::size_t i = 0; i < out.size(); ++i) {
            U bits = 0;
            for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(bytes[i * sizeof(T) + b]) << (8 * b);
            out[i] = std::bit_cast<T>(bits);
        }
        return out;
    }

    friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
    nlohmann::json header = nlohmann::json::object();
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    const StoredTensor& at(const std::string& name) const {
        if (const auto* t = find(name)) return *t;
        throw CompatibilityError("checkpoint has no tensor '" + name + "'");
    }
};

namespace detail {

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw FormatError("unknown tensor dtype '" + dtype + "'");
}

} // namespace detail

inline std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
    nlohmann::json header = ckpt.header;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& t : ckpt.tensors) {
        if (t.bytes.size() != t.count() * detail::dtype_size(t.dtype)) throw ShapeError("tensor '" + t.name + "' payload size mismatch");
        manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", t.dtype}});
    }
    header["tensors"] = std::move(manifest);
    const std::string text = header.dump();
    std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
    auto put = [&](std::uint64_t v, int bytes) {
        for (int b = 0; b < bytes; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
    };
    put(kCheckpointVersion, 4);
    put(text.size(), 8);
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : ckpt.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

inline Checkpoint deserialize(const std::vector<unsigned char>& buf, const std::string& origin = "<memory>") {
    auto need = [&](std::size_t pos, std::size_t n) {
        if (pos + n > buf.size()) throw TruncatedError("checkpoint '" + origin + "' is truncated");
    };
    need(0, 20);
    if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) throw FormatError("'" + origin + "' is not a NODEckpt container");
    auto get = [&](std::size_t pos, int bytes) {
        std::uint64_t v = 0;
        for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(buf[pos + b]) << (8 * b);
        return v;
    };
    const auto version = static_cast<std::uint32_t>(get(8, 4));
    if (version != kCheckpointVersion) throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
    const std::size_t hlen = get(12, 8);
    need(20, hlen);
    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(buf.begin() + 20, buf.begin() + 20 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint '" + origin + "' has a malformed header: " + e.what());
    }
    std::size_t pos = 20 + hlen;
    for (const auto& m : ckpt.header.at("tensors")) {
        StoredTensor t;
        t.name = m.at("name").get<std::string>();
        t.shape = m.at("shape").get<std::vector<std::int64_t>>();
        t.dtype = m.at("dtype").get<std::string>();
        const std::size_t n = t.count() * detail::dtype_size(t.dtype);
        need(pos, n);
        t.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        ckpt.tensors.push_back(std::move(t));
    }
    if (pos != buf.size()) throw FormatError("checkpoint '" + origin + "' has trailing bytes");
    ckpt.header.erase("tensors");
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize(ckpt);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint '" + path.string() + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CompatibilityError("cannot open checkpoint '" + path.string() + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(buf, path.string());
}

template <class T>
std::vector<std::int64_t> shape_vector(const Tensor<T>& t) {
    const auto& s = t.shape();
    return {s.n, s.c, s.h, s.w};
}

template <class T>
void store_parameters(Checkpoint& ckpt, const ParameterList<T>& params, const std::string& prefix = "") {
    for (const auto& p : params) {
        ckpt.tensors.push_back(StoredTensor::from<T>(prefix + p.name, shape_vector(p.tensor), p.tensor.data()));
    }
}

template <class T>
void restore_parameters(const Checkpoint& ckpt, const ParameterList<T>& params, const std::string& prefix = "") {
    for (const auto& p : params) {
        const auto& st = ckpt.at(prefix + p.name);
        if (st.shape != shape_vector(p.tensor)) throw CompatibilityError("shape mismatch for tensor '" + prefix + p.name + "'");
        auto stored = st.template values<T>();
        auto t = p.tensor;
        std::copy(stored.begin(), stored.end(), t.data().begin());
    }
}

template <class T>
void store_adam(Checkpoint& ckpt, const AdamState<T>& state, const ParameterList<T>& params, const std::string& prefix = "adam/") {
    ckpt.header[prefix + "state"] = {{"step", state.step},
                                     {"learning_rate", state.hyper.learning_rate},
                                     {"beta1", state.hyper.beta1},
                                     {"beta2", state.hyper.beta2},
                                     {"epsilon", state.hyper.epsilon}};
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto shape = shape_vector(params[k].tensor);
        ckpt.tensors.push_back(StoredTensor::from<T>(prefix + "m/" + params[k].name, shape, state.m[k]));
        ckpt.tensors.push_back(StoredTensor::from<T>(prefix + "v/" + params[k].name, shape, state.v[k]));
    }
}

template <class T>
AdamState<T> restore_adam(const Checkpoint& ckpt, const ParameterList<T>& params, const std::string& prefix = "adam/") {
    if (!ckpt.header.contains(prefix + "state")) throw CompatibilityError("checkpoint carries no optimizer state");
    const auto& h = ckpt.header.at(prefix + "state");
    AdamState<T> s;
    s.step = h.at("step").get<std::int64_t>();
    s.hyper = {h.at("learning_rate").get<double>(), h.at("beta1").get<double>(), h.at("beta2").get<double>(),
               h.at("epsilon").get<double>()};
    for (const auto& p : params) {
        s.m.push_back(ckpt.at(prefix + "m/" + p.name).template values<T>());
        s.v.push_back(ckpt.at(prefix + "v/" + p.name).template values<T>());
        if (s.m.back().size() != p.tensor.size()) throw CompatibilityError("optimizer state shape mismatch for '" + p.name + "'");
    }
    return s;
}

} // namespace node::ag
