#pragma once

#include <node/arch/config.hpp>
#include <node/autograd.hpp>
#include <node/random.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace node::arch {

enum class Activation { none, leaky };

struct ConvLayer {
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 0;
    bool transpose = false;
    Activation activation = Activation::leaky;
    // Input channel that output channel 0 copies at initialisation (centre
    // tap), or -1 for no identity component.
    int identity_from = -1;
};

// U-Net style encoder/decoder with one pixel-shuffle level per shuffle stage
// and max-pool/transposed-conv levels below it.
template <class T>
class Network {
public:
    Network() = default;

    Network(NetworkConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        validate_common(cfg_);
        plan();
        initialise(seed);
    }

    const NetworkConfig& config() const { return cfg_; }
    const std::vector<ConvLayer>& layers() const { return layers_; }
    const ag::ParameterList<T>& parameters() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    // Level widths: level 0 is the full-resolution decoder width.
    int width(int level) const { return cfg_.base_channels << level; }

    ag::Tensor<T> operator()(const ag::Tensor<T>& x) const {
        const auto& s = x.shape();
        if (s.c != cfg_.in_channels) {
            throw ShapeError("network expects " + std::to_string(cfg_.in_channels) + " channels, got " + s.str());
        }
        const int f = cfg_.downsampling_factor();
        if (s.h % f != 0 || s.w % f != 0) {
            throw ShapeError("spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is not divisible by " +
                             std::to_string(f));
        }
        std::size_t next = 0;
        auto apply = [&](const ag::Tensor<T>& in) { return run(next++, in); };
        auto apply_convs = [&](ag::Tensor<T> h) {
            for (int i = 0; i < cfg_.convs_per_stage; ++i) h = apply(h);
            return h;
        };

        ag::Tensor<T> h = x;
        for (int i = 0; i < cfg_.head_conv_count; ++i) h = apply(h);
        std::vector<ag::Tensor<T>> skips{h};
        if (cfg_.bottleneck) h = apply(h);

        const int levels = cfg_.shuffle_stages + cfg_.pool_stages;
        for (int k = 1; k <= levels; ++k) {
            h = k <= cfg_.shuffle_stages ? ag::space_to_depth(h, 2) : ag::maxpool2d(h, 2, 2);
            h = apply_convs(h);
            if (k < levels) skips.push_back(h);
        }
        for (int k = levels; k >= 1; --k) {
            if (k > cfg_.shuffle_stages) {
                h = apply(h); // transposed conv, stride 2
            } else {
                h = ag::depth_to_space(apply(h), 2);
            }
            h = ag::concat_channels<T>({h, skips[static_cast<std::size_t>(k - 1)]});
            h = apply_convs(h);
        }
        return apply(h);
    }

private:
    NetworkConfig cfg_;
    std::vector<ConvLayer> layers_;
    ag::ParameterList<T> params_;
    std::vector<std::pair<ag::Tensor<T>, ag::Tensor<T>>> weights_;

    void add(std::string name, int in, int out, int kernel, Activation act = Activation::leaky, bool transpose = false,
             int identity_from = 0) {
        ConvLayer l;
        l.identity_from = transpose ? -1 : identity_from;
        l.name = std::move(name);
        l.in_channels = in;
        l.out_channels = out;
        l.kernel = kernel;
        l.transpose = transpose;
        l.stride = transpose ? 2 : 1;
        l.padding = transpose ? 0 : kernel / 2;
        l.activation = act;
        layers_.push_back(std::move(l));
    }

    // Records every convolution in the order operator() consumes them.
    void plan() {
        const int k = cfg_.kernel_size;
        int c = cfg_.in_channels;
        for (int i = 0; i < cfg_.head_conv_count; ++i) {
            add("head." + std::to_string(i), c, width(0), k);
            c = width(0);
        }
        std::vector<int> skip_channels{c};
        if (cfg_.bottleneck) {
            add("bottleneck", c, std::max(1, width(0) / 2), 1);
            c = std::max(1, width(0) / 2);
        }
        const int levels = cfg_.shuffle_stages + cfg_.pool_stages;
        for (int lv = 1; lv <= levels; ++lv) {
            const bool shuffle = lv <= cfg_.shuffle_stages;
            if (shuffle) c *= 4;
            const std::string stage = std::string("enc.") + (shuffle ? "shuffle" : "pool") + std::to_string(lv);
            for (int i = 0; i < cfg_.convs_per_stage; ++i) {
                add(stage + "." + std::to_string(i), c, width(lv), k);
                c = width(lv);
            }
            if (lv < levels) skip_channels.push_back(c);
        }
        for (int lv = levels; lv >= 1; --lv) {
            const bool shuffle = lv <= cfg_.shuffle_stages;
            const std::string stage = std::string("dec.") + (shuffle ? "shuffle" : "pool") + std::to_string(lv);
            if (shuffle) {
                add(stage + ".expand", c, 4 * width(lv - 1), k, Activation::leaky, false, -1);
            } else {
                add(stage + ".up", c, width(lv - 1), 2, Activation::leaky, true);
            }
            c = width(lv - 1) + skip_channels[static_cast<std::size_t>(lv - 1)];
            for (int i = 0; i < cfg_.convs_per_stage; ++i) {
                // The first conv after a concat starts out forwarding the skip.
                add(stage + "." + std::to_string(i), c, width(lv - 1), k, Activation::leaky, false, i == 0 ? width(lv - 1) : 0);
                c = width(lv - 1);
            }
        }
        add("final", c, cfg_.out_channels, 1, Activation::none);
    }

    // He-normal weights scaled for the leaky-ReLU gain, plus (by default) a
    // centre-tap identity so that the untrained network passes its input's
    // non-negative part through the full-resolution skip. Zero biases.
    void initialise(std::uint64_t seed) {
        const double slope = cfg_.leaky_slope;
        for (const auto& l : layers_) {
            const ag::Shape ws = l.transpose ? ag::Shape{l.in_channels, l.out_channels, l.kernel, l.kernel}
                                             : ag::Shape{l.out_channels, l.in_channels, l.kernel, l.kernel};
            const double fan_in = l.transpose ? double(l.in_channels) * l.kernel * l.kernel / (l.stride * l.stride)
                                              : double(l.in_channels) * l.kernel * l.kernel;
            const double gain = l.activation == Activation::leaky ? std::sqrt(2.0 / (1.0 + slope * slope)) : 1.0;
            const double sd = gain / std::sqrt(fan_in);
            rng::Stream stream(rng::derive_seed(seed, l.name), 0);
            std::vector<T> w(ws.size());
            for (auto& v : w) v = static_cast<T>(sd * cfg_.init_noise_scale * stream.normal());
            if (cfg_.identity_init && l.identity_from >= 0) {
                const int ctr = (l.kernel / 2) * l.kernel + l.kernel / 2;
                for (int o = 0; o < l.out_channels && l.identity_from + o < l.in_channels; ++o) {
                    w[(static_cast<std::size_t>(o) * l.in_channels + l.identity_from + o) * l.kernel * l.kernel + ctr] += T(1);
                }
            }
            auto wt = ag::Tensor<T>::from(ws, std::move(w), true);
            auto bt = ag::Tensor<T>::zeros({1, l.out_channels, 1, 1}, true);
            params_.push_back({l.name + ".weight", wt});
            params_.push_back({l.name + ".bias", bt});
            weights_.emplace_back(wt, bt);
        }
    }

    ag::Tensor<T> run(std::size_t idx, const ag::Tensor<T>& in) const {
        const auto& l = layers_.at(idx);
        const auto& [w, b] = weights_[idx];
        ag::ConvOptions opt{l.stride, l.padding};
        auto y = l.transpose ? ag::conv_transpose2d(in, w, b, opt) : ag::conv2d(in, w, b, opt);
        return l.activation == Activation::leaky ? ag::leaky_relu(y, cfg_.leaky_slope) : y;
    }
};

template <class T>
Network<T> build_subnetwork(const NetworkConfig& cfg, std::uint64_t seed) {
    validate_subnet(cfg);
    return Network<T>(cfg, seed);
}

template <class T>
Network<T> build_denoiser(const NetworkConfig& cfg, std::uint64_t seed) {
    validate_denoiser(cfg);
    return Network<T>(cfg, seed);
}

} // namespace node::arch
