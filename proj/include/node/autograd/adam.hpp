#pragma once

#include <node/autograd/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace node::ag {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
using ParameterList = std::vector<Parameter<T>>;

template <class T>
void zero_grad(const ParameterList<T>& params) {
    for (const auto& p : params) {
        auto t = p.tensor;
        t.grad(); // allocate
        t.zero_grad();
    }
}

struct AdamHyper {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct AdamState {
    AdamHyper hyper;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

template <class T>
AdamState<T> make_adam(const ParameterList<T>& params, AdamHyper hyper = {}) {
    AdamState<T> s;
    s.hyper = hyper;
    for (const auto& p : params) {
        s.m.emplace_back(p.tensor.size(), T(0));
        s.v.emplace_back(p.tensor.size(), T(0));
    }
    return s;
}

// One bias-corrected Adam update using the gradients currently held by the
// parameters. Parameters without an allocated gradient count as zero-gradient.
template <class T>
void adam_step(const ParameterList<T>& params, AdamState<T>& state) {
    if (state.m.size() != params.size()) throw ShapeError("Adam state does not match parameter list");
    ++state.step;
    const auto& h = state.hyper;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T lr_t = static_cast<T>(h.learning_rate / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(h.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto t = params[k].tensor;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != t.size()) throw ShapeError("Adam moment shape mismatch for '" + params[k].name + "'");
        const bool has = t.has_grad();
        auto w = t.data();
        const T* g = has ? t.node()->grad.data() : nullptr;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const T gi = has ? g[i] : T(0);
            m[i] = b1 * m[i] + (T(1) - b1) * gi;
            v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
            w[i] -= lr_t * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
        }
    }
}

} // namespace node::ag
