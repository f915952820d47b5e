#pragma once

// Finite-difference verification of backward passes.

#include <node/autograd/adam.hpp>
#include <node/autograd/tensor.hpp>
#include <node/random.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace node::ag {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Coordinates sampled per checked tensor; 0 checks all of them.
    std::size_t max_coords = 0;
    // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    std::string worst;
    bool passed = true;

    std::string summary() const {
        std::string s = passed ? "passed" : "FAILED";
        s += " max_rel_error=" + std::to_string(max_rel_error);
        if (!worst.empty()) s += " worst=" + worst;
        return s;
    }
};

namespace detail {

inline double rel_error(double a, double n, double floor) {
    return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t max_coords, std::uint64_t seed) {
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    if (max_coords == 0 || max_coords >= size) return idx;
    rng::Stream s(seed, size);
    for (std::size_t i = 0; i < max_coords; ++i) std::swap(idx[i], idx[i + s.below(size - i)]);
    idx.resize(max_coords);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline void record(GradCheckReport& r, GradCheckEntry e, double tol) {
    if (r.worst.empty() || e.max_rel_error > r.max_rel_error) {
        r.max_rel_error = e.max_rel_error;
        r.worst = e.name;
    }
    if (!(e.max_rel_error < tol)) r.passed = false;
    r.entries.push_back(std::move(e));
}

} // namespace detail

// End-to-end check of a scalar function of named leaf tensors against central
// differences. `fn` must rebuild the graph from the current leaf values.
template <class T>
GradCheckReport check_gradients(const std::function<Tensor<T>()>& fn, const ParameterList<T>& leaves,
                                 GradCheckOptions opt = {}) {
    for (const auto& p : leaves) {
        auto t = p.tensor;
        t.grad();
        t.zero_grad();
    }
    Tensor<T> out = fn();
    out.backward();
    GradCheckReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto t = leaves[li].tensor;
        const std::vector<T> analytic(t.node()->grad.begin(), t.node()->grad.end());
        GradCheckEntry e{leaves[li].name, 0, 0.0};
        for (std::size_t i : detail::sample_coords(t.size(), opt.max_coords, rng::hash_combine(opt.seed, li))) {
            const T orig = t.data()[i];
            t.data()[i] = orig + static_cast<T>(opt.step);
            const double fp = static_cast<double>(fn().item());
            t.data()[i] = orig - static_cast<T>(opt.step);
            const double fm = static_cast<double>(fn().item());
            t.data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            e.max_rel_error = std::max(e.max_rel_error, detail::rel_error(static_cast<double>(analytic[i]), numeric, opt.floor));
            ++e.checked;
        }
        detail::record(report, std::move(e), opt.tolerance);
    }
    return report;
}

// Node-local check over a recorded graph: for every op node, compare the
// vector-Jacobian product its backward produces for a random cotangent with
// central differences of <cotangent, forward(inputs)>. A failing entry is
// named "<index>:<op>" in topological order, so a wrong backward is
// attributed to the node that owns it.
template <class T>
GradCheckReport check_graph(const Tensor<T>& root, GradCheckOptions opt = {}) {
    GradCheckReport report;
    const auto order = topological_order(root.node());
    for (std::size_t ni = 0; ni < order.size(); ++ni) {
        Node<T>& node = *order[ni];
        if (!node.backward || !node.forward) continue;
        const std::vector<T> saved_out = node.data;
        const std::vector<T> saved_out_grad = node.grad;
        std::vector<std::vector<T>> saved_in_grads;
        for (auto& in : node.inputs) saved_in_grads.push_back(in->grad);

        rng::Stream s(opt.seed, ni);
        std::vector<T> u(node.data.size());
        for (auto& x : u) x = static_cast<T>(s.uniform() * 2.0 - 1.0);
        node.grad = u;
        for (auto& in : node.inputs)
            if (in->requires_grad) in->grad.assign(in->data.size(), T(0));
        node.backward(node);

        GradCheckEntry e{std::to_string(ni) + ":" + node.op, 0, 0.0};
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            auto& in = *node.inputs[k];
            if (!in.requires_grad) continue;
            const std::vector<T> analytic = in.grad;
            for (std::size_t i : detail::sample_coords(in.data.size(), opt.max_coords, rng::hash_combine(opt.seed, ni * 131 + k))) {
                const T orig = in.data[i];
                auto probe = [&](T value) {
                    in.data[i] = value;
                    node.forward(node);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < u.size(); ++j) acc += static_cast<double>(u[j]) * static_cast<double>(node.data[j]);
                    return acc;
                };
                const double fp = probe(orig + static_cast<T>(opt.step));
                const double fm = probe(orig - static_cast<T>(opt.step));
                in.data[i] = orig;
                const double numeric = (fp - fm) / (2.0 * opt.step);
                e.max_rel_error = std::max(e.max_rel_error, detail::rel_error(static_cast<double>(analytic[i]), numeric, opt.floor));
                ++e.checked;
            }
        }
        node.forward(node); // restores any forward-side state such as argmax indices
        node.data = saved_out;
        node.grad = saved_out_grad;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) node.inputs[k]->grad = saved_in_grads[k];
        detail::record(report, std::move(e), opt.tolerance);
    }
    return report;
}

} // namespace node::ag
