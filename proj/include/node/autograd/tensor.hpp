#pragma once

// Reverse-mode differentiable NCHW tensors. Every op node owns its value, a
// lazily allocated gradient, the nodes it was computed from and two closures:
// `forward` recomputes the value from the inputs, `backward` accumulates the
// node's gradient into the inputs' gradients.

#include <node/common.hpp>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace node::ag {

struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
    friend bool operator==(const Shape&, const Shape&) = default;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> forward;
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = shape;
        n->data.assign(shape.size(), T(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != shape.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " + shape.str());
        }
        auto n = std::make_shared<Node<T>>();
        n->shape = shape;
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::span<T> grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& op() const { return node_->op; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
        return node_->data[0];
    }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    // Same values, cut from the graph.
    Tensor detach() const { return from(shape(), node_->data, false); }

    void backward();
    void backward(std::span<const T> seed);

private:
    std::shared_ptr<Node<T>> node_;
};

// Nodes reachable from `root` through gradient-carrying edges, inputs before
// consumers. Each node appears once even when it fans out.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!root->requires_grad) return order;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* in = node->inputs[next++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

template <class T>
void Tensor<T>::backward(std::span<const T> seed) {
    if (seed.size() != size()) throw ShapeError("backward seed does not match tensor shape");
    const auto order = topological_order(node_.get());
    if (order.empty()) return;
    auto& g = node_->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
    }
}

template <class T>
void Tensor<T>::backward() {
    if (size() != 1) throw ShapeError("backward() without seed requires a scalar, got " + shape().str());
    const T one[1] = {T(1)};
    backward(std::span<const T>(one, 1));
}

// Creates an op node: runs `forward` once to fill the value and keeps the
// closures and inputs only when some input needs a gradient.
template <class T>
Tensor<T> make_op(std::string op, Shape shape, std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> forward,
                  std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->op = std::move(op);
    n->shape = shape;
    n->data.assign(shape.size(), T(0));
    n->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.shared());
    forward(*n);
    if (n->requires_grad) {
        n->forward = std::move(forward);
        n->backward = std::move(backward);
    } else {
        n->inputs.clear();
    }
    return Tensor<T>(std::move(n));
}

} // namespace node::ag
