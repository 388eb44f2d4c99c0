#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "msti/tensor.hpp"

namespace msti {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
    Node& parent(std::size_t i) { return *parents[i]; }
};

/// Handle to a node of the dynamic computation graph. Copies alias the same node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient accumulated by the last backward pass (zeros if none reached this node).
    const Tensor<T>& grad() const { return node_->ensure_grad(); }
    Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (node_->grad.size() == node_->value.size()) node_->grad.fill(T(0));
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates an interior node. The backward closure is dropped when no parent needs gradients.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar root; seeds d(root)/d(root) = 1.
template <typename T>
void backward(const Var<T>& root);

}  // namespace msti
