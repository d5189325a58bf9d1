#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fsdet/tensor.hpp"

namespace fsdet::ad {

// Reverse-mode autodiff over Tensor. Each forward op appends a node whose
// backward closure scatters the node's grad into its parents. Parameter
// leaves persist across steps; op nodes die with the graph.
struct Node {
    Tensor value;
    Tensor grad;            // lazily allocated, same shape as value
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;  // empty for leaves

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(value.shape());
            grad_ready = true;
        }
        return grad;
    }
    void zero_grad() {
        if (grad_ready) grad.fill(0.0);
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& val() const { return node_->value; }
    Tensor& mutable_val() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad_ready; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::shared_ptr<Node>& node() const { return node_; }

    double scalar() const { return node_->value[0]; }

private:
    std::shared_ptr<Node> node_;
};

// Creates an op node. requires_grad propagates from parents.
Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> make_backward);

// Runs reverse accumulation from a scalar root (seed dL/droot = 1).
void backward(const Var& root);

}  // namespace fsdet::ad
