#include "fsdet/autodiff.hpp"

#include <unordered_set>

namespace fsdet::ad {

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> make_backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.defined()) {
            n->requires_grad = n->requires_grad || p.node()->requires_grad;
            n->parents.push_back(p.node());
        }
    }
    if (n->requires_grad && make_backward) {
        make_backward(*n);
    }
    return Var(n);
}

namespace {

void topo_visit(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    // Iterative DFS; graphs can be a few thousand nodes deep through the
    // multi-stage cascade.
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({n, 0});
    seen.insert(n);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
}

}  // namespace

void backward(const Var& root) {
    if (!root.defined()) throw Error("backward: undefined root");
    if (root.val().numel() != 1) {
        throw ShapeError("backward: root must be scalar, got shape " + root.val().shape_str());
    }
    Node* r = root.node().get();
    if (!r->requires_grad) return;

    std::unordered_set<Node*> seen;
    std::vector<Node*> order;  // parents before children
    topo_visit(r, seen, order);

    r->ensure_grad();
    r->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad_ready) {
            n->backward();
        }
    }
}

}  // namespace fsdet::ad
