#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "uvl/error.hpp"
#include "uvl/rng.hpp"

namespace uvl {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    if (s.empty()) return "scalar";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_enabled_flag(); }

// RAII switch that turns off graph recording (forward-only evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct GraphNode;

/// Value handle with shared storage plus an optional autograd edge. Copying a
/// Tensor copies the handle, not the numbers.
class Tensor {
public:
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;
    bool requires_grad = false;
    std::shared_ptr<GraphNode> node;

    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return filled(shape, 0.0, requires_grad);
    }

    static Tensor filled(const Shape& shape, double value, bool requires_grad = false) {
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<double>>(shape_numel(shape), value);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from_values(const Shape& shape, std::vector<double> values,
                              bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ShapeError("from_values: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<double>>(std::move(values));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar_of(double value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    static Tensor randn(const Shape& shape, RngStream& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        Tensor t = zeros(shape, requires_grad);
        for (double& v : *t.data) v = rng.gaussian(0.0, stddev);
        return t;
    }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg && !grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
        if (!rg) grad.reset();
    }

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t ndim() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : 1; }
    bool defined() const { return static_cast<bool>(data); }

    double& at(std::size_t i) { return (*data)[i]; }
    double at(std::size_t i) const { return (*data)[i]; }
    double& at(std::size_t r, std::size_t c) { return (*data)[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return (*data)[r * shape[1] + c]; }

    double scalar() const {
        if (numel() != 1)
            throw ShapeError("scalar(): tensor has " + std::to_string(numel()) + " elements");
        return (*data)[0];
    }

    double grad_at(std::size_t i) const { return (*grad)[i]; }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }

    // Handle copy without the graph edge. Shares data and grad storage.
    Tensor detached_view() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        t.grad = grad;
        t.requires_grad = requires_grad;
        return t;
    }

    void backward() const; // defined after GraphNode
};

/// One recorded op: the tensors it consumed, a detached view of what it
/// produced (shares storage, carries no node, so no ownership cycle), and the
/// gradient routine. Parent handles live both here (for traversal) and inside
/// the backward closure (for accumulation).
struct GraphNode {
    std::vector<Tensor> parents;
    Tensor output;
    std::function<void(const Tensor&)> backward;
};

/// Reverse-mode backward from a scalar. Seeds d(self)/d(self) = 1 and
/// accumulates gradients into every requires_grad tensor reachable through
/// the recorded graph. Order is reverse post-order of a DFS over the graph
/// structure, so replays are bit-identical.
inline void Tensor::backward() const {
    if (numel() != 1)
        throw ShapeError("backward(): loss must be a scalar, got " + shape_str(shape));
    if (!requires_grad || !grad) throw Error("backward(): tensor does not require grad");
    (*grad)[0] += 1.0;
    if (!node) return;

    std::vector<GraphNode*> order;
    std::unordered_set<GraphNode*> visited;
    struct Frame {
        GraphNode* n;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    visited.insert(node.get());
    stack.push_back({node.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            const Tensor& p = f.n->parents[f.next_parent++];
            if (p.node && !visited.count(p.node.get())) {
                visited.insert(p.node.get());
                stack.push_back({p.node.get(), 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    // post-order lists producers before consumers; reversed, every node runs
    // after all nodes that consume its output
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        GraphNode* n = *it;
        if (n->backward) n->backward(n->output);
    }
}

// Attach a graph node to `out` computing gradients for `parents`. No-op when
// autograd is disabled or no parent tracks gradients.
inline void attach_node(Tensor& out, std::vector<Tensor> parents,
                        std::function<void(const Tensor&)> backward) {
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad;
    if (!any || !grad_enabled()) return;
    out.set_requires_grad(true);
    out.node = std::make_shared<GraphNode>();
    out.node->parents = std::move(parents);
    out.node->output = out.detached_view();
    out.node->backward = std::move(backward);
}

} // namespace uvl
