#include "cstn/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace cstn {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw ValueError(std::string("non-finite value in ") + what);
    }
}

Tensor::Tensor(Shape shape, bool requires_grad) {
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->values.assign(static_cast<size_t>(shape_numel(n_->shape)), 0.0);
    n_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->values = std::move(values);
    n_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    Tensor t(shape, requires_grad);
    for (auto& x : t.values()) x = v;
    return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(shape, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t(shape, requires_grad);
    for (auto& x : t.values()) x = rng.normal() * stddev;
    return t;
}

std::vector<double>& Tensor::grad() {
    if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0);
    return n_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (n_->grad.empty()) throw ValueError("tensor has no gradient (backward not run?)");
    return n_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return n_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
        throw ShapeError("index rank mismatch in at()");
    std::int64_t off = 0;
    int d = 0;
    for (int i : idx) {
        if (i < 0 || i >= dim(d)) throw ShapeError("index out of range in at()");
        off = off * dim(d) + i;
        ++d;
    }
    return n_->values[static_cast<size_t>(off)];
}

void Tensor::backward() const { cstn::backward(*this); }

ComputationGraph::ComputationGraph(const Tensor& root) {
    root_ = root.node_ptr();
    if (!root_) throw ValueError("backward on undefined tensor");
    if (!root_->requires_grad) return; // nothing reachable needs gradients

    // Iterative post-order DFS; children (inputs) are emitted before their
    // consumers, which is exactly topological order for a DAG.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<NodePtr, size_t>> stack;
    stack.emplace_back(root_, 0);
    visited.insert(root_.get());
    while (!stack.empty()) {
        auto& [node, next_input] = stack.back();
        bool descended = false;
        while (next_input < node->inputs.size()) {
            const NodePtr& in = node->inputs[next_input++];
            if (in->requires_grad && !visited.count(in.get())) {
                visited.insert(in.get());
                stack.emplace_back(in, 0);
                descended = true;
                break;
            }
        }
        if (descended) continue;
        keep_.push_back(node);
        order_.push_back(node.get());
        stack.pop_back();
    }
}

bool ComputationGraph::is_topologically_ordered() const {
    std::unordered_set<const Node*> seen;
    for (const Node* n : order_) {
        for (const NodePtr& in : n->inputs) {
            if (in->requires_grad && !seen.count(in.get())) return false;
        }
        seen.insert(n);
    }
    return true;
}

void ComputationGraph::run_backward() {
    if (!root_) throw ValueError("backward on undefined tensor");
    if (root_->numel() != 1)
        throw ShapeError("backward requires a scalar root, got " + shape_str(root_->shape));
    if (order_.empty()) return;

    root_->grad_acc()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
#ifdef CSTN_CHECK_FINITE
            for (const NodePtr& in : n->inputs) {
                if (!in->grad.empty()) check_finite(in->grad, n->op);
            }
#endif
        }
    }
}

void backward(const Tensor& root) {
    ComputationGraph g(root);
    if (root.numel() != 1)
        throw ShapeError("backward requires a scalar root, got " + shape_str(root.shape()));
    g.run_backward();
}

namespace detail {

Tensor make_op(const char* name, Shape out_shape, std::vector<double> out_values,
               std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
    if (shape_numel(out_shape) != static_cast<std::int64_t>(out_values.size()))
        throw ShapeError(std::string(name) + ": output size mismatch");
#ifdef CSTN_CHECK_FINITE
    check_finite(out_values, name);
#endif
    auto node = std::make_shared<Node>();
    node->shape = std::move(out_shape);
    node->values = std::move(out_values);
    node->op = name;

    bool needs = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) {
            if (t.defined() && t.requires_grad()) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(node));
}

} // namespace detail

} // namespace cstn
