#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "cstn/common.hpp"
#include "cstn/rng.hpp"

namespace cstn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value in the computation graph: a dense row-major double array plus
/// the record needed to run its backward rule. Leaf nodes (parameters,
/// inputs) have no inputs and no backward function.
struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad; // empty until backward touches this node

    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    // Reads this->grad and accumulates into each input's grad.
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    double* grad_acc() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad.data();
    }
};

/// Whether newly created ops record backward rules (thread-local).
bool grad_enabled();
void set_grad_enabled(bool on);

/// RAII scope that disables graph recording, for evaluation passes.
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Handle to a graph node. Copying a Tensor aliases the same node.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    /// Gaussian init, mean 0.
    static Tensor randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return n_->numel(); }

    double* data() { return n_->values.data(); }
    const double* data() const { return n_->values.data(); }
    std::vector<double>& values() { return n_->values; }
    const std::vector<double>& values() const { return n_->values; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    bool has_grad() const { return !n_->grad.empty(); }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad() { n_->grad.assign(n_->values.size(), 0.0); }

    /// Value of a rank-0/1-element tensor.
    double item() const;
    /// Convenience element access by multi-index (tests, decode paths).
    double at(std::initializer_list<int> idx) const;

    /// Reverse-mode differentiation from this scalar root.
    void backward() const;

    Node* node() const { return n_.get(); }
    const NodePtr& node_ptr() const { return n_; }

    static Tensor wrap(NodePtr n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    NodePtr n_;
};

/// Linearization of the graph reachable from one root: every node's inputs
/// appear before the node itself, and running backward visits each recorded
/// node exactly once. Only nodes that require grad are recorded; branches
/// that cannot influence any parameter are pruned.
class ComputationGraph {
public:
    explicit ComputationGraph(const Tensor& root);

    const std::vector<Node*>& nodes() const { return order_; }
    size_t size() const { return order_.size(); }
    bool is_topologically_ordered() const;

    /// Seeds d(root)/d(root) = 1 and applies each backward rule once, in
    /// reverse topological order. Gradients accumulate additively across
    /// fan-out. Throws unless the root is a scalar.
    void run_backward();

private:
    NodePtr root_;
    std::vector<NodePtr> keep_; // ownership while walking
    std::vector<Node*> order_;
};

void backward(const Tensor& root);

/// Throws if any element of v is NaN or Inf. Active in debug builds via
/// CSTN_CHECK_FINITE; release builds skip the scan.
void check_finite(const std::vector<double>& v, const char* what);

#ifndef NDEBUG
#define CSTN_CHECK_FINITE 1
#endif

namespace detail {
/// Core op constructor shared by all differentiable operations (also the
/// extension point tests use to build custom/corrupted rules).
Tensor make_op(const char* name, Shape out_shape, std::vector<double> out_values,
               std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);
} // namespace detail

} // namespace cstn
