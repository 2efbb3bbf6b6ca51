#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stsr/error.hpp"
#include "stsr/rng.hpp"

namespace stsr {

namespace detail {

// One recorded operation. The graph is the linked record of these nodes;
// `seq` is the recording order, and because an operation can only consume
// tensors that already exist, sweeping reachable nodes in descending `seq`
// is a valid reverse (adjoint) order.
struct GraphNode {
    std::uint64_t seq = 0;
    int numel = 0;
    std::vector<std::shared_ptr<GraphNode>> parents;
    // Accumulates adjoints into the parents' grad buffers given this node's.
    std::function<void(const std::vector<double>&)> backprop;
    std::vector<double> grad;
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline std::shared_ptr<GraphNode> make_node(
    int numel, std::initializer_list<std::shared_ptr<GraphNode>> parents) {
    auto n = std::make_shared<GraphNode>();
    n->seq = next_seq();
    n->numel = numel;
    for (const auto& p : parents)
        if (p) n->parents.push_back(p);
    return n;
}

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables recording for the current thread while alive.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor of 64-bit floats. Value semantics: the payload is
// shared and never mutated in place, so copies are cheap and tensors already
// recorded on the graph stay valid.
class Tensor {
public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<double>>()) {}

    Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
        check_shape(shape_);
        if (static_cast<std::size_t>(shape_numel(shape_)) != values.size())
            throw DimensionError("Tensor: data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_string(shape_));
        data_ = std::make_shared<std::vector<double>>(std::move(values));
    }

    static Tensor zeros(std::vector<int> shape) {
        int n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(std::vector<int> shape, double v) {
        int n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        int n = shape_numel(shape);
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = stddev * rng.normal();
        return Tensor(std::move(shape), std::move(v));
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int numel() const { return static_cast<int>(data_->size()); }

    const std::vector<double>& values() const { return *data_; }

    double value() const {
        if (numel() != 1) throw DimensionError("Tensor::value: tensor is not a scalar");
        return (*data_)[0];
    }

    double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double at(int i, int j) const {
        return (*data_)[static_cast<std::size_t>(i) * dim(1) + j];
    }
    double at(int i, int j, int k) const {
        return (*data_)[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool requires_grad() const { return node_ != nullptr; }

    // Turns this tensor into a tracked leaf. Its gradient is readable after
    // backward() on any result computed from it.
    Tensor& set_requires_grad() {
        if (!node_) node_ = detail::make_node(numel(), {});
        return *this;
    }

    // Gradient accumulated by the last backward(); zeros if none reached it.
    Tensor grad() const {
        if (!node_ || node_->grad.empty()) return Tensor::zeros(shape_);
        return Tensor(shape_, node_->grad);
    }

    const std::vector<double>& grad_values() const {
        static const std::vector<double> empty;
        if (!node_ || node_->grad.empty()) return empty;
        return node_->grad;
    }

    // Replaces the payload of a leaf (optimizer updates). Allocates a fresh
    // buffer so graphs recorded against the old values are untouched.
    void set_values(std::vector<double> values) {
        if (values.size() != data_->size())
            throw DimensionError("Tensor::set_values: size mismatch");
        data_ = std::make_shared<std::vector<double>>(std::move(values));
    }

    static std::string shape_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }
    std::string shape_string() const { return shape_string(shape_); }

    // --- graph plumbing used by the op definitions ---
    const std::shared_ptr<detail::GraphNode>& node() const { return node_; }
    void attach(std::shared_ptr<detail::GraphNode> n) { node_ = std::move(n); }
    std::shared_ptr<const std::vector<double>> data_ptr() const { return data_; }

private:
    static int shape_numel(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) n *= d;
        return static_cast<int>(n);
    }
    static void check_shape(const std::vector<int>& s) {
        for (int d : s)
            if (d <= 0) throw DimensionError("Tensor: nonpositive dimension in " + shape_string(s));
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<detail::GraphNode> node_;
};

namespace detail {

inline void accumulate(const std::shared_ptr<GraphNode>& node, const std::vector<double>& g) {
    if (!node) return;
    std::vector<double>& dst = node->grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// Reverse sweep from a scalar result: replays the recorded operations in
// reverse order, accumulating adjoints. Leaf gradients are then available
// through Tensor::grad().
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw DimensionError("backward: output must be a scalar");
    if (!loss.node()) throw DomainError("backward: result does not depend on any tracked tensor");

    // Collect the reachable subgraph (iterative; graphs can be deep).
    std::vector<std::shared_ptr<detail::GraphNode>> nodes;
    std::unordered_set<detail::GraphNode*> seen;
    std::vector<std::shared_ptr<detail::GraphNode>> stack{loss.node()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        nodes.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p);
    }

    for (auto& n : nodes) n->grad.assign(static_cast<std::size_t>(n->numel), 0.0);
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->seq > b->seq; });

    loss.node()->grad[0] = 1.0;
    for (auto& n : nodes)
        if (n->backprop) n->backprop(n->grad);
}

}  // namespace stsr
