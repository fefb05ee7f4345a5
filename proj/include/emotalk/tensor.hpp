#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "emotalk/errors.hpp"
#include "emotalk/rng.hpp"

namespace emotalk {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Global (per-thread) switch: when off, ops run forward-only and record nothing.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorNode {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad; // lazily allocated, same length as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Accumulates this node's grad into its parents' grads. Captures parents
    // by shared_ptr and itself by raw pointer (the node owns the closure, so
    // a shared capture of self would leak the whole graph).
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0f);
    }
};

// Handle to one node of the recorded computation graph. Values are 32-bit
// floats in row-major order; the grad buffer appears after a backward pass.
class GradTensor {
public:
    GradTensor() = default;
    explicit GradTensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static GradTensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
        check_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("values length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        return GradTensor(std::move(n));
    }

    static GradTensor full(Shape shape, float value, bool requires_grad = false) {
        check_shape(shape);
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static GradTensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0f, requires_grad);
    }

    static GradTensor scalar(float value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    // Uniform(lo, hi) entries from the given stream; the standard parameter init
    // is rand_uniform(shape, -1/sqrt(fan_in), +1/sqrt(fan_in), rng, true).
    static GradTensor rand_uniform(Shape shape, double lo, double hi, Rng& rng,
                                   bool requires_grad = false) {
        check_shape(shape);
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }

    const std::vector<float>& values() const { return node_->values; }
    float* data() { return node_->values.data(); }
    const float* data() const { return node_->values.data(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        if (rg && (node_->backward_fn || !node_->parents.empty()))
            throw NumericError("requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = rg;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<float>& grad() const {
        if (node_->grad.empty()) throw NumericError("tensor has no grad buffer");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }

    float item() const {
        if (numel() != 1) throw DimensionError("item() requires a single-element tensor, shape is " +
                                               shape_str(node_->shape));
        return node_->values[0];
    }

    // Row-major element access, mostly for tests.
    float at(std::initializer_list<std::int64_t> idx) const {
        if (idx.size() != node_->shape.size())
            throw IndexError("index rank mismatch for shape " + shape_str(node_->shape));
        std::int64_t flat = 0, i = 0;
        for (auto v : idx) {
            if (v < 0 || v >= node_->shape[static_cast<std::size_t>(i)])
                throw IndexError("index out of range for shape " + shape_str(node_->shape));
            flat = flat * node_->shape[static_cast<std::size_t>(i)] + v;
            ++i;
        }
        return node_->values[static_cast<std::size_t>(flat)];
    }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

    // Reverse-mode sweep from a scalar. Every requires_grad tensor reachable
    // through the recorded graph ends up with a populated (possibly zero) grad.
    void backward() const {
        if (!node_) throw NumericError("backward on empty tensor");
        if (numel() != 1)
            throw NumericError("backward requires a scalar, shape is " + shape_str(node_->shape));

        std::vector<TensorNode*> order; // post-order: parents before dependents
        std::unordered_set<TensorNode*> seen;
        std::vector<std::pair<TensorNode*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            TensorNode* n = stack.back().first;
            std::size_t& i = stack.back().second;
            if (i < n->parents.size()) {
                TensorNode* p = n->parents[i].get();
                ++i; // advance before push: push_back may invalidate the reference
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        node_->ensure_grad();
        node_->grad[0] = 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode* n = *it;
            if (n->requires_grad) n->ensure_grad();
            if (n->backward_fn) n->backward_fn();
        }
    }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("shape must have at least one dim");
        for (auto d : shape)
            if (d <= 0) throw DimensionError("shape dims must be positive, got " + shape_str(shape));
    }

    std::shared_ptr<TensorNode> node_;
};

using NamedParams = std::vector<std::pair<std::string, GradTensor>>;

} // namespace emotalk
