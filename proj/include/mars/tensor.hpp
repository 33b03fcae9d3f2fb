#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mars/errors.hpp"

namespace mars {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array with reverse-mode gradient tracking.
///
/// A BasicTensor is a handle: copies share storage and graph position, the
/// way autograd tensors usually behave. Results of ops on tensors that
/// require grad remember their inputs and a backward closure; everything else
/// is a plain value. Gradient buffers exist only on tensors that require grad.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> inputs;
        std::function<void(Node&)> backward;
    };

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check_shape(shape);
        if (data.size() != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        set_requires_grad(requires_grad);
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor scalar(T value, bool requires_grad = false) {
        return BasicTensor({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    // Rank-1 tensors read as a single row.
    std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const T> data() const { return node_->data; }
    // Writable view for initialisation and optimizer updates.
    std::span<T> mutable_data() { return node_->data; }
    const T* row(std::size_t i) const { return node_->data.data() + i * cols(); }

    T item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    T at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on) {
            node_->grad.assign(node_->data.size(), T(0));
        } else {
            node_->grad.clear();
            node_->grad.shrink_to_fit();
        }
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Deep copy without graph history.
    BasicTensor clone(bool requires_grad = false) const {
        return BasicTensor(node_->shape, node_->data, requires_grad);
    }

    /// Element-wise conversion to another scalar type; keeps the trainable flag.
    template <class S>
    BasicTensor<S> cast() const {
        std::vector<S> out(node_->data.begin(), node_->data.end());
        return BasicTensor<S>(node_->shape, std::move(out), requires_grad());
    }

    bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

    /// Reverse pass from a one-element tensor. Gradients accumulate into
    /// every reachable tensor that requires grad.
    void backward() const {
        if (numel() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
        if (!requires_grad()) return;
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // iterative post-order DFS
        std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->inputs.size()) {
                Node* child = n->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) (*it)->backward(**it);
        }
    }

    // Builds an op result. The graph link is only kept when an input needs it.
    static BasicTensor make_result(Shape shape, std::vector<T> data, std::vector<BasicTensor> inputs,
                                   std::function<void(Node&)> backward) {
        BasicTensor out(std::move(shape), std::move(data), false);
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        if (needs) {
            out.set_requires_grad(true);
            for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

    // Accessors for op implementations working on graph nodes.
    static Node& input(Node& n, std::size_t i) { return *n.inputs[i]; }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
        for (std::size_t e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }

    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

}  // namespace mars
