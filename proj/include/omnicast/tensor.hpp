// Copyright (C) 2026 omnicast contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "omnicast/error.hpp"
#include "omnicast/rng.hpp"

namespace omnicast {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// 64-byte aligned storage. Vectorized kernels pick their code path from the
/// buffer address, so a fixed alignment keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {
inline thread_local bool grad_mode = true;
}

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <class T>
struct TensorNode {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Receives this node's upstream gradient and accumulates into parents.
    std::function<void(const Buffer<T>&)> backward;

    void accumulate(std::size_t i, T g) {
        if (grad.empty()) grad.assign(data.size(), T(0));
        grad[i] += g;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

/// Dense row-major n-d array. Copies are shallow handles onto the same node,
/// like framework tensors; use clone() for an independent value.
template <class T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() : node_(std::make_shared<Node>()) {}
    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }
    Tensor(Shape shape, Buffer<T> values) : node_(std::make_shared<Node>()) {
        if (values.size() != shape_numel(shape))
            throw ContractViolation("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }
    Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{}, Buffer<T>{v}); }
    static Tensor randn(Shape s, RngStream& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.node_->data) v = static_cast<T>(rng.normal() * stddev);
        return t;
    }
    static Tensor uniform(Shape s, RngStream& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.node_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    Buffer<T>& vec() { return node_->data; }
    const Buffer<T>& vec() const { return node_->data; }
    std::vector<T> values() const { return {node_->data.begin(), node_->data.end()}; }
    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        require(!node_->backward, "set_requires_grad on a non-leaf tensor");
        node_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient as a tensor (zeros if nothing accumulated yet).
    Tensor grad() const {
        if (node_->grad.empty()) return Tensor(shape());
        return Tensor(shape(), node_->grad);
    }
    std::span<const T> grad_data() const { return node_->grad; }
    Buffer<T>& grad_vec() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    const std::string& op() const { return node_->op; }
    bool is_leaf() const { return !node_->backward; }

    Tensor detach() const { return Tensor(shape(), node_->data); }
    Tensor clone() const { return detach(); }

    /// Replaces values in place (parameter updates, checkpoint loads).
    void assign(std::span<const T> values) {
        require(values.size() == numel(), "assign: size mismatch");
        std::copy(values.begin(), values.end(), node_->data.begin());
    }

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same_node(const Tensor& o) const { return node_ == o.node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
void check_finite(const Buffer<T>& v, const std::string& op, const char* what = "non-finite output") {
    // x - x is 0 for finite x and NaN otherwise; the reduction vectorizes.
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> a(v.data(), static_cast<Eigen::Index>(v.size()));
    if (!v.empty() && !((a - a).sum() == T(0))) throw NumericFault(op, what);
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ts) {
    if (!grad_enabled()) return false;
    for (auto* t : ts)
        if (t && t->requires_grad()) return true;
    return false;
}

/// Builds an op output; attaches `backward` only when some input needs grad.
template <class T, class BackFn>
Tensor<T> make_result(Shape shape, Buffer<T>&& data, std::string op,
                      std::initializer_list<const Tensor<T>*> inputs, BackFn&& backward) {
    check_finite(data, op);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = std::move(op);
    if (any_requires_grad<T>(inputs)) {
        node->requires_grad = true;
        for (auto* t : inputs)
            if (t && t->requires_grad()) node->parents.push_back(t->node());
        node->backward = std::forward<BackFn>(backward);
    }
    return Tensor<T>(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are reset on every call.
template <class T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    using NodePtr = std::shared_ptr<TensorNode<T>>;
    std::vector<NodePtr> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    if (!loss.requires_grad()) return;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            NodePtr p = n->parents[next++];
            if (seen.insert(p.get()).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto& n : order)
        if (n->backward) n->grad.assign(n->data.size(), T(0));
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& n = *it;
        if (n->backward) n->backward(n->grad);
    }
    for (auto& n : order) {
        if (!n->backward) detail::check_finite(n->grad, "backward", "non-finite gradient");
    }
    // Interior buffers are not needed after the sweep.
    for (auto& n : order)
        if (n->backward && n.get() != loss.node().get()) Buffer<T>().swap(n->grad);
}

}  // namespace omnicast
