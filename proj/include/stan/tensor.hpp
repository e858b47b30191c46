#pragma once
// Dense row-major tensor with a define-by-run reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a storage node. Operations never mutate
// their inputs; they allocate a fresh node and, when a Tape is active on the
// calling thread and some input requires a gradient, append a backward
// closure to that tape. Tape::backward() walks the entries in reverse
// insertion order, which is a valid reverse topological order because every
// output is created after its parents.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stan/error.hpp"

namespace stan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    std::vector<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
};

template <class T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

}  // namespace detail

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape) : Tensor(shape, std::vector<T>(shape_numel(shape), T{0})) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
        if (shape_numel(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " +
                             shape_str(shape));
        node_ = std::make_shared<detail::Node<T>>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::span<const T> data() const { return node_->data; }
    /// Direct write access, intended for parameter initialisation and optimisers.
    std::span<T> mutable_data() { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    T at(std::size_t i) const { return node_->data.at(i); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.assign(node_->data.size(), T{0}); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    /// Deep copy of the values, detached from any tape.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

template <class T>
class Tape {
public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;
    using BackwardFn = std::function<void(const std::vector<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(NodePtr output, std::vector<NodePtr> parents, BackwardFn fn) {
        if (consumed_) throw std::logic_error("recording onto a tape that already ran backward");
        entries_.push_back({std::move(output), std::move(parents), std::move(fn)});
    }

    /// Populates the gradient of every reachable requires_grad tensor.
    void backward(const Tensor<T>& loss) {
        if (consumed_) throw std::logic_error("backward called twice without Tape::reset()");
        if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
        if (!std::isfinite(static_cast<double>(loss.item())))
            throw NumericalError("non-finite loss value");
        if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any requires_grad tensor");
        consumed_ = true;
        loss.node()->grad_buffer()[0] += T{1};
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            auto& out = *it->output;
            if (out.grad.size() != out.data.size()) continue;  // not reachable from the loss
            it->fn(out.grad);
        }
    }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    /// Parent handles of entry i, for order checks.
    const std::vector<NodePtr>& parents(std::size_t i) const { return entries_.at(i).parents; }
    const NodePtr& output(std::size_t i) const { return entries_.at(i).output; }

private:
    struct Entry {
        NodePtr output;
        std::vector<NodePtr> parents;
        BackwardFn fn;
    };
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

template <class T>
Tape<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

/// Makes `tape` the recording target for Tensor<T> ops on this thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording on this thread (inference mode).
template <class T>
class NoTapeScope {
public:
    NoTapeScope() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoTapeScope() { detail::active_tape_slot<T>() = previous_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape<T>* previous_;
};

template <class T>
void check_finite(const Tensor<T>& t, std::string_view where) {
    for (auto v : t.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericalError("non-finite value in " + std::string(where));
}

/// Converts values between precisions (no gradient link).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
    std::vector<To> out(t.numel());
    std::transform(t.data().begin(), t.data().end(), out.begin(), [](From v) { return static_cast<To>(v); });
    return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace stan
