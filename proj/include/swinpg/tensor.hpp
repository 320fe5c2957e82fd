#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "swinpg/errors.hpp"
#include "swinpg/random.hpp"

namespace swinpg {

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

namespace detail {

struct GradSlot {
    virtual ~GradSlot() = default;
    virtual void clear_grad() = 0;
};

template <class T>
struct TensorImpl final : GradSlot {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient arrives
    bool requires_grad = false;
    uint64_t tape_generation = 0;
    int64_t node_id = -1;

    void clear_grad() override { grad.clear(); }

    T* grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }
};

}  // namespace detail

/// Append-only record of differentiable operations. Node inputs always
/// precede the node, so reverse append order is a valid backward schedule.
class Tape {
public:
    struct Node {
        const char* op;
        std::shared_ptr<detail::GradSlot> output;
        std::function<void()> backward;
    };

    int64_t record(Node node) {
        nodes_.push_back(std::move(node));
        return static_cast<int64_t>(nodes_.size()) - 1;
    }

    /// Drops every node; tensors created earlier become leaves.
    void clear() {
        nodes_.clear();
        ++generation_;
    }

    uint64_t generation() const noexcept { return generation_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }

    /// Clears intermediate gradients up to `last`, lets `seed` write the
    /// root gradient, then visits nodes last..0 exactly once.
    void run_backward(int64_t last, const std::function<void()>& seed) {
        for (int64_t i = 0; i <= last; ++i) nodes_[static_cast<std::size_t>(i)].output->clear_grad();
        seed();
        for (int64_t i = last; i >= 0; --i) nodes_[static_cast<std::size_t>(i)].backward();
    }

private:
    std::vector<Node> nodes_;
    uint64_t generation_ = 1;
};

inline Tape& tape() {
    thread_local Tape t;
    return t;
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables tape recording for the current thread within its scope.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major n-dimensional array with reverse-mode autodiff.
///
/// A tensor is a shared handle: copies alias the same storage. Forward ops
/// never mutate their inputs; only optimizers write parameter data in place.
template <class T>
class BasicTensor {
public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
        for (int64_t d : shape) {
            if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
        }
        impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
        impl_->shape = std::move(shape);
    }

    BasicTensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
            throw DimensionError("shape " + shape_string(shape) + " does not match " +
                                 std::to_string(data.size()) + " elements");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, v); }

    static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        BasicTensor t(std::move(shape));
        for (auto& v : t.impl_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static BasicTensor normal(Shape shape, Rng& rng, double std) {
        BasicTensor t(std::move(shape));
        for (auto& v : t.impl_->data) v = static_cast<T>(rng.normal() * std);
        return t;
    }

    static BasicTensor truncated_normal(Shape shape, Rng& rng, double std) {
        BasicTensor t(std::move(shape));
        for (auto& v : t.impl_->data) v = static_cast<T>(rng.truncated_normal(std));
        return t;
    }

    bool defined() const noexcept { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    /// Size of dimension `i`; negative indices count from the end.
    int64_t dim(int64_t i) const {
        const int64_t n = ndim();
        if (i < 0) i += n;
        if (i < 0 || i >= n) throw DimensionError("dimension index out of range for " + shape_string(shape()));
        return impl_->shape[static_cast<std::size_t>(i)];
    }

    std::span<const T> data() const { return impl_->data; }
    std::span<T> mutable_data() { return impl_->data; }
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
        return impl_->data[0];
    }
    T operator[](int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    BasicTensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return {impl_->grad_buffer(), impl_->data.size()}; }
    void zero_grad() { impl_->grad.clear(); }

    /// New leaf holding a copy of the values, cut off from the tape.
    BasicTensor detach() const { return BasicTensor(shape(), impl_->data); }

    BasicTensor clone() const {
        BasicTensor t(shape(), impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    /// True when this tensor is the output of a node on the live tape.
    bool has_node() const {
        return impl_ && impl_->node_id >= 0 && impl_->tape_generation == tape().generation();
    }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

    static BasicTensor from_impl(std::shared_ptr<Impl> impl) {
        BasicTensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;

/// Reverse pass from a scalar loss. Leaf gradients accumulate across calls;
/// gradients of intermediate tensors are recomputed each time.
template <class T>
void backward(const BasicTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    auto impl = loss.impl();
    if (!loss.has_node()) {
        if (!impl->requires_grad) throw ContractError("backward() on a tensor that does not require grad");
        impl->grad_buffer()[0] += T(1);
        return;
    }
    tape().run_backward(impl->node_id, [&] { impl->grad_buffer()[0] += T(1); });
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (const auto* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

template <class T>
void check_finite([[maybe_unused]] const BasicTensor<T>& out, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
    for (T v : out.data()) {
        if (!std::isfinite(v)) throw ContractError(std::string(op) + ": non-finite value in forward output");
    }
#endif
}

/// Links `out` to the tape. `fn` receives the output gradient and is only
/// invoked when some gradient actually reached `out`.
template <class T, class Fn>
void attach(BasicTensor<T>& out, const char* op, Fn fn) {
    auto o = out.impl();
    o->requires_grad = true;
    Tape& t = tape();
    o->tape_generation = t.generation();
    o->node_id = t.record({op, o, [raw = o.get(), fn = std::move(fn)]() mutable {
                               if (raw->grad.empty()) return;
                               fn(std::span<const T>(raw->grad));
                           }});
}

/// Gradient sink for an input; null when the input takes no gradient.
template <class T>
T* sink(const std::shared_ptr<TensorImpl<T>>& impl) {
    return impl && impl->requires_grad ? impl->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace swinpg
