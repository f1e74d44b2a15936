#ifndef VNSC_AUTOGRAD_HPP
#define VNSC_AUTOGRAD_HPP

#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vnsc/tensor.hpp"

namespace vnsc {

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename Scalar>
struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<Scalar>&)> backward_fn;

    Tensor<Scalar>& grad_buffer() {
        if (grad.empty()) grad = Tensor<Scalar>(value.shape());
        return grad;
    }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename Scalar>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<Scalar> value, bool requires_grad = false)
        : node_(std::make_shared<Node<Scalar>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit operator bool() const { return static_cast<bool>(node_); }

    const Tensor<Scalar>& value() const { return node_->value; }
    Tensor<Scalar>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    Index dim(std::size_t axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    bool has_grad() const { return !node_->grad.empty(); }
    const Tensor<Scalar>& grad() const { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<Scalar>(); }

    /// Adds `g` to this node's gradient if it participates in differentiation.
    template <typename Derived>
    void accumulate(const Eigen::MatrixBase<Derived>& g) const {
        if (!requires_grad()) return;
        node_->grad_buffer().vec() += g;
    }

    Node<Scalar>* node() const { return node_.get(); }
    const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }

    /// Scalar value of a one-element variable.
    Scalar item() const { return node_->value[0]; }

private:
    std::shared_ptr<Node<Scalar>> node_;
};

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
    return Var<Scalar>(std::move(value), false);
}

/// Wraps an op result. The backward closure receives d(loss)/d(result) and
/// must accumulate into whichever parents require gradients.
template <typename Scalar, typename Backward>
Var<Scalar> make_result(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> parents,
                        Backward&& backward) {
    Var<Scalar> out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& p : parents) {
        if (p.requires_grad()) node->parents.push_back(p.shared());
    }
    node->backward_fn = std::forward<Backward>(backward);
    return out;
}

/// Runs reverse accumulation from a one-element `root`, seeding d(root)=1.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw UsageError("backward() requires a scalar root");

    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> visited;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node(), 0}};
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<Scalar>* parent = node->parents[next++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().vec().array() += Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Scalar>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
    }
}

} // namespace vnsc

#endif // VNSC_AUTOGRAD_HPP
