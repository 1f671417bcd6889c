#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "oscar/core/tensor.hpp"

namespace oscar {

// Dynamic-graph reverse-mode autodiff. Each op returns a fresh Node holding the
// value and a closure that scatters the node's gradient into its parents.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor::zeros(value.shape());
    }
    void accumulate(const Tensor& g) {
        ensure_grad();
        const Real* s = g.data();
        Real* d = grad.data();
        for (std::size_t i = 0; i < grad.numel(); ++i) d[i] += s[i];
    }
};

inline Var make_leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Tensor v) { return make_leaf(std::move(v), false); }
inline Var parameter(Tensor v) { return make_leaf(std::move(v), true); }

// Thread-local gradient mode; NoGradGuard disables graph construction so frozen
// forward passes (teacher, feature extraction) cost nothing extra.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Backprop from a scalar root. Clears nothing; callers zero parameter grads
// between steps via Adam::zero_grad or Node::grad.fill(0).
void backward(const Var& root);

}  // namespace oscar
