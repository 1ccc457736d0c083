#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "argen/tensor.hpp"

namespace argen::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One computation-graph node. `backprop` pulls the node's accumulated grad
// and adds each parent's contribution; it is only invoked for nodes on a
// path from a trainable leaf to the root.
struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool trainable = false;
    bool needs_grad = false;
    bool backward_done = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;
    const char* op = "leaf";
};

// Value-semantics handle onto a graph node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool trainable = false);

    const Tensor& value() const { return n_->value; }
    const Tensor& grad() const;
    bool has_grad() const { return n_ && n_->grad.has_value(); }
    bool trainable() const { return n_ && n_->trainable; }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scalar_mul(const Var& a, double s);
Var mul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var slice_cols(const Var& a, std::size_t c0, std::size_t c1);
Var slice_rows(const Var& a, std::size_t r0, std::size_t r1);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& table, std::vector<int> ids);
Var softmax(const Var& a, int axis);
Var logsumexp(const Var& a, int axis);
Var rms_norm(const Var& a, const Var& gain, double eps);
Var silu(const Var& a);
Var sum(const Var& a);

// Scalar -log softmax(logits)[target]; logits rank 1.
Var cross_entropy(const Var& logits, int target);

// Weighted mean of per-row cross-entropy over a T x V logits matrix.
// weights[t] == 0 rows contribute nothing to value or gradient.
Var masked_mean_cross_entropy(const Var& logits, std::vector<int> targets, std::vector<double> weights);

// Reverse pass from a scalar root. Throws on non-scalar roots, on graphs
// with cycles, and on a second call for the same root without reset().
void backward(const Var& root);

// Clears grads and the backward flag across the graph reachable from root.
void reset(const Var& root);

// Max over entries of |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12) where g_fd
// is a central difference with step h. `build` must construct a fresh scalar
// graph over the given leaves; it is evaluated twice to detect
// non-determinism before differencing.
double finite_difference_check(const std::function<Var()>& build, const std::vector<Var>& leaves, double h);

// Single-input convenience form.
double finite_difference_check(const std::function<Var(const Var&)>& f, const Tensor& x, double h);

}  // namespace argen::ad
