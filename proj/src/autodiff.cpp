#include "argen/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>

namespace argen::ad {

namespace {

Var make(const char* op, Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    bool ng = false;
    for (const NodePtr& p : parents) ng = ng || p->needs_grad;
    n->parents = std::move(parents);
    n->needs_grad = ng;
    if (ng) n->backprop = std::move(backprop);
    return Var(std::move(n));
}

// Additive accumulation; leaves that cannot need a gradient are skipped so
// pruned subgraphs never allocate one.
void accum(const NodePtr& p, const Tensor& delta) {
    if (!p->needs_grad) return;
    if (!p->grad) {
        p->grad = delta;
        return;
    }
    Tensor& g = *p->grad;
    if (!g.same_shape(delta)) {
        throw std::logic_error("autodiff: gradient shape mismatch at op " + std::string(p->op));
    }
    double* gd = g.data();
    const double* dd = delta.data();
    for (std::size_t i = 0; i < g.size(); ++i) gd[i] += dd[i];
}

NodePtr checked(const Var& v, const char* what) {
    if (!v.node()) throw std::invalid_argument(std::string(what) + ": empty var");
    return v.node();
}

}  // namespace

Var Var::leaf(Tensor value, bool trainable) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->trainable = trainable;
    n->needs_grad = trainable;
    return Var(std::move(n));
}

const Tensor& Var::grad() const {
    if (!n_ || !n_->grad) throw std::logic_error("Var::grad: no gradient has been accumulated");
    return *n_->grad;
}

Var add(const Var& a, const Var& b) {
    NodePtr na = checked(a, "add"), nb = checked(b, "add");
    return make("add", argen::add(na->value, nb->value), {na, nb}, [na, nb](Node& self) {
        accum(na, *self.grad);
        accum(nb, *self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    NodePtr na = checked(a, "sub"), nb = checked(b, "sub");
    return make("sub", argen::sub(na->value, nb->value), {na, nb}, [na, nb](Node& self) {
        accum(na, *self.grad);
        accum(nb, argen::scalar_mul(*self.grad, -1.0));
    });
}

Var scalar_mul(const Var& a, double s) {
    NodePtr na = checked(a, "scalar_mul");
    return make("scalar_mul", argen::scalar_mul(na->value, s), {na},
                [na, s](Node& self) { accum(na, argen::scalar_mul(*self.grad, s)); });
}

Var mul(const Var& a, const Var& b) {
    NodePtr na = checked(a, "mul"), nb = checked(b, "mul");
    return make("mul", argen::mul(na->value, nb->value), {na, nb}, [na, nb](Node& self) {
        if (na->needs_grad) accum(na, argen::mul(*self.grad, nb->value));
        if (nb->needs_grad) accum(nb, argen::mul(*self.grad, na->value));
    });
}

Var matmul(const Var& a, const Var& b) {
    NodePtr na = checked(a, "matmul"), nb = checked(b, "matmul");
    return make("matmul", argen::matmul(na->value, nb->value), {na, nb}, [na, nb](Node& self) {
        if (na->needs_grad) accum(na, argen::matmul(*self.grad, argen::transpose(nb->value)));
        if (nb->needs_grad) accum(nb, argen::matmul(argen::transpose(na->value), *self.grad));
    });
}

Var transpose(const Var& a) {
    NodePtr na = checked(a, "transpose");
    return make("transpose", argen::transpose(na->value), {na},
                [na](Node& self) { accum(na, argen::transpose(*self.grad)); });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
    NodePtr na = checked(a, "reshape");
    return make("reshape", argen::reshape(na->value, std::move(shape)), {na},
                [na](Node& self) { accum(na, argen::reshape(*self.grad, na->value.shape())); });
}

Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
    NodePtr na = checked(a, "slice_cols");
    return make("slice_cols", argen::slice_cols(na->value, c0, c1), {na}, [na, c0](Node& self) {
        Tensor full = Tensor::zeros(na->value.shape());
        const Tensor& g = *self.grad;
        for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) full.at(r, c0 + c) = g.at(r, c);
        }
        accum(na, full);
    });
}

Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
    NodePtr na = checked(a, "slice_rows");
    return make("slice_rows", argen::slice_rows(na->value, r0, r1), {na}, [na, r0](Node& self) {
        Tensor full = Tensor::zeros(na->value.shape());
        const Tensor& g = *self.grad;
        std::copy(g.data(), g.data() + g.size(), full.data() + r0 * full.cols());
        accum(na, full);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    std::vector<NodePtr> nodes;
    std::vector<Tensor> vals;
    nodes.reserve(parts.size());
    for (const Var& p : parts) {
        nodes.push_back(checked(p, "concat_cols"));
        vals.push_back(nodes.back()->value);
    }
    return make("concat_cols", argen::concat_cols(vals), nodes, [nodes](Node& self) {
        const Tensor& g = *self.grad;
        std::size_t c0 = 0;
        for (const NodePtr& p : nodes) {
            std::size_t w = p->value.cols();
            accum(p, argen::slice_cols(g, c0, c0 + w));
            c0 += w;
        }
    });
}

Var gather_rows(const Var& table, std::vector<int> ids) {
    NodePtr nt = checked(table, "gather_rows");
    Tensor value = argen::gather_rows(nt->value, ids);
    return make("gather_rows", std::move(value), {nt}, [nt, ids = std::move(ids)](Node& self) {
        Tensor full = Tensor::zeros(nt->value.shape());
        const Tensor& g = *self.grad;
        const std::size_t d = full.cols();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* dst = full.data() + static_cast<std::size_t>(ids[i]) * d;
            const double* src = g.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        accum(nt, full);
    });
}

namespace {

// Iterates (base offset, length, stride) slices along axis, mirroring the
// forward kernels' slice order.
template <typename Fn>
void slices(const Tensor& t, int axis, Fn&& fn) {
    if (t.rank() == 1) {
        fn(std::size_t{0}, t.size(), std::size_t{1});
    } else if (axis == 1) {
        for (std::size_t r = 0; r < t.rows(); ++r) fn(r * t.cols(), t.cols(), std::size_t{1});
    } else {
        for (std::size_t c = 0; c < t.cols(); ++c) fn(c, t.rows(), t.cols());
    }
}

}  // namespace

Var softmax(const Var& a, int axis) {
    NodePtr na = checked(a, "softmax");
    Tensor y = argen::softmax(na->value, axis);
    return make("softmax", y, {na}, [na, axis](Node& self) {
        const Tensor& y = self.value;
        const Tensor& dy = *self.grad;
        Tensor dx = Tensor::zeros(na->value.shape());
        slices(y, axis, [&](std::size_t base, std::size_t n, std::size_t stride) {
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += dy[base + i * stride] * y[base + i * stride];
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t k = base + i * stride;
                dx[k] = y[k] * (dy[k] - dot);
            }
        });
        accum(na, dx);
    });
}

Var logsumexp(const Var& a, int axis) {
    NodePtr na = checked(a, "logsumexp");
    Tensor value = argen::logsumexp(na->value, axis);
    return make("logsumexp", std::move(value), {na}, [na, axis](Node& self) {
        Tensor p = argen::softmax(na->value, axis);
        const Tensor& dy = *self.grad;
        std::size_t s = 0;
        slices(p, axis, [&](std::size_t base, std::size_t n, std::size_t stride) {
            const double g = dy[s++];
            for (std::size_t i = 0; i < n; ++i) p[base + i * stride] *= g;
        });
        accum(na, p);
    });
}

Var rms_norm(const Var& a, const Var& gain, double eps) {
    NodePtr na = checked(a, "rms_norm"), ng = checked(gain, "rms_norm");
    Tensor value = argen::rms_norm(na->value, ng->value, eps);
    return make("rms_norm", std::move(value), {na, ng}, [na, ng, eps](Node& self) {
        const Tensor& x = na->value;
        const Tensor& g = ng->value;
        const Tensor& dy = *self.grad;
        const std::size_t rows = x.rows(), d = x.cols();
        Tensor dx = Tensor::zeros(x.shape());
        Tensor dg = Tensor::zeros(g.shape());
        for (std::size_t t = 0; t < rows; ++t) {
            double ms = 0.0;
            for (std::size_t j = 0; j < d; ++j) ms += x.at(t, j) * x.at(t, j);
            ms = ms / static_cast<double>(d) + eps;
            const double inv = 1.0 / std::sqrt(ms);
            double proj = 0.0;  // sum_k dy_k * g_k * x_k
            for (std::size_t j = 0; j < d; ++j) proj += dy.at(t, j) * g[j] * x.at(t, j);
            const double scale = inv * inv * inv / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                dx[t * d + j] = inv * g[j] * dy.at(t, j) - x.at(t, j) * scale * proj;
                if (ng->needs_grad) dg[j] += dy.at(t, j) * x.at(t, j) * inv;
            }
        }
        if (na->needs_grad) accum(na, dx);
        if (ng->needs_grad) accum(ng, dg);
    });
}

Var silu(const Var& a) {
    NodePtr na = checked(a, "silu");
    return make("silu", argen::silu(na->value), {na}, [na](Node& self) {
        const Tensor& x = na->value;
        Tensor dx = *self.grad;
        for (std::size_t i = 0; i < dx.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            dx[i] *= s * (1.0 + x[i] * (1.0 - s));
        }
        accum(na, dx);
    });
}

Var sum(const Var& a) {
    NodePtr na = checked(a, "sum");
    double acc = 0.0;
    for (double v : na->value.values()) acc += v;
    return make("sum", Tensor::vec({acc}), {na}, [na](Node& self) {
        accum(na, Tensor::full(na->value.shape(), (*self.grad)[0]));
    });
}

Var cross_entropy(const Var& logits, int target) {
    NodePtr nl = checked(logits, "cross_entropy");
    double value = cross_entropy_from_logits(nl->value, target);
    return make("cross_entropy", Tensor::vec({value}), {nl}, [nl, target](Node& self) {
        Tensor dl = argen::softmax(nl->value, 0);
        dl[static_cast<std::size_t>(target)] -= 1.0;
        accum(nl, argen::scalar_mul(dl, (*self.grad)[0]));
    });
}

Var masked_mean_cross_entropy(const Var& logits, std::vector<int> targets, std::vector<double> weights) {
    NodePtr nl = checked(logits, "masked_mean_cross_entropy");
    const Tensor& l = nl->value;
    if (l.rank() != 2) throw std::invalid_argument("masked_mean_cross_entropy: logits must be rank 2");
    if (targets.size() != l.rows() || weights.size() != l.rows()) {
        throw std::invalid_argument("masked_mean_cross_entropy: targets/weights length must equal row count");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("masked_mean_cross_entropy: negative weight");
        wsum += w;
    }
    if (wsum <= 0.0) throw std::invalid_argument("masked_mean_cross_entropy: no position selected by the mask");
    double acc = 0.0;
    const std::size_t v = l.cols();
    for (std::size_t t = 0; t < l.rows(); ++t) {
        if (weights[t] == 0.0) continue;
        Tensor row({v});
        std::copy(l.data() + t * v, l.data() + (t + 1) * v, row.data());
        acc += weights[t] * cross_entropy_from_logits(row, targets[t]);
    }
    return make("masked_mean_cross_entropy", Tensor::vec({acc / wsum}), {nl},
                [nl, targets = std::move(targets), weights = std::move(weights), wsum](Node& self) {
                    const Tensor& l = nl->value;
                    const std::size_t v = l.cols();
                    const double g0 = (*self.grad)[0];
                    Tensor dl = Tensor::zeros(l.shape());
                    for (std::size_t t = 0; t < l.rows(); ++t) {
                        if (weights[t] == 0.0) continue;
                        Tensor row({v});
                        std::copy(l.data() + t * v, l.data() + (t + 1) * v, row.data());
                        Tensor p = argen::softmax(row, 0);
                        p[static_cast<std::size_t>(targets[t])] -= 1.0;
                        const double c = g0 * weights[t] / wsum;
                        for (std::size_t j = 0; j < v; ++j) dl[t * v + j] = c * p[j];
                    }
                    accum(nl, dl);
                });
}

void backward(const Var& root) {
    NodePtr rn = checked(root, "backward");
    if (rn->value.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " + rn->value.shape_str());
    }
    if (rn->backward_done) {
        throw std::logic_error("backward: already run for this root; reset() the graph first");
    }
    // Iterative post-order DFS; gray/black coloring doubles as cycle detection.
    std::unordered_map<Node*, int> state;
    std::vector<Node*> order;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(rn.get(), 0);
    state[rn.get()] = 1;
    while (!stack.empty()) {
        Node* n = stack.back().first;
        std::size_t& idx = stack.back().second;
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            int& st = state[p];
            if (st == 1) throw std::logic_error("backward: cycle detected in computation graph");
            if (st == 0) {
                st = 1;
                stack.emplace_back(p, 0);
            }
        } else {
            state[n] = 2;
            order.push_back(n);
            stack.pop_back();
        }
    }
    rn->grad = Tensor::vec({1.0});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->grad && n->backprop) n->backprop(*n);
    }
    rn->backward_done = true;
}

void reset(const Var& root) {
    NodePtr rn = checked(root, "reset");
    std::unordered_map<Node*, bool> seen;
    std::vector<Node*> stack{rn.get()};
    seen[rn.get()] = true;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        n->grad.reset();
        n->backward_done = false;
        for (const NodePtr& p : n->parents) {
            if (!seen[p.get()]) {
                seen[p.get()] = true;
                stack.push_back(p.get());
            }
        }
    }
}

namespace {

double scalar_value(const Var& v, const char* what) {
    if (v.value().size() != 1) throw std::invalid_argument(std::string(what) + ": objective must be scalar");
    return v.value()[0];
}

}  // namespace

double finite_difference_check(const std::function<Var()>& build, const std::vector<Var>& leaves, double h) {
    if (!(h > 0.0) || h > 1e-2) {
        throw std::invalid_argument("finite_difference_check: step must lie in (0, 1e-2]");
    }
    Var r1 = build();
    double v1 = scalar_value(r1, "finite_difference_check");
    Var r2 = build();
    if (!r1.value().bit_equal(r2.value())) {
        throw std::logic_error("finite_difference_check: objective is not deterministic across evaluations");
    }
    (void)v1;
    backward(r1);
    // Snapshot analytic grads before perturbing anything.
    std::vector<Tensor> analytic;
    for (const Var& leaf : leaves) {
        analytic.push_back(leaf.has_grad() ? leaf.grad() : Tensor::zeros(leaf.value().shape()));
    }
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& x = leaves[li].node()->value;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + h;
            const double fp = scalar_value(build(), "finite_difference_check");
            x[i] = orig - h;
            const double fm = scalar_value(build(), "finite_difference_check");
            x[i] = orig;
            const double g_fd = (fp - fm) / (2.0 * h);
            const double g_ad = analytic[li][i];
            const double rel = std::abs(g_ad - g_fd) / (std::abs(g_ad) + std::abs(g_fd) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    for (const Var& leaf : leaves) leaf.node()->grad.reset();
    return worst;
}

double finite_difference_check(const std::function<Var(const Var&)>& f, const Tensor& x, double h) {
    Var leaf = Var::leaf(x, true);
    return finite_difference_check([&]() { return f(leaf); }, {leaf}, h);
}

}  // namespace argen::ad
