#pragma once

// Dense tensor with reverse-mode autodiff. The graph is recorded implicitly:
// every op output keeps references to its inputs plus a closure implementing
// the backward rule. backward() replays the recording in reverse creation
// order, which is a valid reverse topological order.
//
// Numeric policy: element storage is T (float in production builds),
// reductions and dot products accumulate in double and round once.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "kdml/common.hpp"

namespace kdml {

namespace detail {
inline std::atomic<uint64_t> node_counter{1};
}

// log() inputs are clamped to at least this, so CE/KL/focal stay finite
// even for saturated probabilities.
inline constexpr double kLogEps = 1e-12;

template <class T>
struct TensorT;

template <class T>
using TensorPtrT = std::shared_ptr<TensorT<T>>;

template <class T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // persistent; sized on first accumulation
    bool requires_grad = false;

    // graph bookkeeping
    uint64_t id = 0;
    std::vector<TensorPtrT<T>> parents;
    std::function<void(TensorT<T>&)> backprop;  // reads tmp_grad, feeds parents
    std::vector<T> tmp_grad;                    // scratch for one backward pass

    size_t numel() const { return data.size(); }

    bool bw_active() const { return !tmp_grad.empty(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() {
        grad.assign(data.size(), T(0));
    }
};

template <class T>
TensorPtrT<T> make_tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
        throw shape_error("tensor data size " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    auto t = std::make_shared<TensorT<T>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    t->id = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
    if (requires_grad) t->ensure_grad();
    return t;
}

template <class T>
TensorPtrT<T> full(const Shape& shape, T value, bool requires_grad = false) {
    return make_tensor<T>(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <class T>
TensorPtrT<T> zeros(const Shape& shape, bool requires_grad = false) {
    return full<T>(shape, T(0), requires_grad);
}

template <class T>
TensorPtrT<T> ones(const Shape& shape, bool requires_grad = false) {
    return full<T>(shape, T(1), requires_grad);
}

template <class T>
TensorPtrT<T> scalar(T value) {
    return make_tensor<T>({1}, {value});
}

// Op output node. Records the backward closure only when some input needs
// gradients; otherwise the node is a plain constant and the subgraph above
// it is dropped.
template <class T>
TensorPtrT<T> make_op(Shape shape, std::vector<T> data,
                      std::vector<TensorPtrT<T>> parents,
                      std::function<void(TensorT<T>&)> backprop) {
    auto out = make_tensor<T>(std::move(shape), std::move(data));
    bool needs = false;
    for (const auto& p : parents)
        if (p->requires_grad) needs = true;
    if (needs) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    return out;
}

// Detached copy: same values, no history, no gradient.
template <class T>
TensorPtrT<T> detach(const TensorPtrT<T>& t) {
    return make_tensor<T>(t->shape, t->data, false);
}

// Accumulates d(root)/d(node) into .grad of every reachable requires_grad
// tensor. Repeated calls without zero_grad keep accumulating.
template <class T>
void backward(const TensorPtrT<T>& root) {
    if (root->numel() != 1)
        throw contract_error("backward root must be scalar, got shape " +
                             shape_str(root->shape));

    // collect reachable nodes (leaves included)
    std::vector<TensorT<T>*> nodes;
    std::unordered_set<TensorT<T>*> seen;
    std::vector<TensorT<T>*> stack{root.get()};
    while (!stack.empty()) {
        TensorT<T>* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        nodes.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorT<T>* a, const TensorT<T>* b) { return a->id > b->id; });

    for (TensorT<T>* n : nodes) n->tmp_grad.assign(n->numel(), T(0));
    root->tmp_grad[0] = T(1);

    for (TensorT<T>* n : nodes)
        if (n->backprop) n->backprop(*n);

    for (TensorT<T>* n : nodes) {
        if (n->requires_grad) {
            n->ensure_grad();
            for (size_t i = 0; i < n->numel(); ++i) n->grad[i] += n->tmp_grad[i];
        }
        n->tmp_grad.clear();
        n->tmp_grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void check_same_shape(const TensorPtrT<T>& a, const TensorPtrT<T>& b, const char* op) {
    if (a->shape != b->shape)
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                          " vs " + shape_str(b->shape));
}

}  // namespace detail

template <class T>
TensorPtrT<T> add(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    return make_op<T>(
        a->shape, std::move(out), {a, b}, [a, b](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) a->tmp_grad[i] += self.tmp_grad[i];
            if (b->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) b->tmp_grad[i] += self.tmp_grad[i];
        });
}

template <class T>
TensorPtrT<T> sub(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] - b->data[i];
    return make_op<T>(
        a->shape, std::move(out), {a, b}, [a, b](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) a->tmp_grad[i] += self.tmp_grad[i];
            if (b->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) b->tmp_grad[i] -= self.tmp_grad[i];
        });
}

template <class T>
TensorPtrT<T> mul(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    return make_op<T>(
        a->shape, std::move(out), {a, b}, [a, b](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i)
                    a->tmp_grad[i] += self.tmp_grad[i] * b->data[i];
            if (b->bw_active())
                for (size_t i = 0; i < self.numel(); ++i)
                    b->tmp_grad[i] += self.tmp_grad[i] * a->data[i];
        });
}

template <class T>
TensorPtrT<T> div(const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] / b->data[i];
    return make_op<T>(
        a->shape, std::move(out), {a, b}, [a, b](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i)
                    a->tmp_grad[i] += self.tmp_grad[i] / b->data[i];
            if (b->bw_active())
                for (size_t i = 0; i < self.numel(); ++i)
                    b->tmp_grad[i] -= self.tmp_grad[i] * a->data[i] / (b->data[i] * b->data[i]);
        });
}

template <class T>
TensorPtrT<T> scale(const TensorPtrT<T>& a, double c) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a->data[i] * static_cast<T>(c));
    return make_op<T>(
        a->shape, std::move(out), {a}, [a, c](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i)
                    a->tmp_grad[i] += self.tmp_grad[i] * static_cast<T>(c);
        });
}

template <class T>
TensorPtrT<T> add_const(const TensorPtrT<T>& a, double c) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + static_cast<T>(c);
    return make_op<T>(
        a->shape, std::move(out), {a}, [a](TensorT<T>& self) {
            if (a->bw_active())
                for (size_t i = 0; i < self.numel(); ++i) a->tmp_grad[i] += self.tmp_grad[i];
        });
}

template <class T>
TensorPtrT<T> relu(const TensorPtrT<T>& a) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] > T(0) ? a->data[i] : T(0);
    return make_op<T>(
        a->shape, std::move(out), {a}, [a](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i)
                if (a->data[i] > T(0)) a->tmp_grad[i] += self.tmp_grad[i];
        });
}

template <class T>
TensorPtrT<T> sigmoid(const TensorPtrT<T>& a) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(a->data[i]))));
    return make_op<T>(
        a->shape, std::move(out), {a}, [a](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i) {
                T s = self.data[i];
                a->tmp_grad[i] += self.tmp_grad[i] * s * (T(1) - s);
            }
        });
}

// log with the kLogEps clamp; the clamped region has zero derivative.
template <class T>
TensorPtrT<T> log(const TensorPtrT<T>& a) {
    const T eps = static_cast<T>(kLogEps);
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::log(std::max(a->data[i], eps));
    return make_op<T>(
        a->shape, std::move(out), {a}, [a, eps](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i)
                if (a->data[i] > eps) a->tmp_grad[i] += self.tmp_grad[i] / a->data[i];
        });
}

template <class T>
TensorPtrT<T> exp(const TensorPtrT<T>& a) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->data[i]);
    return make_op<T>(
        a->shape, std::move(out), {a}, [a](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i)
                a->tmp_grad[i] += self.tmp_grad[i] * self.data[i];
        });
}

template <class T>
TensorPtrT<T> square(const TensorPtrT<T>& a) {
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * a->data[i];
    return make_op<T>(
        a->shape, std::move(out), {a}, [a](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t i = 0; i < self.numel(); ++i)
                a->tmp_grad[i] += self.tmp_grad[i] * T(2) * a->data[i];
        });
}

// x^p for constant p >= 0 and x >= 0 (probability-style bases).
template <class T>
TensorPtrT<T> pow_const(const TensorPtrT<T>& a, double p) {
    if (p < 0.0) throw contract_error("pow_const: exponent must be >= 0");
    std::vector<T> out(a->numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(std::pow(static_cast<double>(a->data[i]), p));
    return make_op<T>(
        a->shape, std::move(out), {a}, [a, p](TensorT<T>& self) {
            if (!a->bw_active() || p == 0.0) return;
            for (size_t i = 0; i < self.numel(); ++i) {
                double x = static_cast<double>(a->data[i]);
                double d;
                if (x > 0.0)
                    d = p * std::pow(x, p - 1.0);
                else
                    d = (p == 1.0) ? 1.0 : 0.0;
                a->tmp_grad[i] += self.tmp_grad[i] * static_cast<T>(d);
            }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> sum(const TensorPtrT<T>& a) {
    double acc = 0.0;
    for (size_t i = 0; i < a->numel(); ++i) acc += static_cast<double>(a->data[i]);
    return make_op<T>(
        {1}, {static_cast<T>(acc)}, {a}, [a](TensorT<T>& self) {
            if (!a->bw_active()) return;
            T g = self.tmp_grad[0];
            for (size_t i = 0; i < a->numel(); ++i) a->tmp_grad[i] += g;
        });
}

template <class T>
TensorPtrT<T> mean(const TensorPtrT<T>& a) {
    const size_t n = a->numel();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>(a->data[i]);
    return make_op<T>(
        {1}, {static_cast<T>(acc / static_cast<double>(n))}, {a}, [a, n](TensorT<T>& self) {
            if (!a->bw_active()) return;
            T g = static_cast<T>(static_cast<double>(self.tmp_grad[0]) / static_cast<double>(n));
            for (size_t i = 0; i < n; ++i) a->tmp_grad[i] += g;
        });
}

// Reduce all dims except the leading (batch) one: [B, ...] -> [B]
template <class T>
TensorPtrT<T> sum_per_sample(const TensorPtrT<T>& a) {
    if (a->shape.empty()) throw shape_error("sum_per_sample: rank 0 tensor");
    const int b = a->shape[0];
    const size_t per = a->numel() / static_cast<size_t>(b);
    std::vector<T> out(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
        double acc = 0.0;
        const T* p = a->data.data() + static_cast<size_t>(i) * per;
        for (size_t j = 0; j < per; ++j) acc += static_cast<double>(p[j]);
        out[static_cast<size_t>(i)] = static_cast<T>(acc);
    }
    return make_op<T>(
        {b}, std::move(out), {a}, [a, b, per](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (int i = 0; i < b; ++i) {
                T g = self.tmp_grad[static_cast<size_t>(i)];
                T* p = a->tmp_grad.data() + static_cast<size_t>(i) * per;
                for (size_t j = 0; j < per; ++j) p[j] += g;
            }
        });
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, with temperature and max-subtraction
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> softmax_lastdim(const TensorPtrT<T>& a, double temperature) {
    if (temperature <= 0.0) throw contract_error("softmax: temperature must be > 0");
    const int c = a->shape.back();
    const size_t rows = a->numel() / static_cast<size_t>(c);
    std::vector<T> out(a->numel());
    for (size_t r = 0; r < rows; ++r) {
        const T* z = a->data.data() + r * c;
        T* p = out.data() + r * c;
        double m = static_cast<double>(z[0]);
        for (int i = 1; i < c; ++i) m = std::max(m, static_cast<double>(z[i]));
        double denom = 0.0;
        for (int i = 0; i < c; ++i) {
            double e = std::exp((static_cast<double>(z[i]) - m) / temperature);
            p[i] = static_cast<T>(e);
            denom += e;
        }
        for (int i = 0; i < c; ++i) p[i] = static_cast<T>(static_cast<double>(p[i]) / denom);
    }
    return make_op<T>(
        a->shape, std::move(out), {a}, [a, c, rows, temperature](TensorT<T>& self) {
            if (!a->bw_active()) return;
            for (size_t r = 0; r < rows; ++r) {
                const T* p = self.data.data() + r * c;
                const T* dp = self.tmp_grad.data() + r * c;
                T* dz = a->tmp_grad.data() + r * c;
                double dot = 0.0;
                for (int i = 0; i < c; ++i) dot += static_cast<double>(dp[i]) * p[i];
                for (int i = 0; i < c; ++i)
                    dz[i] += static_cast<T>(p[i] * (static_cast<double>(dp[i]) - dot) / temperature);
            }
        });
}

}  // namespace kdml
