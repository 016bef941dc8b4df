#pragma once

// Dense n-d tensor with reverse-mode autodiff. Values are immutable once
// created (the optimizer mutates parameter storage between steps, which is
// the one sanctioned exception). Ops record a tape of parent links plus a
// backward closure; backward() walks the tape once in reverse topological
// order, so a value consumed twice accumulates both contributions.

#include "ctfusion/common.hpp"

#include <algorithm>
#include <cassert>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace ctfusion {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Thread-local grad mode; evaluation loops disable taping for speed.
inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class Tensor {
public:
    // Tape node. Public so ops outside this header can be defined, but user
    // code should stick to the Tensor surface.
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // allocated the first time backward reaches this node
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backfn;  // pushes this->grad into parents

        bool needs_grad() const { return requires_grad || static_cast<bool>(backfn); }
    };

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        for (int64_t e : shape)
            if (e < 1) throw ShapeError("tensor: extents must be >= 1, got " + shape_str(shape));
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(1), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stdev = 1.0, bool requires_grad = false) {
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.normal() * stdev);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
        return from(std::move(shape), std::move(v), requires_grad);
    }

    // Assembles an op result. Parent links are recorded only when grads can
    // flow; otherwise the node is a plain value and the closure is dropped.
    static Tensor make_op(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backfn) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("op produced " + std::to_string(data.size()) + " values for shape " +
                             shape_str(shape));
        if (nan_guard_enabled()) {
            for (const T& x : data)
                if (!std::isfinite(static_cast<double>(x)))
                    throw NumericalError("non-finite value in op output of shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        if (grad_mode()) {
            bool any = false;
            for (const auto& in : inputs)
                if (in.node_ && in.node_->needs_grad()) any = true;
            if (any) {
                n->parents.reserve(inputs.size());
                for (const auto& in : inputs) n->parents.push_back(in.node_);
                n->backfn = std::move(backfn);
            }
        }
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(int i) const {
        int r = rank();
        if (i < 0) i += r;
        return node_->shape[static_cast<size_t>(i)];
    }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) throw StateError("tensor has no gradient");
        return node_->grad;
    }
    void clear_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ArgError("item(): tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Reverse-mode sweep from a scalar. Visits each tape node exactly once.
    // Repeated calls without clear_grad() accumulate into existing grads.
    void backward() const {
        if (numel() != 1) throw ArgError("backward: loss must be scalar, got shape " + shape_str(shape()));
        Node* root = node_.get();
        if (!root->backfn && !root->requires_grad) return;  // constant, nothing to do

        // iterative post-order DFS; reverse post-order = valid backprop order
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(root, 0);
        seen.insert(root);
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx++].get();
                if (p && p->backfn && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        // interior grads are per-sweep scratch; only leaves accumulate across calls
        for (Node* n : order)
            if (n->backfn) n->grad.assign(n->data.size(), T(0));
        if (root->grad.empty()) root->grad.assign(1, T(0));
        root->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backfn) n->backfn(*n);
        }
    }

    // Accumulation helper for backward closures.
    static void accum(const std::shared_ptr<Node>& p, const std::vector<T>& g) {
        if (!p || !p->needs_grad()) return;
        assert(g.size() == p->data.size());
        if (p->grad.empty()) p->grad.assign(p->data.size(), T(0));
        for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }

private:
    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// broadcasting machinery (numpy rules, right-aligned)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `shape` aligned under `out`, 0 where broadcast
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    size_t off = out.size() - shape.size();
    for (size_t i = shape.size(); i-- > 0;) {
        strides[i + off] = (shape[i] == 1 && out[i + off] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

namespace detail {

// odometer walk over `out`, calling f(out_linear, a_offset, b_offset)
template <class F>
void broadcast_walk(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
                    F&& f) {
    int64_t n = shape_numel(out);
    size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

template <class F>
void strided_walk(const Shape& out, const std::vector<int64_t>& sa, F&& f) {
    int64_t n = shape_numel(out);
    size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// Sum `g` (shaped `gshape`) down to `target` along broadcast axes.
template <class T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& gshape, const Shape& target) {
    if (gshape == target) return g;
    std::vector<T> out(static_cast<size_t>(shape_numel(target)), T(0));
    auto st = broadcast_strides(target, gshape);
    detail::strided_walk(gshape, st, [&](int64_t i, int64_t ot) { out[ot] += g[i]; });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise binary ops

namespace detail {

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    int64_t n = shape_numel(out_shape);
    std::vector<T> out(static_cast<size_t>(n));
    const auto& ad = a.data();
    const auto& bd = b.data();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        broadcast_walk(out_shape, sa, sb,
                       [&](int64_t i, int64_t oa, int64_t ob) { out[i] = fwd(ad[oa], bd[ob]); });
    }
    Shape ash = a.shape(), bsh = b.shape();
    return Tensor<T>::make_op(
        out_shape, std::move(out), {a, b},
        [a, b, ash, bsh, out_shape, da, db](typename Tensor<T>::Node& self) {
            int64_t n = static_cast<int64_t>(self.grad.size());
            const auto& ad = a.data();
            const auto& bd = b.data();
            std::vector<T> ga(static_cast<size_t>(n)), gb(static_cast<size_t>(n));
            if (ash == bsh) {
                for (int64_t i = 0; i < n; ++i) {
                    ga[i] = da(self.grad[i], ad[i], bd[i]);
                    gb[i] = db(self.grad[i], ad[i], bd[i]);
                }
            } else {
                auto sa = broadcast_strides(ash, out_shape);
                auto sb = broadcast_strides(bsh, out_shape);
                broadcast_walk(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
                    ga[i] = da(self.grad[i], ad[oa], bd[ob]);
                    gb[i] = db(self.grad[i], ad[oa], bd[ob]);
                });
            }
            Tensor<T>::accum(a.node(), reduce_to_shape(ga, out_shape, ash));
            Tensor<T>::accum(b.node(), reduce_to_shape(gb, out_shape, bsh));
        });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
        [](T g, T x, T y) { return -g * x / (y * y); });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    int64_t n = x.numel();
    std::vector<T> out(static_cast<size_t>(n));
    const auto& xd = x.data();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [x, bwd](typename Tensor<T>::Node& self) {
                                  const auto& xd = x.data();
                                  std::vector<T> g(self.grad.size());
                                  for (size_t i = 0; i < g.size(); ++i)
                                      g[i] = bwd(self.grad[i], xd[i], self.data[i]);
                                  Tensor<T>::accum(x.node(), g);
                              });
}

}  // namespace detail

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary_op(
        x, [s](T v) { return v * s; }, [s](T g, T, T) { return g * s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary_op(
        x, [s](T v) { return v + s; }, [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::sqrt(v); }, [](T g, T, T y) { return g / (T(2) * y); });
}

template <class T>
Tensor<T> exp_t(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <class T>
Tensor<T> log_t(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); }, [](T g, T v, T) { return g / v; });
}

enum class Activation { relu, sigmoid, tanh };

// relu'(0) := 0; sigmoid computed branch-wise so large |x| stays finite
template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    switch (kind) {
        case Activation::relu:
            return detail::unary_op(
                x, [](T v) { return v > T(0) ? v : T(0); },
                [](T g, T v, T) { return v > T(0) ? g : T(0); });
        case Activation::sigmoid:
            return detail::unary_op(
                x,
                [](T v) {
                    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
                    T e = std::exp(v);
                    return e / (T(1) + e);
                },
                [](T g, T, T y) { return g * y * (T(1) - y); });
        case Activation::tanh:
            return detail::unary_op(
                x, [](T v) { return std::tanh(v); }, [](T g, T, T y) { return g * (T(1) - y * y); });
    }
    throw ArgError("unknown activation kind");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid); }
template <class T>
Tensor<T> tanh_t(const Tensor<T>& x) { return activation(x, Activation::tanh); }

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ArgError("softmax: axis out of range");
    const Shape& sh = x.shape();
    int64_t n = sh[static_cast<size_t>(axis)];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= sh[static_cast<size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];

    const auto& xd = x.data();
    std::vector<T> out(xd.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * n * inner + in;
            T mx = xd[base];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            T sum = T(0);
            for (int64_t j = 0; j < n; ++j) {
                T e = std::exp(xd[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            for (int64_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
        }
    }
    return Tensor<T>::make_op(
        sh, std::move(out), {x}, [x, n, inner, outer](typename Tensor<T>::Node& self) {
            std::vector<T> g(self.grad.size());
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (int64_t j = 0; j < n; ++j)
                        dot += self.grad[base + j * inner] * self.data[base + j * inner];
                    for (int64_t j = 0; j < n; ++j) {
                        int64_t k = base + j * inner;
                        g[k] = self.data[k] * (self.grad[k] - dot);
                    }
                }
            }
            Tensor<T>::accum(x.node(), g);
        });
}

// ---------------------------------------------------------------------------
// reductions

enum class Reduce { sum, mean };

template <class T>
Tensor<T> reduce(const Tensor<T>& x, Reduce kind, std::vector<int> axes, bool keepdims = false) {
    int r = x.rank();
    std::vector<char> hit(static_cast<size_t>(r), 0);
    for (int& a : axes) {
        if (a < 0) a += r;
        if (a < 0 || a >= r) throw ArgError("reduce: axis out of range");
        if (hit[static_cast<size_t>(a)]) throw ArgError("reduce: duplicate axis " + std::to_string(a));
        hit[static_cast<size_t>(a)] = 1;
    }
    const Shape& sh = x.shape();
    Shape kept = sh;  // reduced extents as 1
    int64_t count = 1;
    for (int a = 0; a < r; ++a)
        if (hit[static_cast<size_t>(a)]) {
            count *= sh[static_cast<size_t>(a)];
            kept[static_cast<size_t>(a)] = 1;
        }
    Shape out_shape;
    if (keepdims) {
        out_shape = kept;
    } else {
        for (int a = 0; a < r; ++a)
            if (!hit[static_cast<size_t>(a)]) out_shape.push_back(sh[static_cast<size_t>(a)]);
        if (out_shape.empty()) out_shape.push_back(1);
    }

    std::vector<T> out(static_cast<size_t>(shape_numel(kept)), T(0));
    auto st = broadcast_strides(kept, sh);  // target strides under source walk
    const auto& xd = x.data();
    detail::strided_walk(sh, st, [&](int64_t i, int64_t ot) { out[ot] += xd[i]; });
    T inv = kind == Reduce::mean ? T(1) / static_cast<T>(count) : T(1);
    if (kind == Reduce::mean)
        for (auto& v : out) v *= inv;

    Shape xsh = sh, keptsh = kept;
    return Tensor<T>::make_op(
        out_shape, std::move(out), {x}, [x, xsh, keptsh, inv](typename Tensor<T>::Node& self) {
            std::vector<T> g(x.data().size());
            auto st = broadcast_strides(keptsh, xsh);
            detail::strided_walk(xsh, st, [&](int64_t i, int64_t ot) { g[i] = self.grad[ot] * inv; });
            Tensor<T>::accum(x.node(), g);
        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<int> axes, bool keepdims = false) {
    return reduce(x, Reduce::sum, std::move(axes), keepdims);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<int> axes, bool keepdims = false) {
    return reduce(x, Reduce::mean, std::move(axes), keepdims);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce(x, Reduce::sum, std::move(axes), false);
}

// ---------------------------------------------------------------------------
// shape ops: pure data movement, gradients are the inverse movement

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    return Tensor<T>::make_op(std::move(new_shape), x.data(), {x},
                              [x](typename Tensor<T>::Node& self) { Tensor<T>::accum(x.node(), self.grad); });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm) {
    int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw ArgError("transpose: perm rank mismatch");
    std::vector<char> hit(static_cast<size_t>(r), 0);
    for (int p : perm) {
        if (p < 0 || p >= r || hit[static_cast<size_t>(p)]) throw ArgError("transpose: bad permutation");
        hit[static_cast<size_t>(p)] = 1;
    }
    const Shape& sh = x.shape();
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = sh[static_cast<size_t>(perm[i])];

    std::vector<int64_t> src_strides(static_cast<size_t>(r));
    {
        int64_t s = 1;
        for (size_t i = static_cast<size_t>(r); i-- > 0;) {
            src_strides[i] = s;
            s *= sh[i];
        }
    }
    std::vector<int64_t> walk(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) walk[static_cast<size_t>(i)] = src_strides[static_cast<size_t>(perm[i])];

    const auto& xd = x.data();
    std::vector<T> out(xd.size());
    detail::strided_walk(out_shape, walk, [&](int64_t i, int64_t os) { out[i] = xd[os]; });

    return Tensor<T>::make_op(out_shape, std::move(out), {x},
                              [x, out_shape, walk](typename Tensor<T>::Node& self) {
                                  std::vector<T> g(x.data().size());
                                  detail::strided_walk(out_shape, walk,
                                                       [&](int64_t i, int64_t os) { g[os] = self.grad[i]; });
                                  Tensor<T>::accum(x.node(), g);
                              });
}

// last-two-axes transpose, the matmul companion
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    std::vector<int> perm(static_cast<size_t>(x.rank()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return transpose(x, std::move(perm));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ArgError("concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ArgError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
                throw ShapeError("concat: shapes disagree off the joined axis: " +
                                 shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.shape()[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = total;

    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];

    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t off = 0;
    std::vector<int64_t> part_extents;
    for (const auto& p : parts) {
        int64_t pe = p.shape()[static_cast<size_t>(axis)];
        part_extents.push_back(pe);
        const auto& pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, pd.data() + o * pe * inner,
                        static_cast<size_t>(pe * inner) * sizeof(T));
        off += pe;
    }
    std::vector<Tensor<T>> inputs = parts;
    return Tensor<T>::make_op(
        out_shape, std::move(out), inputs,
        [inputs, part_extents, outer, inner, total](typename Tensor<T>::Node& self) {
            int64_t off = 0;
            for (size_t pi = 0; pi < inputs.size(); ++pi) {
                int64_t pe = part_extents[pi];
                std::vector<T> g(static_cast<size_t>(outer * pe * inner));
                for (int64_t o = 0; o < outer; ++o)
                    std::memcpy(g.data() + o * pe * inner, self.grad.data() + (o * total + off) * inner,
                                static_cast<size_t>(pe * inner) * sizeof(T));
                Tensor<T>::accum(inputs[pi].node(), g);
                off += pe;
            }
        });
}

// slice of `len` extents starting at `start` along `axis`
template <class T>
Tensor<T> narrow(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ArgError("narrow: axis out of range");
    int64_t extent = x.shape()[static_cast<size_t>(axis)];
    if (start < 0 || len < 1 || start + len > extent)
        throw ShapeError("narrow: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of extent " + std::to_string(extent));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];

    const auto& xd = x.data();
    std::vector<T> out(static_cast<size_t>(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, xd.data() + (o * extent + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(T));
    return Tensor<T>::make_op(out_shape, std::move(out), {x},
                              [x, outer, inner, extent, start, len](typename Tensor<T>::Node& self) {
                                  std::vector<T> g(x.data().size(), T(0));
                                  for (int64_t o = 0; o < outer; ++o)
                                      std::memcpy(g.data() + (o * extent + start) * inner,
                                                  self.grad.data() + o * len * inner,
                                                  static_cast<size_t>(len * inner) * sizeof(T));
                                  Tensor<T>::accum(x.node(), g);
                              });
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, int64_t pieces) {
    int r = x.rank();
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw ArgError("split: axis out of range");
    int64_t extent = x.shape()[static_cast<size_t>(ax)];
    if (pieces < 1 || extent % pieces != 0)
        throw ShapeError("split: extent " + std::to_string(extent) + " not divisible into " +
                         std::to_string(pieces));
    int64_t step = extent / pieces;
    std::vector<Tensor<T>> out;
    out.reserve(static_cast<size_t>(pieces));
    for (int64_t i = 0; i < pieces; ++i) out.push_back(narrow(x, ax, i * step, step));
    return out;
}

// row gather from a [V, C] table; backward scatter-adds
template <class T>
Tensor<T> index_select(const Tensor<T>& table, const std::vector<int64_t>& ids) {
    if (table.rank() != 2) throw ShapeError("index_select: table must be [V, C]");
    int64_t v = table.dim(0), c = table.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= v) throw DataError("index_select: id " + std::to_string(id) + " out of range");
    std::vector<T> out(ids.size() * static_cast<size_t>(c));
    const auto& td = table.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * static_cast<size_t>(c), td.data() + ids[i] * c,
                    static_cast<size_t>(c) * sizeof(T));
    Shape out_shape{static_cast<int64_t>(ids.size()), c};
    return Tensor<T>::make_op(out_shape, std::move(out), {table},
                              [table, ids, c](typename Tensor<T>::Node& self) {
                                  std::vector<T> g(table.data().size(), T(0));
                                  for (size_t i = 0; i < ids.size(); ++i)
                                      for (int64_t j = 0; j < c; ++j)
                                          g[static_cast<size_t>(ids[i] * c + j)] +=
                                              self.grad[i * static_cast<size_t>(c) + static_cast<size_t>(j)];
                                  Tensor<T>::accum(table.node(), g);
                              });
}

}  // namespace ctfusion
