#pragma once

// Reverse-mode autodiff over dense tensors. The graph is held together by
// shared_ptr edges from each op node to its inputs; backward() walks the
// recorded tape once in reverse topological order. Matrix products go
// through Eigen; everything else is plain loops. All accumulation orders
// are fixed, so results are bit-reproducible for a fixed build.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "tensor.hpp"

namespace voxlm {

#ifndef NDEBUG
template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    for (const T& v : t.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
}
#else
template <typename T>
inline void check_finite(const Tensor<T>&, const char*) {}
#endif

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
    }
};

// Handle to a graph node. Cheap to copy; ops below are free functions.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var constant(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->is_leaf = true;
        return Var(std::move(n));
    }

    static Var param(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->is_leaf = true;
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& val() const { return n_->value; }
    Tensor<T>& val_mut() { return n_->value; }
    const Tensor<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool f) { n_->requires_grad = f; }
    const Shape& shape() const { return n_->value.shape; }
    int64_t numel() const { return n_->value.numel(); }
    std::shared_ptr<Node<T>> node() const { return n_; }

    void zero_grad() {
        if (!n_->grad.data.empty()) std::fill(n_->grad.data.begin(), n_->grad.data.end(), T(0));
    }

    // grad, zero-filled if the node never participated in a backward pass
    Tensor<T> grad_or_zero() const {
        if (n_->grad.data.empty()) return Tensor<T>::zeros(n_->value.shape);
        return n_->grad;
    }

    Var detach() const { return constant(n_->value); }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_op(const char* op, Tensor<T> value,
                                 std::vector<std::shared_ptr<Node<T>>> parents) {
    check_finite(value, op);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    for (auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// true if `small` equals the trailing dims of `big`
inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

} // namespace detail

template <typename T>
void backward(const Var<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // iterative post-order DFS over requires_grad subgraph
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    if (loss.node()->requires_grad) stack.push_back({loss.node().get(), 0});
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i == 0 && seen.count(n)) {
            stack.pop_back();
            continue;
        }
        seen.insert(n);
        bool descended = false;
        while (i < n->parents.size()) {
            Node<T>* p = n->parents[i].get();
            ++i;
            if (p->requires_grad && !seen.count(p)) {
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && i >= n->parents.size()) {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad.data[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---- elementwise ----

namespace detail {

// out = a (op) b with b broadcast when its shape is a suffix of a's.
// combine(av, bv) -> value; dva(av, bv, g) / dvb(av, bv, g) -> grad pieces.
template <typename T, typename FwdF, typename DaF, typename DbF>
Var<T> binary_suffix_op(const char* name, const Var<T>& a, const Var<T>& b, FwdF combine, DaF da_f,
                        DbF db_f) {
    const bool b_small = detail::is_suffix(b.shape(), a.shape());
    const bool a_small = !b_small && detail::is_suffix(a.shape(), b.shape());
    if (!b_small && !a_small)
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const Var<T>& big = b_small ? a : b;
    const Var<T>& small = b_small ? b : a;
    const int64_t n = big.numel();
    const int64_t m = std::max<int64_t>(small.numel(), 1);

    Tensor<T> out(big.shape());
    const T* bp = big.val().ptr();
    const T* sp = small.val().ptr();
    for (int64_t i = 0; i < n; ++i) {
        T av = b_small ? bp[i] : sp[i % m];
        T bv = b_small ? sp[i % m] : bp[i];
        out.data[static_cast<size_t>(i)] = combine(av, bv);
    }
    auto node = detail::make_op<T>(name, std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        Node<T>* self = node.get();
        node->backward_fn = [an, bn, self, b_small, n, m, da_f, db_f]() {
            const T* g = self->grad.ptr();
            const T* bp2 = (b_small ? an : bn)->value.ptr();
            const T* sp2 = (b_small ? bn : an)->value.ptr();
            if (an->requires_grad) {
                an->ensure_grad();
                T* ga = an->grad.ptr();
                for (int64_t i = 0; i < n; ++i) {
                    T av = b_small ? bp2[i] : sp2[i % m];
                    T bv = b_small ? sp2[i % m] : bp2[i];
                    ga[b_small ? i : (i % m)] += da_f(av, bv, g[i]);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* gb = bn->grad.ptr();
                for (int64_t i = 0; i < n; ++i) {
                    T av = b_small ? bp2[i] : sp2[i % m];
                    T bv = b_small ? sp2[i % m] : bp2[i];
                    gb[b_small ? (i % m) : i] += db_f(av, bv, g[i]);
                }
            }
        };
    }
    return Var<T>(node);
}

} // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return detail::binary_suffix_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return g; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return detail::binary_suffix_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
Var<T> scale(const Var<T>& x, double c) {
    Tensor<T> out(x.shape());
    const T cc = static_cast<T>(c);
    for (int64_t i = 0; i < x.numel(); ++i) out.data[i] = x.val().data[i] * cc;
    auto node = detail::make_op<T>("scale", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, cc]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i)
                xn->grad.data[i] += self->grad.data[i] * cc;
        };
    }
    return Var<T>(node);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return add(a, scale(b, -1.0));
}

// ---- matmul ----

// a: (..., m, k), b: (..., k, n). Leading dims must match, or either side may
// be a plain 2-D matrix shared across the other's batch.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: operands must have >= 2 dims, got " + shape_str(sa) + " and " +
                         shape_str(sb));
    const int64_t m = sa[sa.size() - 2], ka = sa.back();
    const int64_t kb = sb[sb.size() - 2], n = sb.back();
    if (ka != kb)
        throw ShapeError("matmul: inner dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
    Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
    bool a_shared = lead_a.empty() && !lead_b.empty();
    bool b_shared = lead_b.empty() && !lead_a.empty();
    if (!a_shared && !b_shared && lead_a != lead_b)
        throw ShapeError("matmul: batch dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
    Shape lead = a_shared ? lead_b : lead_a;
    const int64_t batch = numel_of(lead);
    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor<T> out(out_shape);
    const int64_t k = ka;
    for (int64_t i = 0; i < batch; ++i) {
        detail::ECMap<T> A(a.val().ptr() + (a_shared ? 0 : i * m * k), m, k);
        detail::ECMap<T> B(b.val().ptr() + (b_shared ? 0 : i * k * n), k, n);
        detail::EMap<T> C(out.ptr() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    auto node = detail::make_op<T>("matmul", std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        Node<T>* self = node.get();
        node->backward_fn = [an, bn, self, batch, m, n, k, a_shared, b_shared]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < batch; ++i) {
                    detail::ECMap<T> G(self->grad.ptr() + i * m * n, m, n);
                    detail::ECMap<T> B(bn->value.ptr() + (b_shared ? 0 : i * k * n), k, n);
                    detail::EMap<T> dA(an->grad.ptr() + (a_shared ? 0 : i * m * k), m, k);
                    dA.noalias() += G * B.transpose();
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < batch; ++i) {
                    detail::ECMap<T> G(self->grad.ptr() + i * m * n, m, n);
                    detail::ECMap<T> A(an->value.ptr() + (a_shared ? 0 : i * m * k), m, k);
                    detail::EMap<T> dB(bn->grad.ptr() + (b_shared ? 0 : i * k * n), k, n);
                    dB.noalias() += A.transpose() * G;
                }
            }
        };
    }
    return Var<T>(node);
}

// ---- shape ops ----

template <typename T>
Var<T> reshape(const Var<T>& x, Shape target) {
    if (numel_of(target) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(target));
    Tensor<T> out(std::move(target), x.val().data);
    auto node = detail::make_op<T>("reshape", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i)
                xn->grad.data[i] += self->grad.data[i];
        };
    }
    return Var<T>(node);
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
void permute_copy(const Tensor<T>& in, const std::vector<int>& perm, Tensor<T>& out, bool add_to) {
    const size_t nd = in.shape.size();
    auto in_strides = strides_of(in.shape);
    // stride in the input for each output axis
    std::vector<int64_t> src_stride(nd);
    for (size_t i = 0; i < nd; ++i) src_stride[i] = in_strides[perm[i]];
    auto out_strides = strides_of(out.shape);
    const int64_t n = in.numel();
    for (int64_t i = 0; i < n; ++i) {
        int64_t rem = i, src = 0;
        for (size_t d = 0; d < nd; ++d) {
            int64_t c = rem / out_strides[d];
            rem -= c * out_strides[d];
            src += c * src_stride[d];
        }
        if (add_to)
            out.data[i] += in.data[src];
        else
            out.data[i] = in.data[src];
    }
}

} // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw ShapeError("permute: axes count mismatch");
    Shape out_shape(s.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[perm[i]];
    Tensor<T> out(out_shape);
    detail::permute_copy(x.val(), perm, out, false);
    auto node = detail::make_op<T>("permute", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
        node->backward_fn = [xn, self, inv]() {
            xn->ensure_grad();
            detail::permute_copy(self->grad, inv, xn->grad, true);
        };
    }
    return Var<T>(node);
}

template <typename T>
Var<T> transpose(const Var<T>& x, int i, int j) {
    std::vector<int> perm(x.shape().size());
    for (size_t d = 0; d < perm.size(); ++d) perm[d] = static_cast<int>(d);
    std::swap(perm[i], perm[j]);
    return permute(x, perm);
}

template <typename T>
Var<T> gather(const Var<T>& x, int axis, std::vector<int64_t> idx) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("gather: bad axis");
    for (int64_t id : idx)
        if (id < 0 || id >= s[axis])
            throw ShapeError("gather: index " + std::to_string(id) + " out of range for axis of " +
                             std::to_string(s[axis]));
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const int64_t ax = s[axis], nidx = static_cast<int64_t>(idx.size());
    Shape out_shape = s;
    out_shape[axis] = nidx;
    Tensor<T> out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < nidx; ++j)
            std::copy_n(x.val().ptr() + (o * ax + idx[j]) * inner, inner,
                        out.ptr() + (o * nidx + j) * inner);
    auto node = detail::make_op<T>("gather", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, idx = std::move(idx), outer, inner, ax, nidx]() {
            xn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < nidx; ++j) {
                    const T* g = self->grad.ptr() + (o * nidx + j) * inner;
                    T* dst = xn->grad.ptr() + (o * ax + idx[j]) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
        };
    }
    return Var<T>(node);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    const Shape& s0 = xs[0].shape();
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    int64_t total_ax = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (d != static_cast<size_t>(axis) && s[d] != s0[d])
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        total_ax += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total_ax;
    Tensor<T> out(out_shape);
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::vector<int64_t> ax_sizes;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        ax_sizes.push_back(x.shape()[axis]);
    }
    for (int64_t o = 0; o < outer; ++o) {
        int64_t off = 0;
        for (size_t p = 0; p < xs.size(); ++p) {
            const int64_t a = ax_sizes[p];
            std::copy_n(xs[p].val().ptr() + o * a * inner, a * inner,
                        out.ptr() + (o * total_ax + off) * inner);
            off += a;
        }
    }
    auto node = detail::make_op<T>("concat", std::move(out), std::move(parents));
    if (node->requires_grad) {
        Node<T>* self = node.get();
        node->backward_fn = [self, ax_sizes, outer, inner, total_ax]() {
            for (int64_t o = 0; o < outer; ++o) {
                int64_t off = 0;
                for (size_t p = 0; p < self->parents.size(); ++p) {
                    auto& par = self->parents[p];
                    const int64_t a = ax_sizes[p];
                    if (par->requires_grad) {
                        par->ensure_grad();
                        const T* g = self->grad.ptr() + (o * total_ax + off) * inner;
                        T* dst = par->grad.ptr() + o * a * inner;
                        for (int64_t i = 0; i < a * inner; ++i) dst[i] += g[i];
                    }
                    off += a;
                }
            }
        };
    }
    return Var<T>(node);
}

// out[(t,) + x.shape] = x, repeated `times` along a new leading axis
template <typename T>
Var<T> tile_leading(const Var<T>& x, int64_t times) {
    Shape out_shape;
    out_shape.push_back(times);
    for (int64_t d : x.shape()) out_shape.push_back(d);
    Tensor<T> out(out_shape);
    const int64_t n = x.numel();
    for (int64_t t = 0; t < times; ++t)
        std::copy_n(x.val().ptr(), n, out.ptr() + t * n);
    auto node = detail::make_op<T>("tile_leading", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, times, n]() {
            xn->ensure_grad();
            for (int64_t t = 0; t < times; ++t) {
                const T* g = self->grad.ptr() + t * n;
                for (int64_t i = 0; i < n; ++i) xn->grad.data[i] += g[i];
            }
        };
    }
    return Var<T>(node);
}

// ---- activations / normalization ----

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        double v = static_cast<double>(x.val().data[i]);
        out.data[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
    }
    auto node = detail::make_op<T>("gelu", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self]() {
            xn->ensure_grad();
            constexpr double inv_sqrt2pi = 0.3989422804014327;
            for (int64_t i = 0; i < self->grad.numel(); ++i) {
                double v = static_cast<double>(xn->value.data[i]);
                double d = 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) +
                           v * inv_sqrt2pi * std::exp(-0.5 * v * v);
                xn->grad.data[i] += self->grad.data[i] * static_cast<T>(d);
            }
        };
    }
    return Var<T>(node);
}

// softmax over the last axis
template <typename T>
Var<T> softmax(const Var<T>& x) {
    const int64_t cols = x.shape().back();
    const int64_t rows = x.numel() / cols;
    Tensor<T> out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.val().ptr() + r * cols;
        T* o = out.ptr() + r * cols;
        T mx = in[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        double sum = 0;
        for (int64_t c = 0; c < cols; ++c) {
            double e = std::exp(static_cast<double>(in[c] - mx));
            o[c] = static_cast<T>(e);
            sum += e;
        }
        for (int64_t c = 0; c < cols; ++c) o[c] = static_cast<T>(o[c] / sum);
    }
    auto node = detail::make_op<T>("softmax", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, rows, cols]() {
            xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = self->value.ptr() + r * cols;
                const T* g = self->grad.ptr() + r * cols;
                T* dx = xn->grad.ptr() + r * cols;
                double dot = 0;
                for (int64_t c = 0; c < cols; ++c) dot += static_cast<double>(g[c]) * y[c];
                for (int64_t c = 0; c < cols; ++c)
                    dx[c] += y[c] * (g[c] - static_cast<T>(dot));
            }
        };
    }
    return Var<T>(node);
}

// layer norm over the last axis, then affine with gamma/beta of shape (C)
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    const int64_t c = x.shape().back();
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: affine params must have length " + std::to_string(c));
    const int64_t rows = x.numel() / c;
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.val().ptr() + r * c;
        double mean = 0;
        for (int64_t i = 0; i < c; ++i) mean += in[i];
        mean /= c;
        double var = 0;
        for (int64_t i = 0; i < c; ++i) {
            double d = in[i] - mean;
            var += d * d;
        }
        var /= c;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<T>(is);
        T* xh = xhat.ptr() + r * c;
        T* o = out.ptr() + r * c;
        for (int64_t i = 0; i < c; ++i) {
            xh[i] = static_cast<T>((in[i] - mean) * is);
            o[i] = xh[i] * gamma.val().data[i] + beta.val().data[i];
        }
    }
    auto node = detail::make_op<T>("layer_norm", std::move(out), {x.node(), gamma.node(), beta.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, gn, bn, self, xhat = std::move(xhat), inv_std = std::move(inv_std),
                             rows, c]() {
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < c; ++i)
                        gn->grad.data[i] += self->grad.data[r * c + i] * xhat.data[r * c + i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < c; ++i) bn->grad.data[i] += self->grad.data[r * c + i];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* g = self->grad.ptr() + r * c;
                    const T* xh = xhat.ptr() + r * c;
                    T* dx = xn->grad.ptr() + r * c;
                    double m1 = 0, m2 = 0;
                    for (int64_t i = 0; i < c; ++i) {
                        double gg = static_cast<double>(g[i]) * gn->value.data[i];
                        m1 += gg;
                        m2 += gg * xh[i];
                    }
                    m1 /= c;
                    m2 /= c;
                    for (int64_t i = 0; i < c; ++i) {
                        double gg = static_cast<double>(g[i]) * gn->value.data[i];
                        dx[i] += static_cast<T>(inv_std[r] * (gg - m1 - xh[i] * m2));
                    }
                }
            }
        };
    }
    return Var<T>(node);
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    double s = 0;
    for (const T& v : x.val().data) s += v;
    auto node = detail::make_op<T>("sum_all", Tensor<T>::scalar(static_cast<T>(s)), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self]() {
            xn->ensure_grad();
            const T g = self->grad.data[0];
            for (auto& v : xn->grad.data) v += g;
        };
    }
    return Var<T>(node);
}

// mean over the last axis: (..., L) -> (...)
template <typename T>
Var<T> reduce_mean(const Var<T>& x) {
    const int64_t l = x.shape().back();
    const int64_t rows = x.numel() / l;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor<T> out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0;
        for (int64_t i = 0; i < l; ++i) s += x.val().data[r * l + i];
        out.data[r] = static_cast<T>(s / l);
    }
    auto node = detail::make_op<T>("reduce_mean", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, rows, l]() {
            xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T g = self->grad.data[r] / static_cast<T>(l);
                for (int64_t i = 0; i < l; ++i) xn->grad.data[r * l + i] += g;
            }
        };
    }
    return Var<T>(node);
}

// max over the last axis; ties resolve to the lowest index
template <typename T>
Var<T> reduce_max(const Var<T>& x) {
    const int64_t l = x.shape().back();
    const int64_t rows = x.numel() / l;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor<T> out(out_shape);
    std::vector<int64_t> arg(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = x.val().ptr() + r * l;
        int64_t best = 0;
        for (int64_t i = 1; i < l; ++i)
            if (in[i] > in[best]) best = i;
        arg[r] = best;
        out.data[r] = in[best];
    }
    auto node = detail::make_op<T>("reduce_max", std::move(out), {x.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, self, arg = std::move(arg), l]() {
            xn->ensure_grad();
            for (size_t r = 0; r < arg.size(); ++r)
                xn->grad.data[static_cast<int64_t>(r) * l + arg[r]] += self->grad.data[r];
        };
    }
    return Var<T>(node);
}

// ---- lookup ----

// table: (V, C), ids: length L -> (L, C)
template <typename T>
Var<T> embedding_lookup(const Var<T>& table, std::vector<int64_t> ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
    const int64_t v = s[0], c = s[1];
    for (int64_t id : ids)
        if (id < 0 || id >= v)
            throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of vocab " +
                             std::to_string(v));
    const int64_t l = static_cast<int64_t>(ids.size());
    Tensor<T> out({l, c});
    for (int64_t i = 0; i < l; ++i)
        std::copy_n(table.val().ptr() + ids[i] * c, c, out.ptr() + i * c);
    auto node = detail::make_op<T>("embedding_lookup", std::move(out), {table.node()});
    if (node->requires_grad) {
        auto tn = table.node();
        Node<T>* self = node.get();
        node->backward_fn = [tn, self, ids = std::move(ids), c]() {
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* g = self->grad.ptr() + static_cast<int64_t>(i) * c;
                T* dst = tn->grad.ptr() + ids[i] * c;
                for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
            }
        };
    }
    return Var<T>(node);
}

// ---- convolution ----

// input (B, C, H, W, D), kernel (C', C, k, k, k), bias (C'), stride = k,
// no padding; k must divide H, W and D. Output (B, C', H/k, W/k, D/k).
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 5 || ws.size() != 5)
        throw ShapeError("conv3d: expected 5-D input and kernel, got " + shape_str(xs) + " and " +
                         shape_str(ws));
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3], D = xs[4];
    const int64_t Co = ws[0], k = ws[2];
    if (ws[1] != C || ws[3] != k || ws[4] != k)
        throw ShapeError("conv3d: kernel " + shape_str(ws) + " incompatible with input " +
                         shape_str(xs));
    if (H % k || W % k || D % k)
        throw ShapeError("conv3d: kernel size " + std::to_string(k) +
                         " must divide spatial dims of " + shape_str(xs));
    if (b.numel() != Co) throw ShapeError("conv3d: bias length must equal output channels");
    const int64_t Ho = H / k, Wo = W / k, Do = D / k, M = Ho * Wo * Do, CK = C * k * k * k;

    auto fill_cols = [C, H, W, D, k, Ho, Wo, Do, CK](const Tensor<T>& src, int64_t batch,
                                                     Tensor<T>& cols) {
        // cols: (M, CK); column index = ((c*k + kx)*k + ky)*k + kz
        const T* xb = src.ptr() + batch * C * H * W * D;
        for (int64_t ho = 0; ho < Ho; ++ho)
            for (int64_t wo = 0; wo < Wo; ++wo)
                for (int64_t dodx = 0; dodx < Do; ++dodx) {
                    int64_t m = (ho * Wo + wo) * Do + dodx;
                    T* row = cols.ptr() + m * CK;
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t kx = 0; kx < k; ++kx)
                            for (int64_t ky = 0; ky < k; ++ky) {
                                const T* src_ptr = xb + (((c * H + ho * k + kx) * W + wo * k + ky) * D +
                                                         dodx * k);
                                T* dst = row + ((c * k + kx) * k + ky) * k;
                                std::copy_n(src_ptr, k, dst);
                            }
                }
    };

    Tensor<T> out({B, Co, Ho, Wo, Do});
    Tensor<T> cols({M, CK});
    for (int64_t bi = 0; bi < B; ++bi) {
        fill_cols(x.val(), bi, cols);
        detail::ECMap<T> Cm(cols.ptr(), M, CK);
        detail::ECMap<T> Wm(w.val().ptr(), Co, CK);
        detail::EMat<T> Y = Cm * Wm.transpose(); // (M, Co)
        T* ob = out.ptr() + bi * Co * M;
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t m = 0; m < M; ++m) ob[co * M + m] = Y(m, co) + b.val().data[co];
    }
    auto node = detail::make_op<T>("conv3d", std::move(out), {x.node(), w.node(), b.node()});
    if (node->requires_grad) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.node();
        Node<T>* self = node.get();
        node->backward_fn = [xn, wn, bn, self, fill_cols, B, C, H, W, D, Co, k, Ho, Wo, Do, M,
                             CK]() {
            Tensor<T> cols({M, CK});
            Tensor<T> g_mat({M, Co});
            for (int64_t bi = 0; bi < B; ++bi) {
                const T* gb = self->grad.ptr() + bi * Co * M;
                for (int64_t co = 0; co < Co; ++co)
                    for (int64_t m = 0; m < M; ++m) g_mat.data[m * Co + co] = gb[co * M + m];
                detail::ECMap<T> G(g_mat.ptr(), M, Co);
                detail::ECMap<T> Wm(wn->value.ptr(), Co, CK);
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t co = 0; co < Co; ++co) {
                        double s = 0;
                        for (int64_t m = 0; m < M; ++m) s += g_mat.data[m * Co + co];
                        bn->grad.data[co] += static_cast<T>(s);
                    }
                }
                if (wn->requires_grad) {
                    wn->ensure_grad();
                    fill_cols(xn->value, bi, cols);
                    detail::ECMap<T> Cm(cols.ptr(), M, CK);
                    detail::EMap<T> dW(wn->grad.ptr(), Co, CK);
                    dW.noalias() += G.transpose() * Cm;
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    detail::EMat<T> dcols = G * Wm; // (M, CK)
                    // blocks are disjoint (stride == kernel), so scatter is 1:1
                    T* dxb = xn->grad.ptr() + bi * C * H * W * D;
                    for (int64_t ho = 0; ho < Ho; ++ho)
                        for (int64_t wo = 0; wo < Wo; ++wo)
                            for (int64_t dodx = 0; dodx < Do; ++dodx) {
                                int64_t m = (ho * Wo + wo) * Do + dodx;
                                for (int64_t c = 0; c < C; ++c)
                                    for (int64_t kx = 0; kx < k; ++kx)
                                        for (int64_t ky = 0; ky < k; ++ky)
                                            for (int64_t kz = 0; kz < k; ++kz) {
                                                int64_t col = ((c * k + kx) * k + ky) * k + kz;
                                                dxb[((c * H + ho * k + kx) * W + wo * k + ky) * D +
                                                    dodx * k + kz] += dcols(m, col);
                                            }
                            }
                }
            }
        };
    }
    return Var<T>(node);
}

// ---- losses ----

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    const int64_t n = pred.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(pred.val().data[i]) - target.val().data[i];
        s += d * d;
    }
    auto node =
        detail::make_op<T>("mse_loss", Tensor<T>::scalar(static_cast<T>(s / n)), {pred.node(), target.node()});
    if (node->requires_grad) {
        auto pn = pred.node();
        auto tn = target.node();
        Node<T>* self = node.get();
        node->backward_fn = [pn, tn, self, n]() {
            const T g = self->grad.data[0];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    pn->grad.data[i] += g * T(2) * (pn->value.data[i] - tn->value.data[i]) / static_cast<T>(n);
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    tn->grad.data[i] -= g * T(2) * (pn->value.data[i] - tn->value.data[i]) / static_cast<T>(n);
            }
        };
    }
    return Var<T>(node);
}

// logits (R, V), targets length R; mean over rows of -log softmax(logits)[target]
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::vector<int64_t> targets) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy_loss: logits must be (rows, vocab)");
    const int64_t r = s[0], v = s[1];
    if (static_cast<int64_t>(targets.size()) != r)
        throw ShapeError("cross_entropy_loss: got " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(r) + " rows");
    Tensor<T> sm({r, v});
    double total = 0;
    for (int64_t i = 0; i < r; ++i) {
        const T* in = logits.val().ptr() + i * v;
        if (targets[i] < 0 || targets[i] >= v) throw ShapeError("cross_entropy_loss: target out of range");
        T mx = in[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
        double sum = 0;
        for (int64_t j = 0; j < v; ++j) {
            double e = std::exp(static_cast<double>(in[j] - mx));
            sm.data[i * v + j] = static_cast<T>(e);
            sum += e;
        }
        for (int64_t j = 0; j < v; ++j) sm.data[i * v + j] = static_cast<T>(sm.data[i * v + j] / sum);
        total += std::log(sum) + mx - in[targets[i]];
    }
    auto node = detail::make_op<T>("cross_entropy_loss", Tensor<T>::scalar(static_cast<T>(total / r)),
                                   {logits.node()});
    if (node->requires_grad) {
        auto ln = logits.node();
        Node<T>* self = node.get();
        node->backward_fn = [ln, self, sm = std::move(sm), targets = std::move(targets), r, v]() {
            ln->ensure_grad();
            const T g = self->grad.data[0];
            for (int64_t i = 0; i < r; ++i) {
                for (int64_t j = 0; j < v; ++j)
                    ln->grad.data[i * v + j] += g * sm.data[i * v + j] / static_cast<T>(r);
                ln->grad.data[i * v + targets[i]] -= g / static_cast<T>(r);
            }
        };
    }
    return Var<T>(node);
}

} // namespace voxlm
