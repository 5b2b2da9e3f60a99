#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "resgcn/common.hpp"
#include "resgcn/tensor.hpp"

namespace resgcn {

// A learnable tensor with its accumulated gradient. `decay` opts the
// parameter in or out of L2 weight decay; BatchNorm affine terms and biases
// are created with decay = false.
struct Parameter {
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool decay = true;

    Parameter() = default;
    explicit Parameter(Tensor v, bool trainable_ = true, bool decay_ = true)
        : value(std::move(v)), grad(Tensor::zeros(value.shape())), trainable(trainable_), decay(decay_) {}

    void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), 0.0); }
};

// Handle into a Tape.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Record of executed differentiable operations. Backward replays the record
// in exact reverse execution order and accumulates into every trainable
// Parameter reachable from the loss. Constructed with grad_enabled = false
// the tape stores values only, which is the inference path.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var constant(Tensor v) {
        nodes_.push_back(Node{std::move(v), Tensor{}, nullptr, {}, false, false});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var param(Parameter& p) {
        const bool tracked = grad_enabled_ && p.trainable;
        nodes_.push_back(Node{p.value, Tensor{}, tracked ? &p : nullptr, {}, tracked, false});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // Op-construction interface. `backprop` receives the tape and the node's
    // own index; it reads grad(self) and accumulates into parents via gbuf().
    Var push(Tensor value, const std::vector<Var>& parents,
             std::function<void(Tape&, int)> backprop) {
        bool tracked = false;
        if (grad_enabled_) {
            for (Var p : parents)
                if (nodes_[static_cast<std::size_t>(p.idx)].tracked) { tracked = true; break; }
        }
        Node n{std::move(value), Tensor{}, nullptr, {}, tracked, false};
        if (tracked) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }
    bool tracked(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].tracked; }

    // Gradient buffer of a node, allocated on first touch.
    Tensor& gbuf(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v.idx)];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    const Tensor& grad(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
        if (!n.has_grad) throw state_error("tape: no gradient recorded for this node");
        return n.grad;
    }

    void backward(Var loss) {
        if (!grad_enabled_) throw usage_error("backward: tape was created with gradients disabled");
        if (!loss.valid() || loss.idx >= static_cast<int>(nodes_.size()))
            throw usage_error("backward: invalid loss handle");
        if (value(loss).numel() != 1)
            throw usage_error("backward: loss must be a scalar, got shape " +
                              Tensor::shape_string(value(loss).shape()));
        gbuf(loss)[0] += 1.0;
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.tracked || !n.has_grad) continue;
            if (n.backprop) n.backprop(*this, i);
            if (n.bound && n.bound->trainable) {
                double* pg = n.bound->grad.data();
                const double* g = n.grad.data();
                const std::int64_t m = n.grad.numel();
                for (std::int64_t j = 0; j < m; ++j) pg[j] += g[j];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Parameter* bound;
        std::function<void(Tape&, int)> backprop;
        bool tracked;
        bool has_grad;
    };

    // deque: node references stay valid while the tape grows
    std::deque<Node> nodes_;
    bool grad_enabled_;
};

namespace detail {

// Shape and stride plan for elementwise broadcasting over singleton axes.
struct BroadcastPlan {
    std::vector<int> shape;
    std::vector<std::int64_t> sa, sb;  // per-axis strides, 0 where broadcast
    std::int64_t numel = 1;
};

inline BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank())
        throw dimension_error("broadcast: rank mismatch " + Tensor::shape_string(a.shape()) +
                              " vs " + Tensor::shape_string(b.shape()));
    BroadcastPlan p;
    const int r = a.rank();
    p.shape.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = a.dim(i), db = b.dim(i);
        if (da != db && da != 1 && db != 1)
            throw dimension_error("broadcast: incompatible shapes " + Tensor::shape_string(a.shape()) +
                                  " and " + Tensor::shape_string(b.shape()));
        p.shape[static_cast<std::size_t>(i)] = std::max(da, db);
        p.numel *= p.shape[static_cast<std::size_t>(i)];
    }
    const auto stra = a.strides(), strb = b.strides();
    p.sa.resize(static_cast<std::size_t>(r));
    p.sb.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        p.sa[static_cast<std::size_t>(i)] = a.dim(i) == 1 && p.shape[static_cast<std::size_t>(i)] > 1 ? 0 : stra[static_cast<std::size_t>(i)];
        p.sb[static_cast<std::size_t>(i)] = b.dim(i) == 1 && p.shape[static_cast<std::size_t>(i)] > 1 ? 0 : strb[static_cast<std::size_t>(i)];
    }
    return p;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    const int r = static_cast<int>(p.shape.size());
    std::vector<int> ix(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t flat = 0;; ++flat) {
        fn(flat, oa, ob);
        int ax = r - 1;
        for (; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            ++ix[a];
            oa += p.sa[a];
            ob += p.sb[a];
            if (ix[a] < p.shape[a]) break;
            oa -= p.sa[a] * p.shape[a];
            ob -= p.sb[a] * p.shape[a];
            ix[a] = 0;
        }
        if (ax < 0) break;
    }
}

}  // namespace detail

// --- elementwise ----------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.same_shape(y)) {
        Tensor out(x.shape());
        const double* px = x.data();
        const double* py = y.data();
        double* po = out.data();
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] + py[i];
        return t.push(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
            const Tensor& g = tp.grad(Var{self});
            const std::int64_t m = g.numel();
            for (Var v : {a, b}) {
                if (!tp.tracked(v)) continue;
                double* pg = tp.gbuf(v).data();
                const double* gs = g.data();
                for (std::int64_t i = 0; i < m; ++i) pg[i] += gs[i];
            }
        });
    }
    auto plan = detail::broadcast_plan(x, y);
    Tensor out(plan.shape);
    double* po = out.data();
    detail::for_each_broadcast(plan, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
        po[f] = x[oa] + y[ob];
    });
    return t.push(std::move(out), {a, b}, [a, b, plan](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const bool ta = tp.tracked(a), tb = tp.tracked(b);
        double* ga = ta ? tp.gbuf(a).data() : nullptr;
        double* gb = tb ? tp.gbuf(b).data() : nullptr;
        detail::for_each_broadcast(plan, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
            if (ga) ga[oa] += g[f];
            if (gb) gb[ob] += g[f];
        });
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.same_shape(y)) {
        Tensor out(x.shape());
        const double* px = x.data();
        const double* py = y.data();
        double* po = out.data();
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * py[i];
        return t.push(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
            const Tensor& g = tp.grad(Var{self});
            const Tensor& xv = tp.value(a);
            const Tensor& yv = tp.value(b);
            const std::int64_t m = g.numel();
            if (tp.tracked(a)) {
                double* ga = tp.gbuf(a).data();
                for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i] * yv[i];
            }
            if (tp.tracked(b)) {
                double* gb = tp.gbuf(b).data();
                for (std::int64_t i = 0; i < m; ++i) gb[i] += g[i] * xv[i];
            }
        });
    }
    auto plan = detail::broadcast_plan(x, y);
    Tensor out(plan.shape);
    double* po = out.data();
    detail::for_each_broadcast(plan, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
        po[f] = x[oa] * y[ob];
    });
    return t.push(std::move(out), {a, b}, [a, b, plan](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv = tp.value(a);
        const Tensor& yv = tp.value(b);
        const bool ta = tp.tracked(a), tb = tp.tracked(b);
        double* ga = ta ? tp.gbuf(a).data() : nullptr;
        double* gb = tb ? tp.gbuf(b).data() : nullptr;
        detail::for_each_broadcast(plan, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
            if (ga) ga[oa] += g[f] * yv[ob];
            if (gb) gb[ob] += g[f] * xv[oa];
        });
    });
}

inline Var scale(Tape& t, Var a, double s) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = s * x[i];
    return t.push(std::move(out), {a}, [a, s](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const Tensor& g = tp.grad(Var{self});
        double* ga = tp.gbuf(a).data();
        const std::int64_t m = g.numel();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += s * g[i];
    });
}

inline Var relu(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return t.push(std::move(out), {a}, [a](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv = tp.value(a);
        double* ga = tp.gbuf(a).data();
        const std::int64_t m = g.numel();
        for (std::int64_t i = 0; i < m; ++i)
            if (xv[i] > 0.0) ga[i] += g[i];
    });
}

// --- matmul ---------------------------------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
        throw dimension_error("matmul: incompatible shapes " + Tensor::shape_string(x.shape()) +
                              " x " + Tensor::shape_string(y.shape()));
    const int m = x.dim(0), k = x.dim(1), n = y.dim(1);
    Tensor out({m, n});
    gemm_acc(x.data(), y.data(), out.data(), m, k, n);
    return t.push(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        if (tp.tracked(a))  // dA = dC * B^T
            gemm_nt_acc(g.data(), tp.value(b).data(), tp.gbuf(a).data(), m, n, k);
        if (tp.tracked(b))  // dB = A^T * dC
            gemm_tn_acc(tp.value(a).data(), g.data(), tp.gbuf(b).data(), k, m, n);
    });
}

// --- softmax / pooling / reshaping -----------------------------------------

inline Var softmax(Tape& t, Var a, int axis) {
    const Tensor& x = t.value(a);
    if (axis < 0 || axis >= x.rank())
        throw dimension_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                              Tensor::shape_string(x.shape()));
    const int d = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor out(x.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * d * inner + in;
            double mx = x[base];
            for (int j = 1; j < d; ++j) mx = std::max(mx, x[base + j * inner]);
            double z = 0.0;
            for (int j = 0; j < d; ++j) {
                const double e = std::exp(x[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (int j = 0; j < d; ++j) out[base + j * inner] /= z;
        }
    }
    return t.push(std::move(out), {a}, [a, d, outer, inner](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const Tensor& g = tp.grad(Var{self});
        const Tensor& s = tp.value(Var{self});
        double* ga = tp.gbuf(a).data();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * d * inner + in;
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += g[base + j * inner] * s[base + j * inner];
                for (int j = 0; j < d; ++j)
                    ga[base + j * inner] += s[base + j * inner] * (g[base + j * inner] - dot);
            }
        }
    });
}

namespace detail {

struct PoolPlan {
    std::vector<int> out_shape;
    std::vector<std::int64_t> out_stride_for_in_axis;  // 0 for pooled axes
    std::vector<int> in_shape;
    std::int64_t count = 1;
};

inline PoolPlan pool_plan(const Tensor& x, const std::vector<int>& axes) {
    PoolPlan p;
    p.in_shape = x.shape();
    std::vector<bool> pooled(static_cast<std::size_t>(x.rank()), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= x.rank())
            throw dimension_error("mean_pool: axis " + std::to_string(ax) + " out of range for " +
                                  Tensor::shape_string(x.shape()));
        if (pooled[static_cast<std::size_t>(ax)]) throw usage_error("mean_pool: duplicate axis");
        pooled[static_cast<std::size_t>(ax)] = true;
        p.count *= x.dim(ax);
    }
    for (int i = 0; i < x.rank(); ++i)
        if (!pooled[static_cast<std::size_t>(i)]) p.out_shape.push_back(x.dim(i));
    if (p.out_shape.empty()) p.out_shape.push_back(1);
    std::vector<std::int64_t> ostr(p.out_shape.size(), 1);
    for (int i = static_cast<int>(p.out_shape.size()) - 2; i >= 0; --i)
        ostr[static_cast<std::size_t>(i)] = ostr[static_cast<std::size_t>(i) + 1] * p.out_shape[static_cast<std::size_t>(i) + 1];
    p.out_stride_for_in_axis.assign(static_cast<std::size_t>(x.rank()), 0);
    std::size_t oi = 0;
    for (int i = 0; i < x.rank(); ++i)
        if (!pooled[static_cast<std::size_t>(i)]) p.out_stride_for_in_axis[static_cast<std::size_t>(i)] = ostr[oi++];
    return p;
}

template <typename Fn>
void for_each_pool(const PoolPlan& p, Fn&& fn) {
    const int r = static_cast<int>(p.in_shape.size());
    std::vector<int> ix(static_cast<std::size_t>(r), 0);
    std::int64_t oo = 0;
    const std::int64_t total = [&] {
        std::int64_t n = 1;
        for (int d : p.in_shape) n *= d;
        return n;
    }();
    for (std::int64_t flat = 0; flat < total; ++flat) {
        fn(flat, oo);
        for (int ax = r - 1; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            ++ix[a];
            oo += p.out_stride_for_in_axis[a];
            if (ix[a] < p.in_shape[a]) break;
            oo -= p.out_stride_for_in_axis[a] * p.in_shape[a];
            ix[a] = 0;
        }
    }
}

}  // namespace detail

// Mean over the given axes; pooled axes are removed from the shape.
inline Var mean_pool(Tape& t, Var a, const std::vector<int>& axes) {
    const Tensor& x = t.value(a);
    auto plan = detail::pool_plan(x, axes);
    Tensor out(plan.out_shape);
    const double inv = 1.0 / static_cast<double>(plan.count);
    detail::for_each_pool(plan, [&](std::int64_t f, std::int64_t oo) { out[oo] += x[f] * inv; });
    return t.push(std::move(out), {a}, [a, plan, inv](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const Tensor& g = tp.grad(Var{self});
        double* ga = tp.gbuf(a).data();
        detail::for_each_pool(plan, [&](std::int64_t f, std::int64_t oo) { ga[f] += g[oo] * inv; });
    });
}

inline Var sum_all(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    double s = 0.0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) s += x[i];
    return t.push(Tensor::scalar(s), {a}, [a](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const double g = tp.grad(Var{self})[0];
        double* ga = tp.gbuf(a).data();
        const std::int64_t m = tp.value(a).numel();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += g;
    });
}

inline Var reshape(Tape& t, Var a, std::vector<int> shape) {
    Tensor out = t.value(a).reshaped(std::move(shape));
    return t.push(std::move(out), {a}, [a](Tape& tp, int self) {
        if (!tp.tracked(a)) return;
        const Tensor& g = tp.grad(Var{self});
        double* ga = tp.gbuf(a).data();
        const std::int64_t m = g.numel();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i];
    });
}

inline Var concat(Tape& t, const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw usage_error("concat: no operands");
    const Tensor& first = t.value(xs[0]);
    const int r = first.rank();
    if (axis < 0 || axis >= r)
        throw dimension_error("concat: axis " + std::to_string(axis) + " out of range");
    int cat = 0;
    for (Var v : xs) {
        const Tensor& x = t.value(v);
        if (x.rank() != r)
            throw dimension_error("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && x.dim(i) != first.dim(i))
                throw dimension_error("concat: operands disagree on axis " + std::to_string(i) + ": " +
                                      Tensor::shape_string(x.shape()) + " vs " +
                                      Tensor::shape_string(first.shape()));
        cat += x.dim(axis);
    }
    std::vector<int> oshape = first.shape();
    oshape[static_cast<std::size_t>(axis)] = cat;
    Tensor out(oshape);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= first.dim(i);
    const std::int64_t orow = static_cast<std::int64_t>(cat) * inner;
    std::vector<std::int64_t> offsets;  // element offset of each operand inside an output row
    std::int64_t run = 0;
    for (Var v : xs) {
        offsets.push_back(run);
        const Tensor& x = t.value(v);
        const std::int64_t xrow = static_cast<std::int64_t>(x.dim(axis)) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(x.data() + o * xrow, x.data() + (o + 1) * xrow, out.data() + o * orow + run);
        run += xrow;
    }
    return t.push(std::move(out), xs, [xs, offsets, outer, inner, orow](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (!tp.tracked(xs[i])) continue;
            Tensor& ga = tp.gbuf(xs[i]);
            const std::int64_t xrow = ga.numel() / outer;
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* src = g.data() + o * orow + offsets[i];
                double* dst = ga.data() + o * xrow;
                for (std::int64_t j = 0; j < xrow; ++j) dst[j] += src[j];
            }
        }
    });
}

// --- temporal convolution ---------------------------------------------------
//
// Cross-correlation over the T axis of an [N x C x T x V] feature map with a
// [C_out x C_in x k_t x 1] kernel. The V axis is never convolved.

inline Var conv2d(Tape& t, Var xa, Var wa, int stride_t, int pad_t) {
    const Tensor& x = t.value(xa);
    const Tensor& w = t.value(wa);
    if (x.rank() != 4 || w.rank() != 4)
        throw dimension_error("conv2d: expected x[N,C,T,V] and w[Cout,Cin,kt,kv], got " +
                              Tensor::shape_string(x.shape()) + " and " + Tensor::shape_string(w.shape()));
    if (w.dim(3) != 1) throw dimension_error("conv2d: only 1-wide joint kernels are supported");
    if (w.dim(1) != x.dim(1))
        throw dimension_error("conv2d: channel mismatch, x " + Tensor::shape_string(x.shape()) +
                              " vs w " + Tensor::shape_string(w.shape()));
    if (stride_t < 1) throw usage_error("conv2d: stride must be positive");
    if (pad_t < 0) throw usage_error("conv2d: negative padding");
    const int N = x.dim(0), Cin = x.dim(1), T = x.dim(2), V = x.dim(3);
    const int Cout = w.dim(0), kt = w.dim(2);
    if (T + 2 * pad_t < kt)
        throw dimension_error("conv2d: kernel of length " + std::to_string(kt) +
                              " exceeds padded input length " + std::to_string(T + 2 * pad_t));
    const int To = (T + 2 * pad_t - kt) / stride_t + 1;

    Tensor out({N, Cout, To, V});
    const std::int64_t xs = static_cast<std::int64_t>(Cin) * T * V;   // per-sample x
    const std::int64_t os = static_cast<std::int64_t>(Cout) * To * V;  // per-sample out
    const std::int64_t xr = static_cast<std::int64_t>(T) * V;          // per-channel row
    const std::int64_t orr = static_cast<std::int64_t>(To) * V;

    // Per-offset [Cout x Cin] weight slices, packed once.
    std::vector<Tensor> wk;
    wk.reserve(static_cast<std::size_t>(kt));
    for (int k = 0; k < kt; ++k) {
        Tensor s({Cout, Cin});
        for (int co = 0; co < Cout; ++co)
            for (int ci = 0; ci < Cin; ++ci) s.at(co, ci) = w.at(co, ci, k, 0);
        wk.push_back(std::move(s));
    }

    // Valid output range per kernel offset; captures by value because the
    // backward closure outlives this frame.
    auto orange = [pad_t, stride_t, T, To](int k, int& lo, int& hi) {
        const int shift = k - pad_t;
        lo = shift >= 0 ? 0 : (-shift + stride_t - 1) / stride_t;
        hi = (T - 1 - shift) / stride_t;
        if (hi > To - 1) hi = To - 1;
        return lo <= hi;
    };

    parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
        std::vector<double> pack;
        for (std::int64_t n = nb; n < ne; ++n) {
            for (int k = 0; k < kt; ++k) {
                int lo, hi;
                if (!orange(k, lo, hi)) continue;
                const int nt = hi - lo + 1;
                const int tin0 = lo * stride_t + k - pad_t;
                const double* xb = x.data() + n * xs + static_cast<std::int64_t>(tin0) * V;
                double* ob = out.data() + n * os + static_cast<std::int64_t>(lo) * V;
                if (stride_t == 1) {
                    gemm_strided(wk[static_cast<std::size_t>(k)].data(), Cin, xb, xr, ob, orr,
                                 Cout, Cin, nt * V);
                } else {
                    pack.assign(static_cast<std::size_t>(Cin) * nt * V, 0.0);
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int tt = 0; tt < nt; ++tt)
                            std::copy(xb + ci * xr + static_cast<std::int64_t>(tt) * stride_t * V,
                                      xb + ci * xr + static_cast<std::int64_t>(tt) * stride_t * V + V,
                                      pack.data() + (static_cast<std::int64_t>(ci) * nt + tt) * V);
                    gemm_strided(wk[static_cast<std::size_t>(k)].data(), Cin, pack.data(), nt * V,
                                 ob, orr, Cout, Cin, nt * V);
                }
            }
        }
    });

    return t.push(std::move(out), {xa, wa},
                  [xa, wa, wk, stride_t, pad_t, N, Cin, T, V, Cout, kt, To, xs, os, xr, orr,
                   orange](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& x = tp.value(xa);
        if (tp.tracked(xa)) {
            Tensor& gx = tp.gbuf(xa);
            parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
                std::vector<double> pack;
                for (std::int64_t n = nb; n < ne; ++n) {
                    for (int k = 0; k < kt; ++k) {
                        int lo, hi;
                        if (!orange(k, lo, hi)) continue;
                        const int nt = hi - lo + 1;
                        const int tin0 = lo * stride_t + k - pad_t;
                        const double* gb = g.data() + n * os + static_cast<std::int64_t>(lo) * V;
                        double* xgb = gx.data() + n * xs + static_cast<std::int64_t>(tin0) * V;
                        if (stride_t == 1) {
                            gemm_tn_strided(wk[static_cast<std::size_t>(k)].data(), Cin, gb, orr,
                                            xgb, xr, Cin, Cout, nt * V);
                        } else {
                            pack.assign(static_cast<std::size_t>(Cin) * nt * V, 0.0);
                            gemm_tn_strided(wk[static_cast<std::size_t>(k)].data(), Cin, gb, orr,
                                            pack.data(), nt * V, Cin, Cout, nt * V);
                            for (int ci = 0; ci < Cin; ++ci)
                                for (int tt = 0; tt < nt; ++tt) {
                                    const double* src = pack.data() + (static_cast<std::int64_t>(ci) * nt + tt) * V;
                                    double* dst = xgb + ci * xr + static_cast<std::int64_t>(tt) * stride_t * V;
                                    for (int v = 0; v < V; ++v) dst[v] += src[v];
                                }
                        }
                    }
                }
            });
        }
        if (tp.tracked(wa)) {
            Tensor& gw = tp.gbuf(wa);
            // Parallel over output channels; each channel row is summed over
            // samples in ascending order, independent of the worker count.
            parallel_for(Cout, [&](std::int64_t cb, std::int64_t ce) {
                const int rows = static_cast<int>(ce - cb);
                std::vector<double> pack;
                std::vector<double> acc(static_cast<std::size_t>(rows) * Cin);
                for (int k = 0; k < kt; ++k) {
                    int lo, hi;
                    if (!orange(k, lo, hi)) continue;
                    const int nt = hi - lo + 1;
                    const int tin0 = lo * stride_t + k - pad_t;
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (std::int64_t n = 0; n < N; ++n) {
                        const double* gb = g.data() + n * os + (cb * To + lo) * V;
                        const double* xb = x.data() + n * xs + static_cast<std::int64_t>(tin0) * V;
                        const double* xrows = xb;
                        std::int64_t xld = xr;
                        if (stride_t != 1) {
                            pack.assign(static_cast<std::size_t>(Cin) * nt * V, 0.0);
                            for (int ci = 0; ci < Cin; ++ci)
                                for (int tt = 0; tt < nt; ++tt)
                                    std::copy(xb + ci * xr + static_cast<std::int64_t>(tt) * stride_t * V,
                                              xb + ci * xr + static_cast<std::int64_t>(tt) * stride_t * V + V,
                                              pack.data() + (static_cast<std::int64_t>(ci) * nt + tt) * V);
                            xrows = pack.data();
                            xld = static_cast<std::int64_t>(nt) * V;
                        }
                        gemm_nt_strided(gb, orr, xrows, xld, acc.data(), Cin, rows, nt * V, Cin);
                    }
                    for (int r = 0; r < rows; ++r)
                        for (int ci = 0; ci < Cin; ++ci)
                            gw.at(static_cast<int>(cb) + r, ci, k, 0) += acc[static_cast<std::size_t>(r) * Cin + ci];
                }
            });
        }
    });
}

// --- batch normalization -----------------------------------------------------

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    bool initialized = false;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 0, double momentum_ = 0.1, double eps_ = 1e-5)
        : running_mean(Tensor::zeros({std::max(channels, 1)})),
          running_var(Tensor::full({std::max(channels, 1)}, 1.0)),
          momentum(momentum_), eps(eps_) {}
};

// Normalizes per channel over every other axis. Accepts [N,C,T,V] and [N,C];
// train mode uses batch statistics and updates the running estimates, eval
// mode is a pure function of the running estimates.
inline Var batchnorm(Tape& t, Var xa, Var gamma, Var beta, BatchNormState& state, bool training) {
    const Tensor& x = t.value(xa);
    if (x.rank() != 4 && x.rank() != 2)
        throw dimension_error("batchnorm: expected rank-4 or rank-2 input, got " +
                              Tensor::shape_string(x.shape()));
    const int N = x.dim(0);
    const int C = x.dim(1);
    const std::int64_t spatial = x.rank() == 4 ? static_cast<std::int64_t>(x.dim(2)) * x.dim(3) : 1;
    const std::int64_t count = N * spatial;
    if (t.value(gamma).numel() != C || t.value(beta).numel() != C)
        throw dimension_error("batchnorm: affine parameters must have " + std::to_string(C) + " entries");
    if (state.running_mean.numel() != C)
        throw state_error("batchnorm: state sized for " + std::to_string(state.running_mean.numel()) +
                          " channels, input has " + std::to_string(C));

    const double* gam = t.value(gamma).data();
    const double* bet = t.value(beta).data();
    const std::int64_t cs = spatial;          // channel block
    const std::int64_t ns = static_cast<std::int64_t>(C) * spatial;  // sample block

    Tensor out(x.shape());
    std::vector<double> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));

    if (training) {
        if (count < 2)
            throw usage_error("batchnorm: train mode needs at least 2 values per channel");
        parallel_for(C, [&](std::int64_t cb, std::int64_t ce) {
            for (std::int64_t c = cb; c < ce; ++c) {
                double s = 0.0, s2 = 0.0;
                for (int n = 0; n < N; ++n)
                    sum_and_sumsq(x.data() + n * ns + c * cs, spatial, s, s2);
                const double mu = s / static_cast<double>(count);
                double var = s2 / static_cast<double>(count) - mu * mu;
                if (var < 0.0) var = 0.0;
                mean[static_cast<std::size_t>(c)] = mu;
                invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + state.eps);
                const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
                double& rm = state.running_mean[c];
                double& rv = state.running_var[c];
                rm = (1.0 - state.momentum) * rm + state.momentum * mu;
                rv = (1.0 - state.momentum) * rv + state.momentum * unbiased;
                const double istd = invstd[static_cast<std::size_t>(c)];
                const double gsc = gam[c] * istd;
                for (int n = 0; n < N; ++n) {
                    const double* p = x.data() + n * ns + c * cs;
                    double* q = out.data() + n * ns + c * cs;
                    for (std::int64_t i = 0; i < spatial; ++i) q[i] = (p[i] - mu) * gsc + bet[c];
                }
            }
        });
        state.initialized = true;
    } else {
        if (!state.initialized)
            throw state_error("batchnorm: eval mode requires running statistics from a prior train pass");
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = state.running_mean[c];
            invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
        }
        parallel_for(C, [&](std::int64_t cb, std::int64_t ce) {
            for (std::int64_t c = cb; c < ce; ++c) {
                const double mu = mean[static_cast<std::size_t>(c)];
                const double gsc = gam[c] * invstd[static_cast<std::size_t>(c)];
                for (int n = 0; n < N; ++n) {
                    const double* p = x.data() + n * ns + c * cs;
                    double* q = out.data() + n * ns + c * cs;
                    for (std::int64_t i = 0; i < spatial; ++i) q[i] = (p[i] - mu) * gsc + bet[c];
                }
            }
        });
    }

    return t.push(std::move(out), {xa, gamma, beta},
                  [xa, gamma, beta, mean, invstd, training, N, C, spatial, count, cs, ns](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& x = tp.value(xa);
        const double* gam = tp.value(gamma).data();
        const bool tx = tp.tracked(xa);
        const bool tg = tp.tracked(gamma);
        const bool tb = tp.tracked(beta);
        double* gx = tx ? tp.gbuf(xa).data() : nullptr;
        double* gg = tg ? tp.gbuf(gamma).data() : nullptr;
        double* gb = tb ? tp.gbuf(beta).data() : nullptr;
        parallel_for(C, [&](std::int64_t cb, std::int64_t ce) {
            for (std::int64_t c = cb; c < ce; ++c) {
                const double mu = mean[static_cast<std::size_t>(c)];
                const double istd = invstd[static_cast<std::size_t>(c)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int n = 0; n < N; ++n)
                    sum_and_centered_dot(g.data() + n * ns + c * cs, x.data() + n * ns + c * cs,
                                         spatial, mu, sum_g, sum_gx);
                sum_gx *= istd;
                if (gg) gg[c] += sum_gx;
                if (gb) gb[c] += sum_g;
                if (!gx) continue;
                if (training) {
                    const double inv_count = 1.0 / static_cast<double>(count);
                    const double k = gam[c] * istd;
                    for (int n = 0; n < N; ++n) {
                        const double* gp = g.data() + n * ns + c * cs;
                        const double* xp = x.data() + n * ns + c * cs;
                        double* xg = gx + n * ns + c * cs;
                        for (std::int64_t i = 0; i < spatial; ++i) {
                            const double xhat = (xp[i] - mu) * istd;
                            xg[i] += k * (gp[i] - inv_count * (sum_g + xhat * sum_gx));
                        }
                    }
                } else {
                    const double k = gam[c] * istd;
                    for (int n = 0; n < N; ++n) {
                        const double* gp = g.data() + n * ns + c * cs;
                        double* xg = gx + n * ns + c * cs;
                        for (std::int64_t i = 0; i < spatial; ++i) xg[i] += k * gp[i];
                    }
                }
            }
        });
    });
}

// --- classification loss ----------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], stabilized by max shift.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
    const Tensor& z = t.value(logits);
    if (z.rank() != 2) throw dimension_error("cross_entropy: logits must be [N,K]");
    const int N = z.dim(0), K = z.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw usage_error("cross_entropy: got " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(N) + " rows");
    for (int lab : labels)
        if (lab < 0 || lab >= K)
            throw usage_error("cross_entropy: label " + std::to_string(lab) + " outside [0," +
                              std::to_string(K) + ")");
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* row = z.data() + static_cast<std::int64_t>(n) * K;
        double mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double lse = 0.0;
        for (int k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
        loss += std::log(lse) + mx - row[labels[static_cast<std::size_t>(n)]];
    }
    loss /= static_cast<double>(N);
    return t.push(Tensor::scalar(loss), {logits}, [logits, labels, N, K](Tape& tp, int self) {
        if (!tp.tracked(logits)) return;
        const double g = tp.grad(Var{self})[0] / static_cast<double>(N);
        const Tensor& z = tp.value(logits);
        double* gl = tp.gbuf(logits).data();
        for (int n = 0; n < N; ++n) {
            const double* row = z.data() + static_cast<std::int64_t>(n) * K;
            double* grow = gl + static_cast<std::int64_t>(n) * K;
            double mx = row[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
            double lse = 0.0;
            for (int k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(row[k] - mx) / lse;
                grow[k] += g * (p - (k == labels[static_cast<std::size_t>(n)] ? 1.0 : 0.0));
            }
        }
    });
}

}  // namespace resgcn
