#pragma once

// Shared helpers for the unit and acceptance suites: reference oracles that
// deliberately use the dumbest possible implementation, plus a central
// finite-difference gradient checker. Everything here stays independent of
// the library's fast paths.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "resgcn/autograd.hpp"
#include "resgcn/rng.hpp"
#include "resgcn/tensor.hpp"

namespace testsupport {

// Triple-loop matrix product.
inline resgcn::Tensor naive_matmul(const resgcn::Tensor& a, const resgcn::Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    resgcn::Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
            c.at(i, j) = s;
        }
    return c;
}

// Sliding-window cross-correlation over the T axis, zero padded.
inline resgcn::Tensor naive_conv2d(const resgcn::Tensor& x, const resgcn::Tensor& w,
                                   int stride_t, int pad_t) {
    const int N = x.dim(0), Cin = x.dim(1), T = x.dim(2), V = x.dim(3);
    const int Cout = w.dim(0), kt = w.dim(2);
    const int To = (T + 2 * pad_t - kt) / stride_t + 1;
    resgcn::Tensor out({N, Cout, To, V});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int to = 0; to < To; ++to)
                for (int v = 0; v < V; ++v) {
                    double s = 0.0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int k = 0; k < kt; ++k) {
                            const int t = to * stride_t + k - pad_t;
                            if (t < 0 || t >= T) continue;
                            s += w.at(co, ci, k, 0) * x.at(n, ci, t, v);
                        }
                    out.at(n, co, to, v) = s;
                }
    return out;
}

inline resgcn::Tensor random_tensor(std::vector<int> shape, resgcn::Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
    resgcn::Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(const resgcn::Tensor& a, const resgcn::Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct GradCheckReport {
    double worst_ratio = 0.0;  // max over coordinates of |analytic-fd| / (atol + rtol*scale)
    std::string worst_param;
    std::int64_t coords = 0;
    bool ok() const { return worst_ratio <= 1.0; }
};

// Central finite differences against tape gradients. `loss` must be a pure
// function of the current parameter values: it builds a fresh tape each call.
// `with_grad` runs backward and leaves gradients in the parameters.
inline GradCheckReport check_gradients(
    const std::vector<std::pair<std::string, resgcn::Parameter*>>& params,
    const std::function<double(bool with_grad)>& loss,
    double h = 1e-5, double rtol = 1e-6, double atol = 1e-9) {
    for (auto& [name, p] : params) p->zero_grad();
    loss(true);
    std::vector<resgcn::Tensor> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) analytic.push_back(p->grad);

    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        resgcn::Parameter& p = *params[pi].second;
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double keep = p.value[i];
            p.value[i] = keep + h;
            const double up = loss(false);
            p.value[i] = keep - h;
            const double dn = loss(false);
            p.value[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[pi][i];
            const double scale = std::max(std::abs(fd), std::abs(an));
            const double ratio = std::abs(an - fd) / (atol + rtol * scale);
            ++rep.coords;
            if (ratio > rep.worst_ratio) {
                rep.worst_ratio = ratio;
                rep.worst_param = params[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

}  // namespace testsupport
