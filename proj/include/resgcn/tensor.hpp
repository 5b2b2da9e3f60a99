#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <utility>
#include <vector>

#include "resgcn/common.hpp"

namespace resgcn {

// Dense row-major array of doubles. Shapes are immutable after construction;
// reshaped() returns a new value over the same data.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
            throw dimension_error("tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data_[static_cast<std::size_t>(i) * n + i] = 1.0;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    template <typename... Ix>
    double& at(Ix... ix) {
        return data_[static_cast<std::size_t>(offset_of(ix...))];
    }
    template <typename... Ix>
    double at(Ix... ix) const {
        return data_[static_cast<std::size_t>(offset_of(ix...))];
    }

    std::vector<std::int64_t> strides() const {
        std::vector<std::int64_t> s(shape_.size(), 1);
        for (int i = rank() - 2; i >= 0; --i)
            s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape_[static_cast<std::size_t>(i) + 1];
        return s;
    }

    // Same data, new extents; total element count must be preserved.
    Tensor reshaped(std::vector<int> shape) const {
        if (checked_numel(shape) != numel()) {
            throw dimension_error("reshape: cannot view " + shape_string(shape_) + " as " +
                                  shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    // Contiguous sub-block along one axis.
    Tensor narrow(int axis, int start, int len) const {
        if (axis < 0 || axis >= rank() || start < 0 || len < 1 || start + len > dim(axis)) {
            throw dimension_error("narrow: invalid slice [" + std::to_string(start) + "," +
                                  std::to_string(start + len) + ") of axis " + std::to_string(axis) +
                                  " in " + shape_string(shape_));
        }
        std::int64_t outer = 1, inner = 1;
        for (int a = 0; a < axis; ++a) outer *= dim(a);
        for (int a = axis + 1; a < rank(); ++a) inner *= dim(a);
        std::vector<int> oshape = shape_;
        oshape[static_cast<std::size_t>(axis)] = len;
        Tensor out(oshape);
        const std::int64_t src_row = static_cast<std::int64_t>(dim(axis)) * inner;
        const std::int64_t dst_row = static_cast<std::int64_t>(len) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = data() + o * src_row + start * inner;
            std::copy(src, src + dst_row, out.data() + o * dst_row);
        }
        return out;
    }

    static std::string shape_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ']';
        return os.str();
    }

private:
    static std::int64_t checked_numel(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw dimension_error("tensor: non-positive extent in " + shape_string(shape));
            n *= d;
        }
        return n;
    }

    template <typename... Ix>
    std::int64_t offset_of(Ix... ix) const {
        const int idx[] = {static_cast<int>(ix)...};
        constexpr int k = sizeof...(Ix);
        std::int64_t off = 0;
        for (int a = 0; a < k; ++a) off = off * shape_[static_cast<std::size_t>(a)] + idx[a];
        return off;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

// --- dense kernels ------------------------------------------------------
//
// All convolution and matrix work in the library funnels through these three
// accumulate kernels. Loop orders are chosen so the inner loop runs over a
// contiguous row and auto-vectorizes.

// C[m x n] += A[m x k] * B[k x n], with explicit row strides.
inline void gemm_strided(const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                         double* c, std::int64_t ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + i * lda;
        double* cr = c + i * ldc;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b + p * ldb;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n], with row strides.
// i-outer keeps each output row hot while B streams; per-element accumulation
// stays in ascending p order.
inline void gemm_tn_strided(const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                            double* c, std::int64_t ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* cr = c + i * ldc;
        for (int p = 0; p < k; ++p) {
            const double av = a[p * lda + i];
            if (av == 0.0) continue;
            const double* br = b + p * ldb;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    gemm_strided(a, k, b, n, c, n, m, k, n);
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    gemm_tn_strided(a, m, b, n, c, n, m, k, n);
}

// Dot product over eight independent accumulator lanes. The lane layout
// fixes the summation order, so results are deterministic, and the
// independent chains let the compiler vectorize what a strict serial
// reduction cannot.
inline double dot_lanes(const double* a, const double* b, int k) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int p = 0;
    for (; p + 8 <= k; p += 8) {
        s0 += a[p] * b[p];
        s1 += a[p + 1] * b[p + 1];
        s2 += a[p + 2] * b[p + 2];
        s3 += a[p + 3] * b[p + 3];
        s4 += a[p + 4] * b[p + 4];
        s5 += a[p + 5] * b[p + 5];
        s6 += a[p + 6] * b[p + 6];
        s7 += a[p + 7] * b[p + 7];
    }
    double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; p < k; ++p) s += a[p] * b[p];
    return s;
}

// C[m x n] += A * B^T where A is [m x k], B is [n x k], with row strides.
inline void gemm_nt_strided(const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                            double* c, std::int64_t ldc, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + i * lda;
        double* cr = c + i * ldc;
        for (int j = 0; j < n; ++j) cr[j] += dot_lanes(ar, b + j * ldb, k);
    }
}

// C[m x n] += A * B^T where A is [m x k], B is [n x k]
inline void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    gemm_nt_strided(a, k, b, k, c, n, m, k, n);
}

// sum and sum of squares in one pass, four lanes each
inline void sum_and_sumsq(const double* p, std::int64_t n, double& out_sum, double& out_sumsq) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, q0 = 0, q1 = 0, q2 = 0, q3 = 0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += p[i];
        q0 += p[i] * p[i];
        s1 += p[i + 1];
        q1 += p[i + 1] * p[i + 1];
        s2 += p[i + 2];
        q2 += p[i + 2] * p[i + 2];
        s3 += p[i + 3];
        q3 += p[i + 3] * p[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    double q = (q0 + q1) + (q2 + q3);
    for (; i < n; ++i) {
        s += p[i];
        q += p[i] * p[i];
    }
    out_sum += s;
    out_sumsq += q;
}

// sg += sum(g); sgx += sum(g * (x - mu))
inline void sum_and_centered_dot(const double* g, const double* x, std::int64_t n, double mu,
                                 double& sg, double& sgx) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, q0 = 0, q1 = 0, q2 = 0, q3 = 0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += g[i];
        q0 += g[i] * (x[i] - mu);
        s1 += g[i + 1];
        q1 += g[i + 1] * (x[i + 1] - mu);
        s2 += g[i + 2];
        q2 += g[i + 2] * (x[i + 2] - mu);
        s3 += g[i + 3];
        q3 += g[i + 3] * (x[i + 3] - mu);
    }
    double s = (s0 + s1) + (s2 + s3);
    double q = (q0 + q1) + (q2 + q3);
    for (; i < n; ++i) {
        s += g[i];
        q += g[i] * (x[i] - mu);
    }
    sg += s;
    sgx += q;
}

}  // namespace resgcn
