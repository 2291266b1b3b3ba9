#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adasub {

using Vec = std::vector<double>;

/// Dense row-major array of doubles, rank 0 (scalar), 1 (vector) or 2 (matrix).
/// The universal value type for parameters, gradients, bases and batches.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(element_count(shape_)), 0.0);
    }

    static Tensor scalar(double v) {
        Tensor t{std::vector<int64_t>{}};
        t.data_[0] = v;
        return t;
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor from_vec(Vec v) {
        Tensor t;
        t.shape_ = {static_cast<int64_t>(v.size())};
        t.data_ = std::move(v);
        return t;
    }

    static Tensor identity(int64_t n) {
        Tensor t{{n, n}};
        for (int64_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }

    int64_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 1); }
    int64_t cols() const { return rank() == 2 ? shape_[1] : 1; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& operator()(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double operator()(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

    Vec& data() { return data_; }
    const Vec& data() const { return data_; }

    double value() const { return data_.at(0); }  // scalar access

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void require_finite(const std::string& what) const {
        if (!all_finite()) throw std::invalid_argument(what + ": non-finite entries");
    }

    Vec column(int64_t j) const {
        Vec c(static_cast<size_t>(rows()));
        for (int64_t i = 0; i < rows(); ++i) c[static_cast<size_t>(i)] = (*this)(i, j);
        return c;
    }

    void set_column(int64_t j, const Vec& c) {
        for (int64_t i = 0; i < rows(); ++i) (*this)(i, j) = c[static_cast<size_t>(i)];
    }

    static int64_t element_count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int64_t> shape_;
    Vec data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale_inplace(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

// C = op(A) * op(B) with optional transposes. Loop orders chosen so the inner
// loop always walks contiguous memory.
inline Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    const int64_t am = trans_a ? a.cols() : a.rows();
    const int64_t ak = trans_a ? a.rows() : a.cols();
    const int64_t bk = trans_b ? b.cols() : b.rows();
    const int64_t bn = trans_b ? b.rows() : b.cols();
    if (ak != bk) throw std::invalid_argument("gemm: inner dimensions differ");

    Tensor c{{am, bn}};
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    const int64_t lda = a.cols(), ldb = b.cols();

    if (!trans_a && !trans_b) {
        for (int64_t i = 0; i < am; ++i)
            for (int64_t k = 0; k < ak; ++k) {
                const double aik = pa[i * lda + k];
                if (aik == 0.0) continue;
                const double* brow = pb + k * ldb;
                double* crow = pc + i * bn;
                for (int64_t j = 0; j < bn; ++j) crow[j] += aik * brow[j];
            }
    } else if (!trans_a && trans_b) {
        for (int64_t i = 0; i < am; ++i)
            for (int64_t j = 0; j < bn; ++j) {
                const double* arow = pa + i * lda;
                const double* brow = pb + j * ldb;
                double s = 0.0;
                for (int64_t k = 0; k < ak; ++k) s += arow[k] * brow[k];
                pc[i * bn + j] = s;
            }
    } else if (trans_a && !trans_b) {
        for (int64_t k = 0; k < ak; ++k) {
            const double* arow = pa + k * lda;
            const double* brow = pb + k * ldb;
            for (int64_t i = 0; i < am; ++i) {
                const double aki = arow[i];
                if (aki == 0.0) continue;
                double* crow = pc + i * bn;
                for (int64_t j = 0; j < bn; ++j) crow[j] += aki * brow[j];
            }
        }
    } else {
        for (int64_t i = 0; i < am; ++i)
            for (int64_t j = 0; j < bn; ++j) {
                double s = 0.0;
                for (int64_t k = 0; k < ak; ++k) s += pa[k * lda + i] * pb[j * ldb + k];
                pc[i * bn + j] = s;
            }
    }
    return c;
}

inline Vec matvec(const Tensor& a, const Vec& x, bool trans = false) {
    const int64_t m = trans ? a.cols() : a.rows();
    const int64_t n = trans ? a.rows() : a.cols();
    if (static_cast<int64_t>(x.size()) != n) throw std::invalid_argument("matvec: size mismatch");
    Vec y(static_cast<size_t>(m), 0.0);
    if (!trans) {
        for (int64_t i = 0; i < m; ++i) {
            const double* row = a.data().data() + i * a.cols();
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += row[j] * x[static_cast<size_t>(j)];
            y[static_cast<size_t>(i)] = s;
        }
    } else {
        for (int64_t j = 0; j < n; ++j) {
            const double* row = a.data().data() + j * a.cols();
            const double xj = x[static_cast<size_t>(j)];
            if (xj == 0.0) continue;
            for (int64_t i = 0; i < m; ++i) y[static_cast<size_t>(i)] += row[i] * xj;
        }
    }
    return y;
}

inline double frobenius_norm(const Tensor& a) { return norm2(a.data()); }

}  // namespace adasub
