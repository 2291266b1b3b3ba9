#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>

#include "adasub/tensor.hpp"

namespace adasub {

/// Symmetric eigendecomposition A = U diag(values) U^T, eigenvalues ascending,
/// column i of `vectors` is the eigenvector for values[i].
struct EigDecomposition {
    Tensor vectors;            // m x m orthogonal
    std::vector<double> values;  // length m, ascending

    double min_value() const { return values.front(); }
    double max_value() const { return values.back(); }
};

inline constexpr double kDefaultDropTol = 1e-8;

// Orthonormal basis for the range of `columns` (n x j), built with modified
// Gram-Schmidt plus one reorthogonalization pass. Columns are processed from
// the LAST input column backwards so the newest stored gradient is never
// dropped when nonzero; surviving columns keep their input order. A column is
// dropped when its component orthogonal to the already accepted ones has norm
// <= drop_tol times its own norm. Returns an n x r matrix with r <= j;
// r == 0 signals the empty-basis condition (all columns zero).
inline Tensor orthonormalize(const Tensor& columns, double drop_tol = kDefaultDropTol) {
    const int64_t n = columns.rows();
    const int64_t j = columns.cols();
    if (columns.rank() != 2 || n < 1 || j < 1)
        throw std::invalid_argument("orthonormalize: expected a nonempty n x j matrix");
    columns.require_finite("orthonormalize");

    std::vector<Vec> accepted;            // in processing order
    std::vector<int64_t> accepted_input;  // original column index of each accepted vector
    accepted.reserve(static_cast<size_t>(j));

    for (int64_t c = j - 1; c >= 0; --c) {
        Vec v = columns.column(c);
        const double nrm0 = norm2(v);
        if (nrm0 == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass) {
            for (const Vec& q : accepted) {
                const double proj = dot(q, v);
                axpy(-proj, q, v);
            }
        }
        const double nrm = norm2(v);
        if (nrm <= drop_tol * nrm0) continue;
        scale_inplace(v, 1.0 / nrm);
        accepted.push_back(std::move(v));
        accepted_input.push_back(c);
    }

    const int64_t r = static_cast<int64_t>(accepted.size());
    Tensor q{{n, r}};
    // Emit survivors in their original input order.
    std::vector<size_t> order(accepted.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return accepted_input[a] < accepted_input[b];
    });
    for (int64_t out = 0; out < r; ++out) q.set_column(out, accepted[order[static_cast<size_t>(out)]]);
    return q;
}

namespace detail {

// One cyclic Jacobi sweep over the strict upper triangle; returns rotations applied.
inline int jacobi_sweep(Tensor& a, Tensor& u, double threshold) {
    const int64_t m = a.rows();
    int rotations = 0;
    for (int64_t p = 0; p < m - 1; ++p) {
        for (int64_t q = p + 1; q < m; ++q) {
            const double apq = a(p, q);
            if (std::abs(apq) <= threshold) continue;
            ++rotations;
            const double app = a(p, p), aqq = a(q, q);
            const double theta = (aqq - app) / (2.0 * apq);
            const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                             (std::abs(theta) + std::sqrt(theta * theta + 1.0));
            const double c = 1.0 / std::sqrt(t * t + 1.0);
            const double s = t * c;

            for (int64_t k = 0; k < m; ++k) {
                const double akp = a(k, p), akq = a(k, q);
                a(k, p) = c * akp - s * akq;
                a(k, q) = s * akp + c * akq;
            }
            for (int64_t k = 0; k < m; ++k) {
                const double apk = a(p, k), aqk = a(q, k);
                a(p, k) = c * apk - s * aqk;
                a(q, k) = s * apk + c * aqk;
            }
            for (int64_t k = 0; k < m; ++k) {
                const double ukp = u(k, p), ukq = u(k, q);
                u(k, p) = c * ukp - s * ukq;
                u(k, q) = s * ukp + c * ukq;
            }
        }
    }
    return rotations;
}

inline double offdiag_frobenius(const Tensor& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace detail

// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
// The input is symmetrized as (A + A^T)/2 first; iteration stops when the
// off-diagonal Frobenius norm falls below 1e-12 * ||A||_F (at most 100 sweeps).
inline EigDecomposition sym_eig(const Tensor& a_in) {
    if (a_in.rank() != 2 || a_in.rows() != a_in.cols())
        throw std::invalid_argument("sym_eig: matrix must be square");
    a_in.require_finite("sym_eig");

    const int64_t m = a_in.rows();
    Tensor a{{m, m}};
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < m; ++j) a(i, j) = 0.5 * (a_in(i, j) + a_in(j, i));

    const double norm_a = frobenius_norm(a);
    const double stop = 1e-12 * norm_a;
    Tensor u = Tensor::identity(m);

    if (norm_a > 0.0) {
        for (int sweep = 0; sweep < 100; ++sweep) {
            if (detail::offdiag_frobenius(a) <= stop) break;
            // Rotation threshold shrinks with the remaining off-diagonal mass.
            const double thr = detail::offdiag_frobenius(a) / (static_cast<double>(m) * m);
            if (detail::jacobi_sweep(a, u, std::min(thr, stop)) == 0 &&
                detail::jacobi_sweep(a, u, 0.0) == 0)
                break;
        }
    }

    EigDecomposition eig;
    eig.values.resize(static_cast<size_t>(m));
    std::vector<int64_t> idx(static_cast<size_t>(m));
    std::iota(idx.begin(), idx.end(), int64_t{0});
    std::sort(idx.begin(), idx.end(), [&](int64_t x, int64_t y) { return a(x, x) < a(y, y); });

    eig.vectors = Tensor{{m, m}};
    for (int64_t out = 0; out < m; ++out) {
        const int64_t src = idx[static_cast<size_t>(out)];
        eig.values[static_cast<size_t>(out)] = a(src, src);
        for (int64_t k = 0; k < m; ++k) eig.vectors(k, out) = u(k, src);
    }
    return eig;
}

// x = U (Lambda + alpha I)^{-1} U^T b. Requires min(Lambda) + alpha > 0;
// a non-positive shift means the caller's regularization went wrong.
inline Vec apply_shifted_inverse(const EigDecomposition& eig, double alpha, const Vec& b) {
    const int64_t m = eig.vectors.rows();
    if (static_cast<int64_t>(b.size()) != m)
        throw std::invalid_argument("apply_shifted_inverse: size mismatch");
    if (eig.min_value() + alpha <= 0.0)
        throw std::domain_error("apply_shifted_inverse: shifted matrix is not positive definite");

    Vec t = matvec(eig.vectors, b, /*trans=*/true);
    for (int64_t i = 0; i < m; ++i) t[static_cast<size_t>(i)] /= eig.values[static_cast<size_t>(i)] + alpha;
    return matvec(eig.vectors, t, /*trans=*/false);
}

// Cholesky solve of A x = b for symmetric positive definite A.
inline Vec cholesky_solve(const Tensor& a, const Vec& b) {
    const int64_t n = a.rows();
    if (a.rank() != 2 || a.cols() != n || static_cast<int64_t>(b.size()) != n)
        throw std::invalid_argument("cholesky_solve: shape mismatch");
    Tensor l{{n, n}};
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (int64_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0) throw std::domain_error("cholesky_solve: matrix not positive definite");
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    Vec y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double s = b[static_cast<size_t>(i)];
        for (int64_t k = 0; k < i; ++k) s -= l(i, k) * y[static_cast<size_t>(k)];
        y[static_cast<size_t>(i)] = s / l(i, i);
    }
    Vec x(static_cast<size_t>(n));
    for (int64_t i = n - 1; i >= 0; --i) {
        double s = y[static_cast<size_t>(i)];
        for (int64_t k = i + 1; k < n; ++k) s -= l(k, i) * x[static_cast<size_t>(k)];
        x[static_cast<size_t>(i)] = s / l(i, i);
    }
    return x;
}

}  // namespace adasub
