#pragma once

// Tiny dense linear algebra for the few spots that need it: Cholesky factors
// of fixed covariances and normal-equation solves in the policy fit. Matrices
// are row-major std::vector<double>; lower-triangular factors may be stored
// packed (row-major, diagonal included: element (i,j) at i*(i+1)/2 + j).

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace rarecast::linalg {

inline std::size_t packed_size(std::size_t n) { return n * (n + 1) / 2; }

inline double packed_at(std::span<const double> chol, std::size_t i, std::size_t j) {
    return chol[i * (i + 1) / 2 + j];
}

/// Cholesky of a dense SPD matrix (row-major n*n) into packed lower form.
inline std::vector<double> cholesky_packed(std::span<const double> a, std::size_t n) {
    std::vector<double> l(packed_size(n), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= l[i * (i + 1) / 2 + k] * l[j * (j + 1) / 2 + k];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
                l[i * (i + 1) / 2 + j] = std::sqrt(s);
            } else {
                l[i * (i + 1) / 2 + j] = s / l[j * (j + 1) / 2 + j];
            }
        }
    }
    return l;
}

/// Solve L y = b with packed lower-triangular L.
inline void forward_solve_packed(std::span<const double> l, std::size_t n, std::span<double> b) {
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t j = 0; j < i; ++j) s -= packed_at(l, i, j) * b[j];
        b[i] = s / packed_at(l, i, i);
    }
}

/// Solve L^T y = b with packed lower-triangular L.
inline void backward_solve_packed(std::span<const double> l, std::size_t n, std::span<double> b) {
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t j = ii + 1; j < n; ++j) s -= packed_at(l, j, ii) * b[j];
        b[ii] = s / packed_at(l, ii, ii);
    }
}

/// Solve A x = b for SPD A via one Cholesky; b is overwritten with x.
inline void spd_solve(std::span<const double> a, std::size_t n, std::span<double> b) {
    const auto l = cholesky_packed(a, n);
    forward_solve_packed(l, n, b);
    backward_solve_packed(l, n, b);
}

/// Inverse of an SPD matrix, dense row-major result.
inline std::vector<double> spd_inverse(std::span<const double> a, std::size_t n) {
    const auto l = cholesky_packed(a, n);
    std::vector<double> inv(n * n, 0.0);
    std::vector<double> col(n);
    for (std::size_t c = 0; c < n; ++c) {
        std::fill(col.begin(), col.end(), 0.0);
        col[c] = 1.0;
        forward_solve_packed(l, n, col);
        backward_solve_packed(l, n, col);
        for (std::size_t r = 0; r < n; ++r) inv[r * n + c] = col[r];
    }
    return inv;
}

}  // namespace rarecast::linalg
