#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "wlora/errors.hpp"

namespace wlora::linalg {

// Row-major dense matrix view helpers for the small host-side factorizations
// that do not participate in autodiff.

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

inline Mat matmul(const Mat& x, const Mat& y) {
    if (x.cols != y.rows) {
        throw DimensionError("linalg::matmul: inner dimensions disagree");
    }
    Mat out(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t l = 0; l < x.cols; ++l) {
            const double v = x(i, l);
            for (std::size_t j = 0; j < y.cols; ++j) {
                out(i, j) += v * y(l, j);
            }
        }
    }
    return out;
}

inline double frobenius_norm(const Mat& x) {
    double acc = 0.0;
    for (double v : x.a) {
        acc += v * v;
    }
    return std::sqrt(acc);
}

struct ThinQR {
    Mat q;  // rows x k, orthonormal columns
    Mat r;  // k x k, upper triangular
};

// Thin QR of a tall matrix (rows >= cols) by Householder reflections.
// Throws DegeneracyError when the input is numerically rank deficient
// (smallest |R_ii| below rel_tol times the largest).
inline ThinQR thin_qr(const Mat& input, double rel_tol = 1e-12) {
    const std::size_t m = input.rows;
    const std::size_t k = input.cols;
    if (m < k) {
        throw ContractError("thin_qr: matrix must be tall (rows >= cols)");
    }
    Mat work = input;                      // reduced to R in place
    std::vector<std::vector<double>> vs;   // Householder vectors
    vs.reserve(k);

    for (std::size_t j = 0; j < k; ++j) {
        double norm = 0.0;
        for (std::size_t i = j; i < m; ++i) {
            norm += work(i, j) * work(i, j);
        }
        norm = std::sqrt(norm);
        std::vector<double> v(m - j, 0.0);
        for (std::size_t i = j; i < m; ++i) {
            v[i - j] = work(i, j);
        }
        const double alpha = v[0] >= 0.0 ? -norm : norm;
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double x : v) {
            vnorm2 += x * x;
        }
        if (vnorm2 > 0.0) {
            // apply H = I - 2 vv^T / (v^T v) to the trailing block
            for (std::size_t c = j; c < k; ++c) {
                double dot = 0.0;
                for (std::size_t i = j; i < m; ++i) {
                    dot += v[i - j] * work(i, c);
                }
                const double f = 2.0 * dot / vnorm2;
                for (std::size_t i = j; i < m; ++i) {
                    work(i, c) -= f * v[i - j];
                }
            }
        }
        vs.push_back(std::move(v));
    }

    ThinQR out;
    out.r = Mat(k, k);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i; j < k; ++j) {
            out.r(i, j) = work(i, j);
        }
    }

    double max_diag = 0.0;
    double min_diag = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
        const double d = std::abs(out.r(i, i));
        max_diag = std::max(max_diag, d);
        min_diag = std::min(min_diag, d);
    }
    if (max_diag == 0.0 || min_diag < rel_tol * max_diag) {
        throw DegeneracyError("thin_qr: matrix is numerically rank deficient");
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I.
    out.q = Mat(m, k);
    for (std::size_t j = 0; j < k; ++j) {
        out.q(j, j) = 1.0;
    }
    for (std::size_t j = k; j-- > 0;) {
        const auto& v = vs[j];
        double vnorm2 = 0.0;
        for (double x : v) {
            vnorm2 += x * x;
        }
        if (vnorm2 == 0.0) {
            continue;
        }
        for (std::size_t c = 0; c < k; ++c) {
            double dot = 0.0;
            for (std::size_t i = j; i < m; ++i) {
                dot += v[i - j] * out.q(i, c);
            }
            const double f = 2.0 * dot / vnorm2;
            for (std::size_t i = j; i < m; ++i) {
                out.q(i, c) -= f * v[i - j];
            }
        }
    }
    return out;
}

}  // namespace wlora::linalg
