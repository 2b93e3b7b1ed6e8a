#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "wlora/errors.hpp"
#include "wlora/linalg.hpp"
#include "wlora/rng.hpp"
#include "wlora/tensor.hpp"

namespace wlora {

// A pretrained weight that never receives gradient updates.
struct FrozenBase {
    Tensor w;  // d x k

    explicit FrozenBase(Tensor weight) : w(std::move(weight)) {
        if (w.ndim() != 2) {
            throw DimensionError("FrozenBase: weight must be 2-d, got " + shape_str(w.shape()));
        }
        w.set_requires_grad(false);
    }

    std::size_t d() const { return w.rows(); }
    std::size_t k() const { return w.cols(); }
};

// One low-rank adapter pair (A, B) bound to a layer slot. Freshly constructed
// adapters have B = 0 so the update starts at zero.
struct AdapterState {
    int layer_id = 0;
    Tensor a;  // d x r, Gaussian init
    Tensor b;  // r x k, zero init
    std::size_t rank = 0;
    double alpha = 32.0;
    double dropout_p = 0.05;
    bool active = true;

    static AdapterState init(int layer_id, std::size_t d, std::size_t k, std::size_t r, Rng& rng,
                             double alpha = 32.0, double dropout_p = 0.05,
                             double a_stddev = 0.02) {
        if (r < 1 || r > std::min(d, k)) {
            throw ContractError("AdapterState: rank " + std::to_string(r) +
                                " must satisfy 1 <= r <= min(d,k) = " +
                                std::to_string(std::min(d, k)));
        }
        if (dropout_p < 0.0 || dropout_p >= 1.0) {
            throw ContractError("AdapterState: dropout_p must lie in [0,1)");
        }
        AdapterState s;
        s.layer_id = layer_id;
        s.a = Tensor::randn({d, r}, rng, a_stddev, true);
        s.b = Tensor::zeros({r, k}, true);
        s.rank = r;
        s.alpha = alpha;
        s.dropout_p = dropout_p;
        return s;
    }

    std::size_t d() const { return a.rows(); }
    std::size_t k() const { return b.cols(); }
    double scale() const { return alpha / static_cast<double>(rank); }

    // Materialized A*B as a plain matrix (no scale, no graph).
    linalg::Mat product() const {
        linalg::Mat am(d(), rank), bm(rank, k());
        am.a = a.data();
        bm.a = b.data();
        return linalg::matmul(am, bm);
    }
};

// Trainable parameter count: r * (d + k) while active, 0 once disconnected.
inline long long adapter_param_count(const AdapterState& adapter) {
    if (!adapter.active) {
        return 0;
    }
    return static_cast<long long>(adapter.rank) *
           static_cast<long long>(adapter.d() + adapter.k());
}

struct ForwardCtx {
    bool training = false;
    Rng* rng = nullptr;  // consulted only when training and dropout_p > 0
};

namespace detail_adapters {

// Shared adapter branch: (alpha/r) * A (B x_drop).
inline Tensor adapter_branch(const AdapterState& adapter, const Tensor& x, const ForwardCtx& ctx) {
    Tensor inp = x;
    if (ctx.training && adapter.dropout_p > 0.0) {
        if (ctx.rng == nullptr) {
            throw StateError("adapter forward: training with dropout requires an RNG");
        }
        inp = dropout(inp, adapter.dropout_p, *ctx.rng);
    }
    return scale(matmul(adapter.a, matmul(adapter.b, inp)), adapter.scale());
}

}  // namespace detail_adapters

// h x = W x + (alpha/r) A B x, dropout on the adapter branch input only.
inline Tensor lora_forward(const FrozenBase& base, const AdapterState& adapter, const Tensor& x,
                           const ForwardCtx& ctx = {}) {
    if (x.shape().at(0) != base.k()) {
        throw DimensionError("lora_forward: input " + shape_str(x.shape()) +
                             " does not match base " + shape_str(base.w.shape()));
    }
    if (adapter.d() != base.d() || adapter.k() != base.k()) {
        throw DimensionError("lora_forward: adapter (" + std::to_string(adapter.d()) + "," +
                             std::to_string(adapter.k()) + ") does not match base " +
                             shape_str(base.w.shape()));
    }
    return add(matmul(base.w, x), detail_adapters::adapter_branch(adapter, x, ctx));
}

// h x = W x + omega_i * (alpha/r) A B x, with omega_i read from the gate
// vector. A disconnected adapter (inactive with zero gate) contributes
// neither compute nor gradient.
inline Tensor weighted_forward(const FrozenBase& base, const AdapterState& adapter,
                               const Tensor& gates, std::size_t gate_index, const Tensor& x,
                               const ForwardCtx& ctx = {}) {
    if (x.shape().at(0) != base.k()) {
        throw DimensionError("weighted_forward: input " + shape_str(x.shape()) +
                             " does not match base " + shape_str(base.w.shape()));
    }
    if (!adapter.active) {
        return matmul(base.w, x);
    }
    Tensor branch = detail_adapters::adapter_branch(adapter, x, ctx);
    return add(matmul(base.w, x), scale_by_entry(branch, gates, gate_index));
}

// --- rank expansion -------------------------------------------------------

// New columns of A drawn Gaussian, new rows of B exactly zero, so the
// materialized product is unchanged. The scale divisor moves to r_new unless
// keep_effective_scale bumps alpha proportionally.
inline AdapterState expand_rank_gaussian(const AdapterState& adapter, std::size_t r_new, Rng& rng,
                                         bool keep_effective_scale = false,
                                         double a_stddev = 0.02) {
    if (!adapter.active) {
        throw StateError("expand_rank_gaussian: adapter is disconnected");
    }
    if (r_new <= adapter.rank) {
        throw ContractError("expand_rank_gaussian: r_new " + std::to_string(r_new) +
                            " must exceed current rank " + std::to_string(adapter.rank));
    }
    const std::size_t d = adapter.d();
    const std::size_t k = adapter.k();
    const std::size_t r = adapter.rank;

    std::vector<double> a_new(d * r_new);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            a_new[i * r_new + j] = adapter.a.data()[i * r + j];
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = r; j < r_new; ++j) {
            a_new[i * r_new + j] = rng.normal() * a_stddev;
        }
    }
    std::vector<double> b_new(r_new * k, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            b_new[i * k + j] = adapter.b.data()[i * k + j];
        }
    }

    AdapterState out = adapter;
    out.a = Tensor::from({d, r_new}, std::move(a_new), true);
    out.b = Tensor::from({r_new, k}, std::move(b_new), true);
    out.rank = r_new;
    if (keep_effective_scale) {
        out.alpha = adapter.alpha * static_cast<double>(r_new) / static_cast<double>(r);
    }
    return out;
}

// QR-based expansion: A = Q_A R_A, the expanded A carries [Q_A | P N] with P
// the projector onto the orthogonal complement of range(Q_A), and B's top
// block becomes R_A B.
inline AdapterState expand_rank_qr(const AdapterState& adapter, std::size_t r_new, Rng& rng,
                                   bool keep_effective_scale = false, double rank_tol = 1e-12) {
    if (!adapter.active) {
        throw StateError("expand_rank_qr: adapter is disconnected");
    }
    if (r_new <= adapter.rank) {
        throw ContractError("expand_rank_qr: r_new " + std::to_string(r_new) +
                            " must exceed current rank " + std::to_string(adapter.rank));
    }
    const std::size_t d = adapter.d();
    const std::size_t k = adapter.k();
    const std::size_t r = adapter.rank;

    linalg::Mat am(d, r);
    am.a = adapter.a.data();
    linalg::ThinQR qr;
    try {
        qr = linalg::thin_qr(am, rank_tol);
    } catch (const DegeneracyError&) {
        throw DegeneracyError(
            "expand_rank_qr: A is numerically rank deficient; use the Gaussian scheme instead");
    }

    // New columns: project Gaussian draws onto the complement of range(Q_A).
    std::vector<double> a_new(d * r_new, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            a_new[i * r_new + j] = qr.q(i, j);
        }
    }
    for (std::size_t j = r; j < r_new; ++j) {
        std::vector<double> col(d);
        for (std::size_t i = 0; i < d; ++i) {
            col[i] = rng.normal();
        }
        // col -= Q (Q^T col)
        std::vector<double> proj(r, 0.0);
        for (std::size_t l = 0; l < r; ++l) {
            for (std::size_t i = 0; i < d; ++i) {
                proj[l] += qr.q(i, l) * col[i];
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t l = 0; l < r; ++l) {
                col[i] -= qr.q(i, l) * proj[l];
            }
            a_new[i * r_new + j] = col[i];
        }
    }

    // B top block = R_A * B, remaining rows zero.
    linalg::Mat bm(r, k);
    bm.a = adapter.b.data();
    linalg::Mat rb = linalg::matmul(qr.r, bm);
    std::vector<double> b_new(r_new * k, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            b_new[i * k + j] = rb(i, j);
        }
    }

    AdapterState out = adapter;
    out.a = Tensor::from({d, r_new}, std::move(a_new), true);
    out.b = Tensor::from({r_new, k}, std::move(b_new), true);
    out.rank = r_new;
    if (keep_effective_scale) {
        out.alpha = adapter.alpha * static_cast<double>(r_new) / static_cast<double>(r);
    }
    return out;
}

// Relative Frobenius residual of the materialized product across an expansion.
inline double expansion_residual(const AdapterState& before, const AdapterState& after) {
    linalg::Mat p0 = before.product();
    linalg::Mat p1 = after.product();
    double num = 0.0;
    for (std::size_t i = 0; i < p0.a.size(); ++i) {
        const double diff = p1.a[i] - p0.a[i];
        num += diff * diff;
    }
    const double denom = std::max(1.0, linalg::frobenius_norm(p0));
    return std::sqrt(num) / denom;
}

}  // namespace wlora
