#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "wlora/linalg.hpp"
#include "wlora/tensor.hpp"

namespace wlora::testutil {

// Independent triple-loop matrix product oracle.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t p, std::size_t q) {
    std::vector<double> out(m * q, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
            for (std::size_t l = 0; l < p; ++l) {
                out[i * q + j] += a[i * p + l] * b[l * q + j];
            }
        }
    }
    return out;
}

// Central finite differences against the autodiff gradient of every listed
// parameter. make_loss must rebuild the graph from the live parameter data on
// each call. Returns the worst relative error.
inline double max_grad_rel_err(std::vector<Tensor> params,
                               const std::function<Tensor()>& make_loss, double h = 1e-5) {
    for (auto& p : params) {
        p.zero_grad();
    }
    backward(make_loss());
    std::vector<std::vector<double>> autodiff;
    for (auto& p : params) {
        autodiff.push_back(p.grad());
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double save = data[i];
            data[i] = save + h;
            const double f_plus = make_loss().item();
            data[i] = save - h;
            const double f_minus = make_loss().item();
            data[i] = save;
            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double err = std::abs(autodiff[pi][i] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Pushes values away from the relu kink so finite differences stay smooth.
inline void nudge_from_zero(Tensor& t, double margin = 0.2) {
    for (auto& v : t.mutable_data()) {
        if (std::abs(v) < margin) {
            v = v >= 0.0 ? v + margin : v - margin;
        }
    }
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace wlora::testutil
