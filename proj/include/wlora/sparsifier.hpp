#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "wlora/adapters.hpp"
#include "wlora/errors.hpp"
#include "wlora/rng.hpp"
#include "wlora/tensor.hpp"

namespace wlora {

// Euclidean projection onto {x : ||x||_0 <= K}: keep the K largest-magnitude
// entries (ties broken toward the lowest index), zero the rest.
inline Tensor hard_threshold_topk(const Tensor& v, std::size_t k) {
    if (v.ndim() != 1) {
        throw DimensionError("hard_threshold_topk: expected 1-d tensor, got " +
                             shape_str(v.shape()));
    }
    const std::size_t n = v.numel();
    if (k < 1 || k > n) {
        throw ContractError("hard_threshold_topk: K = " + std::to_string(k) +
                            " must lie in [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(v.data()[a]) > std::abs(v.data()[b]);
    });
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        out[idx[i]] = v.data()[idx[i]];
    }
    return Tensor::from({n}, std::move(out), v.requires_grad());
}

// How to interpret a retained gate when forwarding after the freeze.
enum class GateMode {
    kNonzero,   // adapter stays connected iff omega_i != 0
    kPositive,  // adapter stays connected iff omega_i > 0
};

// The trainable gate vector omega with its sparsity budget and freeze state.
class GateVector {
public:
    GateVector(std::size_t n, std::size_t k, double init_value = 1.0)
        : omega_(Tensor::full({n}, init_value, true)), k_(k) {
        if (n == 0) {
            throw ContractError("GateVector: need at least one gate");
        }
        if (k < 1 || k > n) {
            throw ContractError("GateVector: K = " + std::to_string(k) + " must lie in [1, " +
                                std::to_string(n) + "]");
        }
    }

    std::size_t size() const { return omega_.numel(); }
    std::size_t k() const { return k_; }
    bool frozen() const { return frozen_; }
    Tensor& omega() { return omega_; }
    const Tensor& omega() const { return omega_; }

    double value(std::size_t i) const { return omega_.data().at(i); }

    std::size_t l0_norm() const {
        std::size_t nz = 0;
        for (double x : omega_.data()) {
            nz += x != 0.0 ? 1 : 0;
        }
        return nz;
    }

    std::vector<std::size_t> nonzero_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (omega_.data()[i] != 0.0) {
                out.push_back(i);
            }
        }
        return out;
    }

    const std::vector<std::size_t>& active_set() const {
        if (!frozen_) {
            throw StateError("GateVector: active set is defined only after freezing");
        }
        return active_set_;
    }

    // One projected gradient step: omega <- TopK(omega - lr * grad).
    void gate_step(const Tensor& grad_omega, double lr) {
        if (frozen_) {
            throw StateError("gate_step: gates are frozen");
        }
        if (grad_omega.shape() != omega_.shape()) {
            throw DimensionError("gate_step: gradient " + shape_str(grad_omega.shape()) +
                                 " does not match gates " + shape_str(omega_.shape()));
        }
        std::vector<double> stepped(size());
        for (std::size_t i = 0; i < size(); ++i) {
            stepped[i] = omega_.data()[i] - lr * grad_omega.data()[i];
        }
        Tensor projected = hard_threshold_topk(Tensor::from({size()}, std::move(stepped)), k_);
        omega_.mutable_data() = projected.data();
    }

    // Fixes omega and disconnects every adapter whose gate is zero (or
    // non-positive under GateMode::kPositive). Returns the active set.
    std::vector<std::size_t> freeze_and_disconnect(std::vector<AdapterState>& adapters,
                                                   GateMode mode = GateMode::kNonzero) {
        if (frozen_) {
            throw StateError("freeze_and_disconnect: gates already frozen");
        }
        if (adapters.size() != size()) {
            throw ContractError("freeze_and_disconnect: " + std::to_string(adapters.size()) +
                                " adapters for " + std::to_string(size()) + " gates");
        }
        std::size_t keep = 0;
        for (std::size_t i = 0; i < size(); ++i) {
            const double w = omega_.data()[i];
            keep += (mode == GateMode::kNonzero ? w != 0.0 : w > 0.0) ? 1 : 0;
        }
        if (keep > k_) {
            throw ContractError("freeze_and_disconnect: " + std::to_string(keep) +
                                " gates survive but the budget is K = " + std::to_string(k_) +
                                "; project first");
        }
        frozen_ = true;
        omega_.set_requires_grad(false);
        active_set_.clear();
        for (std::size_t i = 0; i < size(); ++i) {
            const double w = omega_.data()[i];
            const bool keep = mode == GateMode::kNonzero ? w != 0.0 : w > 0.0;
            if (keep) {
                active_set_.push_back(i);
            } else {
                omega_.mutable_data()[i] = 0.0;
                adapters[i].active = false;
                adapters[i].a.set_requires_grad(false);
                adapters[i].b.set_requires_grad(false);
            }
        }
        return active_set_;
    }

    // Plain SGD step without the Top-K projection; pairs with project_now()
    // for the project-only-at-T mode.
    void unprojected_step(const Tensor& grad_omega, double lr) {
        if (frozen_) {
            throw StateError("unprojected_step: gates are frozen");
        }
        if (grad_omega.shape() != omega_.shape()) {
            throw DimensionError("unprojected_step: gradient " + shape_str(grad_omega.shape()) +
                                 " does not match gates " + shape_str(omega_.shape()));
        }
        for (std::size_t i = 0; i < size(); ++i) {
            omega_.mutable_data()[i] -= lr * grad_omega.data()[i];
        }
    }

    void project_now() {
        if (frozen_) {
            throw StateError("project_now: gates are frozen");
        }
        Tensor projected = hard_threshold_topk(omega_, k_);
        omega_.mutable_data() = projected.data();
    }

    // Optional joint fine-tuning of the surviving gates after the freeze.
    // Only nonzero entries move, so the zero pattern is preserved.
    void finetune_step_active(const Tensor& grad_omega, double lr) {
        if (!frozen_) {
            throw StateError("finetune_step_active: gates must be frozen first");
        }
        for (std::size_t i : active_set_) {
            omega_.mutable_data()[i] -= lr * grad_omega.data().at(i);
        }
    }

private:
    Tensor omega_;
    std::size_t k_;
    bool frozen_ = false;
    std::vector<std::size_t> active_set_;
};

// RLoRA baseline selection: a uniformly random K-subset of {0, ..., n-1}.
inline std::vector<std::size_t> random_select_rlora(std::size_t n, std::size_t k,
                                                    std::uint64_t seed) {
    if (k < 1 || k > n) {
        throw ContractError("random_select_rlora: K = " + std::to_string(k) +
                            " must lie in [1, " + std::to_string(n) + "]");
    }
    Rng rng(seed);
    return rng.sample_without_replacement(n, k);
}

// Pins the chosen gates to one, zeroes the rest, and freezes immediately.
inline std::vector<std::size_t> apply_rlora_selection(GateVector& gates,
                                                      std::vector<AdapterState>& adapters,
                                                      const std::vector<std::size_t>& subset) {
    std::set<std::size_t> keep(subset.begin(), subset.end());
    for (std::size_t i = 0; i < gates.size(); ++i) {
        gates.omega().mutable_data()[i] = keep.count(i) ? 1.0 : 0.0;
    }
    return gates.freeze_and_disconnect(adapters);
}

}  // namespace wlora
