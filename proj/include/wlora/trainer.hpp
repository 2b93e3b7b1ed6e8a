#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wlora/adapters.hpp"
#include "wlora/errors.hpp"
#include "wlora/models.hpp"
#include "wlora/rng.hpp"
#include "wlora/sparsifier.hpp"
#include "wlora/tensor.hpp"

namespace wlora {

// Linear warmup to base_lr over warmup_steps, then linear decay to zero at
// total_steps.
inline double linear_warmup_lr(std::size_t step, std::size_t warmup_steps, double base_lr,
                               std::size_t total_steps) {
    if (warmup_steps > total_steps) {
        throw ContractError("linear_warmup_lr: warmup_steps " + std::to_string(warmup_steps) +
                            " exceeds total_steps " + std::to_string(total_steps));
    }
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (step >= total_steps) {
        return 0.0;
    }
    const std::size_t span = std::max<std::size_t>(1, total_steps - warmup_steps);
    return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(span);
}

// Adam with per-parameter moment buffers. Parameters can be dropped (their
// state is discarded) or swapped for an expanded tensor that inherits the
// moments of its surviving block.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add(const Tensor& p) {
        slots_.push_back({p, std::vector<double>(p.numel(), 0.0),
                          std::vector<double>(p.numel(), 0.0), 0});
    }

    std::size_t size() const { return slots_.size(); }

    void zero_grads() {
        for (auto& s : slots_) {
            s.param.zero_grad();
        }
    }

    void step(double lr) {
        for (auto& s : slots_) {
            if (!s.param.has_grad()) {
                continue;
            }
            s.t += 1;
            const auto& g = s.param.grad();
            auto& p = s.param.mutable_data();
            const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
            const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
            for (std::size_t i = 0; i < p.size(); ++i) {
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void drop(const Tensor& p) {
        slots_.erase(std::remove_if(slots_.begin(), slots_.end(),
                                    [&](const Slot& s) {
                                        return s.param.node().get() == p.node().get();
                                    }),
                     slots_.end());
    }

    // Swaps `old_p` for `new_p`; `map_moment` copies the surviving block of an
    // old moment buffer into a zeroed buffer of the new size.
    void replace(const Tensor& old_p, const Tensor& new_p,
                 const std::function<void(const std::vector<double>&, std::vector<double>&)>&
                     map_moment) {
        for (auto& s : slots_) {
            if (s.param.node().get() == old_p.node().get()) {
                std::vector<double> m(new_p.numel(), 0.0), v(new_p.numel(), 0.0);
                map_moment(s.m, m);
                map_moment(s.v, v);
                s.param = new_p;
                s.m = std::move(m);
                s.v = std::move(v);
                return;
            }
        }
        throw StateError("Adam::replace: parameter not tracked");
    }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
        long long t;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_;
};

enum class ExpansionScheme { kNone, kGaussian, kQr };
enum class ProjectionMode { kEveryStep, kAtFreezeOnly };

struct TrainSchedule {
    std::size_t k = 1;
    std::size_t t_freeze = 100;
    std::size_t total_steps = 500;
    std::size_t batch_size = 16;
    std::size_t post_t_batch_size = 16;
    ExpansionScheme expansion = ExpansionScheme::kNone;
    std::size_t r_new_override = 0;  // 0: floor(n * r / K)
    bool keep_effective_scale_on_expand = false;
    double lr = 1e-3;
    double lr_omega = -1.0;  // < 0: defaults to lr
    std::size_t warmup_steps = 100;
    std::uint64_t seed = 1;
    std::size_t grad_accum = 1;
    std::size_t omega_update_every = 1;  // gate step interleaving ratio
    GateMode gate_mode = GateMode::kNonzero;
    ProjectionMode projection = ProjectionMode::kEveryStep;
    bool finetune_gates_after_t = false;

    double effective_lr_omega() const { return lr_omega < 0.0 ? lr : lr_omega; }

    void validate(std::size_t n_slots) const {
        if (k < 1 || k > n_slots) {
            throw ContractError("schedule: k must lie in [1, " + std::to_string(n_slots) + "]");
        }
        if (t_freeze >= total_steps) {
            throw ContractError("schedule: T must be smaller than total_steps");
        }
        if (post_t_batch_size < batch_size) {
            throw ContractError("schedule: post-T batch size must be >= batch size");
        }
        if (batch_size < 1 || grad_accum < 1 || omega_update_every < 1) {
            throw ContractError("schedule: batch_size, grad_accum and omega_update_every "
                                "must be >= 1");
        }
        if (warmup_steps > total_steps) {
            throw ContractError("schedule: warmup_steps must not exceed total_steps");
        }
    }
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t omega_l0 = 0;
    long long trainable_params = 0;
    std::string omega_support;  // '1' per nonzero gate, slot order
};

struct RunReport {
    std::string method;
    std::vector<StepRecord> steps;
    std::vector<double> final_omega;
    std::vector<std::size_t> active_set;
    long long params_before_freeze = 0;
    long long params_after_freeze = 0;
    long long params_after_expansion = 0;
    std::vector<double> expansion_residuals;
    double max_expansion_residual = 0.0;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    nlohmann::json config_echo;

    void write_metrics_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw ContractError("write_metrics_csv: cannot open " + path);
        }
        out << "step,loss,lr,omega_l0,trainable_params,omega_support\n";
        out.precision(17);
        for (const auto& r : steps) {
            out << r.step << "," << r.loss << "," << r.lr << "," << r.omega_l0 << ","
                << r.trainable_params << "," << r.omega_support << "\n";
        }
    }

    nlohmann::json summary_json() const {
        nlohmann::json j;
        j["method"] = method;
        j["final_train_loss"] = final_train_loss;
        j["final_val_loss"] = final_val_loss;
        j["active_set"] = active_set;
        j["final_omega"] = final_omega;
        j["params_before_freeze"] = params_before_freeze;
        j["params_after_freeze"] = params_after_freeze;
        j["params_after_expansion"] = params_after_expansion;
        j["expansion_residuals"] = expansion_residuals;
        j["max_expansion_residual"] = max_expansion_residual;
        j["config"] = config_echo;
        return j;
    }
};

// Test/diagnostic hooks into the training loop.
struct RunHooks {
    // Called after backward and before the optimizer step.
    std::function<void(std::size_t step, const AdapterBank& bank)> after_backward;
};

enum class BaselineVariant { kLora, kRlora, kFull };

namespace detail_trainer {

inline std::string support_string(const AdapterBank& bank) {
    std::string s;
    if (bank.gated()) {
        for (double w : bank.gates->omega().data()) {
            s += w != 0.0 ? '1' : '0';
        }
    } else {
        for (const auto& a : bank.adapters) {
            s += a.active ? '1' : '0';
        }
    }
    return s;
}

inline std::size_t active_or_l0(const AdapterBank& bank) {
    if (bank.gated()) {
        return bank.gates->l0_norm();
    }
    std::size_t n = 0;
    for (const auto& a : bank.adapters) {
        n += a.active ? 1 : 0;
    }
    return n;
}

inline double mean_validation_loss(const ToyModel& model, const SyntheticTask& task,
                                   const AdapterBank* bank) {
    ForwardCtx ctx;  // eval mode
    double acc = 0.0;
    for (std::size_t i = 0; i < task.val_size(); ++i) {
        acc += item_loss(task, model, bank, i, true, ctx).item();
    }
    return acc / static_cast<double>(std::max<std::size_t>(1, task.val_size()));
}

// floor(n * r / k), never below the current rank.
inline std::size_t constant_memory_r_new(std::size_t n, std::size_t r, std::size_t k) {
    return std::max<std::size_t>(r, n * r / k);
}

struct LoopMode {
    bool gated = false;       // gate updates + freeze at T
    bool train_base = false;  // full fine-tune: base weights in the optimizer
};

inline RunReport run_loop(ToyModel& model, AdapterBank& bank, const SyntheticTask& task,
                          const TrainSchedule& schedule, const LoopMode& mode,
                          const std::string& method, const RunHooks& hooks) {
    schedule.validate(bank.adapters.empty() ? std::max<std::size_t>(1, schedule.k)
                                            : bank.adapters.size());

    RunReport report;
    report.method = method;

    Rng batch_rng(schedule.seed * 0x9e3779b97f4a7c15ULL + 1);
    Rng dropout_rng(schedule.seed * 0xbf58476d1ce4e5b9ULL + 2);

    Adam opt;
    for (auto& a : bank.adapters) {
        if (a.active) {
            opt.add(a.a);
            opt.add(a.b);
        }
    }
    std::vector<Tensor> base;
    long long base_params = 0;
    if (mode.train_base) {
        base = model.base_weights();
        for (auto& w : base) {
            w.set_requires_grad(true);
            opt.add(w);
            base_params += static_cast<long long>(w.numel());
        }
    }
    auto trainable_now = [&]() { return bank.trainable_param_count() + base_params; };

    const std::size_t n = bank.adapters.size();
    bool frozen = bank.gated() && bank.gates->frozen();
    report.params_before_freeze = trainable_now();

    // Gate gradients are accumulated between omega updates, so an update every
    // R steps sees the window-mean stochastic gradient.
    std::vector<double> omega_grad_window(n, 0.0);
    std::size_t omega_window_len = 0;

    for (std::size_t step = 1; step <= schedule.total_steps; ++step) {
        const std::size_t batch =
            frozen || step > schedule.t_freeze ? schedule.post_t_batch_size : schedule.batch_size;

        opt.zero_grads();
        if (bank.gated() && (!bank.gates->frozen() || schedule.finetune_gates_after_t)) {
            bank.gates->omega().zero_grad();
        }

        double step_loss = 0.0;
        for (std::size_t micro = 0; micro < schedule.grad_accum; ++micro) {
            ForwardCtx ctx{true, &dropout_rng};
            Tensor acc = Tensor::scalar(0.0);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t idx =
                    static_cast<std::size_t>(batch_rng.uniform_int(task.train_size()));
                acc = add(acc, item_loss(task, model, &bank, idx, false, ctx));
            }
            Tensor mean_loss = scale(acc, 1.0 / static_cast<double>(batch));
            step_loss += mean_loss.item();
            backward(scale(mean_loss, 1.0 / static_cast<double>(schedule.grad_accum)));
        }
        step_loss /= static_cast<double>(schedule.grad_accum);

        if (hooks.after_backward) {
            hooks.after_backward(step, bank);
        }

        const double lr_t =
            linear_warmup_lr(step, schedule.warmup_steps, schedule.lr, schedule.total_steps);
        opt.step(lr_t);

        if (mode.gated && !bank.gates->frozen()) {
            const auto& g = bank.gates->omega().grad();
            for (std::size_t i = 0; i < n; ++i) {
                omega_grad_window[i] += g[i];
            }
            omega_window_len += 1;
            if (step % schedule.omega_update_every == 0) {
                std::vector<double> mean(n);
                for (std::size_t i = 0; i < n; ++i) {
                    mean[i] = omega_grad_window[i] / static_cast<double>(omega_window_len);
                }
                Tensor grad = Tensor::from({n}, std::move(mean));
                if (schedule.projection == ProjectionMode::kEveryStep) {
                    bank.gates->gate_step(grad, schedule.effective_lr_omega());
                } else {
                    bank.gates->unprojected_step(grad, schedule.effective_lr_omega());
                }
                std::fill(omega_grad_window.begin(), omega_grad_window.end(), 0.0);
                omega_window_len = 0;
            }
        }
        if (mode.gated && schedule.finetune_gates_after_t && bank.gates->frozen() &&
            bank.gates->omega().has_grad()) {
            bank.gates->finetune_step_active(Tensor::from({n}, bank.gates->omega().grad()),
                                             schedule.effective_lr_omega());
        }

        if (mode.gated && !bank.gates->frozen() && step == schedule.t_freeze) {
            if (bank.gates->l0_norm() > schedule.k) {
                bank.gates->project_now();
            }
            auto active = bank.gates->freeze_and_disconnect(bank.adapters, schedule.gate_mode);
            if (active.empty()) {
                throw DegeneracyError("weightlora: all gates are zero at step T; "
                                      "no adapter survives the freeze");
            }
            for (auto& a : bank.adapters) {
                if (!a.active) {
                    opt.drop(a.a);
                    opt.drop(a.b);
                    a.a.drop_grad();
                    a.b.drop_grad();
                }
            }
            report.params_after_freeze = trainable_now();
            frozen = true;
            if (schedule.finetune_gates_after_t) {
                bank.gates->omega().set_requires_grad(true);
            }

            if (schedule.expansion != ExpansionScheme::kNone) {
                Rng expand_rng(schedule.seed * 0x94d049bb133111ebULL + 3);
                for (auto& a : bank.adapters) {
                    if (!a.active) {
                        continue;
                    }
                    const std::size_t r_new =
                        schedule.r_new_override > 0
                            ? schedule.r_new_override
                            : constant_memory_r_new(n, a.rank, schedule.k);
                    if (r_new <= a.rank) {
                        report.expansion_residuals.push_back(0.0);
                        continue;
                    }
                    AdapterState expanded =
                        schedule.expansion == ExpansionScheme::kGaussian
                            ? expand_rank_gaussian(a, r_new, expand_rng,
                                                   schedule.keep_effective_scale_on_expand)
                            : expand_rank_qr(a, r_new, expand_rng,
                                             schedule.keep_effective_scale_on_expand);
                    report.expansion_residuals.push_back(expansion_residual(a, expanded));
                    const std::size_t d = a.d(), kk = a.k(), r_old = a.rank;
                    opt.replace(a.a, expanded.a,
                                [d, r_old, r_new](const std::vector<double>& src,
                                                  std::vector<double>& dst) {
                                    for (std::size_t i = 0; i < d; ++i) {
                                        for (std::size_t j = 0; j < r_old; ++j) {
                                            dst[i * r_new + j] = src[i * r_old + j];
                                        }
                                    }
                                });
                    opt.replace(a.b, expanded.b,
                                [kk, r_old](const std::vector<double>& src,
                                            std::vector<double>& dst) {
                                    std::copy(src.begin(), src.begin() + r_old * kk, dst.begin());
                                });
                    a = std::move(expanded);
                }
                for (double r : report.expansion_residuals) {
                    report.max_expansion_residual = std::max(report.max_expansion_residual, r);
                }
            }
            report.params_after_expansion = trainable_now();
        }

        report.steps.push_back({step, step_loss, lr_t, detail_trainer::active_or_l0(bank),
                                trainable_now(), detail_trainer::support_string(bank)});
    }

    if (bank.gated() && bank.gates->frozen()) {
        report.active_set = bank.gates->active_set();
    } else {
        for (std::size_t i = 0; i < bank.adapters.size(); ++i) {
            if (bank.adapters[i].active) {
                report.active_set.push_back(i);
            }
        }
    }
    if (bank.gated()) {
        report.final_omega = bank.gates->omega().data();
    }
    if (report.params_after_freeze == 0) {
        report.params_after_freeze = trainable_now();
    }
    if (report.params_after_expansion == 0) {
        report.params_after_expansion = trainable_now();
    }
    report.final_train_loss = report.steps.empty() ? 0.0 : report.steps.back().loss;
    report.final_val_loss = detail_trainer::mean_validation_loss(model, task, &bank);
    for (auto& w : base) {
        w.set_requires_grad(false);
        w.drop_grad();
    }
    return report;
}

}  // namespace detail_trainer

// Two-phase WeightLoRA: joint Adam + projected gate steps through step T,
// freeze-and-disconnect at T, survivor-only training afterwards.
inline RunReport run_weightlora(ToyModel& model, AdapterBank& bank, const SyntheticTask& task,
                                const TrainSchedule& schedule, const RunHooks& hooks = {}) {
    if (!bank.gated()) {
        throw ContractError("run_weightlora: bank must be gated");
    }
    detail_trainer::LoopMode mode;
    mode.gated = true;
    return detail_trainer::run_loop(model, bank, task, schedule, mode, "wlora", hooks);
}

// WeightLoRA+ additionally expands the surviving adapters at step T.
inline RunReport run_weightlora_plus(ToyModel& model, AdapterBank& bank, const SyntheticTask& task,
                                     const TrainSchedule& schedule, const RunHooks& hooks = {}) {
    if (schedule.expansion == ExpansionScheme::kNone) {
        throw ContractError("run_weightlora_plus: schedule.expansion must be set");
    }
    if (!bank.gated()) {
        throw ContractError("run_weightlora_plus: bank must be gated");
    }
    detail_trainer::LoopMode mode;
    mode.gated = true;
    return detail_trainer::run_loop(model, bank, task, schedule, mode, "wlora+", hooks);
}

inline RunReport run_baseline(ToyModel& model, AdapterBank& bank, const SyntheticTask& task,
                              const TrainSchedule& schedule, BaselineVariant variant,
                              const RunHooks& hooks = {}) {
    detail_trainer::LoopMode mode;
    std::string method;
    switch (variant) {
        case BaselineVariant::kLora:
            method = "lora";
            break;
        case BaselineVariant::kRlora: {
            if (!bank.gated()) {
                throw ContractError("run_baseline: rlora needs a gated bank");
            }
            auto subset = random_select_rlora(bank.adapters.size(), bank.gates->k(),
                                              schedule.seed * 0x2545f4914f6cdd1dULL + 4);
            apply_rlora_selection(*bank.gates, bank.adapters, subset);
            method = "rlora";
            break;
        }
        case BaselineVariant::kFull:
            mode.train_base = true;
            method = "full";
            break;
    }
    return detail_trainer::run_loop(model, bank, task, schedule, mode, method, hooks);
}

}  // namespace wlora
