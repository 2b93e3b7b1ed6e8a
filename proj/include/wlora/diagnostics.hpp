#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "wlora/adapters.hpp"
#include "wlora/catalog.hpp"
#include "wlora/errors.hpp"
#include "wlora/models.hpp"
#include "wlora/trainer.hpp"

namespace wlora {

// --- importance probe -------------------------------------------------------

struct ProbeConfig {
    std::size_t epochs = 2;
    std::size_t seeds = 5;
    std::size_t rank = 4;
    double lr = 1e-3;
    std::size_t batch_size = 16;
    double alpha = 32.0;
    // Evaluate the scored gradient at the pretrained weights (adapter
    // detached), matching the decomposition the score comes from. The
    // alternative evaluates it on the adapted model.
    bool grad_at_pretrained = true;
};

struct ImportanceProfile {
    std::vector<int> slot_ids;
    std::vector<std::string> slot_names;
    std::vector<double> scores;  // |<grad_W f, A B>| averaged over seeds
    std::string loss_convention = "mean";  // per-example mean gradient
    std::size_t epochs = 0;
    std::size_t seeds = 0;

    // Indices (into slot_ids) of the top-k slots by score.
    std::vector<std::size_t> top_slots(std::size_t k) const {
        std::vector<std::size_t> idx(scores.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        idx.resize(std::min(k, idx.size()));
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    void write_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw ContractError("ImportanceProfile: cannot open " + path);
        }
        out << "slot_id,layer,projection_type,score\n";
        out.precision(17);
        for (std::size_t i = 0; i < slot_ids.size(); ++i) {
            out << slot_ids[i] << "," << slot_ids[i] << "," << slot_names[i] << "," << scores[i]
                << "\n";
        }
    }
};

// Frobenius inner product of the full-dataset loss gradient at a slot weight
// with the materialized adapter product. With grad_at_pretrained the gradient
// pass runs on the bare model; otherwise the adapter stays in the forward.
inline double probe_inner_product(ToyModel& model, const SyntheticTask& task,
                                  const AdapterBank& bank, int slot_id,
                                  bool grad_at_pretrained = true) {
    Tensor w = model.slot_weight(slot_id);
    w.set_requires_grad(true);
    w.zero_grad();
    ForwardCtx ctx;  // eval mode: the full gradient is deterministic
    const AdapterBank* forward_bank = grad_at_pretrained ? nullptr : &bank;
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < task.train_size(); ++i) {
        acc = add(acc, item_loss(task, model, forward_bank, i, false, ctx));
    }
    backward(scale(acc, 1.0 / static_cast<double>(task.train_size())));
    const int idx = bank.index_of_slot(slot_id);
    const linalg::Mat ab = bank.adapters.at(static_cast<std::size_t>(idx)).product();
    double dot = 0.0;
    for (std::size_t i = 0; i < ab.a.size(); ++i) {
        dot += w.grad()[i] * ab.a[i];
    }
    w.set_requires_grad(false);
    w.drop_grad();
    return dot;
}

// One slot at a time: attach a single adapter, fine-tune it for a few epochs,
// then score the slot by |<grad_W f, A B>| on the full training set.
inline ImportanceProfile importance_probe(ToyModel& model, const SyntheticTask& task,
                                          const std::vector<int>& slot_ids,
                                          const ProbeConfig& cfg, std::uint64_t seed) {
    if (slot_ids.empty()) {
        throw ContractError("importance_probe: slot list must not be empty");
    }
    const auto available = model.slots();
    ImportanceProfile profile;
    profile.epochs = cfg.epochs;
    profile.seeds = cfg.seeds;

    const std::size_t steps_per_epoch =
        std::max<std::size_t>(1, task.train_size() / std::max<std::size_t>(1, cfg.batch_size));
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;

    for (int sid : slot_ids) {
        const auto it = std::find_if(available.begin(), available.end(),
                                     [sid](const SlotInfo& s) { return s.id == sid; });
        if (it == available.end()) {
            throw ContractError("importance_probe: unknown slot " + std::to_string(sid));
        }
        double score_sum = 0.0;
        for (std::size_t s = 0; s < cfg.seeds; ++s) {
            Rng rng(seed + 1000003ULL * (s + 1));
            AdapterBank bank =
                attach_adapters(model, {sid}, cfg.rank, false, rng, 0, cfg.alpha, 0.0);
            Adam opt;
            opt.add(bank.adapters[0].a);
            opt.add(bank.adapters[0].b);
            ForwardCtx ctx;  // probe trains without dropout
            for (std::size_t step = 0; step < total_steps; ++step) {
                opt.zero_grads();
                Tensor acc = Tensor::scalar(0.0);
                for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                    const std::size_t idx =
                        static_cast<std::size_t>(rng.uniform_int(task.train_size()));
                    acc = add(acc, item_loss(task, model, &bank, idx, false, ctx));
                }
                backward(scale(acc, 1.0 / static_cast<double>(cfg.batch_size)));
                opt.step(cfg.lr);
            }
            score_sum +=
                std::abs(probe_inner_product(model, task, bank, sid, cfg.grad_at_pretrained));
        }
        profile.slot_ids.push_back(sid);
        profile.slot_names.push_back(it->name);
        profile.scores.push_back(score_sum / static_cast<double>(cfg.seeds));
    }
    return profile;
}

// --- parameter accounting ---------------------------------------------------

// Smallest-surprise rendering of the percentage used in parameter tables:
// two decimals at or above 0.1%, one significant figure below it.
inline std::string format_percent(long long count, long long total) {
    if (total <= 0) {
        throw ContractError("format_percent: total must be positive");
    }
    const double pct = 100.0 * static_cast<double>(count) / static_cast<double>(total);
    int decimals = 2;
    if (pct > 0.0 && pct < 0.1) {
        decimals = static_cast<int>(std::ceil(-std::log10(pct)));
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f%%", decimals, pct);
    return buf;
}

struct TrainableCount {
    long long count = 0;
    long long total = 0;          // 0 when no catalog entry was given
    double fraction = 0.0;        // exact count / total
    std::string percent_display;  // table-style rendering
};

inline TrainableCount count_trainable(const AdapterBank& bank,
                                      const CatalogEntry* entry = nullptr) {
    TrainableCount out;
    out.count = bank.trainable_param_count();
    if (entry != nullptr) {
        out.total = entry->total_params;
        out.fraction = static_cast<double>(out.count) / static_cast<double>(out.total);
        out.percent_display = format_percent(out.count, out.total);
    }
    return out;
}

// Exact adapter parameter total for K active slots of a catalog grouping.
inline TrainableCount catalog_count(const CatalogEntry& entry, const std::string& grouping,
                                    std::size_t rank, std::size_t k_active) {
    const auto& g = entry.grouping(grouping);
    if (k_active > g.slots.size()) {
        throw ContractError("catalog_count: K = " + std::to_string(k_active) + " exceeds " +
                            std::to_string(g.slots.size()) + " slots");
    }
    TrainableCount out;
    for (std::size_t i = 0; i < k_active; ++i) {
        out.count += static_cast<long long>(rank) *
                     static_cast<long long>(g.slots[i].d + g.slots[i].k);
    }
    out.total = entry.total_params;
    out.fraction = static_cast<double>(out.count) / static_cast<double>(out.total);
    out.percent_display = format_percent(out.count, out.total);
    return out;
}

// --- analytic memory estimator ----------------------------------------------

struct MemoryModel {
    double bytes_per_param = 4.0;
    double optimizer_state_multiplier = 2.0;  // Adam: two extra buffers per param
    double activation_bytes_per_adapter = 0.0;
    double base_bytes = 0.0;
};

// base + n_active * r * (d + k) * bytes_per_param * (1 + optimizer multiplier)
// + activation term; strictly monotone in n_active.
inline double estimate_memory(std::size_t n_active, std::size_t rank, std::size_t d,
                              std::size_t k, const MemoryModel& mm) {
    const double per_adapter = static_cast<double>(rank) * static_cast<double>(d + k) *
                               mm.bytes_per_param * (1.0 + mm.optimizer_state_multiplier);
    return mm.base_bytes + static_cast<double>(n_active) *
                               (per_adapter + mm.activation_bytes_per_adapter);
}

inline double estimate_memory(const CatalogEntry& entry, const std::string& grouping,
                              std::size_t n_active, std::size_t rank, const MemoryModel& mm) {
    const auto& g = entry.grouping(grouping);
    if (g.slots.empty()) {
        throw ContractError("estimate_memory: grouping has no slots");
    }
    return estimate_memory(n_active, rank, g.slots[0].d, g.slots[0].k, mm);
}

inline void write_memory_curve_csv(const std::string& path, std::size_t max_active,
                                   std::size_t rank, std::size_t d, std::size_t k,
                                   const MemoryModel& mm) {
    std::ofstream out(path);
    if (!out) {
        throw ContractError("write_memory_curve_csv: cannot open " + path);
    }
    out << "n_active,bytes\n";
    out.precision(17);
    for (std::size_t n = 0; n <= max_active; ++n) {
        out << n << "," << estimate_memory(n, rank, d, k, mm) << "\n";
    }
}

}  // namespace wlora
