#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wlora/adapters.hpp"
#include "wlora/errors.hpp"
#include "wlora/rng.hpp"
#include "wlora/sparsifier.hpp"
#include "wlora/tensor.hpp"

namespace wlora {

struct SlotInfo {
    int id = 0;
    std::size_t d = 0;  // output dim of the slot weight
    std::size_t k = 0;  // input dim of the slot weight
    std::string name;
};

// Adapters attached to a model, one per chosen slot, plus the gate vector
// when the attachment is gated.
struct AdapterBank {
    std::vector<AdapterState> adapters;
    std::vector<int> slot_ids;  // aligned with adapters
    std::optional<GateVector> gates;

    bool gated() const { return gates.has_value(); }

    int index_of_slot(int slot_id) const {
        for (std::size_t i = 0; i < slot_ids.size(); ++i) {
            if (slot_ids[i] == slot_id) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    long long trainable_param_count() const {
        long long total = 0;
        for (const auto& a : adapters) {
            total += adapter_param_count(a);
        }
        return total;
    }
};

// Forward through one slot weight, routed through the adapter when the bank
// holds one for this slot.
inline Tensor slot_forward(const FrozenBase& base, const AdapterBank* bank, int slot_id,
                           const Tensor& x, const ForwardCtx& ctx) {
    if (bank != nullptr) {
        const int idx = bank->index_of_slot(slot_id);
        if (idx >= 0) {
            const AdapterState& adapter = bank->adapters[static_cast<std::size_t>(idx)];
            if (bank->gated()) {
                return weighted_forward(base, adapter, bank->gates->omega(),
                                        static_cast<std::size_t>(idx), x, ctx);
            }
            return lora_forward(base, adapter, x, ctx);
        }
    }
    return matmul(base.w, x);
}

// Fine-tunable toy network: frozen weights, a list of adapter-eligible slots,
// deterministic forward for a fixed seed and eval mode.
class ToyModel {
public:
    virtual ~ToyModel() = default;

    virtual std::vector<SlotInfo> slots() const = 0;
    virtual Tensor slot_weight(int slot_id) = 0;
    virtual std::size_t input_dim() const = 0;
    virtual std::size_t output_dim() const = 0;
    virtual Tensor forward(const Tensor& x, const AdapterBank* bank,
                           const ForwardCtx& ctx) const = 0;
    virtual std::unique_ptr<ToyModel> clone() const = 0;
    // Every base tensor, frozen slots and non-slot weights alike.
    virtual std::vector<Tensor> base_weights() = 0;
};

struct MlpConfig {
    std::size_t in_dim = 16;
    std::size_t hidden = 16;
    std::size_t out_dim = 8;
    std::size_t n_layers = 6;  // linear layers, relu between all but the last
};

class MlpModel : public ToyModel {
public:
    MlpModel(const MlpConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.n_layers < 1) {
            throw ContractError("MlpModel: need at least one layer");
        }
        Rng rng(seed);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::size_t fan_out = l + 1 == cfg.n_layers ? cfg.out_dim : cfg.hidden;
            const std::size_t fan_in = l == 0 ? cfg.in_dim : cfg.hidden;
            // He gain keeps activation variance roughly constant through the
            // relu stack, so every depth carries comparable signal.
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
            layers_.emplace_back(Tensor::randn({fan_out, fan_in}, rng, stddev));
        }
    }

    std::vector<SlotInfo> slots() const override {
        std::vector<SlotInfo> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            out.push_back({static_cast<int>(l), layers_[l].d(), layers_[l].k(),
                           "linear" + std::to_string(l)});
        }
        return out;
    }

    Tensor slot_weight(int slot_id) override {
        return layers_.at(static_cast<std::size_t>(slot_id)).w;
    }

    std::size_t input_dim() const override { return cfg_.in_dim; }
    std::size_t output_dim() const override { return cfg_.out_dim; }

    Tensor forward(const Tensor& x, const AdapterBank* bank, const ForwardCtx& ctx) const override {
        Tensor h = x;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            Tensor pre = slot_forward(layers_[l], bank, static_cast<int>(l), h, ctx);
            h = l + 1 < layers_.size() ? relu(pre) : pre;
        }
        return h;
    }

    std::unique_ptr<ToyModel> clone() const override {
        auto copy = std::make_unique<MlpModel>(cfg_, 0);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            copy->layers_[l].w.mutable_data() = layers_[l].w.data();
        }
        return copy;
    }

    std::vector<Tensor> base_weights() override {
        std::vector<Tensor> out;
        for (auto& l : layers_) {
            out.push_back(l.w);
        }
        return out;
    }

private:
    MlpConfig cfg_;
    std::vector<FrozenBase> layers_;
};

struct TransformerConfig {
    std::size_t feat_dim = 8;   // per-position input features
    std::size_t seq_len = 6;
    std::size_t d_model = 32;   // must be divisible by n_heads
    std::size_t n_heads = 2;
    std::size_t ff_dim = 64;
    std::size_t out_dim = 8;
};

// Single-block pre-norm transformer encoder over short feature sequences.
// Adapter slots are the q/k/v/o projections; embedding, MLP, layer norms and
// the readout head stay frozen without slots.
class TinyTransformer : public ToyModel {
public:
    TinyTransformer(const TransformerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.d_model % cfg.n_heads != 0) {
            throw ContractError("TinyTransformer: d_model must be divisible by n_heads");
        }
        Rng rng(seed);
        const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.feat_dim));
        const double d_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        const double ff_std = 1.0 / std::sqrt(static_cast<double>(cfg.ff_dim));
        embed_ = Tensor::randn({cfg.d_model, cfg.feat_dim}, rng, emb_std);
        wq_.emplace(Tensor::randn({cfg.d_model, cfg.d_model}, rng, d_std));
        wk_.emplace(Tensor::randn({cfg.d_model, cfg.d_model}, rng, d_std));
        wv_.emplace(Tensor::randn({cfg.d_model, cfg.d_model}, rng, d_std));
        wo_.emplace(Tensor::randn({cfg.d_model, cfg.d_model}, rng, d_std));
        ln1_gamma_ = Tensor::full({cfg.d_model}, 1.0);
        ln1_beta_ = Tensor::zeros({cfg.d_model});
        ln2_gamma_ = Tensor::full({cfg.d_model}, 1.0);
        ln2_beta_ = Tensor::zeros({cfg.d_model});
        ff1_ = Tensor::randn({cfg.ff_dim, cfg.d_model}, rng, d_std);
        ff2_ = Tensor::randn({cfg.d_model, cfg.ff_dim}, rng, ff_std);
        head_ = Tensor::randn({cfg.out_dim, cfg.d_model}, rng, d_std);
        pool_ = Tensor::full({cfg.seq_len}, 1.0 / static_cast<double>(cfg.seq_len));
    }

    std::vector<SlotInfo> slots() const override {
        const std::size_t d = cfg_.d_model;
        return {
            {0, d, d, "attn.q"},
            {1, d, d, "attn.k"},
            {2, d, d, "attn.v"},
            {3, d, d, "attn.o"},
        };
    }

    Tensor slot_weight(int slot_id) override {
        switch (slot_id) {
            case 0: return wq_->w;
            case 1: return wk_->w;
            case 2: return wv_->w;
            case 3: return wo_->w;
            default:
                throw ContractError("TinyTransformer: unknown slot " + std::to_string(slot_id));
        }
    }

    std::size_t input_dim() const override { return cfg_.feat_dim * cfg_.seq_len; }
    std::size_t output_dim() const override { return cfg_.out_dim; }

    Tensor forward(const Tensor& x, const AdapterBank* bank, const ForwardCtx& ctx) const override {
        if (x.numel() != input_dim()) {
            throw DimensionError("TinyTransformer: expected flat input of length " +
                                 std::to_string(input_dim()) + ", got " + shape_str(x.shape()));
        }
        Tensor seq = Tensor::from({cfg_.feat_dim, cfg_.seq_len}, x.data());
        Tensor h = matmul(embed_, seq);  // d x L

        Tensor hn = layer_norm_cols(h, ln1_gamma_, ln1_beta_);
        Tensor q = slot_forward(*wq_, bank, 0, hn, ctx);
        Tensor k = slot_forward(*wk_, bank, 1, hn, ctx);
        Tensor v = slot_forward(*wv_, bank, 2, hn, ctx);

        const std::size_t dh = cfg_.d_model / cfg_.n_heads;
        std::vector<Tensor> heads;
        for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
            Tensor qh = slice_rows(q, head * dh, (head + 1) * dh);
            Tensor kh = slice_rows(k, head * dh, (head + 1) * dh);
            Tensor vh = slice_rows(v, head * dh, (head + 1) * dh);
            Tensor scores = scale(matmul(transpose(qh), kh),
                                  1.0 / std::sqrt(static_cast<double>(dh)));  // L x L
            Tensor attn = softmax_rows(scores);
            heads.push_back(matmul(vh, transpose(attn)));  // dh x L
        }
        Tensor attn_out = slot_forward(*wo_, bank, 3, concat_rows(heads), ctx);
        Tensor h2 = add(h, attn_out);

        Tensor h2n = layer_norm_cols(h2, ln2_gamma_, ln2_beta_);
        Tensor ff = matmul(ff2_, relu(matmul(ff1_, h2n)));
        Tensor h3 = add(h2, ff);

        Tensor pooled = matmul(h3, pool_);  // d
        return matmul(head_, pooled);
    }

    std::unique_ptr<ToyModel> clone() const override {
        auto copy = std::make_unique<TinyTransformer>(cfg_, 0);
        const std::vector<Tensor> src = {embed_,     wq_->w,    wk_->w,    wv_->w,
                                         wo_->w,     ln1_gamma_, ln1_beta_, ln2_gamma_,
                                         ln2_beta_,  ff1_,       ff2_,      head_};
        auto dst = copy->base_weights();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i].mutable_data() = src[i].data();
        }
        return copy;
    }

    std::vector<Tensor> base_weights() override {
        return {embed_,      wq_->w,     wk_->w,     wv_->w, wo_->w, ln1_gamma_, ln1_beta_,
                ln2_gamma_,  ln2_beta_,  ff1_,       ff2_,   head_};
    }

private:
    TransformerConfig cfg_;
    Tensor embed_;
    std::optional<FrozenBase> wq_, wk_, wv_, wo_;
    Tensor ln1_gamma_, ln1_beta_, ln2_gamma_, ln2_beta_;
    Tensor ff1_, ff2_;
    Tensor head_;
    Tensor pool_;
};

// --- adapter attachment -----------------------------------------------------

// Wraps the chosen slots with adapters; gated attachment also creates one
// gate per slot, initialized to one.
inline AdapterBank attach_adapters(ToyModel& model, const std::vector<int>& slot_ids,
                                   std::size_t rank, bool gated, Rng& rng, std::size_t k_budget = 0,
                                   double alpha = 32.0, double dropout_p = 0.05) {
    AdapterBank bank;
    const auto available = model.slots();
    std::vector<int> seen;
    for (int sid : slot_ids) {
        if (std::find(seen.begin(), seen.end(), sid) != seen.end()) {
            throw ContractError("attach_adapters: duplicate slot " + std::to_string(sid));
        }
        seen.push_back(sid);
        const auto it = std::find_if(available.begin(), available.end(),
                                     [sid](const SlotInfo& s) { return s.id == sid; });
        if (it == available.end()) {
            throw ContractError("attach_adapters: unknown slot " + std::to_string(sid));
        }
        bank.adapters.push_back(
            AdapterState::init(sid, it->d, it->k, rank, rng, alpha, dropout_p));
        bank.slot_ids.push_back(sid);
    }
    if (gated && !slot_ids.empty()) {
        const std::size_t k = k_budget == 0 ? slot_ids.size() : k_budget;
        bank.gates.emplace(slot_ids.size(), k, 1.0);
    }
    return bank;
}

// --- synthetic tasks --------------------------------------------------------

enum class TaskKind { kRegression, kClassification };

struct SyntheticTask {
    TaskKind kind = TaskKind::kRegression;
    std::uint64_t seed = 0;
    std::size_t item_dim = 0;
    std::size_t target_dim = 0;  // classification: number of classes
    std::vector<std::vector<double>> train_inputs, val_inputs;
    std::vector<std::vector<double>> train_targets, val_targets;  // regression
    std::vector<std::size_t> train_labels, val_labels;            // classification
    std::vector<int> planted_slots;                               // S*
    std::size_t rank_star = 0;

    std::size_t train_size() const { return train_inputs.size(); }
    std::size_t val_size() const { return val_inputs.size(); }
};

// Loss of one item under the task's kind.
inline Tensor item_loss(const SyntheticTask& task, const ToyModel& model, const AdapterBank* bank,
                        std::size_t index, bool validation, const ForwardCtx& ctx) {
    const auto& inputs = validation ? task.val_inputs : task.train_inputs;
    Tensor x = Tensor::from({inputs[index].size()}, inputs[index]);
    Tensor out = model.forward(x, bank, ctx);
    if (task.kind == TaskKind::kRegression) {
        const auto& targets = validation ? task.val_targets : task.train_targets;
        return mse(out, Tensor::from({targets[index].size()}, targets[index]));
    }
    const auto& labels = validation ? task.val_labels : task.train_labels;
    return cross_entropy(out, labels[index]);
}

struct PlantedTaskConfig {
    std::size_t rank_star = 2;
    double delta_scale = 1.0;  // planted perturbation norm relative to the base weight norm
    std::size_t n_train = 512;
    std::size_t n_val = 128;
    TaskKind kind = TaskKind::kRegression;
};

// Builds labels from a teacher that deviates from `model` by a low-rank
// perturbation on exactly the slots in s_star.
inline SyntheticTask make_planted_task(const ToyModel& model, const std::vector<int>& s_star,
                                       const PlantedTaskConfig& cfg, std::uint64_t seed) {
    if (s_star.empty()) {
        throw ContractError("make_planted_task: planted slot set must not be empty");
    }
    if (cfg.rank_star < 1) {
        throw ContractError("make_planted_task: rank_star must be >= 1");
    }
    const auto available = model.slots();
    for (int sid : s_star) {
        if (std::none_of(available.begin(), available.end(),
                         [sid](const SlotInfo& s) { return s.id == sid; })) {
            throw ContractError("make_planted_task: slot " + std::to_string(sid) +
                                " is not an adapter slot");
        }
    }

    Rng rng(seed);
    auto teacher = model.clone();
    for (int sid : s_star) {
        Tensor w = teacher->slot_weight(sid);
        const std::size_t d = w.rows();
        const std::size_t k = w.cols();
        linalg::Mat g1(d, cfg.rank_star), g2(cfg.rank_star, k);
        for (auto& x : g1.a) {
            x = rng.normal();
        }
        for (auto& x : g2.a) {
            x = rng.normal();
        }
        linalg::Mat delta = linalg::matmul(g1, g2);
        double w_norm = 0.0;
        for (double x : w.data()) {
            w_norm += x * x;
        }
        w_norm = std::sqrt(w_norm);
        const double target_norm = cfg.delta_scale * w_norm;
        const double delta_norm = linalg::frobenius_norm(delta);
        const double rescale = delta_norm > 0.0 ? target_norm / delta_norm : 0.0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            w.mutable_data()[i] += rescale * delta.a[i];
        }
    }

    SyntheticTask task;
    task.kind = cfg.kind;
    task.seed = seed;
    task.item_dim = model.input_dim();
    task.target_dim = model.output_dim();
    task.planted_slots = s_star;
    task.rank_star = cfg.rank_star;

    ForwardCtx eval_ctx;  // teacher labels are generated in eval mode
    auto emit = [&](std::size_t count, std::vector<std::vector<double>>& xs,
                    std::vector<std::vector<double>>& ys, std::vector<std::size_t>& labels) {
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<double> x(task.item_dim);
            for (auto& v : x) {
                v = rng.normal();
            }
            Tensor out = teacher->forward(Tensor::from({task.item_dim}, x), nullptr, eval_ctx);
            if (cfg.kind == TaskKind::kRegression) {
                ys.push_back(out.data());
            } else {
                const auto& o = out.data();
                labels.push_back(static_cast<std::size_t>(
                    std::max_element(o.begin(), o.end()) - o.begin()));
            }
            xs.push_back(std::move(x));
        }
    };
    emit(cfg.n_train, task.train_inputs, task.train_targets, task.train_labels);
    emit(cfg.n_val, task.val_inputs, task.val_targets, task.val_labels);
    return task;
}

// Writes the task as comma-separated columns: split, target..., input...
inline void export_task(const SyntheticTask& task, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw ContractError("export_task: cannot open " + path);
    }
    out << "split";
    if (task.kind == TaskKind::kRegression) {
        for (std::size_t j = 0; j < task.target_dim; ++j) {
            out << ",y" << j;
        }
    } else {
        out << ",label";
    }
    for (std::size_t j = 0; j < task.item_dim; ++j) {
        out << ",x" << j;
    }
    out << "\n";
    out.precision(17);
    auto emit = [&](const char* split, const std::vector<std::vector<double>>& xs,
                    const std::vector<std::vector<double>>& ys,
                    const std::vector<std::size_t>& labels) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            out << split;
            if (task.kind == TaskKind::kRegression) {
                for (double v : ys[i]) {
                    out << "," << v;
                }
            } else {
                out << "," << labels[i];
            }
            for (double v : xs[i]) {
                out << "," << v;
            }
            out << "\n";
        }
    };
    emit("train", task.train_inputs, task.train_targets, task.train_labels);
    emit("val", task.val_inputs, task.val_targets, task.val_labels);
}

}  // namespace wlora
