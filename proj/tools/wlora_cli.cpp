// Command-line driver for desk-scale LoRA / WeightLoRA experiments.
//
// Subcommands: train, probe, count, ablate, expand-check. See README.md.
// Exit codes: 0 success, 2 invalid configuration, 3 degenerate run.

#include <sys/wait.h>

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wlora/checkpoint.hpp"
#include "wlora/diagnostics.hpp"
#include "wlora/presets.hpp"
#include "wlora/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wlora;

namespace {

constexpr double kExpansionTolerance = 1e-10;

std::string default_outdir() {
    const char* env = std::getenv("WLORA_OUTDIR");
    return env != nullptr && *env != '\0' ? env : "runs";
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string run_id_for(const json& config) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(config.dump()));
    return buf;
}

std::string iso_timestamp() {
    char buf[32];
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& context) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) {
            throw ContractError(context + ": unknown config key '" + key + "'");
        }
    }
}

// --- train / ablate configuration -------------------------------------------

struct TrainConfig {
    std::string method = "wlora";
    std::string task = "planted:n6k2";
    std::size_t k = 0;  // 0: match the task's planted-set size
    std::size_t t_freeze = 300;
    std::size_t total_steps = 800;
    std::size_t batch = 32;
    std::size_t post_t_batch = 0;  // 0: same as batch
    std::size_t rank = 4;
    std::size_t warmup = 100;
    std::size_t grad_accum = 1;
    std::size_t omega_every = 1;
    double lr = 2e-3;
    double lr_omega = 0.3;
    double alpha = 32.0;
    double dropout = 0.0;
    std::string expansion = "none";       // none | gaussian | qr
    std::string projection = "at-freeze";  // every-step | at-freeze
    std::uint64_t seed = 1;

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {
            "method",     "task",   "k",        "t",          "steps",     "batch",
            "post_t_batch", "rank", "warmup",   "grad_accum", "omega_every", "lr",
            "lr_omega",   "alpha",  "dropout",  "expansion",  "projection", "seed"};
        return k;
    }

    json to_json() const {
        return json{{"method", method},
                    {"task", task},
                    {"k", k},
                    {"t", t_freeze},
                    {"steps", total_steps},
                    {"batch", batch},
                    {"post_t_batch", post_t_batch},
                    {"rank", rank},
                    {"warmup", warmup},
                    {"grad_accum", grad_accum},
                    {"omega_every", omega_every},
                    {"lr", lr},
                    {"lr_omega", lr_omega},
                    {"alpha", alpha},
                    {"dropout", dropout},
                    {"expansion", expansion},
                    {"projection", projection},
                    {"seed", seed}};
    }

    static TrainConfig from_json(const json& j) {
        reject_unknown_keys(j, keys(), "train");
        TrainConfig c;
        c.method = j.value("method", c.method);
        c.task = j.value("task", c.task);
        c.k = j.value("k", c.k);
        c.t_freeze = j.value("t", c.t_freeze);
        c.total_steps = j.value("steps", c.total_steps);
        c.batch = j.value("batch", c.batch);
        c.post_t_batch = j.value("post_t_batch", c.post_t_batch);
        c.rank = j.value("rank", c.rank);
        c.warmup = j.value("warmup", c.warmup);
        c.grad_accum = j.value("grad_accum", c.grad_accum);
        c.omega_every = j.value("omega_every", c.omega_every);
        c.lr = j.value("lr", c.lr);
        c.lr_omega = j.value("lr_omega", c.lr_omega);
        c.alpha = j.value("alpha", c.alpha);
        c.dropout = j.value("dropout", c.dropout);
        c.expansion = j.value("expansion", c.expansion);
        c.projection = j.value("projection", c.projection);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct TaskBundle {
    std::unique_ptr<ToyModel> model;
    SyntheticTask task;
    std::vector<int> slots;
    std::vector<int> s_star;
    std::size_t default_k = 1;
};

// planted:n<L>k<S> (MLP) or planted-attn:k<S> (single-block transformer).
TaskBundle build_task(const std::string& spec, std::uint64_t seed) {
    TaskBundle out;
    if (spec.rfind("planted:", 0) == 0) {
        const std::string rest = spec.substr(8);
        std::size_t layers = 0, k_star = 0;
        if (std::sscanf(rest.c_str(), "n%zuk%zu", &layers, &k_star) != 2 || layers < 2 ||
            k_star < 1 || k_star > layers) {
            throw ContractError("task: malformed planted spec '" + spec +
                                "' (expected planted:n<layers>k<planted>)");
        }
        auto exp = make_planted_mlp_experiment(layers, k_star, seed);
        out.model = std::move(exp.model);
        out.task = std::move(exp.task);
        out.s_star = exp.s_star;
        out.default_k = k_star;
    } else if (spec.rfind("planted-attn:", 0) == 0) {
        std::size_t k_star = 0;
        if (std::sscanf(spec.c_str() + 13, "k%zu", &k_star) != 1 || k_star < 1 || k_star > 4) {
            throw ContractError("task: malformed planted-attn spec '" + spec +
                                "' (expected planted-attn:k<1..4>)");
        }
        TransformerConfig tc;
        auto model = std::make_unique<TinyTransformer>(tc, seed * 0x8b72e1fd0a54ffabULL + 17);
        Rng slot_rng(seed * 0x6a09e667f3bcc909ULL + 5);
        std::vector<int> s_star;
        for (std::size_t i : slot_rng.sample_without_replacement(4, k_star)) {
            s_star.push_back(static_cast<int>(i));
        }
        PlantedTaskConfig pc;
        pc.n_train = 256;
        pc.n_val = 64;
        out.task = make_planted_task(*model, s_star, pc, seed);
        out.model = std::move(model);
        out.s_star = s_star;
        out.default_k = k_star;
    } else {
        throw ContractError("task: unknown task spec '" + spec + "'");
    }
    for (const auto& s : out.model->slots()) {
        out.slots.push_back(s.id);
    }
    return out;
}

TrainSchedule schedule_from(const TrainConfig& c, std::size_t resolved_k) {
    TrainSchedule s;
    s.k = resolved_k;
    s.t_freeze = c.t_freeze;
    s.total_steps = c.total_steps;
    s.batch_size = c.batch;
    s.post_t_batch_size = c.post_t_batch == 0 ? c.batch : c.post_t_batch;
    s.lr = c.lr;
    s.lr_omega = c.lr_omega;
    s.warmup_steps = c.warmup;
    s.grad_accum = c.grad_accum;
    s.omega_update_every = c.omega_every;
    s.seed = c.seed;
    if (c.expansion == "none") {
        s.expansion = ExpansionScheme::kNone;
    } else if (c.expansion == "gaussian") {
        s.expansion = ExpansionScheme::kGaussian;
    } else if (c.expansion == "qr") {
        s.expansion = ExpansionScheme::kQr;
    } else {
        throw ContractError("expansion: must be none, gaussian or qr, got '" + c.expansion + "'");
    }
    if (c.projection == "every-step") {
        s.projection = ProjectionMode::kEveryStep;
    } else if (c.projection == "at-freeze") {
        s.projection = ProjectionMode::kAtFreezeOnly;
    } else {
        throw ContractError("projection: must be every-step or at-freeze, got '" + c.projection +
                            "'");
    }
    return s;
}

struct TrainOutcome {
    RunReport report;
    fs::path run_dir;
};

TrainOutcome execute_train(const TrainConfig& c, const std::string& outdir) {
    if (c.method != "lora" && c.method != "wlora" && c.method != "wlora+" &&
        c.method != "rlora" && c.method != "full") {
        throw ContractError("method: must be one of lora, wlora, wlora+, rlora, full; got '" +
                            c.method + "'");
    }
    if (c.rank < 1) {
        throw ContractError("rank: must be >= 1");
    }

    TaskBundle bundle = build_task(c.task, c.seed);
    const std::size_t k = c.k == 0 ? bundle.default_k : c.k;
    if (k < 1) {
        throw ContractError("k: must be >= 1");
    }

    TrainConfig effective = c;
    effective.k = k;
    if (effective.post_t_batch == 0) {
        effective.post_t_batch = effective.batch;
    }
    if (c.method == "wlora+" && effective.expansion == "none") {
        throw ContractError("expansion: wlora+ requires gaussian or qr");
    }

    TrainSchedule sched = schedule_from(effective, k);

    const bool gated = c.method == "wlora" || c.method == "wlora+" || c.method == "rlora";
    Rng arng(c.seed * 31 + 7);
    AdapterBank bank = c.method == "full"
                           ? AdapterBank{}
                           : attach_adapters(*bundle.model, bundle.slots, c.rank, gated, arng, k,
                                             c.alpha, c.dropout);

    TrainOutcome out;
    if (c.method == "wlora") {
        out.report = run_weightlora(*bundle.model, bank, bundle.task, sched);
    } else if (c.method == "wlora+") {
        out.report = run_weightlora_plus(*bundle.model, bank, bundle.task, sched);
    } else if (c.method == "lora") {
        out.report = run_baseline(*bundle.model, bank, bundle.task, sched, BaselineVariant::kLora);
    } else if (c.method == "rlora") {
        out.report = run_baseline(*bundle.model, bank, bundle.task, sched, BaselineVariant::kRlora);
    } else {
        out.report = run_baseline(*bundle.model, bank, bundle.task, sched, BaselineVariant::kFull);
    }
    out.report.config_echo = effective.to_json();

    out.run_dir = fs::path(outdir) / run_id_for(effective.to_json());
    fs::create_directories(out.run_dir);
    out.report.write_metrics_csv((out.run_dir / "metrics.csv").string());
    json summary = out.report.summary_json();
    summary["planted_slots"] = bundle.s_star;
    summary["timestamp"] = iso_timestamp();
    std::ofstream(out.run_dir / "summary.json") << summary.dump(2) << "\n";
    if (c.method != "full") {
        save_checkpoint(bank, (out.run_dir / "checkpoint.json").string());
    }
    return out;
}

int cmd_train(const TrainConfig& c, const std::string& outdir, bool as_json,
              const std::vector<std::uint64_t>& fanout_seeds, const std::string& self,
              const std::vector<std::string>& raw_args) {
    if (!fanout_seeds.empty()) {
        // each seed runs in its own worker process, sequentially
        for (std::uint64_t s : fanout_seeds) {
            std::string cmd = "\"" + self + "\"";
            bool skip_next = false;
            for (const auto& a : raw_args) {
                if (skip_next) {
                    skip_next = false;
                    continue;
                }
                if (a == "--seeds" || a == "--seed") {
                    skip_next = true;
                    continue;
                }
                if (a.rfind("--seeds=", 0) == 0 || a.rfind("--seed=", 0) == 0) {
                    continue;
                }
                cmd += " \"" + a + "\"";
            }
            cmd += " --seed " + std::to_string(s);
            const int rc = std::system(cmd.c_str());
            if (rc != 0) {
                return WEXITSTATUS(rc) != 0 ? WEXITSTATUS(rc) : 1;
            }
        }
        return 0;
    }

    TrainOutcome out = execute_train(c, outdir);
    if (as_json) {
        json j = out.report.summary_json();
        j["run_dir"] = out.run_dir.string();
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "method=" << out.report.method << " seed=" << c.seed
                  << " final_train_loss=" << out.report.final_train_loss
                  << " final_val_loss=" << out.report.final_val_loss << " active=[";
        for (std::size_t i = 0; i < out.report.active_set.size(); ++i) {
            std::cout << (i ? "," : "") << out.report.active_set[i];
        }
        std::cout << "] params=" << out.report.params_after_expansion << "\n";
        std::cout << "run dir: " << out.run_dir.string() << "\n";
    }
    return 0;
}

// --- probe -------------------------------------------------------------------

struct ProbeCliConfig {
    std::string task = "planted:n6k2";
    std::size_t epochs = 1;
    std::size_t probe_seeds = 5;
    std::size_t rank = 4;
    double lr = 5e-4;
    std::size_t batch = 16;
    std::uint64_t seed = 1;

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {"task", "epochs", "probe_seeds",
                                                "rank", "lr",     "batch",
                                                "seed"};
        return k;
    }

    json to_json() const {
        return json{{"task", task}, {"epochs", epochs},   {"probe_seeds", probe_seeds},
                    {"rank", rank}, {"lr", lr},           {"batch", batch},
                    {"seed", seed}};
    }

    static ProbeCliConfig from_json(const json& j) {
        reject_unknown_keys(j, keys(), "probe");
        ProbeCliConfig c;
        c.task = j.value("task", c.task);
        c.epochs = j.value("epochs", c.epochs);
        c.probe_seeds = j.value("probe_seeds", c.probe_seeds);
        c.rank = j.value("rank", c.rank);
        c.lr = j.value("lr", c.lr);
        c.batch = j.value("batch", c.batch);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

int cmd_probe(const ProbeCliConfig& c, const std::string& outdir, bool as_json) {
    TaskBundle bundle = build_task(c.task, c.seed);
    ProbeConfig pc;
    pc.epochs = c.epochs;
    pc.seeds = c.probe_seeds;
    pc.rank = c.rank;
    pc.lr = c.lr;
    pc.batch_size = c.batch;
    auto profile = importance_probe(*bundle.model, bundle.task, bundle.slots, pc, c.seed * 101);

    const fs::path run_dir = fs::path(outdir) / run_id_for(c.to_json());
    fs::create_directories(run_dir);
    profile.write_csv((run_dir / "profile.csv").string());

    auto starred = profile.top_slots(bundle.default_k);
    json summary;
    summary["config"] = c.to_json();
    summary["scores"] = profile.scores;
    summary["starred_slots"] = starred;
    summary["planted_slots"] = bundle.s_star;
    summary["loss_convention"] = profile.loss_convention;
    summary["timestamp"] = iso_timestamp();
    std::ofstream(run_dir / "summary.json") << summary.dump(2) << "\n";

    if (as_json) {
        json j = summary;
        j.erase("timestamp");
        j["run_dir"] = run_dir.string();
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "probe scores:";
        for (double s : profile.scores) {
            std::cout << " " << s;
        }
        std::cout << "\nstarred slots:";
        for (std::size_t s : starred) {
            std::cout << " " << s;
        }
        std::cout << "\nrun dir: " << run_dir.string() << "\n";
    }
    return 0;
}

// --- count -------------------------------------------------------------------

int cmd_count(const std::string& model_name, const std::string& grouping, std::size_t rank,
              const std::string& k_active, const std::string& catalog_path, bool as_json) {
    const ShapeCatalog catalog =
        catalog_path.empty() ? ShapeCatalog::builtin() : ShapeCatalog::load(catalog_path);
    const auto& entry = catalog.find(model_name);
    const auto& group = entry.grouping(grouping);
    std::size_t k = group.slots.size();
    if (k_active != "all") {
        char* end = nullptr;
        const long v = std::strtol(k_active.c_str(), &end, 10);
        if (end == nullptr || *end != '\0' || v < 1) {
            throw ContractError("k-active: must be a positive integer or 'all', got '" +
                                k_active + "'");
        }
        k = static_cast<std::size_t>(v);
    }
    auto count = catalog_count(entry, grouping, rank, k);
    if (as_json) {
        json j{{"model", model_name},
               {"grouping", grouping.empty() ? entry.default_grouping : grouping},
               {"rank", rank},
               {"k_active", k},
               {"count", count.count},
               {"total_params", count.total},
               {"fraction", count.fraction},
               {"percent_display", count.percent_display}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << count.count << " (" << count.percent_display << ")\n";
    }
    return 0;
}

// --- ablate ------------------------------------------------------------------

double binomial_tail_p(std::size_t n, std::size_t wins) {
    // one-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2)
    double p = 0.0;
    for (std::size_t i = wins; i <= n; ++i) {
        double log_c = 0.0;
        for (std::size_t j = 0; j < i; ++j) {
            log_c += std::log(static_cast<double>(n - j)) - std::log(static_cast<double>(j + 1));
        }
        p += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
    }
    return std::min(1.0, p);
}

int cmd_ablate(const TrainConfig& base, std::size_t n_seeds, const std::string& outdir,
               bool as_json) {
    std::vector<double> wlora_losses, rlora_losses;
    std::vector<std::string> wlora_sets, rlora_sets;
    std::size_t wins = 0, ties = 0;
    for (std::uint64_t seed = 1; seed <= n_seeds; ++seed) {
        TrainConfig cw = base;
        cw.method = "wlora";
        cw.seed = seed;
        TrainConfig cr = base;
        cr.method = "rlora";
        cr.seed = seed;
        auto w = execute_train(cw, outdir);
        auto r = execute_train(cr, outdir);
        wlora_losses.push_back(w.report.final_val_loss);
        rlora_losses.push_back(r.report.final_val_loss);
        auto set_str = [](const std::vector<std::size_t>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) {
                s += (i ? "|" : "") + std::to_string(v[i]);
            }
            return s;
        };
        wlora_sets.push_back(set_str(w.report.active_set));
        rlora_sets.push_back(set_str(r.report.active_set));
        if (w.report.final_val_loss < r.report.final_val_loss) {
            ++wins;
        } else if (w.report.final_val_loss == r.report.final_val_loss) {
            ++ties;
        }
    }

    const std::size_t n_eff = n_seeds - ties;
    const double p = n_eff == 0 ? 1.0 : binomial_tail_p(n_eff, wins);

    const fs::path dir = fs::path(outdir) / ("ablate-" + run_id_for(base.to_json()));
    fs::create_directories(dir);
    {
        std::ofstream csv(dir / "comparison.csv");
        csv << "seed,wlora_final_loss,rlora_final_loss,wlora_active,rlora_active\n";
        csv.precision(17);
        for (std::size_t i = 0; i < n_seeds; ++i) {
            csv << i + 1 << "," << wlora_losses[i] << "," << rlora_losses[i] << ","
                << wlora_sets[i] << "," << rlora_sets[i] << "\n";
        }
    }
    double wl_mean = 0.0, rl_mean = 0.0;
    for (std::size_t i = 0; i < n_seeds; ++i) {
        wl_mean += wlora_losses[i] / n_seeds;
        rl_mean += rlora_losses[i] / n_seeds;
    }
    json summary{{"seeds", n_seeds},     {"wins", wins},       {"ties", ties},
                 {"sign_test_p", p},     {"wlora_mean", wl_mean}, {"rlora_mean", rl_mean},
                 {"config", base.to_json()}};
    std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";

    if (as_json) {
        json j = summary;
        j["run_dir"] = dir.string();
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "wlora mean final loss: " << wl_mean << "\n"
                  << "rlora mean final loss: " << rl_mean << "\n"
                  << "wlora wins " << wins << "/" << n_eff << " (ties " << ties
                  << "), one-sided sign test p = " << p << "\n"
                  << "run dir: " << dir.string() << "\n";
    }
    return 0;
}

// --- expand-check ------------------------------------------------------------

int cmd_expand_check(std::size_t instances, std::uint64_t seed, bool as_json) {
    Rng rng(seed);
    double max_residual = 0.0;
    double max_ortho = 0.0;
    for (std::size_t rep = 0; rep < instances; ++rep) {
        const std::size_t d = 4 + rng.uniform_int(12);
        const std::size_t k = 4 + rng.uniform_int(12);
        const std::size_t r = 1 + rng.uniform_int(std::min(d, k) - 1);
        const std::size_t r_new = r + 1 + rng.uniform_int(4);
        AdapterState a = AdapterState::init(0, d, k, r, rng, 32.0, 0.0, 1.0);
        for (auto& v : a.b.mutable_data()) {
            v = rng.normal();
        }
        AdapterState g = expand_rank_gaussian(a, r_new, rng);
        max_residual = std::max(max_residual, expansion_residual(a, g));
        AdapterState q = expand_rank_qr(a, r_new, rng);
        max_residual = std::max(max_residual, expansion_residual(a, q));
        for (std::size_t old_col = 0; old_col < r; ++old_col) {
            for (std::size_t new_col = r; new_col < r_new; ++new_col) {
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    dot += q.a.at(i, old_col) * q.a.at(i, new_col);
                }
                max_ortho = std::max(max_ortho, std::abs(dot));
            }
        }
    }
    const bool pass = max_residual <= kExpansionTolerance && max_ortho <= kExpansionTolerance;
    if (as_json) {
        json j{{"instances", instances},
               {"max_residual", max_residual},
               {"max_orthogonality_error", max_ortho},
               {"tolerance", kExpansionTolerance},
               {"pass", pass}};
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "expansion residual max: " << max_residual << "\n"
                  << "orthogonality error max: " << max_ortho << "\n"
                  << (pass ? "PASS" : "FAIL") << " (tolerance " << kExpansionTolerance << ")\n";
    }
    return pass ? 0 : 1;
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ContractError("config: cannot open '" + path + "'");
    }
    json j;
    in >> j;
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale LoRA / WeightLoRA experiment driver"};
    app.require_subcommand(1);

    std::string outdir = default_outdir();
    bool as_json = false;
    app.add_option("--out", outdir, "output directory (env WLORA_OUTDIR)")
        ->capture_default_str();
    app.add_flag("--json", as_json, "machine-readable output");

    // train
    TrainConfig tc;
    std::string train_config_path;
    std::string seeds_csv;
    auto* train = app.add_subcommand("train", "run one training experiment");
    train->add_option("--config", train_config_path, "JSON config file (flags override)");
    train->add_option("--method", tc.method, "lora | wlora | wlora+ | rlora | full");
    train->add_option("--task", tc.task, "planted:n<L>k<S> | planted-attn:k<S>");
    train->add_option("--k", tc.k, "adapters to keep (0: planted-set size)");
    train->add_option("--t", tc.t_freeze, "freeze step T");
    train->add_option("--steps", tc.total_steps, "total steps");
    train->add_option("--batch", tc.batch, "batch size before T");
    train->add_option("--post-t-batch", tc.post_t_batch, "batch size after T (0: same)");
    train->add_option("--rank", tc.rank, "adapter rank");
    train->add_option("--warmup", tc.warmup, "lr warmup steps");
    train->add_option("--grad-accum", tc.grad_accum, "gradient accumulation steps");
    train->add_option("--omega-every", tc.omega_every, "gate update cadence");
    train->add_option("--lr", tc.lr, "adapter learning rate");
    train->add_option("--lr-omega", tc.lr_omega, "gate learning rate");
    train->add_option("--alpha", tc.alpha, "adapter alpha");
    train->add_option("--dropout", tc.dropout, "adapter dropout");
    train->add_option("--expansion", tc.expansion, "none | gaussian | qr");
    train->add_option("--projection", tc.projection, "every-step | at-freeze");
    train->add_option("--seed", tc.seed, "run seed");
    train->add_option("--seeds", seeds_csv, "comma list; fans out to worker processes");

    // probe
    ProbeCliConfig pc;
    std::string probe_config_path;
    auto* probe = app.add_subcommand("probe", "per-slot importance probe");
    probe->add_option("--config", probe_config_path, "JSON config file (flags override)");
    probe->add_option("--task", pc.task, "task spec");
    probe->add_option("--epochs", pc.epochs, "probe training epochs");
    probe->add_option("--probe-seeds", pc.probe_seeds, "seeds to average");
    probe->add_option("--rank", pc.rank, "probe adapter rank");
    probe->add_option("--lr", pc.lr, "probe learning rate");
    probe->add_option("--batch", pc.batch, "probe batch size");
    probe->add_option("--seed", pc.seed, "base seed");

    // count
    std::string count_model = "deberta-v3-base";
    std::string count_grouping;
    std::size_t count_rank = 8;
    std::string count_k = "all";
    std::string count_catalog;
    auto* count = app.add_subcommand("count", "exact trainable-parameter accounting");
    count->add_option("--model", count_model, "catalog model name");
    count->add_option("--grouping", count_grouping, "slot grouping (default: catalog default)");
    count->add_option("--rank", count_rank, "adapter rank");
    count->add_option("--k-active", count_k, "active adapters or 'all'");
    count->add_option("--catalog", count_catalog, "catalog JSON path (default: builtin)");

    // ablate
    TrainConfig ac;
    ac.task = "planted:n6k1";
    ac.k = 0;
    std::size_t ablate_seeds = 20;
    std::string ablate_config_path;
    auto* ablate = app.add_subcommand("ablate", "paired wlora vs rlora seeds + sign test");
    ablate->add_option("--config", ablate_config_path, "JSON config file (flags override)");
    ablate->add_option("--task", ac.task, "task spec");
    ablate->add_option("--k", ac.k, "adapters to keep (0: planted-set size)");
    ablate->add_option("--t", ac.t_freeze, "freeze step T");
    ablate->add_option("--steps", ac.total_steps, "total steps");
    ablate->add_option("--batch", ac.batch, "batch size before T");
    ablate->add_option("--warmup", ac.warmup, "lr warmup steps");
    ablate->add_option("--rank", ac.rank, "adapter rank");
    ablate->add_option("--lr", ac.lr, "adapter learning rate");
    ablate->add_option("--lr-omega", ac.lr_omega, "gate learning rate");
    ablate->add_option("--dropout", ac.dropout, "adapter dropout");
    ablate->add_option("--projection", ac.projection, "every-step | at-freeze");
    ablate->add_option("--n-seeds", ablate_seeds, "paired seeds to run");

    // expand-check
    std::size_t check_instances = 100;
    std::uint64_t check_seed = 1;
    auto* expand_check =
        app.add_subcommand("expand-check", "rank-expansion value-preservation check");
    expand_check->add_option("--instances", check_instances, "random adapters per scheme");
    expand_check->add_option("--seed", check_seed, "rng seed");

    std::vector<std::string> raw_args(argv + 1, argv + argc);

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            if (e.get_exit_code() == 0) {
                return app.exit(e);  // --help
            }
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }

        if (train->parsed()) {
            if (train->count("--k") > 0 && tc.k == 0) {
                throw ContractError("k must be >= 1");
            }
            if (!train_config_path.empty()) {
                TrainConfig file_cfg = TrainConfig::from_json(load_config_file(train_config_path));
                // flags given on the command line win over the file
                TrainConfig flag_cfg = tc;
                tc = file_cfg;
                for (const auto* opt : train->get_options()) {
                    if (opt->count() == 0) {
                        continue;
                    }
                    const std::string name = opt->get_name();
                    if (name == "--method") tc.method = flag_cfg.method;
                    else if (name == "--task") tc.task = flag_cfg.task;
                    else if (name == "--k") tc.k = flag_cfg.k;
                    else if (name == "--t") tc.t_freeze = flag_cfg.t_freeze;
                    else if (name == "--steps") tc.total_steps = flag_cfg.total_steps;
                    else if (name == "--batch") tc.batch = flag_cfg.batch;
                    else if (name == "--post-t-batch") tc.post_t_batch = flag_cfg.post_t_batch;
                    else if (name == "--rank") tc.rank = flag_cfg.rank;
                    else if (name == "--warmup") tc.warmup = flag_cfg.warmup;
                    else if (name == "--grad-accum") tc.grad_accum = flag_cfg.grad_accum;
                    else if (name == "--omega-every") tc.omega_every = flag_cfg.omega_every;
                    else if (name == "--lr") tc.lr = flag_cfg.lr;
                    else if (name == "--lr-omega") tc.lr_omega = flag_cfg.lr_omega;
                    else if (name == "--alpha") tc.alpha = flag_cfg.alpha;
                    else if (name == "--dropout") tc.dropout = flag_cfg.dropout;
                    else if (name == "--expansion") tc.expansion = flag_cfg.expansion;
                    else if (name == "--projection") tc.projection = flag_cfg.projection;
                    else if (name == "--seed") tc.seed = flag_cfg.seed;
                }
            }
            std::vector<std::uint64_t> fanout;
            if (!seeds_csv.empty()) {
                std::size_t pos = 0;
                while (pos < seeds_csv.size()) {
                    const std::size_t comma = seeds_csv.find(',', pos);
                    const std::string tok = seeds_csv.substr(
                        pos, comma == std::string::npos ? std::string::npos : comma - pos);
                    if (!tok.empty()) {
                        fanout.push_back(std::strtoull(tok.c_str(), nullptr, 10));
                    }
                    if (comma == std::string::npos) {
                        break;
                    }
                    pos = comma + 1;
                }
                if (fanout.empty()) {
                    throw ContractError("seeds: empty seed list");
                }
            }
            return cmd_train(tc, outdir, as_json, fanout, argv[0], raw_args);
        }
        if (probe->parsed()) {
            if (!probe_config_path.empty()) {
                ProbeCliConfig file_cfg =
                    ProbeCliConfig::from_json(load_config_file(probe_config_path));
                ProbeCliConfig flag_cfg = pc;
                pc = file_cfg;
                for (const auto* opt : probe->get_options()) {
                    if (opt->count() == 0) {
                        continue;
                    }
                    const std::string name = opt->get_name();
                    if (name == "--task") pc.task = flag_cfg.task;
                    else if (name == "--epochs") pc.epochs = flag_cfg.epochs;
                    else if (name == "--probe-seeds") pc.probe_seeds = flag_cfg.probe_seeds;
                    else if (name == "--rank") pc.rank = flag_cfg.rank;
                    else if (name == "--lr") pc.lr = flag_cfg.lr;
                    else if (name == "--batch") pc.batch = flag_cfg.batch;
                    else if (name == "--seed") pc.seed = flag_cfg.seed;
                }
            }
            return cmd_probe(pc, outdir, as_json);
        }
        if (count->parsed()) {
            return cmd_count(count_model, count_grouping, count_rank, count_k, count_catalog,
                             as_json);
        }
        if (ablate->parsed()) {
            if (ablate->count("--k") > 0 && ac.k == 0) {
                throw ContractError("k must be >= 1");
            }
            if (!ablate_config_path.empty()) {
                ac = TrainConfig::from_json(load_config_file(ablate_config_path));
            }
            if (ac.k == 0) {
                ac.k = build_task(ac.task, 1).default_k;
            }
            return cmd_ablate(ac, ablate_seeds, outdir, as_json);
        }
        if (expand_check->parsed()) {
            return cmd_expand_check(check_instances, check_seed, as_json);
        }
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const DegeneracyError& e) {
        std::cerr << "degenerate run: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const StateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
