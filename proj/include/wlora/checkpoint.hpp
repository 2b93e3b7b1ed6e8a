#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wlora/errors.hpp"
#include "wlora/models.hpp"

namespace wlora {

// JSON checkpoint container for an adapter bank. Per adapter:
// {layer_id, d, k, r, alpha, a (row-major), b (row-major), active},
// plus the gate vector and active set when the bank is gated.
inline nlohmann::json checkpoint_to_json(const AdapterBank& bank) {
    nlohmann::json j;
    j["format"] = "wlora-adapter-checkpoint";
    j["version"] = 1;
    j["adapters"] = nlohmann::json::array();
    for (const auto& a : bank.adapters) {
        j["adapters"].push_back({
            {"layer_id", a.layer_id},
            {"d", a.d()},
            {"k", a.k()},
            {"r", a.rank},
            {"alpha", a.alpha},
            {"dropout_p", a.dropout_p},
            {"a", a.a.data()},
            {"b", a.b.data()},
            {"active", a.active},
        });
    }
    if (bank.gated()) {
        j["omega"] = bank.gates->omega().data();
        j["k"] = bank.gates->k();
        j["frozen"] = bank.gates->frozen();
        if (bank.gates->frozen()) {
            j["active_set"] = bank.gates->active_set();
        }
    }
    return j;
}

inline void save_checkpoint(const AdapterBank& bank, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw ContractError("save_checkpoint: cannot open " + path);
    }
    out << checkpoint_to_json(bank).dump(2) << "\n";
}

inline AdapterBank checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "wlora-adapter-checkpoint") {
        throw ContractError("checkpoint: unrecognized format field");
    }
    AdapterBank bank;
    for (const auto& ja : j.at("adapters")) {
        AdapterState a;
        a.layer_id = ja.at("layer_id").get<int>();
        const auto d = ja.at("d").get<std::size_t>();
        const auto k = ja.at("k").get<std::size_t>();
        a.rank = ja.at("r").get<std::size_t>();
        a.alpha = ja.at("alpha").get<double>();
        a.dropout_p = ja.value("dropout_p", 0.0);
        a.active = ja.at("active").get<bool>();
        a.a = Tensor::from({d, a.rank}, ja.at("a").get<std::vector<double>>(), a.active);
        a.b = Tensor::from({a.rank, k}, ja.at("b").get<std::vector<double>>(), a.active);
        bank.adapters.push_back(std::move(a));
        bank.slot_ids.push_back(bank.adapters.back().layer_id);
    }
    if (j.contains("omega")) {
        const auto omega = j.at("omega").get<std::vector<double>>();
        bank.gates.emplace(omega.size(), j.at("k").get<std::size_t>());
        bank.gates->omega().mutable_data() = omega;
        if (j.value("frozen", false)) {
            bank.gates->freeze_and_disconnect(bank.adapters);
        }
    }
    return bank;
}

inline AdapterBank load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ContractError("load_checkpoint: cannot open " + path);
    }
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

}  // namespace wlora
