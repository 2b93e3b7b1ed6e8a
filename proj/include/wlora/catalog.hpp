#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "wlora/errors.hpp"

namespace wlora {

struct CatalogSlot {
    int layer = 0;
    std::string projection;
    std::size_t d = 0;
    std::size_t k = 0;
};

struct SlotGrouping {
    bool inferred = false;  // composition not stated by the model family docs
    std::vector<CatalogSlot> slots;
};

struct CatalogEntry {
    std::string name;
    long long total_params = 0;
    std::string default_grouping;
    std::map<std::string, SlotGrouping> groupings;

    const SlotGrouping& grouping(const std::string& which) const {
        const std::string key = which.empty() ? default_grouping : which;
        auto it = groupings.find(key);
        if (it == groupings.end()) {
            throw ContractError("catalog entry '" + name + "' has no grouping '" + key + "'");
        }
        return it->second;
    }
};

// Static per-layer dimension table for named model families, used for exact
// adapter parameter accounting.
class ShapeCatalog {
public:
    static ShapeCatalog from_json(const nlohmann::json& j) {
        ShapeCatalog cat;
        cat.version_ = j.at("version").get<int>();
        for (const auto& jm : j.at("models")) {
            CatalogEntry e;
            e.name = jm.at("name").get<std::string>();
            e.total_params = jm.at("total_params").get<long long>();
            e.default_grouping = jm.at("default_grouping").get<std::string>();
            for (const auto& [gname, jg] : jm.at("groupings").items()) {
                SlotGrouping g;
                g.inferred = jg.value("inferred", false);
                for (const auto& js : jg.at("slots")) {
                    CatalogSlot s;
                    s.layer = js.at("layer").get<int>();
                    s.projection = js.at("projection").get<std::string>();
                    s.d = js.at("d").get<std::size_t>();
                    s.k = js.at("k").get<std::size_t>();
                    g.slots.push_back(s);
                }
                e.groupings[gname] = std::move(g);
            }
            cat.entries_[e.name] = std::move(e);
        }
        return cat;
    }

    static ShapeCatalog load(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw ContractError("ShapeCatalog: cannot open " + path);
        }
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    // The catalog shipped with this repo (mirrors data/shape_catalog.json).
    static const ShapeCatalog& builtin();

    int version() const { return version_; }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    const CatalogEntry& find(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw ContractError("unknown catalog model '" + name + "'");
        }
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) {
            out.push_back(k);
        }
        return out;
    }

private:
    int version_ = 0;
    std::map<std::string, CatalogEntry> entries_;
};

namespace detail_catalog {

inline nlohmann::json builtin_json() {
    nlohmann::json j;
    j["version"] = 1;
    auto slot = [](int layer, const char* proj) {
        return nlohmann::json{{"layer", layer}, {"projection", proj}, {"d", 768}, {"k", 768}};
    };
    nlohmann::json self_attn = nlohmann::json::array();
    for (int layer = 0; layer < 12; ++layer) {
        for (const char* proj : {"q", "k", "v"}) {
            self_attn.push_back(slot(layer, proj));
        }
    }
    // The 72-slot composition is not enumerated by the model family docs;
    // q/k/v/o plus the two positional projections per layer is our reading.
    nlohmann::json all_attn = nlohmann::json::array();
    for (int layer = 0; layer < 12; ++layer) {
        for (const char* proj : {"q", "k", "v", "o", "pos_q", "pos_k"}) {
            all_attn.push_back(slot(layer, proj));
        }
    }
    j["models"] = nlohmann::json::array({nlohmann::json{
        {"name", "deberta-v3-base"},
        {"total_params", 184000000},
        {"default_grouping", "self_attention"},
        {"groupings",
         {{"self_attention", {{"inferred", false}, {"slots", self_attn}}},
          {"all_attention", {{"inferred", true}, {"slots", all_attn}}}}},
    }});
    return j;
}

}  // namespace detail_catalog

inline const ShapeCatalog& ShapeCatalog::builtin() {
    static const ShapeCatalog cat = from_json(detail_catalog::builtin_json());
    return cat;
}

}  // namespace wlora
