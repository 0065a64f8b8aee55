#include "wpr/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "wpr/common.hpp"

namespace wpr::core {

std::vector<std::size_t> Query::modality_indices(int modality_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].modality == modality_id) out.push_back(i);
    }
    return out;
}

RankedList make_ranked_list(std::string query_id,
                            std::vector<std::pair<std::string, double>> scored) {
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    RankedList out;
    out.query_id = std::move(query_id);
    out.item_ids.reserve(scored.size());
    out.scores.reserve(scored.size());
    for (auto& [id, s] : scored) {
        out.item_ids.push_back(std::move(id));
        out.scores.push_back(s);
    }
    return out;
}

namespace {

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(),
                       [](double x) { return std::isfinite(x); });
}

}  // namespace

void write_jsonl(const Dataset& dataset, std::ostream& out) {
    for (const auto& q : dataset.queries) {
        nlohmann::json jq;
        jq["query_id"] = q.query_id;
        jq["user_features"] = q.user_features;
        nlohmann::json cands = nlohmann::json::array();
        for (const auto& c : q.candidates) {
            nlohmann::json jc;
            jc["item_id"] = c.item_id;
            jc["modality"] = c.modality;
            jc["upstream_score"] = c.upstream_score;
            jc["features"] = c.features;
            jc["text_embedding"] = c.text_embedding;
            if (c.visual_embedding)
                jc["visual_embedding"] = *c.visual_embedding;
            else
                jc["visual_embedding"] = nullptr;
            if (c.label)
                jc["label"] = *c.label;
            else
                jc["label"] = nullptr;
            if (c.clicked)
                jc["clicked"] = *c.clicked;
            else
                jc["clicked"] = nullptr;
            cands.push_back(std::move(jc));
        }
        jq["candidates"] = std::move(cands);
        out << jq.dump() << '\n';
    }
}

void write_jsonl_file(const Dataset& dataset, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open for writing: " + path);
    write_jsonl(dataset, f);
}

std::string to_jsonl(const Dataset& dataset) {
    std::ostringstream ss;
    write_jsonl(dataset, ss);
    return ss.str();
}

std::vector<Violation> validate_dataset(const Dataset& dataset) {
    std::vector<Violation> out;
    auto add = [&](std::string q, std::string i, std::string msg) {
        out.push_back({std::move(q), std::move(i), std::move(msg)});
    };

    if (dataset.modalities.empty()) {
        add("", "", "dataset has no modalities");
    }
    std::set<int> modality_ids;
    for (const auto& m : dataset.modalities) {
        if (!modality_ids.insert(m.id).second)
            add("", "", "duplicate modality id " + std::to_string(m.id));
    }
    // ids must be dense 1..M
    for (int want = 1; want <= static_cast<int>(dataset.modalities.size()); ++want) {
        if (!modality_ids.count(want))
            add("", "", "modality ids not dense: missing id " + std::to_string(want));
    }

    std::unordered_set<std::string> seen_queries;
    for (const auto& q : dataset.queries) {
        if (!seen_queries.insert(q.query_id).second)
            add(q.query_id, "", "duplicate query_id");
        if (q.candidates.empty())
            add(q.query_id, "", "empty candidate set");
        if (q.user_features.size() != dataset.user_feature_dim)
            add(q.query_id, "",
                "user_features dimension " + std::to_string(q.user_features.size()) +
                    " != " + std::to_string(dataset.user_feature_dim));
        if (!all_finite(q.user_features))
            add(q.query_id, "", "non-finite user feature");

        std::unordered_set<std::string> seen_items;
        for (const auto& c : q.candidates) {
            if (!seen_items.insert(c.item_id).second)
                add(q.query_id, c.item_id, "duplicate item_id within query");
            if (!modality_ids.count(c.modality))
                add(q.query_id, c.item_id,
                    "unknown modality id " + std::to_string(c.modality));
            if (!std::isfinite(c.upstream_score))
                add(q.query_id, c.item_id, "non-finite upstream_score");
            if (c.label && (*c.label < 0 || *c.label > 4))
                add(q.query_id, c.item_id,
                    "label out of range: " + std::to_string(*c.label));
            if (c.features.size() != dataset.item_feature_dim)
                add(q.query_id, c.item_id,
                    "features dimension " + std::to_string(c.features.size()) +
                        " != " + std::to_string(dataset.item_feature_dim));
            if (!all_finite(c.features))
                add(q.query_id, c.item_id, "non-finite feature value");
            if (c.text_embedding.size() != dataset.text_dim)
                add(q.query_id, c.item_id,
                    "text_embedding dimension " + std::to_string(c.text_embedding.size()) +
                        " != " + std::to_string(dataset.text_dim));
            if (!all_finite(c.text_embedding))
                add(q.query_id, c.item_id, "non-finite text embedding value");
            if (c.visual_embedding) {
                if (c.visual_embedding->size() != dataset.visual_dim)
                    add(q.query_id, c.item_id,
                        "visual_embedding dimension " +
                            std::to_string(c.visual_embedding->size()) + " != " +
                            std::to_string(dataset.visual_dim));
                if (!all_finite(*c.visual_embedding))
                    add(q.query_id, c.item_id, "non-finite visual embedding value");
            }
        }
    }
    return out;
}

}  // namespace wpr::core
