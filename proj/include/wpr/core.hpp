#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wpr::core {

/// A retrieval channel with its own upstream ranker. Ids are dense 1..M.
struct Modality {
    int id = 0;
    std::string name;
};

/// One retrieved item. `upstream_score` is the raw output of the item's
/// single-modality ranker; scores are only comparable within a modality.
/// A missing visual embedding marks a text-only item.
struct Candidate {
    std::string item_id;
    int modality = 0;
    double upstream_score = 0.0;
    std::vector<double> features;
    std::vector<double> text_embedding;
    std::optional<std::vector<double>> visual_embedding;
    std::optional<int> label;  // graded relevance 0..4
    std::optional<bool> clicked;
};

/// A query with its unified candidate set (union over modality queues).
struct Query {
    std::string query_id;
    std::vector<double> user_features;
    std::vector<Candidate> candidates;

    /// Indices of this query's candidates belonging to `modality_id`,
    /// in stored order.
    std::vector<std::size_t> modality_indices(int modality_id) const;
};

struct Dataset {
    std::vector<Modality> modalities;
    std::vector<Query> queries;
    std::size_t text_dim = 0;
    std::size_t visual_dim = 0;  // 0 when no item has a visual embedding
    std::size_t item_feature_dim = 0;
    std::size_t user_feature_dim = 0;
};

/// A scored ordering of one query's items. Scores are non-increasing;
/// equal scores are broken by ascending item_id so every ranking the
/// library produces is reproducible.
struct RankedList {
    std::string query_id;
    std::vector<std::string> item_ids;
    std::vector<double> scores;
};

/// Builds a RankedList from (item_id, score) pairs using the canonical
/// ordering: score descending, item_id ascending on ties.
RankedList make_ranked_list(std::string query_id,
                            std::vector<std::pair<std::string, double>> scored);

struct Violation {
    std::string query_id;  // empty for dataset-level findings
    std::string item_id;   // empty when not item-specific
    std::string message;
};

/// Checks every dataset invariant and reports all violations found.
/// An empty report means the dataset is valid. Never throws; bad data
/// is a finding, not an error.
std::vector<Violation> validate_dataset(const Dataset& dataset);

// --- JSONL interchange -------------------------------------------------
// One query per line:
//   {"query_id": str, "user_features": [f64], "candidates": [{...}]}
// Reals are written with full round-trip precision.

void write_jsonl(const Dataset& dataset, std::ostream& out);
void write_jsonl_file(const Dataset& dataset, const std::string& path);
std::string to_jsonl(const Dataset& dataset);

}  // namespace wpr::core
