#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wpr/core.hpp"

namespace wpr::metrics {

/// One query's ranked grades and model scores, both in rank order
/// (position 0 = top of the page).
struct JudgedQuery {
    std::string query_id;
    std::vector<int> grades;
    std::vector<double> scores;
};

struct JudgedRun {
    std::vector<JudgedQuery> queries;
    int relevance_threshold = 2;  // grade >= threshold counts as relevant
    std::optional<double> decision_threshold;  // tau for f1_macro's returned set
};

/// Builds a judged run by looking up each ranked item's grade in the
/// dataset. Throws MetricError when a ranked item has no grade.
JudgedRun judge(const core::Dataset& dataset, const std::vector<core::RankedList>& rankings,
                int relevance_threshold = 2,
                std::optional<double> decision_threshold = std::nullopt);

/// Mean over queries of 1/rank of the first relevant item, zero when it
/// falls outside the top k.
double mrr_at_k(const JudgedRun& run, std::size_t k);

/// Mean average precision at cutoff k, with the per-query normalizer
/// R_i counting relevant items within the top k (queries with none
/// contribute zero).
double map_at_k(const JudgedRun& run, std::size_t k);

/// Mean over queries of DCG/IDCG with gains 2^grade - 1; an optional
/// cutoff applies to both DCG and IDCG. All-zero-grade queries
/// contribute zero.
double ndcg(const JudgedRun& run, std::optional<std::size_t> k = std::nullopt);

/// Macro-averaged F1 over queries with at least one relevant item; the
/// returned set is items scoring >= the run's decision threshold.
/// Throws MetricError when no query qualifies or the threshold is unset.
double f1_macro(const JudgedRun& run);

struct PnrResult {
    double value = 0.0;     // macro-average of per-query concordant/discordant ratios
    std::size_t n_used = 0;
    std::size_t n_infinite = 0;  // queries with discordant count 0 (excluded)
    std::size_t n_empty = 0;     // queries with no scorable labeled pair (excluded)
};

PnrResult pnr(const JudgedRun& run);

/// (good - bad) / (2 * (good + bad + same)); counts must not all be zero.
double delta_gsb(std::int64_t good, std::int64_t bad, std::int64_t same);

/// Empirical Shannon entropy (base 2) of each item feature's
/// equal-width histogram over the dataset.
std::vector<double> feature_entropies(const core::Dataset& dataset, std::size_t bins);

/// Feature indices sorted by descending entropy, ties by ascending index.
std::vector<std::size_t> entropy_rank_features(const core::Dataset& dataset, std::size_t bins);

// --- Report emission ----------------------------------------------------------

struct MetricRow {
    std::string run_id;
    std::string metric;
    std::optional<std::size_t> k;
    double value = 0.0;
    std::size_t n_queries = 0;
    std::size_t n_excluded = 0;
};

/// CSV with header `run_id,metric,k,value,n_queries,n_excluded`.
void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& out);

}  // namespace wpr::metrics
