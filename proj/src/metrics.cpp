#include "wpr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "wpr/common.hpp"

namespace wpr::metrics {

JudgedRun judge(const core::Dataset& dataset, const std::vector<core::RankedList>& rankings,
                int relevance_threshold, std::optional<double> decision_threshold) {
    std::unordered_map<std::string, const core::Query*> by_id;
    for (const auto& q : dataset.queries) by_id[q.query_id] = &q;

    JudgedRun run;
    run.relevance_threshold = relevance_threshold;
    run.decision_threshold = decision_threshold;
    for (const auto& rl : rankings) {
        auto it = by_id.find(rl.query_id);
        if (it == by_id.end()) throw MetricError("judge: unknown query " + rl.query_id);
        std::unordered_map<std::string, int> grade_of;
        for (const auto& c : it->second->candidates) {
            if (c.label) grade_of[c.item_id] = *c.label;
        }
        JudgedQuery jq;
        jq.query_id = rl.query_id;
        for (std::size_t i = 0; i < rl.item_ids.size(); ++i) {
            auto g = grade_of.find(rl.item_ids[i]);
            if (g == grade_of.end())
                throw MetricError("judge: no grade for item " + rl.item_ids[i] + " of query " +
                                  rl.query_id);
            jq.grades.push_back(g->second);
            jq.scores.push_back(rl.scores[i]);
        }
        run.queries.push_back(std::move(jq));
    }
    return run;
}

double mrr_at_k(const JudgedRun& run, std::size_t k) {
    if (k < 1) throw ArgumentError("mrr_at_k: k must be >= 1");
    if (run.queries.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& q : run.queries) {
        for (std::size_t j = 0; j < q.grades.size(); ++j) {
            if (q.grades[j] >= run.relevance_threshold) {
                if (j < k) sum += 1.0 / static_cast<double>(j + 1);
                break;
            }
        }
    }
    return sum / static_cast<double>(run.queries.size());
}

double map_at_k(const JudgedRun& run, std::size_t k) {
    if (k < 1) throw ArgumentError("map_at_k: k must be >= 1");
    if (run.queries.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& q : run.queries) {
        const std::size_t limit = std::min(k, q.grades.size());
        double hits = 0.0;
        double ap = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            if (q.grades[j] >= run.relevance_threshold) {
                hits += 1.0;
                ap += hits / static_cast<double>(j + 1);
            }
        }
        if (hits > 0.0) sum += ap / hits;
    }
    return sum / static_cast<double>(run.queries.size());
}

double ndcg(const JudgedRun& run, std::optional<std::size_t> k) {
    if (run.queries.empty()) return 0.0;
    auto dcg = [](const std::vector<int>& grades, std::size_t limit) {
        double s = 0.0;
        for (std::size_t j = 0; j < limit; ++j)
            s += (std::exp2(static_cast<double>(grades[j])) - 1.0) /
                 std::log2(static_cast<double>(j + 2));
        return s;
    };
    double sum = 0.0;
    for (const auto& q : run.queries) {
        const std::size_t limit = k ? std::min(*k, q.grades.size()) : q.grades.size();
        std::vector<int> ideal = q.grades;
        std::sort(ideal.begin(), ideal.end(), std::greater<int>());
        const double idcg = dcg(ideal, limit);
        if (idcg > 0.0) sum += dcg(q.grades, limit) / idcg;
    }
    return sum / static_cast<double>(run.queries.size());
}

double f1_macro(const JudgedRun& run) {
    if (!run.decision_threshold)
        throw MetricError("f1_macro: decision threshold not configured");
    const double tau = *run.decision_threshold;
    double sum = 0.0;
    std::size_t used = 0;
    for (const auto& q : run.queries) {
        std::size_t relevant = 0;
        std::size_t returned = 0;
        std::size_t hit = 0;
        for (std::size_t j = 0; j < q.grades.size(); ++j) {
            const bool rel = q.grades[j] >= run.relevance_threshold;
            const bool ret = q.scores[j] >= tau;
            relevant += rel;
            returned += ret;
            hit += (rel && ret);
        }
        if (relevant == 0) continue;
        const double p = returned > 0
                             ? static_cast<double>(hit) / static_cast<double>(returned)
                             : 0.0;
        const double r = static_cast<double>(hit) / static_cast<double>(relevant);
        sum += (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
        ++used;
    }
    if (used == 0) throw MetricError("f1_macro: no query has a relevant item");
    return sum / static_cast<double>(used);
}

PnrResult pnr(const JudgedRun& run) {
    PnrResult out;
    double sum = 0.0;
    for (const auto& q : run.queries) {
        std::size_t concordant = 0;
        std::size_t discordant = 0;
        const std::size_t n = q.grades.size();
        for (std::size_t a = 0; a < n; ++a) {
            for (std::size_t b = 0; b < n; ++b) {
                if (q.grades[a] > q.grades[b]) {
                    if (q.scores[a] > q.scores[b])
                        ++concordant;
                    else if (q.scores[a] < q.scores[b])
                        ++discordant;
                }
            }
        }
        if (concordant == 0 && discordant == 0) {
            ++out.n_empty;
        } else if (discordant == 0) {
            ++out.n_infinite;  // infinite ratio, excluded from the average
        } else {
            sum += static_cast<double>(concordant) / static_cast<double>(discordant);
            ++out.n_used;
        }
    }
    if (out.n_used == 0)
        throw MetricError("pnr: no query has both concordant and discordant pairs");
    out.value = sum / static_cast<double>(out.n_used);
    return out;
}

double delta_gsb(std::int64_t good, std::int64_t bad, std::int64_t same) {
    if (good < 0 || bad < 0 || same < 0)
        throw ArgumentError("delta_gsb: counts must be non-negative");
    const std::int64_t total = good + bad + same;
    if (total == 0) throw ArgumentError("delta_gsb: all counts are zero");
    return static_cast<double>(good - bad) / (2.0 * static_cast<double>(total));
}

std::vector<double> feature_entropies(const core::Dataset& dataset, std::size_t bins) {
    if (bins < 2) throw ArgumentError("feature_entropies: need >= 2 bins");
    const std::size_t n_features = dataset.item_feature_dim;
    if (n_features == 0) throw ArgumentError("feature_entropies: dataset has no item features");

    std::vector<double> out(n_features, 0.0);
    std::vector<double> column;
    for (std::size_t f = 0; f < n_features; ++f) {
        column.clear();
        for (const auto& q : dataset.queries)
            for (const auto& c : q.candidates) column.push_back(c.features[f]);
        if (column.empty()) continue;
        const auto [mn_it, mx_it] = std::minmax_element(column.begin(), column.end());
        const double mn = *mn_it, mx = *mx_it;
        std::vector<std::size_t> counts(bins, 0);
        if (mx == mn) {
            counts[0] = column.size();  // constant feature: one occupied bin
        } else {
            const double width = (mx - mn) / static_cast<double>(bins);
            for (double v : column) {
                auto b = static_cast<std::size_t>((v - mn) / width);
                counts[std::min(b, bins - 1)]++;
            }
        }
        double h = 0.0;
        for (std::size_t c : counts) {
            if (c == 0) continue;
            const double p = static_cast<double>(c) / static_cast<double>(column.size());
            h -= p * std::log2(p);
        }
        out[f] = h;
    }
    return out;
}

std::vector<std::size_t> entropy_rank_features(const core::Dataset& dataset, std::size_t bins) {
    const auto h = feature_entropies(dataset, bins);
    std::vector<std::size_t> order(h.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (h[a] != h[b]) return h[a] > h[b];
        return a < b;
    });
    return order;
}

void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& out) {
    out << "run_id,metric,k,value,n_queries,n_excluded\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.value);
        out << r.run_id << ',' << r.metric << ',';
        if (r.k) out << *r.k;
        out << ',' << buf << ',' << r.n_queries << ',' << r.n_excluded << '\n';
    }
}

}  // namespace wpr::metrics
