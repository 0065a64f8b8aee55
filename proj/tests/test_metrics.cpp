#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "naive_metrics.hpp"
#include "wpr/common.hpp"
#include "wpr/metrics.hpp"

using namespace wpr;
using namespace wpr::metrics;

namespace {

JudgedRun one_query(std::vector<int> grades, std::vector<double> scores,
                    int threshold = 2, std::optional<double> tau = std::nullopt) {
    JudgedRun run;
    run.relevance_threshold = threshold;
    run.decision_threshold = tau;
    JudgedQuery q;
    q.query_id = "q";
    q.grades = std::move(grades);
    q.scores = std::move(scores);
    run.queries.push_back(std::move(q));
    return run;
}

JudgedRun random_run(std::mt19937_64& rng, bool with_tau) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    JudgedRun run;
    run.relevance_threshold = 2;
    if (with_tau) run.decision_threshold = 0.0;
    const std::size_t n_queries = 2 + rng() % 12;
    for (std::size_t qi = 0; qi < n_queries; ++qi) {
        JudgedQuery q;
        q.query_id = "q" + std::to_string(qi);
        const std::size_t n = 1 + rng() % 20;
        for (std::size_t i = 0; i < n; ++i) {
            q.grades.push_back(static_cast<int>(rng() % 5));
            // coarse scores make score ties reachable
            q.scores.push_back(std::round(u(rng) * 8.0) / 8.0);
        }
        run.queries.push_back(std::move(q));
    }
    return run;
}

}  // namespace

TEST_CASE("mrr examples") {
    CHECK(mrr_at_k(one_query({0, 0, 2, 3}, {4, 3, 2, 1}), 10) == doctest::Approx(1.0 / 3.0));
    CHECK(mrr_at_k(one_query({0, 0, 0, 2}, {4, 3, 2, 1}), 3) == 0.0);

    JudgedRun two;
    two.relevance_threshold = 2;
    two.queries.push_back({"a", {3, 0}, {2, 1}});
    two.queries.push_back({"b", {0, 3}, {2, 1}});
    CHECK(mrr_at_k(two, 10) == doctest::Approx(0.75));
}

TEST_CASE("mrr is non-decreasing in k") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const auto run = random_run(rng, false);
        double prev = 0.0;
        for (std::size_t k = 1; k <= 20; ++k) {
            const double v = mrr_at_k(run, k);
            CHECK(v >= prev - 1e-15);
            prev = v;
        }
    }
}

TEST_CASE("map examples") {
    // relevant at ranks 1 and 3 with k=3: (1 + 2/3) / 2
    CHECK(map_at_k(one_query({3, 0, 2}, {3, 2, 1}), 3) == doctest::Approx(5.0 / 6.0));
    CHECK(map_at_k(one_query({3, 2, 4}, {3, 2, 1}), 3) == doctest::Approx(1.0));
    CHECK(map_at_k(one_query({0, 1, 0}, {3, 2, 1}), 3) == 0.0);
}

TEST_CASE("ndcg examples") {
    CHECK(ndcg(one_query({3, 0}, {2, 1})) == doctest::Approx(1.0));
    const double expect = (7.0 / std::log2(3.0)) / 7.0;
    CHECK(ndcg(one_query({0, 3}, {2, 1})) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(ndcg(one_query({0, 0, 0}, {3, 2, 1})) == 0.0);
}

TEST_CASE("ndcg of the grade-descending order dominates all orderings (n <= 6)") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng() % 5;
        std::vector<int> grades(n);
        for (auto& g : grades) g = static_cast<int>(rng() % 5);
        std::vector<int> best = grades;
        std::sort(best.begin(), best.end(), std::greater<int>());
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) scores[i] = static_cast<double>(n - i);

        const double top = ndcg(one_query(best, scores));
        std::sort(grades.begin(), grades.end());
        do {
            CHECK(ndcg(one_query(grades, scores)) <= top + 1e-12);
        } while (std::next_permutation(grades.begin(), grades.end()));
    }
}

TEST_CASE("f1 examples") {
    // returned {a,b,c}, relevant {a,d}: P=1/3, R=1/2, F1=0.4
    CHECK(f1_macro(one_query({3, 0, 0, 3}, {1, 1, 1, 0}, 2, 0.5)) == doctest::Approx(0.4));
    CHECK(f1_macro(one_query({3, 3, 0}, {1, 1, 0}, 2, 0.5)) == doctest::Approx(1.0));
    // empty returned set with relevant items present
    CHECK(f1_macro(one_query({3, 0}, {0, 0}, 2, 0.5)) == 0.0);
    CHECK_THROWS_AS(f1_macro(one_query({0, 0}, {1, 1}, 2, 0.5)), MetricError);
    CHECK_THROWS_AS(f1_macro(one_query({3, 0}, {1, 0}, 2, std::nullopt)), MetricError);
}

TEST_CASE("pnr examples") {
    const auto r = pnr(one_query({2, 1, 0}, {0.9, 0.2, 0.5}));
    CHECK(r.value == doctest::Approx(2.0));
    CHECK(r.n_used == 1);

    // perfectly ordered: no discordant pair, query excluded
    JudgedRun run = one_query({2, 1, 0}, {0.9, 0.5, 0.2});
    run.queries.push_back({"q2", {2, 1, 0}, {0.1, 0.2, 0.9}});
    const auto mixed = pnr(run);
    CHECK(mixed.n_infinite == 1);
    CHECK(mixed.n_used == 1);
    CHECK(mixed.value == doctest::Approx(0.0));  // fully reversed query

    CHECK_THROWS_AS(pnr(one_query({2, 1, 0}, {0.9, 0.5, 0.2})), MetricError);
}

TEST_CASE("delta gsb") {
    CHECK(delta_gsb(1, 0, 0) == doctest::Approx(0.5));
    CHECK(delta_gsb(7, 7, 3) == doctest::Approx(0.0));
    CHECK(delta_gsb(0, 0, 5) == doctest::Approx(0.0));
    CHECK(delta_gsb(0, 1, 0) == doctest::Approx(-0.5));
    CHECK_THROWS_AS(delta_gsb(0, 0, 0), ArgumentError);
    CHECK_THROWS_AS(delta_gsb(-1, 0, 2), ArgumentError);
}

TEST_CASE("entropy ranking") {
    core::Dataset ds;
    ds.modalities = {{1, "m"}};
    ds.text_dim = 1;
    ds.item_feature_dim = 3;
    ds.user_feature_dim = 1;
    core::Query q;
    q.query_id = "q";
    q.user_features = {0.0};
    // feature 0: uniform over two bins; feature 1: 90/10; feature 2: constant
    for (int i = 0; i < 100; ++i) {
        core::Candidate c;
        c.item_id = "i" + std::to_string(i);
        c.modality = 1;
        c.upstream_score = 0.0;
        c.features = {i < 50 ? 0.0 : 1.0, i < 90 ? 0.0 : 1.0, 7.0};
        c.text_embedding = {0.0};
        q.candidates.push_back(c);
    }
    ds.queries.push_back(q);

    const auto h = feature_entropies(ds, 2);
    CHECK(h[0] == doctest::Approx(1.0));
    const double h2 = -(0.9 * std::log2(0.9) + 0.1 * std::log2(0.1));
    CHECK(h[1] == doctest::Approx(h2).epsilon(1e-9));
    CHECK(h[1] == doctest::Approx(0.469).epsilon(1e-3));
    CHECK(h[2] == 0.0);

    CHECK(entropy_rank_features(ds, 2) == std::vector<std::size_t>{0, 1, 2});
    CHECK_THROWS_AS(feature_entropies(ds, 1), ArgumentError);
}

TEST_CASE("entropy ties break by feature index") {
    core::Dataset ds;
    ds.modalities = {{1, "m"}};
    ds.text_dim = 1;
    ds.item_feature_dim = 2;
    ds.user_feature_dim = 1;
    core::Query q;
    q.query_id = "q";
    q.user_features = {0.0};
    for (int i = 0; i < 4; ++i) {
        core::Candidate c;
        c.item_id = "i" + std::to_string(i);
        c.modality = 1;
        c.features = {5.0, 5.0};  // both constant, both zero entropy
        c.text_embedding = {0.0};
        q.candidates.push_back(c);
    }
    ds.queries.push_back(q);
    CHECK(entropy_rank_features(ds, 4) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("metrics match naive references on 200 random judged runs") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const auto run = random_run(rng, true);
        const std::size_t k = 1 + rng() % 12;

        CHECK(mrr_at_k(run, k) == doctest::Approx(naive::mrr_at_k(run, k)).epsilon(1e-12));
        CHECK(map_at_k(run, k) == doctest::Approx(naive::map_at_k(run, k)).epsilon(1e-12));
        CHECK(ndcg(run) == doctest::Approx(naive::ndcg(run)).epsilon(1e-12));
        CHECK(ndcg(run, k) == doctest::Approx(naive::ndcg(run, k)).epsilon(1e-12));

        bool any_relevant = false;
        for (const auto& q : run.queries)
            for (int g : q.grades) any_relevant = any_relevant || g >= run.relevance_threshold;
        if (any_relevant)
            CHECK(f1_macro(run) == doctest::Approx(naive::f1_macro(run)).epsilon(1e-12));

        const auto nref = naive::pnr(run);
        if (nref.used > 0) {
            const auto r = pnr(run);
            CHECK(r.value == doctest::Approx(nref.value).epsilon(1e-12));
            CHECK(r.n_used == nref.used);
            CHECK(r.n_infinite == nref.infinite);
            CHECK(r.n_empty == nref.empty);
        }
        CHECK(delta_gsb(trial + 1, trial % 3, trial % 5) ==
              doctest::Approx(naive::delta_gsb(trial + 1, trial % 3, trial % 5)).epsilon(1e-12));
    }
}

TEST_CASE("metric ranges on random runs") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const auto run = random_run(rng, true);
        const double m = mrr_at_k(run, 10);
        const double a = map_at_k(run, 10);
        const double n = ndcg(run);
        CHECK(m >= 0.0);
        CHECK(m <= 1.0);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        CHECK(n >= 0.0);
        CHECK(n <= 1.0);
    }
}

TEST_CASE("metrics csv format") {
    std::ostringstream out;
    write_metrics_csv({{"run1", "mrr", 10, 0.5, 100, 0}, {"run1", "ndcg", std::nullopt, 0.25, 100, 2}},
                      out);
    CHECK(out.str() ==
          "run_id,metric,k,value,n_queries,n_excluded\n"
          "run1,mrr,10,0.500000,100,0\n"
          "run1,ndcg,,0.250000,100,2\n");
}
