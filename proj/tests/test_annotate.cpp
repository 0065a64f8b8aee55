#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "wpr/annotate.hpp"
#include "wpr/common.hpp"
#include "wpr/core.hpp"
#include "wpr/datagen.hpp"

using namespace wpr;
using namespace wpr::annotate;

namespace {

// A single-query dataset whose two modality queues carry the given
// grades, upstream-sorted in the order given. Queue 1 = modality 1.
struct QueuePairFixture {
    core::Dataset dataset;
    datagen::LabelOracle oracle;
    std::vector<QueueItem> queue1, queue2;
    std::string query_id = "q0";
};

QueuePairFixture make_queues(const std::vector<int>& grades1, const std::vector<int>& grades2,
                             const std::vector<double>* scores1 = nullptr,
                             const std::vector<double>* scores2 = nullptr) {
    QueuePairFixture fx;
    fx.dataset.modalities = {{1, "one"}, {2, "two"}};
    fx.dataset.text_dim = 1;
    fx.dataset.item_feature_dim = 1;
    fx.dataset.user_feature_dim = 1;
    core::Query q;
    q.query_id = fx.query_id;
    q.user_features = {0.0};
    auto add = [&](int modality, char tag, std::size_t pos, int grade, double score) {
        core::Candidate c;
        c.item_id = std::string(1, tag) + std::to_string(pos);
        c.modality = modality;
        c.upstream_score = score;
        c.features = {0.0};
        c.text_embedding = {0.0};
        c.label = grade;
        q.candidates.push_back(c);
    };
    for (std::size_t i = 0; i < grades1.size(); ++i)
        add(1, 'a', i, grades1[i], scores1 ? (*scores1)[i] : 1.0 - 0.01 * static_cast<double>(i));
    for (std::size_t i = 0; i < grades2.size(); ++i)
        add(2, 'b', i, grades2[i], scores2 ? (*scores2)[i] : 1.0 - 0.01 * static_cast<double>(i));
    fx.dataset.queries.push_back(q);
    fx.oracle = datagen::LabelOracle::from_dataset(fx.dataset);
    fx.queue1 = modality_queue(fx.dataset.queries[0], 1);
    fx.queue2 = modality_queue(fx.dataset.queries[0], 2);
    return fx;
}

std::vector<SegmentKind> kinds(const AlignedSequence& seq) {
    std::vector<SegmentKind> out;
    for (const auto& s : seq.segments) out.push_back(s.kind);
    return out;
}

// Soundness of an aligned sequence: ties have equal grades, virtual
// ties are strictly bracketed by their graded neighbors.
void check_soundness(const AlignedSequence& seq) {
    const auto items = seq.flattened();
    std::size_t idx = 0;
    for (const auto& seg : seq.segments) {
        if (seg.kind == SegmentKind::Tie) {
            REQUIRE(seg.items.size() == 2);
            REQUIRE(seg.items[0].grade.has_value());
            REQUIRE(seg.items[1].grade.has_value());
            CHECK(*seg.items[0].grade == *seg.items[1].grade);
            CHECK(seg.items[0].queue != seg.items[1].queue);
        } else if (seg.kind == SegmentKind::VirtualTie) {
            REQUIRE(seg.items.size() == 1);
            REQUIRE(seg.items[0].grade.has_value());
            const int g = *seg.items[0].grade;
            // the bracketing pair lives in queue 2's labeled neighborhood:
            // nearest graded queue-2 item before is strictly higher, the
            // nearest after strictly lower
            std::optional<int> before, after;
            for (std::size_t i = idx; i-- > 0;) {
                if (items[i].queue == 2 && items[i].grade) {
                    before = *items[i].grade;
                    break;
                }
            }
            for (std::size_t i = idx + seg.items.size(); i < items.size(); ++i) {
                if (items[i].queue == 2 && items[i].grade) {
                    after = *items[i].grade;
                    break;
                }
            }
            REQUIRE(before.has_value());
            REQUIRE(after.has_value());
            CHECK(*before > g);
            CHECK(*after < g);
        }
        idx += seg.items.size();
    }
}

}  // namespace

TEST_CASE("top-p labels the ceiling of p times the queue length") {
    auto fx = make_queues({0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, {});
    auto plan = select_top_p(fx.query_id, fx.queue1, 0.3, fx.oracle);
    CHECK(plan.labeled_count() == 3);
    CHECK(plan.total() == 10);
    CHECK(plan.oracle_calls == 3);
    // the labeled ones are the top of the queue
    CHECK(plan.grade_of(fx.query_id, "a0").has_value());
    CHECK(plan.grade_of(fx.query_id, "a2").has_value());
    CHECK(!plan.grade_of(fx.query_id, "a3").has_value());
}

TEST_CASE("top-p rounds up and never labels zero items") {
    auto fx = make_queues({1, 1, 1, 1, 1}, {});
    auto plan = select_top_p(fx.query_id, fx.queue1, 0.1, fx.oracle);
    CHECK(plan.labeled_count() == 1);  // ceil(0.5)
}

TEST_CASE("top-p with p = 1 labels everything") {
    auto fx = make_queues({1, 2, 3}, {});
    auto plan = select_top_p(fx.query_id, fx.queue1, 1.0, fx.oracle);
    CHECK(plan.labeled_count() == 3);
    CHECK(plan.labeled_fraction() == 1.0);
}

TEST_CASE("top-p argument and edge cases") {
    auto fx = make_queues({1}, {});
    CHECK_THROWS_AS(select_top_p(fx.query_id, fx.queue1, 0.0, fx.oracle), ArgumentError);
    CHECK_THROWS_AS(select_top_p(fx.query_id, fx.queue1, 1.5, fx.oracle), ArgumentError);
    auto plan = select_top_p(fx.query_id, {}, 0.5, fx.oracle);
    CHECK(plan.total() == 0);
}

TEST_CASE("percentile band positions") {
    auto fx = make_queues({0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, {});

    SUBCASE("head band") {
        auto plan = percentile_band(fx.query_id, fx.queue1, 0.0, 0.3, fx.oracle);
        for (int i = 0; i < 10; ++i)
            CHECK(plan.grade_of(fx.query_id, "a" + std::to_string(i)).has_value() == (i <= 2));
    }
    SUBCASE("tail band") {
        auto plan = percentile_band(fx.query_id, fx.queue1, 0.7, 1.0, fx.oracle);
        for (int i = 0; i < 10; ++i)
            CHECK(plan.grade_of(fx.query_id, "a" + std::to_string(i)).has_value() == (i >= 7));
    }
    SUBCASE("full band equals top-p with p = 1") {
        auto band = percentile_band(fx.query_id, fx.queue1, 0.0, 1.0, fx.oracle);
        auto topp = select_top_p(fx.query_id, fx.queue1, 1.0, fx.oracle);
        CHECK(band.entries == topp.entries);
    }
    SUBCASE("bad bounds") {
        CHECK_THROWS_AS(percentile_band(fx.query_id, fx.queue1, 0.5, 0.5, fx.oracle),
                        ArgumentError);
        CHECK_THROWS_AS(percentile_band(fx.query_id, fx.queue1, 0.6, 0.2, fx.oracle),
                        ArgumentError);
    }
}

TEST_CASE("random selection labels the requested fraction") {
    auto fx = make_queues({0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, {});
    auto rng = make_rng(9, "test");
    auto plan = select_random(fx.query_id, fx.queue1, 0.3, fx.oracle, rng);
    CHECK(plan.labeled_count() == 3);
    CHECK(plan.total() == 10);
}

TEST_CASE("anchor search: fixed trace") {
    // Queue 1 grades [4,2], queue 2 grades [4,3,1]: tie on the 4s, then
    // the 2 falls between 3 and 1 as a virtual tie.
    auto fx = make_queues({4, 2}, {4, 3, 1});
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 2, fx.oracle);

    CHECK(kinds(seq) == std::vector<SegmentKind>{SegmentKind::Tie, SegmentKind::Single,
                                                 SegmentKind::VirtualTie, SegmentKind::Single});
    CHECK(seq.rounds_completed == 2);
    check_soundness(seq);

    // flattened order: a0/b0 tie, b1, a1 virtual, b2
    const auto items = seq.flattened();
    REQUIRE(items.size() == 5);
    CHECK(items[0].item_id == "a0");
    CHECK(items[1].item_id == "b0");
    CHECK(items[2].item_id == "b1");
    CHECK(items[3].item_id == "a1");
    CHECK(items[4].item_id == "b2");
}

TEST_CASE("anchor search: single-item queues tie with two oracle calls") {
    auto fx = make_queues({3}, {3});
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 5, fx.oracle);
    REQUIRE(seq.segments.size() == 1);
    CHECK(seq.segments[0].kind == SegmentKind::Tie);
    CHECK(seq.oracle_calls == 2);
    CHECK(seq.rounds_completed == 1);
}

TEST_CASE("anchor search: zero rounds grades nothing") {
    auto fx = make_queues({4, 2, 1}, {3, 2, 0});
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 0, fx.oracle);
    CHECK(seq.oracle_calls == 0);
    CHECK(seq.rounds_completed == 0);
    for (const auto& seg : seq.segments) CHECK(seg.kind == SegmentKind::Single);
    CHECK(seq.flattened().size() == 6);
    CHECK(plan_from_alignment(seq).labeled_fraction() == 0.0);
}

TEST_CASE("anchor search: every item appears exactly once") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> g1(1 + rng() % 6), g2(1 + rng() % 6);
        for (auto& g : g1) g = static_cast<int>(rng() % 5);
        for (auto& g : g2) g = static_cast<int>(rng() % 5);
        std::sort(g1.begin(), g1.end(), std::greater<int>());
        std::sort(g2.begin(), g2.end(), std::greater<int>());
        auto fx = make_queues(g1, g2);
        const auto t = rng() % 5;
        const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, t, fx.oracle);

        auto items = seq.flattened();
        CHECK(items.size() == g1.size() + g2.size());
        std::vector<std::string> ids;
        for (const auto& it : items) ids.push_back(it.item_id);
        std::sort(ids.begin(), ids.end());
        CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
        check_soundness(seq);
    }
}

TEST_CASE("anchor search: budget monotonicity and probe bound on monotone queues") {
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> g1(2 + rng() % 7), g2(2 + rng() % 7);
        for (auto& g : g1) g = static_cast<int>(rng() % 5);
        for (auto& g : g2) g = static_cast<int>(rng() % 5);
        std::sort(g1.begin(), g1.end(), std::greater<int>());
        std::sort(g2.begin(), g2.end(), std::greater<int>());

        std::size_t prev_calls = 0;
        double prev_fraction = 0.0;
        for (std::size_t t = 0; t <= g1.size() + 1; ++t) {
            auto fx = make_queues(g1, g2);
            const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, t, fx.oracle);
            const auto plan = plan_from_alignment(seq);

            CHECK(seq.oracle_calls >= prev_calls);
            CHECK(plan.labeled_fraction() >= prev_fraction - 1e-12);
            prev_calls = seq.oracle_calls;
            prev_fraction = plan.labeled_fraction();

            REQUIRE(seq.probe_counts.size() == seq.window_sizes.size());
            for (std::size_t i = 0; i < seq.probe_counts.size(); ++i) {
                const double w = static_cast<double>(std::max<std::size_t>(seq.window_sizes[i], 1));
                const auto bound = static_cast<std::size_t>(std::ceil(std::log2(w))) + 1;
                CHECK(seq.probe_counts[i] <= bound);
            }
        }
    }
}

TEST_CASE("anchor search: noisy grades still terminate soundly") {
    std::mt19937_64 rng(131);
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<int> g1(2 + rng() % 6), g2(2 + rng() % 6);
        for (auto& g : g1) g = static_cast<int>(rng() % 5);
        for (auto& g : g2) g = static_cast<int>(rng() % 5);  // unsorted: label noise
        auto fx = make_queues(g1, g2);
        const auto seq =
            iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 1 + rng() % 4, fx.oracle);
        CHECK(seq.flattened().size() == g1.size() + g2.size());
        check_soundness(seq);
    }
}

TEST_CASE("build pairs from an aligned sequence") {
    auto fx = make_queues({4, 2}, {4, 3, 1});
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 2, fx.oracle);
    const auto sets = build_pairs(seq);

    // all five items were graded, so every unequal-grade pair appears
    for (const auto& p : sets.pairs) {
        CHECK(p.source == PairSource::Label);
        CHECK(p.winner_id != p.loser_id);
    }
    // a0 (grade 4) beats a1 (grade 2); the tie a0/b0 yields no pair
    const bool has_tie_pair = std::any_of(sets.pairs.begin(), sets.pairs.end(), [](const auto& p) {
        return (p.winner_id == "a0" && p.loser_id == "b0") ||
               (p.winner_id == "b0" && p.loser_id == "a0");
    });
    CHECK(!has_tie_pair);
    CHECK(std::any_of(sets.pairs.begin(), sets.pairs.end(), [](const auto& p) {
        return p.winner_id == "a0" && p.loser_id == "a1";
    }));

    // virtual-tie item a1 supplies ordering constraints but no pointwise target
    CHECK(std::none_of(sets.points.begin(), sets.points.end(),
                       [](const auto& pt) { return pt.item_id == "a1"; }));
    CHECK(sets.points.size() == 4);
}

TEST_CASE("build pairs: upstream branch and cross-queue guard") {
    // No anchors spent: everything stays ungraded.
    auto fx = make_queues({4, 2}, {3, 1});
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, fx.queue2, 0, fx.oracle);
    const auto sets = build_pairs(seq);

    CHECK(sets.points.empty());
    // within each queue the upstream order gives one pair; across queues none
    REQUIRE(sets.pairs.size() == 2);
    for (const auto& p : sets.pairs) {
        CHECK(p.source == PairSource::Upstream);
        CHECK(p.winner_id[0] == p.loser_id[0]);  // same queue tag
    }
    CHECK(sets.pairs[0].winner_id == "a0");
    CHECK(sets.pairs[0].loser_id == "a1");
}

TEST_CASE("build pairs: equal upstream scores are skipped") {
    std::vector<double> same{0.5, 0.5};
    auto fx = make_queues({4, 2}, {}, &same, nullptr);
    const auto seq = iso_label_anchor_search(fx.query_id, fx.queue1, {}, 0, fx.oracle);
    const auto sets = build_pairs(seq);
    CHECK(sets.pairs.empty());
}

TEST_CASE("plan merge keeps labels over unlabeled duplicates") {
    AnnotationPlan a, b;
    a.set_unlabeled("q", "x");
    b.set_labeled("q", "x", 3);
    a.merge(b);
    CHECK(a.grade_of("q", "x") == 3);

    AnnotationPlan c;
    c.set_labeled("q", "x", 2);
    c.merge(a);  // labeled stays even when merging an unlabeled copy the other way
    CHECK(c.grade_of("q", "x") == 2);
}

TEST_CASE("plan jsonl round trip") {
    AnnotationPlan plan;
    plan.set_labeled("q1", "i1", 4);
    plan.set_unlabeled("q1", "i2");
    plan.set_labeled("q2", "i1", 0);
    plan.oracle_calls = 2;

    std::ostringstream out;
    plan.write_jsonl(out);
    std::istringstream in(out.str());
    const auto back = AnnotationPlan::read_jsonl(in);
    CHECK(back.entries == plan.entries);
    CHECK(back.oracle_calls == 2);
    CHECK(back.labeled_fraction() == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("oracle meters unique items only") {
    auto fx = make_queues({3, 1}, {});
    CHECK(fx.oracle.query_count() == 0);
    CHECK(fx.oracle.label(fx.query_id, "a0") == 3);
    CHECK(fx.oracle.label(fx.query_id, "a0") == 3);
    CHECK(fx.oracle.label(fx.query_id, "a0") == 3);
    CHECK(fx.oracle.query_count() == 1);
    CHECK_THROWS_AS(fx.oracle.label(fx.query_id, "nope"), LookupError);
}
