#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_util.hpp"
#include "wpr/common.hpp"
#include "wpr/config.hpp"
#include "wpr/core.hpp"
#include "wpr/datagen.hpp"

using namespace wpr;
using namespace wpr::datagen;

namespace {

SynthConfig two_modality_config(std::size_t n_queries, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n_queries = n_queries;
    cfg.seed = seed;
    cfg.text_dim = 8;
    cfg.visual_dim = 8;
    cfg.item_feature_dim = 3;
    cfg.user_feature_dim = 2;
    cfg.modalities = {
        {"natural", 4, 8, 2.0, 5.0, 0.9, false},
        {"video", 4, 8, 8.0, 2.0, 0.9, true},
    };
    return cfg;
}

}  // namespace

TEST_CASE("generation produces the configured structure") {
    auto cfg = two_modality_config(4, 42);
    auto [ds, oracle] = generate_dataset(cfg);
    CHECK(ds.queries.size() == 4);
    CHECK(ds.modalities.size() == 2);
    for (const auto& q : ds.queries) {
        CHECK(!q.modality_indices(1).empty());
        CHECK(!q.modality_indices(2).empty());
        for (const auto& c : q.candidates) {
            CHECK(c.label.has_value());
            CHECK((c.modality == 2) == c.visual_embedding.has_value());
        }
    }
}

TEST_CASE("same config and seed give byte-identical serializations") {
    auto cfg = two_modality_config(6, 7);
    auto [a, oa] = generate_dataset(cfg);
    auto [b, ob] = generate_dataset(cfg);
    CHECK(core::to_jsonl(a) == core::to_jsonl(b));

    cfg.seed = 8;
    auto [c, oc] = generate_dataset(cfg);
    CHECK(core::to_jsonl(a) != core::to_jsonl(c));
}

TEST_CASE("generated datasets validate cleanly across random configs") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        SynthConfig cfg;
        cfg.n_queries = 1 + rng() % 6;
        cfg.seed = rng();
        cfg.text_dim = 2 + rng() % 6;
        cfg.visual_dim = cfg.text_dim;
        cfg.item_feature_dim = 1 + rng() % 4;
        cfg.user_feature_dim = 1 + rng() % 3;
        cfg.label_noise = (trial % 3 == 0) ? 0.1 : 0.0;
        cfg.user_weight = (trial % 2) ? 0.4 : 0.0;
        const std::size_t n_mod = 1 + rng() % 3;
        for (std::size_t m = 0; m < n_mod; ++m) {
            ModalitySpec spec;
            spec.name = "m" + std::to_string(m + 1);
            spec.queue_min = 1 + rng() % 3;
            spec.queue_max = spec.queue_min + rng() % 4;
            spec.beta_a = 0.5 + (rng() % 80) / 10.0;
            spec.beta_b = 0.5 + (rng() % 80) / 10.0;
            spec.rho = (rng() % 101) / 100.0;
            spec.has_visual = (rng() % 2) == 0;
            cfg.modalities.push_back(spec);
        }
        auto [ds, oracle] = generate_dataset(cfg);
        const auto report = core::validate_dataset(ds);
        CHECK(report.empty());
    }
}

TEST_CASE("modality score distributions are visibly different") {
    auto cfg = two_modality_config(900, 3);  // ~5400 items/modality
    auto [ds, oracle] = generate_dataset(cfg);
    std::vector<double> s1, s2;
    for (const auto& q : ds.queries)
        for (const auto& c : q.candidates)
            (c.modality == 1 ? s1 : s2).push_back(c.upstream_score);
    REQUIRE(s1.size() > 1000);
    REQUIRE(s2.size() > 1000);
    CHECK(test_util::ks_statistic(s1, s2) > 0.3);
}

TEST_CASE("upstream scores hit the configured rank correlation with latent relevance") {
    for (double rho : {0.9, 0.5}) {
        auto cfg = two_modality_config(400, 11);
        cfg.label_noise = 0.0;
        cfg.user_weight = 0.3;
        for (auto& m : cfg.modalities) m.rho = rho;
        std::vector<std::vector<double>> latents;
        auto [ds, oracle] = generate_dataset(cfg, &latents);

        for (const auto& mod : ds.modalities) {
            std::vector<double> scores, truth;
            for (std::size_t qi = 0; qi < ds.queries.size(); ++qi) {
                const auto& q = ds.queries[qi];
                for (std::size_t ci = 0; ci < q.candidates.size(); ++ci) {
                    if (q.candidates[ci].modality != mod.id) continue;
                    scores.push_back(q.candidates[ci].upstream_score);
                    truth.push_back(latents[qi][ci]);
                }
            }
            REQUIRE(scores.size() >= 1000);
            CHECK(std::fabs(test_util::spearman(scores, truth) - rho) < 0.1);
        }
    }
}

TEST_CASE("rho = 0 decorrelates upstream scores from grades") {
    auto cfg = two_modality_config(1200, 13);
    cfg.label_noise = 0.0;
    cfg.user_weight = 0.0;
    for (auto& m : cfg.modalities) {
        m.rho = 0.0;
        m.queue_min = 8;
        m.queue_max = 8;
    }
    auto [ds, oracle] = generate_dataset(cfg);
    std::vector<double> scores, grades;
    for (const auto& q : ds.queries) {
        for (const auto& c : q.candidates) {
            scores.push_back(c.upstream_score);
            grades.push_back(static_cast<double>(*c.label));
        }
    }
    REQUIRE(scores.size() >= 10000);
    CHECK(std::fabs(test_util::spearman(scores, grades)) < 0.05);
}

TEST_CASE("rho = 1 with no noise makes upstream order match grade order") {
    auto cfg = two_modality_config(60, 17);
    cfg.label_noise = 0.0;
    cfg.user_weight = 0.0;
    for (auto& m : cfg.modalities) m.rho = 1.0;
    auto [ds, oracle] = generate_dataset(cfg);
    for (const auto& q : ds.queries) {
        for (const auto& mod : ds.modalities) {
            // candidates are stored queue-sorted by upstream score
            int prev = 5;
            for (auto idx : q.modality_indices(mod.id)) {
                CHECK(*q.candidates[idx].label <= prev);
                prev = *q.candidates[idx].label;
            }
        }
    }
}

TEST_CASE("oracle grades the maximum-relevance item 4") {
    auto cfg = two_modality_config(40, 19);
    cfg.label_noise = 0.0;
    for (auto& m : cfg.modalities) {
        m.queue_min = 4;
        m.queue_max = 6;
    }
    auto [ds, oracle] = generate_dataset(cfg);
    for (const auto& q : ds.queries) {
        int best = 0;
        for (const auto& c : q.candidates) best = std::max(best, *c.label);
        CHECK(best == 4);  // >= 8 items per query always fills the top bucket
    }
}

TEST_CASE("label noise flips the expected fraction of grades") {
    auto base = two_modality_config(900, 23);
    base.label_noise = 0.0;
    auto noisy = base;
    noisy.label_noise = 0.2;
    auto [clean_ds, o1] = generate_dataset(base);
    auto [noisy_ds, o2] = generate_dataset(noisy);

    std::size_t total = 0, flipped = 0;
    for (std::size_t qi = 0; qi < clean_ds.queries.size(); ++qi) {
        const auto& qa = clean_ds.queries[qi];
        const auto& qb = noisy_ds.queries[qi];
        REQUIRE(qa.candidates.size() == qb.candidates.size());
        for (std::size_t ci = 0; ci < qa.candidates.size(); ++ci) {
            // same latents: same ids in same order
            REQUIRE(qa.candidates[ci].item_id == qb.candidates[ci].item_id);
            ++total;
            if (*qa.candidates[ci].label != *qb.candidates[ci].label) ++flipped;
        }
    }
    REQUIRE(total >= 10000);
    const double fraction = static_cast<double>(flipped) / static_cast<double>(total);
    CHECK(fraction > 0.15);
    CHECK(fraction < 0.25);
}

TEST_CASE("embeddings carry a learnable relevance signal") {
    auto cfg = two_modality_config(300, 29);
    cfg.user_weight = 0.0;
    auto [ds, oracle] = generate_dataset(cfg);

    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& q : ds.queries) {
        for (const auto& c : q.candidates) {
            auto row = c.text_embedding;
            row.push_back(1.0);  // bias
            x.push_back(row);
            y.push_back(static_cast<double>(*c.label));
        }
    }
    const std::size_t half = x.size() / 2;
    const auto w = test_util::ridge_fit({x.begin(), x.begin() + half}, {y.begin(), y.begin() + half});
    std::vector<double> pred, truth;
    for (std::size_t i = half; i < x.size(); ++i) {
        pred.push_back(test_util::dot(w, x[i]));
        truth.push_back(y[i]);
    }
    CHECK(test_util::spearman(pred, truth) > 0.2);
}

TEST_CASE("invalid configs name the offending field") {
    auto cfg = two_modality_config(4, 1);
    cfg.n_queries = 0;
    CHECK_THROWS_WITH_AS(generate_dataset(cfg), "SynthConfig.n_queries must be >= 1", ConfigError);

    cfg = two_modality_config(4, 1);
    cfg.modalities[1].rho = 1.5;
    try {
        generate_dataset(cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("rho") != std::string::npos);
    }

    cfg = two_modality_config(4, 1);
    cfg.modalities[0].queue_max = 0;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("config file parsing") {
    const std::string text =
        "dataset.n_queries = 12\n"
        "dataset.seed = 5\n"
        "dataset.text_dim = 4\n"
        "dataset.visual_dim = 4\n"
        "modality.1.name = natural\n"
        "modality.1.beta_a = 2\n"
        "modality.1.beta_b = 5\n"
        "modality.2.name = video\n"
        "modality.2.has_visual = true\n";
    const auto kv = config::KeyValues::from_string(text);
    const auto cfg = synth_config_from_keyvalues(kv);
    CHECK(cfg.n_queries == 12);
    CHECK(cfg.modalities.size() == 2);
    CHECK(cfg.modalities[0].name == "natural");
    CHECK(cfg.modalities[0].beta_b == 5.0);
    CHECK(cfg.modalities[1].has_visual);
}
