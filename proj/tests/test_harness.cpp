#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "wpr/common.hpp"
#include "wpr/harness.hpp"

using namespace wpr;
using namespace wpr::harness;

namespace {

// A deliberately tiny config so experiment plumbing tests stay fast.
std::string tiny_config_text(const std::string& kind) {
    std::string text = default_config_text(parse_kind(kind));
    auto patch = [&](const std::string& key, const std::string& value) {
        const auto pos = text.find(key + " =");
        REQUIRE(pos != std::string::npos);
        const auto eol = text.find('\n', pos);
        text = text.substr(0, pos) + key + " = " + value + text.substr(eol);
    };
    patch("dataset.n_queries", "60");
    patch("model.epochs", "4");
    patch("model.embed_dim", "24");
    patch("model.mlp_hidden", "12");
    patch("experiment.seeds", "1");
    patch("experiment.bands", "0:0.3,random:0.3");
    patch("experiment.budgets", "0.5");
    patch("experiment.t_rounds", "1,2");
    return text;
}

ExperimentConfig tiny_config(const std::string& kind) {
    return ExperimentConfig::from_keyvalues(config::KeyValues::from_string(tiny_config_text(kind)));
}

}  // namespace

TEST_CASE("split is deterministic and close to 70/15/15") {
    auto cfg = default_config(ExperimentKind::PercentileBands).synth;
    cfg.n_queries = 200;
    cfg.seed = 9;
    auto [ds, oracle] = datagen::generate_dataset(cfg);

    const auto s1 = split_dataset(ds, 5);
    const auto s2 = split_dataset(ds, 5);
    CHECK(s1.train.queries.size() == 140);
    CHECK(s1.valid.queries.size() == 30);
    CHECK(s1.test.queries.size() == 30);
    CHECK(core::to_jsonl(s1.train) == core::to_jsonl(s2.train));
    CHECK(core::to_jsonl(s1.test) == core::to_jsonl(s2.test));

    // no query lands in two splits
    std::set<std::string> seen;
    for (const auto* part : {&s1.train, &s1.valid, &s1.test})
        for (const auto& q : part->queries) CHECK(seen.insert(q.query_id).second);
    CHECK(seen.size() == 200);

    const auto other = split_dataset(ds, 6);
    CHECK(core::to_jsonl(other.train) != core::to_jsonl(s1.train));
}

TEST_CASE("default configs parse and validate for every kind") {
    for (const auto* kind : {"percentile-bands", "budget-sweep", "anchors", "ablation-attention"}) {
        const auto cfg = default_config(parse_kind(kind));
        CHECK(cfg.kind == parse_kind(kind));
        CHECK(!cfg.config_hash.empty());
        CHECK(cfg.seeds.size() == 3);
        CHECK(cfg.synth.modalities.size() == 2);
    }
    CHECK_THROWS_AS(parse_kind("nope"), ArgumentError);
}

TEST_CASE("band names") {
    BandSpec top{false, 0.0, 0.3};
    BandSpec tail{false, 0.7, 1.0};
    BandSpec random{true, 0.0, 0.3};
    CHECK(top.name() == "0-30%");
    CHECK(tail.name() == "70-100%");
    CHECK(random.name() == "random-30%");
}

TEST_CASE("anchors config requires a decision threshold") {
    auto text = tiny_config_text("anchors");
    const auto pos = text.find("experiment.f1_tau");
    text = text.substr(0, pos) + "# " + text.substr(pos);
    CHECK_THROWS_AS(ExperimentConfig::from_keyvalues(config::KeyValues::from_string(text)),
                    ConfigError);
}

TEST_CASE("report csv round trip") {
    Report rep;
    rep.experiment = "percentile-bands";
    rep.config_hash = "f00d";
    rep.metric_columns = {"mrr@10", "ndcg"};
    rep.rows.push_back({"percentile-bands", "0-30%", "1", 0.25, {{"mrr@10", 0.5}, {"ndcg", 0.4}}});
    rep.rows.push_back({"percentile-bands", "0-30%", "mean", 0.25, {{"mrr@10", 0.5}, {"ndcg", 0.4}}});

    std::stringstream ss;
    rep.write_csv(ss);
    const auto back = Report::read_csv(ss);
    REQUIRE(back.rows.size() == 2);
    CHECK(back.config_hash == "f00d");
    CHECK(back.metric_columns == rep.metric_columns);
    CHECK(back.rows[0].group == "0-30%");
    CHECK(back.rows[0].metrics.at("mrr@10") == doctest::Approx(0.5));
    CHECK(back.find("0-30%", "mean") != nullptr);
    CHECK(back.find("0-30%", "7") == nullptr);
}

TEST_CASE("percentile bands experiment: structure and determinism") {
    const auto cfg = tiny_config("percentile-bands");
    const auto rep1 = run_percentile_bands(cfg);
    const auto rep2 = run_percentile_bands(cfg);
    CHECK(rep1.to_csv() == rep2.to_csv());

    // |bands| x |seeds| rows plus one mean row per band
    CHECK(rep1.rows.size() == 2 * 1 + 2);
    REQUIRE(rep1.find("0-30%", "mean") != nullptr);
    REQUIRE(rep1.find("random-30%", "1") != nullptr);
    const auto* row = rep1.find("0-30%", "1");
    CHECK(row->metrics.count("mrr@10") == 1);
    CHECK(row->metrics.count("map@10") == 1);
    CHECK(row->metrics.count("ndcg") == 1);
    CHECK(row->labeled_fraction > 0.0);
    CHECK(row->labeled_fraction < 1.0);
}

TEST_CASE("budget sweep experiment covers all variants") {
    const auto cfg = tiny_config("budget-sweep");
    const auto rep = run_budget_sweep(cfg);
    CHECK(rep.find("sft@50%", "mean") != nullptr);
    CHECK(rep.find("sft+distill@50%", "mean") != nullptr);
    CHECK(rep.find("upstream-only", "mean") != nullptr);
    CHECK(rep.find("upstream-only", "mean")->labeled_fraction == 0.0);
}

TEST_CASE("anchor experiment reports labeled fractions per round budget") {
    const auto cfg = tiny_config("anchors");
    const auto rep = run_anchor_experiment(cfg);
    const auto* t1 = rep.find("T=1", "mean");
    const auto* t2 = rep.find("T=2", "mean");
    REQUIRE(t1 != nullptr);
    REQUIRE(t2 != nullptr);
    CHECK(t1->labeled_fraction > 0.0);
    CHECK(t1->labeled_fraction < t2->labeled_fraction);
    CHECK(t1->metrics.count("f1") == 1);
    CHECK(t1->metrics.count("ndcg@4") == 1);
    CHECK(t1->metrics.count("pnr") == 1);
}

TEST_CASE("ablation experiment runs every variant on identical data") {
    const auto cfg = tiny_config("ablation-attention");
    const auto rep = run_attention_ablation(cfg);
    CHECK(rep.find("mlp", "1") != nullptr);
    CHECK(rep.find("cross-attention", "1") != nullptr);
    CHECK(rep.find("cross-attention-no-fusion", "1") != nullptr);
    // identical seed and variant reproduce identical rows
    const auto rep2 = run_attention_ablation(cfg);
    CHECK(rep.to_csv() == rep2.to_csv());
}

TEST_CASE("svg plot emission") {
    const auto cfg = tiny_config("percentile-bands");
    const auto rep = run_percentile_bands(cfg);
    std::ostringstream svg;
    write_svg_bars(rep, "mrr@10", svg);
    const auto text = svg.str();
    CHECK(text.find("<svg") != std::string::npos);
    CHECK(text.find("0-30%") != std::string::npos);
    CHECK(text.find("random-30%") != std::string::npos);
    CHECK_THROWS_AS(write_svg_bars(rep, "nope", svg), ArgumentError);
}
