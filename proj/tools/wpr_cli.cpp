// Command-line front end: dataset generation, validation, annotation,
// training, evaluation, experiment pipelines and report emission.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "wpr/annotate.hpp"
#include "wpr/common.hpp"
#include "wpr/core.hpp"
#include "wpr/datagen.hpp"
#include "wpr/harness.hpp"
#include "wpr/metrics.hpp"
#include "wpr/model.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int cmd_generate(const std::string& config_path, const std::string& out_path) {
    const auto cfg = wpr::datagen::synth_config_from_file(config_path);
    auto [dataset, oracle] = wpr::datagen::generate_dataset(cfg);
    wpr::core::write_jsonl_file(dataset, out_path);
    std::cout << "wrote " << dataset.queries.size() << " queries to " << out_path << "\n";
    return kExitOk;
}

int cmd_validate(const std::string& data_path) {
    const auto dataset = wpr::datagen::ingest_jsonl(data_path);
    const auto violations = wpr::core::validate_dataset(dataset);
    for (const auto& v : violations) {
        std::cout << (v.query_id.empty() ? std::string("<dataset>") : v.query_id);
        if (!v.item_id.empty()) std::cout << "/" << v.item_id;
        std::cout << ": " << v.message << "\n";
    }
    if (!violations.empty()) {
        std::cout << violations.size() << " violation(s)\n";
        return kExitValidation;
    }
    std::cout << "ok: " << dataset.queries.size() << " queries, "
              << dataset.modalities.size() << " modalities\n";
    return kExitOk;
}

int cmd_annotate(const std::string& data_path, const std::string& out_path,
                 const std::string& strategy, double p, double lo, double hi,
                 std::size_t t_rounds) {
    const auto dataset = wpr::datagen::ingest_jsonl(data_path);
    const auto oracle = wpr::datagen::LabelOracle::from_dataset(dataset);

    wpr::annotate::AnnotationPlan plan;
    if (strategy == "top-p") {
        for (const auto& q : dataset.queries)
            for (const auto& mod : dataset.modalities) {
                const auto queue = wpr::annotate::modality_queue(q, mod.id);
                if (!queue.empty())
                    plan.merge(wpr::annotate::select_top_p(q.query_id, queue, p, oracle));
            }
    } else if (strategy == "band") {
        for (const auto& q : dataset.queries)
            for (const auto& mod : dataset.modalities) {
                const auto queue = wpr::annotate::modality_queue(q, mod.id);
                if (!queue.empty())
                    plan.merge(wpr::annotate::percentile_band(q.query_id, queue, lo, hi, oracle));
            }
    } else if (strategy == "anchors") {
        if (dataset.modalities.size() != 2)
            throw wpr::ArgumentError("anchors strategy needs exactly 2 modalities");
        int q1_mod = dataset.modalities.front().id;
        for (const auto& q : dataset.queries) {
            bool found = false;
            for (const auto& c : q.candidates)
                if (c.visual_embedding) {
                    q1_mod = c.modality;
                    found = true;
                    break;
                }
            if (found) break;
        }
        int q2_mod = dataset.modalities.front().id == q1_mod ? dataset.modalities.back().id
                                                             : dataset.modalities.front().id;
        for (const auto& q : dataset.queries) {
            const auto queue1 = wpr::annotate::modality_queue(q, q1_mod);
            const auto queue2 = wpr::annotate::modality_queue(q, q2_mod);
            const auto aligned =
                wpr::annotate::iso_label_anchor_search(q.query_id, queue1, queue2, t_rounds, oracle);
            plan.merge(wpr::annotate::plan_from_alignment(aligned));
        }
    } else {
        throw wpr::ArgumentError("unknown strategy: " + strategy);
    }
    plan.write_jsonl_file(out_path);
    std::cout << "labeled " << plan.labeled_count() << "/" << plan.total() << " items ("
              << plan.oracle_calls << " oracle calls) -> " << out_path << "\n";
    return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& plan_path,
              const std::string& config_path, const std::string& out_path) {
    const auto dataset = wpr::datagen::ingest_jsonl(data_path);
    const auto kv = wpr::config::KeyValues::from_file(config_path);
    auto mcfg = wpr::harness::model_config_from_keyvalues(kv);
    const auto loss = wpr::harness::loss_config_from_keyvalues(kv, dataset.modalities.size());
    const auto buckets = static_cast<std::size_t>(kv.get_int("model.buckets_per_feature", 4));

    wpr::annotate::AnnotationPlan plan = plan_path.empty()
                                             ? wpr::model::full_label_plan(dataset)
                                             : wpr::annotate::AnnotationPlan::read_jsonl_file(plan_path);

    {
        std::vector<std::vector<double>> item_rows, user_rows;
        for (const auto& q : dataset.queries) {
            user_rows.push_back(q.user_features);
            for (const auto& c : q.candidates) item_rows.push_back(c.features);
        }
        mcfg.item_boundaries = wpr::model::quantile_boundaries(item_rows, buckets);
        mcfg.user_boundaries = wpr::model::quantile_boundaries(user_rows, buckets);
    }

    wpr::model::TrainOptions options;
    const auto objective = kv.get_str("model.objective", "listwise");
    if (objective == "pairwise")
        options.objective = wpr::model::TrainObjective::PairSupervision;
    else if (objective != "listwise")
        throw wpr::ConfigError("model.objective must be listwise or pairwise");

    auto [model, log] = wpr::model::train(dataset, plan, mcfg, loss, options);
    model.save(out_path);
    std::cout << "trained " << log.epoch_loss.size() << " epochs, loss "
              << log.epoch_loss.front() << " -> " << log.epoch_loss.back() << ", saved "
              << out_path << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& data_path, const std::string& model_path,
             const std::string& metrics_list, std::size_t k, double tau, bool tau_set,
             int relevance_threshold, const std::string& out_path) {
    const auto dataset = wpr::datagen::ingest_jsonl(data_path);
    const auto model = wpr::model::RerankerModel::load(model_path);

    std::vector<wpr::core::RankedList> rankings;
    rankings.reserve(dataset.queries.size());
    for (const auto& q : dataset.queries) rankings.push_back(model.score_page(q));
    const auto run = wpr::metrics::judge(dataset, rankings, relevance_threshold,
                                         tau_set ? std::optional<double>(tau) : std::nullopt);

    const std::string run_id = std::filesystem::path(data_path).stem().string();
    std::vector<wpr::metrics::MetricRow> rows;
    std::istringstream in(metrics_list);
    std::string name;
    while (std::getline(in, name, ',')) {
        wpr::metrics::MetricRow row;
        row.run_id = run_id;
        row.metric = name;
        row.n_queries = run.queries.size();
        if (name == "mrr") {
            row.k = k;
            row.value = wpr::metrics::mrr_at_k(run, k);
        } else if (name == "map") {
            row.k = k;
            row.value = wpr::metrics::map_at_k(run, k);
        } else if (name == "ndcg") {
            row.value = wpr::metrics::ndcg(run);
        } else if (name == "f1") {
            row.value = wpr::metrics::f1_macro(run);
        } else if (name == "pnr") {
            const auto p = wpr::metrics::pnr(run);
            row.value = p.value;
            row.n_excluded = p.n_infinite + p.n_empty;
        } else {
            throw wpr::ArgumentError("unknown metric: " + name);
        }
        rows.push_back(std::move(row));
    }
    if (out_path.empty()) {
        wpr::metrics::write_metrics_csv(rows, std::cout);
    } else {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw wpr::ArgumentError("cannot open for writing: " + out_path);
        wpr::metrics::write_metrics_csv(rows, f);
        std::cout << "wrote " << rows.size() << " metric rows to " << out_path << "\n";
    }
    return kExitOk;
}

int cmd_experiment(const std::string& kind, const std::string& config_path,
                   const std::string& out_dir) {
    auto cfg = wpr::harness::ExperimentConfig::from_file(config_path);
    const auto requested = wpr::harness::parse_kind(kind);
    if (requested != cfg.kind) {
        // The subcommand argument wins; rebuild with the requested kind.
        auto kv = wpr::config::KeyValues::from_file(config_path);
        auto text = kv.text();
        text += "\nexperiment.kind = " + kind + "\n";
        cfg = wpr::harness::ExperimentConfig::from_keyvalues(
            wpr::config::KeyValues::from_string(text));
    }
    const auto report = wpr::harness::run_experiment(cfg, out_dir);
    std::cout << report.to_csv();
    std::cout << "report written to " << out_dir << "/report.csv\n";
    return kExitOk;
}

int cmd_report(const std::string& in_dir, const std::string& format) {
    const auto report = wpr::harness::Report::read_csv_file(in_dir + "/report.csv");
    if (format == "csv") {
        report.write_csv(std::cout);
    } else if (format == "plot") {
        for (const auto& metric : report.metric_columns) {
            std::string name = metric;
            for (auto& c : name)
                if (c == '@') c = '_';
            const std::string path = in_dir + "/plot_" + name + ".svg";
            std::ofstream f(path, std::ios::binary);
            if (!f) throw wpr::ArgumentError("cannot open for writing: " + path);
            wpr::harness::write_svg_bars(report, metric, f);
            std::cout << "wrote " << path << "\n";
        }
    } else {
        throw wpr::ArgumentError("unknown report format: " + format);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"whole-page reranking toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, plan_path, model_path, out_dir, in_dir;
    std::string strategy, metrics_list = "mrr,map,ndcg", format = "csv", kind;
    double p = 0.3, lo = 0.0, hi = 0.3, tau = 0.0;
    std::size_t k = 10, t_rounds = 1;
    int relevance_threshold = 2;

    auto* generate = app.add_subcommand("generate", "synthesize a dataset");
    generate->add_option("--config", config_path)->required();
    generate->add_option("--out", out_path)->required();

    auto* validate = app.add_subcommand("validate", "check dataset invariants");
    validate->add_option("--data", data_path)->required();

    auto* annotate = app.add_subcommand("annotate", "build an annotation plan");
    annotate->add_option("--strategy", strategy, "top-p|band|anchors")->required();
    annotate->add_option("--data", data_path)->required();
    annotate->add_option("--out", out_path)->required();
    annotate->add_option("--p", p);
    annotate->add_option("--lo", lo);
    annotate->add_option("--hi", hi);
    annotate->add_option("--t-rounds", t_rounds);

    auto* train = app.add_subcommand("train", "train a reranker");
    train->add_option("--data", data_path)->required();
    train->add_option("--plan", plan_path);
    train->add_option("--config", config_path)->required();
    train->add_option("--out", out_path)->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--data", data_path)->required();
    eval->add_option("--model", model_path)->required();
    eval->add_option("--metrics", metrics_list);
    eval->add_option("--k", k);
    auto* tau_opt = eval->add_option("--tau", tau, "decision threshold for f1");
    eval->add_option("--relevance-threshold", relevance_threshold);
    eval->add_option("--out", out_path);

    auto* experiment = app.add_subcommand("experiment", "run an experiment pipeline");
    experiment->add_option("kind", kind, "percentile-bands|budget-sweep|anchors|ablation-attention")
        ->required();
    experiment->add_option("--config", config_path)->required();
    experiment->add_option("--out-dir", out_dir)->required();

    auto* report = app.add_subcommand("report", "render experiment reports");
    report->add_option("--in", in_dir)->required();
    report->add_option("--format", format, "csv|plot");

    auto* example = app.add_subcommand("example-config", "print a default experiment config");
    std::string example_kind = "percentile-bands";
    example->add_option("kind", example_kind);

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(config_path, out_path);
        if (validate->parsed()) return cmd_validate(data_path);
        if (annotate->parsed())
            return cmd_annotate(data_path, out_path, strategy, p, lo, hi, t_rounds);
        if (train->parsed()) return cmd_train(data_path, plan_path, config_path, out_path);
        if (eval->parsed())
            return cmd_eval(data_path, model_path, metrics_list, k, tau, tau_opt->count() > 0,
                            relevance_threshold, out_path);
        if (experiment->parsed()) return cmd_experiment(kind, config_path, out_dir);
        if (report->parsed()) return cmd_report(in_dir, format);
        if (example->parsed()) {
            std::cout << wpr::harness::default_config_text(wpr::harness::parse_kind(example_kind));
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitRuntime;
}
