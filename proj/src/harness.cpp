#include "wpr/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "wpr/annotate.hpp"
#include "wpr/common.hpp"

namespace wpr::harness {

ExperimentKind parse_kind(const std::string& name) {
    if (name == "percentile-bands") return ExperimentKind::PercentileBands;
    if (name == "budget-sweep") return ExperimentKind::BudgetSweep;
    if (name == "anchors") return ExperimentKind::Anchors;
    if (name == "ablation-attention") return ExperimentKind::AblationAttention;
    throw ArgumentError("unknown experiment kind: " + name);
}

std::string kind_name(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::PercentileBands: return "percentile-bands";
        case ExperimentKind::BudgetSweep: return "budget-sweep";
        case ExperimentKind::Anchors: return "anchors";
        case ExperimentKind::AblationAttention: return "ablation-attention";
    }
    return "?";
}

std::string BandSpec::name() const {
    char buf[64];
    if (random) {
        std::snprintf(buf, sizeof(buf), "random-%d%%", static_cast<int>(std::lround((hi - lo) * 100)));
    } else {
        std::snprintf(buf, sizeof(buf), "%d-%d%%", static_cast<int>(std::lround(lo * 100)),
                      static_cast<int>(std::lround(hi * 100)));
    }
    return buf;
}

// --- Config ------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("experiment.seeds must be nonempty");
    if (kind == ExperimentKind::PercentileBands && bands.empty())
        throw ConfigError("experiment.bands must be nonempty");
    if (kind == ExperimentKind::BudgetSweep) {
        if (budgets.empty()) throw ConfigError("experiment.budgets must be nonempty");
        for (double b : budgets)
            if (!(b > 0.0 && b <= 1.0))
                throw ConfigError("experiment.budgets entries must lie in (0,1]");
    }
    if (kind == ExperimentKind::Anchors) {
        if (t_rounds.empty()) throw ConfigError("experiment.t_rounds must be nonempty");
        if (!f1_tau) throw ConfigError("experiment.f1_tau is required for the anchors experiment");
        if (synth.modalities.size() != 2)
            throw ConfigError("the anchors experiment needs exactly 2 modalities");
    }
    if (granularity != "item" && granularity != "query")
        throw ConfigError("experiment.granularity must be 'item' or 'query'");
    synth.validate();
}

model::ModelConfig model_config_from_keyvalues(const config::KeyValues& kv) {
    model::ModelConfig m;
    m.embed_dim = static_cast<std::size_t>(kv.get_int("model.embed_dim", 32));
    m.n_heads = static_cast<std::size_t>(kv.get_int("model.n_heads", 4));
    m.n_blocks = static_cast<std::size_t>(kv.get_int("model.n_blocks", 2));
    m.mlp_hidden = static_cast<std::size_t>(kv.get_int("model.mlp_hidden", 32));
    m.user_tokens = static_cast<std::size_t>(kv.get_int("model.user_tokens", 2));
    m.learning_rate = kv.get_double("model.learning_rate", 0.15);
    m.epochs = static_cast<std::size_t>(kv.get_int("model.epochs", 30));
    m.batch_queries = static_cast<std::size_t>(kv.get_int("model.batch_queries", 25));
    m.seed = static_cast<std::uint64_t>(kv.get_int("model.seed", kv.get_int("dataset.seed", 0)));
    const std::string variant = kv.get_str("model.variant", "cross_attention");
    if (variant == "cross_attention")
        m.variant = model::Variant::CrossAttention;
    else if (variant == "mlp")
        m.variant = model::Variant::Mlp;
    else
        throw ConfigError("model.variant must be cross_attention or mlp");
    m.use_hybrid_fusion = kv.get_bool("model.use_hybrid_fusion", true);
    return m;
}

objectives::LossConfig loss_config_from_keyvalues(const config::KeyValues& kv,
                                                  std::size_t n_modalities) {
    objectives::LossConfig l;
    l.gamma = kv.get_double("loss.gamma", 0.1);
    l.alpha = kv.get_double("loss.alpha", 0.5);
    l.beta = kv.get_double("loss.beta", 0.5);
    l.margin1 = kv.get_double("loss.margin1", 0.1);
    l.margin2 = kv.get_double("loss.margin2", 0.1);
    l.online_alpha = kv.get_double("loss.online_alpha", 0.5);
    l.online_beta = kv.get_double("loss.online_beta", 0.2);
    l.normalize_listmle = kv.get_bool("loss.normalize_listmle", true);
    l.distill_on_labeled = kv.get_bool("loss.distill_on_labeled", true);
    for (std::size_t i = 1; i <= n_modalities; ++i)
        l.beta_m[static_cast<int>(i)] = kv.get_double("loss.beta_m." + std::to_string(i), 1.0);
    return l;
}

ExperimentConfig ExperimentConfig::from_keyvalues(const config::KeyValues& kv) {
    ExperimentConfig cfg;
    cfg.kind = parse_kind(kv.get_str("experiment.kind"));
    cfg.synth = datagen::synth_config_from_keyvalues(kv);
    cfg.model = model_config_from_keyvalues(kv);
    cfg.loss = loss_config_from_keyvalues(kv, cfg.synth.modalities.size());
    cfg.buckets_per_feature = static_cast<std::size_t>(kv.get_int("model.buckets_per_feature", 4));

    for (const auto& tok : kv.has("experiment.bands")
                               ? kv.get_str_list("experiment.bands")
                               : std::vector<std::string>{}) {
        BandSpec band;
        auto colon = tok.find(':');
        if (colon == std::string::npos)
            throw ConfigError("experiment.bands: expected lo:hi or random:p, got '" + tok + "'");
        const std::string head = tok.substr(0, colon);
        const std::string tail = tok.substr(colon + 1);
        if (head == "random") {
            band.random = true;
            band.lo = 0.0;
            band.hi = std::stod(tail);
        } else {
            band.lo = std::stod(head);
            band.hi = std::stod(tail);
        }
        cfg.bands.push_back(band);
    }
    cfg.budgets = kv.get_double_list("experiment.budgets", {});
    if (kv.has("experiment.t_rounds"))
        for (const auto& tok : kv.get_str_list("experiment.t_rounds"))
            cfg.t_rounds.push_back(static_cast<std::size_t>(std::stoull(tok)));
    if (kv.has("experiment.seeds"))
        for (const auto& tok : kv.get_str_list("experiment.seeds"))
            cfg.seeds.push_back(static_cast<std::uint64_t>(std::stoull(tok)));
    if (kv.has("experiment.f1_tau")) cfg.f1_tau = kv.get_double("experiment.f1_tau");
    cfg.relevance_threshold = static_cast<int>(kv.get_int("experiment.relevance_threshold", 2));
    cfg.eval_k = static_cast<std::size_t>(kv.get_int("experiment.eval_k", 10));
    cfg.granularity = kv.get_str("experiment.granularity", "item");

    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(kv.text())));
    cfg.config_hash = hash;
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    return from_keyvalues(config::KeyValues::from_file(path));
}

std::string default_config_text(ExperimentKind kind) {
    // The pair/point objective of the anchors experiment carries an
    // unbounded squared term and wants a gentler step than ListMLE.
    const char* lr = kind == ExperimentKind::Anchors ? "0.03" : "0.15";
    std::ostringstream out;
    out << "# Desk-scale experiment defaults\n"
        << "experiment.kind = " << kind_name(kind) << "\n"
        << "experiment.seeds = 1,2,3\n"
        << "experiment.eval_k = 10\n"
        << "experiment.relevance_threshold = 3\n"
        << "experiment.granularity = item\n"
        << "experiment.bands = 0:0.3,0.3:0.7,0.7:1.0,random:0.3\n"
        << "experiment.budgets = 0.1,0.3,1.0\n"
        << "experiment.t_rounds = 1,2\n"
        << "experiment.f1_tau = 0.5\n"
        << "\n"
        << "dataset.n_queries = 715\n"
        << "dataset.seed = 1\n"
        << "dataset.text_dim = 16\n"
        << "dataset.visual_dim = 16\n"
        << "dataset.item_feature_dim = 4\n"
        << "dataset.user_feature_dim = 4\n"
        << "dataset.label_noise = 0.09\n"
        << "dataset.user_weight = 0.55\n"
        << "dataset.visual_signal = 0.6\n"
        << "dataset.embedding_noise = 0.35\n"
        << "modality.1.name = natural\n"
        << "modality.1.queue_min = 4\n"
        << "modality.1.queue_max = 8\n"
        << "modality.1.beta_a = 2\n"
        << "modality.1.beta_b = 5\n"
        << "modality.1.rho = 0.93\n"
        << "modality.1.has_visual = false\n"
        << "modality.2.name = video\n"
        << "modality.2.queue_min = 4\n"
        << "modality.2.queue_max = 8\n"
        << "modality.2.beta_a = 8\n"
        << "modality.2.beta_b = 2\n"
        << "modality.2.rho = 0.93\n"
        << "modality.2.has_visual = true\n"
        << "\n"
        << "model.embed_dim = 32\n"
        << "model.n_heads = 4\n"
        << "model.n_blocks = 2\n"
        << "model.mlp_hidden = 32\n"
        << "model.user_tokens = 2\n"
        << "model.buckets_per_feature = 4\n"
        << "model.learning_rate = " << lr << "\n"
        << "model.epochs = 30\n"
        << "model.batch_queries = 25\n"
        << "model.variant = cross_attention\n"
        << "model.use_hybrid_fusion = true\n"
        << "\n"
        << "loss.gamma = 0.1\n"
        << "loss.alpha = 0.5\n"
        << "loss.beta = 0.5\n"
        << "loss.margin1 = 0.1\n"
        << "loss.margin2 = 0.1\n"
        << "loss.online_alpha = 0.5\n"
        << "loss.online_beta = 0.2\n"
        << "loss.normalize_listmle = true\n"
        << "loss.distill_on_labeled = true\n"
        << "loss.beta_m.1 = 1.0\n"
        << "loss.beta_m.2 = 1.0\n";
    return out.str();
}

ExperimentConfig default_config(ExperimentKind kind) {
    return ExperimentConfig::from_keyvalues(
        config::KeyValues::from_string(default_config_text(kind)));
}

// --- Report ---------------------------------------------------------------------

const ReportRow* Report::find(const std::string& group, const std::string& seed) const {
    for (const auto& r : rows)
        if (r.group == group && r.seed == seed) return &r;
    return nullptr;
}

void Report::write_csv(std::ostream& out) const {
    out << "experiment,group,seed,labeled_fraction";
    for (const auto& m : metric_columns) out << ',' << m;
    out << ",config_hash\n";
    char buf[64];
    for (const auto& r : rows) {
        out << r.experiment << ',' << r.group << ',' << r.seed;
        std::snprintf(buf, sizeof(buf), "%.6f", r.labeled_fraction);
        out << ',' << buf;
        for (const auto& m : metric_columns) {
            auto it = r.metrics.find(m);
            if (it == r.metrics.end()) {
                out << ',';
            } else {
                std::snprintf(buf, sizeof(buf), "%.6f", it->second);
                out << ',' << buf;
            }
        }
        out << ',' << config_hash << '\n';
    }
}

std::string Report::to_csv() const {
    std::ostringstream ss;
    write_csv(ss);
    return ss.str();
}

namespace {
std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string tok;
    std::istringstream in(line);
    while (std::getline(in, tok, ',')) out.push_back(tok);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}
}  // namespace

Report Report::read_csv(std::istream& in) {
    Report rep;
    std::string line;
    if (!std::getline(in, line)) throw ParseError("report: empty file");
    auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "experiment")
        throw ParseError("report: unexpected header");
    rep.metric_columns.assign(header.begin() + 4, header.end() - 1);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != header.size())
            throw ParseError("report: ragged row '" + line + "'");
        ReportRow row;
        row.experiment = f[0];
        row.group = f[1];
        row.seed = f[2];
        row.labeled_fraction = std::stod(f[3]);
        for (std::size_t i = 0; i < rep.metric_columns.size(); ++i)
            if (!f[4 + i].empty()) row.metrics[rep.metric_columns[i]] = std::stod(f[4 + i]);
        rep.config_hash = f.back();
        if (rep.experiment.empty()) rep.experiment = row.experiment;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

Report Report::read_csv_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open report: " + path);
    return read_csv(f);
}

// --- Shared pipeline pieces --------------------------------------------------------

QuerySplit split_dataset(const core::Dataset& dataset, std::uint64_t seed) {
    std::vector<std::size_t> order(dataset.queries.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, "split");
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n = order.size();
    const std::size_t n_train = static_cast<std::size_t>(0.7 * static_cast<double>(n));
    const std::size_t n_valid = static_cast<std::size_t>(0.15 * static_cast<double>(n));

    QuerySplit split;
    auto skeleton = [&](core::Dataset& d) {
        d.modalities = dataset.modalities;
        d.text_dim = dataset.text_dim;
        d.visual_dim = dataset.visual_dim;
        d.item_feature_dim = dataset.item_feature_dim;
        d.user_feature_dim = dataset.user_feature_dim;
    };
    skeleton(split.train);
    skeleton(split.valid);
    skeleton(split.test);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& q = dataset.queries[order[i]];
        if (i < n_train)
            split.train.queries.push_back(q);
        else if (i < n_train + n_valid)
            split.valid.queries.push_back(q);
        else
            split.test.queries.push_back(q);
    }
    return split;
}

namespace {

void fit_boundaries(model::ModelConfig& cfg, const core::Dataset& train,
                    std::size_t buckets_per_feature) {
    std::vector<std::vector<double>> item_rows;
    std::vector<std::vector<double>> user_rows;
    for (const auto& q : train.queries) {
        user_rows.push_back(q.user_features);
        for (const auto& c : q.candidates) item_rows.push_back(c.features);
    }
    cfg.item_boundaries = model::quantile_boundaries(item_rows, buckets_per_feature);
    cfg.user_boundaries = model::quantile_boundaries(user_rows, buckets_per_feature);
}

std::map<std::string, double> eval_ranking(const model::RerankerModel& m,
                                           const core::Dataset& test, std::size_t k,
                                           int relevance_threshold) {
    std::vector<core::RankedList> rankings;
    rankings.reserve(test.queries.size());
    for (const auto& q : test.queries) rankings.push_back(m.score_page(q));
    const auto run = metrics::judge(test, rankings, relevance_threshold);
    const std::string ks = std::to_string(k);
    return {{"mrr@" + ks, metrics::mrr_at_k(run, k)},
            {"map@" + ks, metrics::map_at_k(run, k)},
            {"ndcg", metrics::ndcg(run)}};
}

std::map<std::string, double> eval_anchor(const model::RerankerModel& m,
                                          const core::Dataset& test, double tau,
                                          int relevance_threshold) {
    std::vector<core::RankedList> rankings;
    rankings.reserve(test.queries.size());
    for (const auto& q : test.queries) rankings.push_back(m.score_page(q));
    const auto run = metrics::judge(test, rankings, relevance_threshold, tau);
    const auto p = metrics::pnr(run);
    return {{"f1", metrics::f1_macro(run)},
            {"ndcg@4", metrics::ndcg(run, 4)},
            {"pnr", p.value}};
}

// Runs independent experiment cells on however many cores are available;
// results land in preassigned slots so report order is deterministic.
void run_cells(std::vector<std::function<void()>>& jobs) {
    if (jobs.empty()) return;
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t n_workers = std::min<std::size_t>(hw, jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct CellResult {
    double labeled_fraction = 0.0;
    std::map<std::string, double> metrics;
};

Report assemble_report(const ExperimentConfig& config,
                       const std::vector<std::string>& groups,
                       const std::vector<std::vector<CellResult>>& cells,
                       const std::vector<std::string>& metric_columns) {
    Report rep;
    rep.experiment = kind_name(config.kind);
    rep.config_hash = config.config_hash;
    rep.metric_columns = metric_columns;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        ReportRow mean;
        mean.experiment = rep.experiment;
        mean.group = groups[g];
        mean.seed = "mean";
        for (std::size_t s = 0; s < config.seeds.size(); ++s) {
            const auto& cell = cells[g][s];
            ReportRow row;
            row.experiment = rep.experiment;
            row.group = groups[g];
            row.seed = std::to_string(config.seeds[s]);
            row.labeled_fraction = cell.labeled_fraction;
            row.metrics = cell.metrics;
            mean.labeled_fraction += cell.labeled_fraction / static_cast<double>(config.seeds.size());
            for (const auto& [k, v] : cell.metrics)
                mean.metrics[k] += v / static_cast<double>(config.seeds.size());
            rep.rows.push_back(std::move(row));
        }
        rep.rows.push_back(std::move(mean));
    }
    return rep;
}

datagen::SynthConfig synth_for_seed(const ExperimentConfig& config, std::uint64_t seed) {
    auto s = config.synth;
    s.seed = seed;
    return s;
}

model::ModelConfig model_for_seed(const ExperimentConfig& config, std::uint64_t seed,
                                  const core::Dataset& train) {
    auto m = config.model;
    m.seed = seed;
    fit_boundaries(m, train, config.buckets_per_feature);
    return m;
}

double train_labeled_fraction(const annotate::AnnotationPlan& plan) {
    return plan.labeled_fraction();
}

}  // namespace

// --- Experiments -------------------------------------------------------------------

Report run_percentile_bands(const ExperimentConfig& config) {
    const auto& seeds = config.seeds;
    std::vector<std::string> groups;
    for (const auto& b : config.bands) groups.push_back(b.name());

    std::vector<std::vector<CellResult>> cells(groups.size(),
                                               std::vector<CellResult>(seeds.size()));
    std::vector<std::function<void()>> jobs;
    for (std::size_t g = 0; g < config.bands.size(); ++g) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            jobs.push_back([&, g, s] {
                const auto seed = seeds[s];
                const auto [dataset, oracle] = datagen::generate_dataset(synth_for_seed(config, seed));
                const auto split = split_dataset(dataset, seed);
                const auto& band = config.bands[g];

                annotate::AnnotationPlan plan;
                for (const auto& q : split.train.queries) {
                    for (const auto& mod : dataset.modalities) {
                        const auto queue = annotate::modality_queue(q, mod.id);
                        if (queue.empty()) continue;
                        if (band.random) {
                            auto rng = make_rng(seed, "random-band", fnv1a64(q.query_id),
                                                static_cast<std::uint64_t>(mod.id));
                            plan.merge(annotate::select_random(q.query_id, queue, band.hi - band.lo,
                                                               oracle, rng));
                        } else {
                            plan.merge(annotate::percentile_band(q.query_id, queue, band.lo,
                                                                 band.hi, oracle));
                        }
                    }
                }
                const auto mcfg = model_for_seed(config, seed, split.train);
                auto [trained, log] = model::train(split.train, plan, mcfg, config.loss);
                auto& cell = cells[g][s];
                cell.labeled_fraction = train_labeled_fraction(plan);
                cell.metrics =
                    eval_ranking(trained, split.test, config.eval_k, config.relevance_threshold);
            });
        }
    }
    try {
        run_cells(jobs);
    } catch (const std::exception& e) {
        throw TrainingError(std::string("percentile-bands experiment failed: ") + e.what());
    }
    const std::string ks = std::to_string(config.eval_k);
    return assemble_report(config, groups, cells, {"mrr@" + ks, "map@" + ks, "ndcg"});
}

Report run_budget_sweep(const ExperimentConfig& config) {
    struct VariantSpec {
        std::string name;
        bool labels = true;
        bool distill = true;
        double budget = 1.0;
    };
    std::vector<VariantSpec> variants;
    for (double b : config.budgets) {
        char name[64];
        std::snprintf(name, sizeof(name), "sft@%d%%", static_cast<int>(std::lround(b * 100)));
        variants.push_back({name, true, false, b});
    }
    for (double b : config.budgets) {
        char name[64];
        std::snprintf(name, sizeof(name), "sft+distill@%d%%",
                      static_cast<int>(std::lround(b * 100)));
        variants.push_back({name, true, true, b});
    }
    variants.push_back({"upstream-only", false, true, 0.0});

    std::vector<std::string> groups;
    for (const auto& v : variants) groups.push_back(v.name);
    std::vector<std::vector<CellResult>> cells(groups.size(),
                                               std::vector<CellResult>(config.seeds.size()));

    std::vector<std::function<void()>> jobs;
    for (std::size_t g = 0; g < variants.size(); ++g) {
        for (std::size_t s = 0; s < config.seeds.size(); ++s) {
            jobs.push_back([&, g, s] {
                const auto seed = config.seeds[s];
                const auto& variant = variants[g];
                const auto [dataset, oracle] = datagen::generate_dataset(synth_for_seed(config, seed));
                const auto split = split_dataset(dataset, seed);

                annotate::AnnotationPlan plan;
                core::Dataset train = split.train;
                if (variant.labels) {
                    if (config.granularity == "query") {
                        // Budgeted fraction of queries, fully labeled.
                        std::vector<std::size_t> order(train.queries.size());
                        std::iota(order.begin(), order.end(), 0);
                        auto rng = make_rng(seed, "query-budget");
                        std::shuffle(order.begin(), order.end(), rng);
                        const auto n_labeled = static_cast<std::size_t>(std::ceil(
                            variant.budget * static_cast<double>(order.size()) - 1e-9));
                        std::vector<bool> labeled(order.size(), false);
                        for (std::size_t i = 0; i < n_labeled; ++i) labeled[order[i]] = true;
                        for (std::size_t qi = 0; qi < train.queries.size(); ++qi) {
                            const auto& q = train.queries[qi];
                            for (const auto& mod : dataset.modalities) {
                                const auto queue = annotate::modality_queue(q, mod.id);
                                if (queue.empty()) continue;
                                if (labeled[qi]) {
                                    plan.merge(annotate::select_top_p(q.query_id, queue, 1.0, oracle));
                                } else {
                                    for (const auto& item : queue)
                                        plan.set_unlabeled(q.query_id, item.item_id);
                                }
                            }
                        }
                    } else {
                        for (const auto& q : train.queries) {
                            for (const auto& mod : dataset.modalities) {
                                const auto queue = annotate::modality_queue(q, mod.id);
                                if (queue.empty()) continue;
                                plan.merge(
                                    annotate::select_top_p(q.query_id, queue, variant.budget, oracle));
                            }
                        }
                    }
                } else {
                    for (const auto& q : train.queries)
                        for (const auto& c : q.candidates) plan.set_unlabeled(q.query_id, c.item_id);
                }

                auto loss = config.loss;
                if (!variant.distill) {
                    loss.alpha = 0.0;
                    loss.beta = 0.0;
                    // Label-only training drops queries with no labeled item.
                    core::Dataset filtered;
                    filtered.modalities = train.modalities;
                    filtered.text_dim = train.text_dim;
                    filtered.visual_dim = train.visual_dim;
                    filtered.item_feature_dim = train.item_feature_dim;
                    filtered.user_feature_dim = train.user_feature_dim;
                    for (const auto& q : train.queries) {
                        bool any = false;
                        for (const auto& c : q.candidates)
                            any = any || plan.grade_of(q.query_id, c.item_id).has_value();
                        if (any) filtered.queries.push_back(q);
                    }
                    train = std::move(filtered);
                }

                const double lf = plan.labeled_fraction();
                const auto mcfg = model_for_seed(config, seed, split.train);
                auto [trained, log] = model::train(train, plan, mcfg, loss);
                auto& cell = cells[g][s];
                cell.labeled_fraction = lf;
                cell.metrics =
                    eval_ranking(trained, split.test, config.eval_k, config.relevance_threshold);
            });
        }
    }
    try {
        run_cells(jobs);
    } catch (const std::exception& e) {
        throw TrainingError(std::string("budget-sweep experiment failed: ") + e.what());
    }
    const std::string ks = std::to_string(config.eval_k);
    return assemble_report(config, groups, cells, {"mrr@" + ks, "map@" + ks, "ndcg"});
}

Report run_anchor_experiment(const ExperimentConfig& config) {
    std::vector<std::string> groups;
    for (auto t : config.t_rounds) groups.push_back("T=" + std::to_string(t));
    std::vector<std::vector<CellResult>> cells(groups.size(),
                                               std::vector<CellResult>(config.seeds.size()));
    std::vector<std::function<void()>> jobs;
    for (std::size_t g = 0; g < config.t_rounds.size(); ++g) {
        for (std::size_t s = 0; s < config.seeds.size(); ++s) {
            jobs.push_back([&, g, s] {
                const auto seed = config.seeds[s];
                const std::size_t t_rounds = config.t_rounds[g];
                const auto [dataset, oracle] = datagen::generate_dataset(synth_for_seed(config, seed));
                const auto split = split_dataset(dataset, seed);

                // Queue 1 is the visual modality (when present), queue 2 the other.
                int q1_mod = dataset.modalities.front().id;
                [&] {
                    for (const auto& q : dataset.queries)
                        for (const auto& c : q.candidates)
                            if (c.visual_embedding) {
                                q1_mod = c.modality;
                                return;
                            }
                }();
                int q2_mod = q1_mod;
                for (const auto& mod : dataset.modalities)
                    if (mod.id != q1_mod) q2_mod = mod.id;

                annotate::AnnotationPlan plan;
                model::TrainOptions options;
                options.objective = model::TrainObjective::PairSupervision;
                for (const auto& q : split.train.queries) {
                    const auto queue1 = annotate::modality_queue(q, q1_mod);
                    const auto queue2 = annotate::modality_queue(q, q2_mod);
                    const auto aligned =
                        annotate::iso_label_anchor_search(q.query_id, queue1, queue2, t_rounds, oracle);
                    plan.merge(annotate::plan_from_alignment(aligned));
                    options.pair_supervision[q.query_id] = annotate::build_pairs(aligned);
                }

                const auto mcfg = model_for_seed(config, seed, split.train);
                auto [trained, log] = model::train(split.train, plan, mcfg, config.loss, options);
                auto& cell = cells[g][s];
                cell.labeled_fraction = plan.labeled_fraction();
                cell.metrics =
                    eval_anchor(trained, split.test, *config.f1_tau, config.relevance_threshold);
            });
        }
    }
    try {
        run_cells(jobs);
    } catch (const std::exception& e) {
        throw TrainingError(std::string("anchors experiment failed: ") + e.what());
    }
    return assemble_report(config, groups, cells, {"f1", "ndcg@4", "pnr"});
}

Report run_attention_ablation(const ExperimentConfig& config) {
    struct VariantSpec {
        std::string name;
        model::Variant variant;
        bool fusion;
    };
    const std::vector<VariantSpec> variants = {
        {"mlp", model::Variant::Mlp, true},
        {"cross-attention", model::Variant::CrossAttention, true},
        {"cross-attention-no-fusion", model::Variant::CrossAttention, false},
    };
    std::vector<std::string> groups;
    for (const auto& v : variants) groups.push_back(v.name);
    std::vector<std::vector<CellResult>> cells(groups.size(),
                                               std::vector<CellResult>(config.seeds.size()));

    std::vector<std::function<void()>> jobs;
    for (std::size_t g = 0; g < variants.size(); ++g) {
        for (std::size_t s = 0; s < config.seeds.size(); ++s) {
            jobs.push_back([&, g, s] {
                const auto seed = config.seeds[s];
                const auto& variant = variants[g];
                const auto [dataset, oracle] = datagen::generate_dataset(synth_for_seed(config, seed));
                const auto split = split_dataset(dataset, seed);

                // Fully annotated training; no upstream distillation.
                const auto plan = model::full_label_plan(split.train);
                auto loss = config.loss;
                loss.alpha = 0.0;
                loss.beta = 0.0;

                auto mcfg = model_for_seed(config, seed, split.train);
                mcfg.variant = variant.variant;
                mcfg.use_hybrid_fusion = variant.fusion;
                auto [trained, log] = model::train(split.train, plan, mcfg, loss);
                auto& cell = cells[g][s];
                cell.labeled_fraction = 1.0;
                cell.metrics =
                    eval_ranking(trained, split.test, config.eval_k, config.relevance_threshold);
            });
        }
    }
    try {
        run_cells(jobs);
    } catch (const std::exception& e) {
        throw TrainingError(std::string("ablation-attention experiment failed: ") + e.what());
    }
    const std::string ks = std::to_string(config.eval_k);
    return assemble_report(config, groups, cells, {"mrr@" + ks, "map@" + ks, "ndcg"});
}

Report run_experiment(const ExperimentConfig& config, const std::string& out_dir) {
    Report report;
    switch (config.kind) {
        case ExperimentKind::PercentileBands: report = run_percentile_bands(config); break;
        case ExperimentKind::BudgetSweep: report = run_budget_sweep(config); break;
        case ExperimentKind::Anchors: report = run_anchor_experiment(config); break;
        case ExperimentKind::AblationAttention: report = run_attention_ablation(config); break;
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/report.csv", std::ios::binary);
        if (!f) throw ArgumentError("cannot write report under " + out_dir);
        report.write_csv(f);
    }
    return report;
}

// --- Plot ----------------------------------------------------------------------

void write_svg_bars(const Report& report, const std::string& metric, std::ostream& out) {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& r : report.rows) {
        if (r.seed != "mean") continue;
        auto it = r.metrics.find(metric);
        if (it != r.metrics.end()) bars.emplace_back(r.group, it->second);
    }
    if (bars.empty()) throw ArgumentError("no mean rows carry metric '" + metric + "'");

    const int bar_w = 72, gap = 28, margin = 60;
    const int height = 320, plot_h = 240;
    const int width = margin * 2 + static_cast<int>(bars.size()) * (bar_w + gap);
    double vmax = 0.0;
    for (const auto& [_, v] : bars) vmax = std::max(vmax, v);
    if (vmax <= 0.0) vmax = 1.0;

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << report.experiment << " : " << metric << "</text>\n";
    char buf[64];
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double frac = bars[i].second / (vmax * 1.1);
        const int h = static_cast<int>(frac * plot_h);
        const int x = margin + static_cast<int>(i) * (bar_w + gap);
        const int y = 40 + plot_h - h;
        out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\""
            << h << "\" fill=\"#4878a8\"/>\n";
        std::snprintf(buf, sizeof(buf), "%.4f", bars[i].second);
        out << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << y - 6
            << "\" text-anchor=\"middle\" font-size=\"12\">" << buf << "</text>\n";
        out << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << 40 + plot_h + 18
            << "\" text-anchor=\"middle\" font-size=\"12\">" << bars[i].first << "</text>\n";
    }
    out << "<line x1=\"" << margin - 8 << "\" y1=\"" << 40 + plot_h << "\" x2=\""
        << width - margin + 8 << "\" y2=\"" << 40 + plot_h << "\" stroke=\"#333\"/>\n";
    out << "</svg>\n";
}

}  // namespace wpr::harness
