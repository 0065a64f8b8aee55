#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wpr/config.hpp"
#include "wpr/core.hpp"
#include "wpr/datagen.hpp"
#include "wpr/metrics.hpp"
#include "wpr/model.hpp"
#include "wpr/objectives.hpp"

namespace wpr::harness {

enum class ExperimentKind { PercentileBands, BudgetSweep, Anchors, AblationAttention };

ExperimentKind parse_kind(const std::string& name);
std::string kind_name(ExperimentKind kind);

/// A labeled slice of each modality queue: either a [lo,hi) percentile
/// band of the upstream ranking or a uniform random fraction.
struct BandSpec {
    bool random = false;
    double lo = 0.0;
    double hi = 0.0;  // for random bands, hi-lo is the sampled fraction
    std::string name() const;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::PercentileBands;
    datagen::SynthConfig synth;
    model::ModelConfig model;  // bucket boundaries are fitted per run
    objectives::LossConfig loss;
    std::size_t buckets_per_feature = 4;
    std::vector<BandSpec> bands;
    std::vector<double> budgets;
    std::vector<std::size_t> t_rounds;
    std::vector<std::uint64_t> seeds;
    std::optional<double> f1_tau;  // required for the anchors experiment
    int relevance_threshold = 2;
    std::size_t eval_k = 10;
    std::string granularity = "item";  // "item" (per-queue slices) or "query"
    std::string config_hash;           // fingerprint of the config text

    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_keyvalues(const config::KeyValues& kv);
    void validate() const;
};

/// Built-in config text for each experiment kind (also emitted by the
/// CLI's example-config subcommand).
std::string default_config_text(ExperimentKind kind);
ExperimentConfig default_config(ExperimentKind kind);

/// "model.*" keys (bucket boundaries left unfitted).
model::ModelConfig model_config_from_keyvalues(const config::KeyValues& kv);
/// "loss.*" keys; beta_m defaults to 1.0 for modalities 1..n_modalities.
objectives::LossConfig loss_config_from_keyvalues(const config::KeyValues& kv,
                                                  std::size_t n_modalities);

struct ReportRow {
    std::string experiment;
    std::string group;
    std::string seed;  // decimal seed, or "mean"
    double labeled_fraction = 0.0;
    std::map<std::string, double> metrics;
};

struct Report {
    std::string experiment;
    std::string config_hash;
    std::vector<std::string> metric_columns;
    std::vector<ReportRow> rows;

    const ReportRow* find(const std::string& group, const std::string& seed) const;
    void write_csv(std::ostream& out) const;
    std::string to_csv() const;
    static Report read_csv(std::istream& in);
    static Report read_csv_file(const std::string& path);
};

struct QuerySplit {
    core::Dataset train;
    core::Dataset valid;
    core::Dataset test;
};

/// Deterministic 70/15/15 split at the query level.
QuerySplit split_dataset(const core::Dataset& dataset, std::uint64_t seed);

Report run_percentile_bands(const ExperimentConfig& config);
Report run_budget_sweep(const ExperimentConfig& config);
Report run_anchor_experiment(const ExperimentConfig& config);
Report run_attention_ablation(const ExperimentConfig& config);

/// Dispatches on config.kind and writes report.csv under out_dir.
Report run_experiment(const ExperimentConfig& config, const std::string& out_dir);

/// Bar chart (SVG) of per-group mean values of one metric column.
void write_svg_bars(const Report& report, const std::string& metric, std::ostream& out);

}  // namespace wpr::harness
