#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "wpr/core.hpp"

namespace wpr::datagen {

/// Per-modality generation knobs. Upstream scores are Beta(a, b)
/// distributed so two modalities can be given visibly different score
/// scales, and rank-correlate with latent relevance at Spearman ~ rho.
struct ModalitySpec {
    std::string name;
    std::size_t queue_min = 4;
    std::size_t queue_max = 8;
    double beta_a = 2.0;
    double beta_b = 2.0;
    double rho = 0.9;         // Spearman(upstream score, latent relevance)
    bool has_visual = false;  // items of this modality carry visual embeddings
};

struct SynthConfig {
    std::size_t n_queries = 100;
    std::vector<ModalitySpec> modalities;
    std::size_t text_dim = 16;
    std::size_t visual_dim = 16;
    std::size_t item_feature_dim = 4;
    std::size_t user_feature_dim = 4;
    double label_noise = 0.0;   // probability a grade flips to a neighbor
    double user_weight = 0.0;   // share of latent relevance driven by the user
    double visual_signal = 0.6; // share of a visual item's signal only in e_visual
    double embedding_noise = 0.35;
    /// Cumulative rank-fraction thresholds for grades 1..4: an item whose
    /// within-query rank fraction exceeds grade_cut[g-1] earns at least
    /// grade g. The skewed default keeps high grades scarce, the way
    /// production relevance scales behave.
    std::array<double, 4> grade_cut{0.5, 0.75, 0.90, 0.96};
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Deterministic stand-in for human annotators. Grades are fixed at
/// dataset construction; the meter counts unique items graded, so
/// re-asking about an item is free. Copies share one meter.
class LabelOracle {
  public:
    LabelOracle();
    static LabelOracle from_dataset(const core::Dataset& dataset);

    /// Returns the grade 0..4 for (query_id, item_id), metering the
    /// first request per item. Throws LookupError on unknown pairs.
    int label(const std::string& query_id, const std::string& item_id) const;

    /// Unique items graded so far.
    std::size_t query_count() const;

  private:
    struct State;
    std::shared_ptr<State> state_;
};

/// Synthesizes a heterogeneous-retrieval dataset plus its label oracle.
/// Fully deterministic in config.seed; randomness is drawn from named
/// streams (one per modality, one for labels, one for users) so runs
/// differing only in label_noise share all latent draws.
/// `latent_out`, when given, receives the latent true relevance of each
/// candidate ([query][candidate], in dataset order) so tests can check
/// the generator's correlation targets directly.
std::pair<core::Dataset, LabelOracle> generate_dataset(
    const SynthConfig& config, std::vector<std::vector<double>>* latent_out = nullptr);

/// Reads the core JSONL schema. Malformed lines raise ParseError with a
/// line number; inconsistent dimensions raise SchemaError.
core::Dataset ingest_jsonl(const std::string& path);
core::Dataset ingest_jsonl_stream(std::istream& in);

/// Parses a flat key-value config file ("dataset.*" and "modality.<k>.*"
/// keys) into a SynthConfig.
SynthConfig synth_config_from_file(const std::string& path);

}  // namespace wpr::datagen

namespace wpr::config {
class KeyValues;
}
namespace wpr::datagen {

SynthConfig synth_config_from_keyvalues(const config::KeyValues& kv);

}  // namespace wpr::datagen
