#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wpr/annotate.hpp"
#include "wpr/core.hpp"
#include "wpr/objectives.hpp"

namespace wpr::model {

enum class Variant { CrossAttention, Mlp };

struct ModelConfig {
    std::size_t embed_dim = 32;  // d; must exceed text_dim, divisible by n_heads
    std::size_t n_heads = 4;
    std::size_t n_blocks = 2;
    std::size_t mlp_hidden = 32;
    std::size_t user_tokens = 2;
    std::vector<std::vector<double>> item_boundaries;  // per raw item feature
    std::vector<std::vector<double>> user_boundaries;  // per raw user feature
    double learning_rate = 0.1;
    std::size_t epochs = 30;
    std::size_t batch_queries = 25;
    std::uint64_t seed = 0;
    Variant variant = Variant::CrossAttention;
    bool use_hybrid_fusion = true;

    void validate() const;
};

/// Maps each raw value to a one-hot span over its buckets. Buckets are
/// half-open: a value equal to a boundary lands in the upper bucket.
/// Output length is sum over features of (#boundaries + 1).
std::vector<double> bucketize_features(std::span<const double> raw,
                                       const std::vector<std::vector<double>>& boundaries);
std::size_t bucketized_size(const std::vector<std::vector<double>>& boundaries);

/// Per-feature quantile cut points (buckets_per_feature - 1 of them),
/// deduplicated; computed from sample rows.
std::vector<std::vector<double>> quantile_boundaries(
    const std::vector<std::vector<double>>& rows, std::size_t buckets_per_feature);

/// Gated blend of a visual and a text embedding:
/// z = sigmoid(W [e_visual; e_text] + b), out = z * e_visual + (1-z) * e_text.
/// `gate_w` is row-major dim x 2*dim. Optionally returns the gate values.
std::vector<double> hybrid_fusion(std::span<const double> e_visual,
                                  std::span<const double> e_text, std::span<const double> gate_w,
                                  std::span<const double> gate_b,
                                  std::vector<double>* gate_out = nullptr);

/// One named parameter tensor inside the flat parameter vector.
struct TensorInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
};

struct TrainLog {
    std::vector<double> epoch_loss;
};

enum class TrainObjective { CombinedListwise, PairSupervision };

struct TrainOptions {
    TrainObjective objective = TrainObjective::CombinedListwise;
    /// Prebuilt pair/point supervision per query_id; when absent for a
    /// query the pair objective derives supervision from the plan.
    std::map<std::string, annotate::SupervisionSets> pair_supervision;
};

/// Whole-page reranker: gated visual/text fusion, bucketized feature
/// encoders, a stack of cross-attention blocks over user tokens, and a
/// scalar scoring head. All parameters live in one flat vector, grouped
/// into named tensors, so training, checkpointing and finite-difference
/// verification all see the same layout.
class RerankerModel {
  public:
    RerankerModel(ModelConfig config, std::size_t text_dim, std::size_t visual_dim);

    const ModelConfig& config() const { return config_; }
    std::size_t text_dim() const { return text_dim_; }
    std::size_t visual_dim() const { return visual_dim_; }
    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    /// Deterministic scores for every candidate of the query.
    std::vector<double> forward(const core::Query& query) const;

    /// Candidates ranked by score descending, item_id ascending on ties.
    core::RankedList score_page(const core::Query& query) const;

    void save(const std::string& path) const;
    static RerankerModel load(const std::string& path);

    // Internal-but-tested: forward for all of `query`, then backward from
    // d loss / d score, accumulating parameter gradients.
    void forward_backward(const core::Query& query, std::span<const double> score_grad,
                          std::span<double> param_grad) const;

  private:
    void init_params();

    ModelConfig config_;
    std::size_t text_dim_ = 0;
    std::size_t visual_dim_ = 0;
    std::size_t item_bits_ = 0;
    std::size_t user_bits_ = 0;
    std::vector<TensorInfo> tensors_;
    std::map<std::string, std::size_t> tensor_index_;
    std::vector<double> params_;

    friend struct ForwardPass;
};

/// Trains a fresh model on the dataset under the annotation plan by
/// mini-batch gradient descent. The plan must cover every candidate of
/// every query passed in. Throws TrainingError on divergence.
std::pair<RerankerModel, TrainLog> train(const core::Dataset& dataset,
                                         const annotate::AnnotationPlan& plan,
                                         const ModelConfig& model_config,
                                         const objectives::LossConfig& loss_config,
                                         const TrainOptions& options = {});

/// Plan in which every item carrying a dataset label counts as labeled.
annotate::AnnotationPlan full_label_plan(const core::Dataset& dataset);

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t samples_per_tensor = 20;  // 0 = every entry
    std::uint64_t seed = 7;
    /// Test hook: scale the analytic gradient of one tensor (by name)
    /// to verify the checker catches a broken gradient.
    std::string corrupt_tensor;
    double corrupt_scale = 2.0;
};

/// Compares analytic parameter gradients against central finite
/// differences of the batch loss; returns the worst relative error over
/// all sampled entries of every tensor.
double grad_check(const RerankerModel& model, const core::Dataset& dataset,
                  const annotate::AnnotationPlan& plan, const objectives::LossConfig& loss_config,
                  const TrainOptions& options = {}, const GradCheckOptions& check = {});

/// Batch loss (mean per-query objective) and, when `param_grad` is
/// nonempty, its gradient. Exposed for tests and the gradient checker.
double batch_loss(const RerankerModel& model, const core::Dataset& dataset,
                  const annotate::AnnotationPlan& plan, const objectives::LossConfig& loss_config,
                  const TrainOptions& options, std::span<double> param_grad);

}  // namespace wpr::model
