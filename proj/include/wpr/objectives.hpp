#pragma once

#include <map>
#include <span>
#include <vector>

namespace wpr::objectives {

struct LossConfig {
    double gamma = 0.1;            // margin of the modality pairwise hinge
    std::map<int, double> beta_m;  // per-modality weight of the pairwise loss
    double alpha = 0.5;            // distillation weight for visual-modality lists
    double beta = 0.5;             // distillation weight for text-modality lists
    double margin1 = 0.1;          // label-pair margin of the composite loss
    double margin2 = 0.1;          // upstream-pair margin of the composite loss
    double online_alpha = 0.5;
    double online_beta = 0.2;
    bool normalize_listmle = true;
    bool distill_on_labeled = true;

    double modality_weight(int modality) const;  // throws ConfigError when unknown
    void validate() const;
};

/// y_ij * max(0, gamma - (s_i - s_j)). The subgradient at the kink is 0.
double pairwise_hinge(double s_i, double s_j, int y_ij, double gamma);
double pairwise_hinge_grad(double s_i, double s_j, int y_ij, double gamma, double& d_si,
                           double& d_sj);

/// An ordered preference between two scores of one modality queue.
struct IndexPair {
    int pos = 0;  // index of the preferred item's score
    int neg = 0;
    int modality = 0;
};

/// Sum over modalities of beta_m times the mean hinge loss of that
/// modality's pairs. Pass a nonempty `grad` (same length as `scores`,
/// accumulated into) to collect d loss / d score.
double modality_weighted_pairwise(std::span<const double> scores,
                                  const std::vector<IndexPair>& pairs, const LossConfig& config,
                                  std::span<double> grad = {});

/// KL(softmax(upstream) || softmax(model)) over one modality's list.
double listwise_kl(std::span<const double> upstream, std::span<const double> model,
                   std::span<double> grad_model = {});

/// Negative log permutation likelihood of scores already ordered by the
/// target permutation; divided by the list length when `normalize`.
double list_mle(std::span<const double> ordered_scores, bool normalize,
                std::span<double> grad = {});

enum class DistillWeight { Alpha, Beta };

/// Listwise supervision available for one query. Index vectors refer to
/// positions in the query's score array.
struct QuerySupervision {
    /// Labeled items ordered by the label permutation (grade descending);
    /// empty for queries with no labeled items.
    std::vector<int> label_order;
    struct DistillList {
        DistillWeight weight = DistillWeight::Beta;
        std::vector<int> order;  // one modality's items, upstream-score descending
    };
    std::vector<DistillList> distill_lists;

    bool labeled() const { return !label_order.empty(); }
};

struct SupervisionBatch {
    std::vector<QuerySupervision> queries;
};

/// Label ListMLE term (when present) plus weighted per-modality
/// distillation ListMLE terms; distillation applies to unlabeled queries
/// always and to labeled queries iff config.distill_on_labeled.
double combined_objective_query(std::span<const double> scores, const QuerySupervision& sup,
                                const LossConfig& config, std::span<double> grad = {});

/// Mean of combined_objective_query over the batch.
double combined_objective(const std::vector<std::vector<double>>& scores,
                          const SupervisionBatch& batch, const LossConfig& config);

/// Squared-error pointwise term plus margin hinges over label and
/// upstream pairs, weighted by online_alpha / online_beta.
struct ScorePair {
    double s_pos = 0.0;
    double s_neg = 0.0;
};
double online_composite(double pred, double label_target, const std::vector<ScorePair>& label_pairs,
                        const std::vector<ScorePair>& upstream_pairs, const LossConfig& config);

/// Pair/point supervision for one query of the anchor-based training
/// path: mean squared pointwise error over graded items (targets are
/// grade/4), a mean hinge over label pairs weighted by online_alpha,
/// and the modality-weighted hinge over upstream pairs.
struct PairQuerySupervision {
    std::vector<std::pair<int, double>> point_targets;  // (index, target in [0,1])
    std::vector<std::pair<int, int>> label_pairs;       // (pos, neg)
    std::vector<IndexPair> upstream_pairs;
};
double pair_supervision_objective(std::span<const double> scores,
                                  const PairQuerySupervision& sup, const LossConfig& config,
                                  std::span<double> grad = {});

}  // namespace wpr::objectives
