#include "wpr/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "wpr/common.hpp"

namespace wpr::objectives {

double LossConfig::modality_weight(int modality) const {
    auto it = beta_m.find(modality);
    if (it == beta_m.end())
        throw ConfigError("no pairwise weight configured for modality " + std::to_string(modality));
    return it->second;
}

void LossConfig::validate() const {
    auto nonneg = [](double v, const char* name) {
        if (!(std::isfinite(v) && v >= 0.0))
            throw ConfigError(std::string("LossConfig.") + name + " must be finite and >= 0");
    };
    if (!(std::isfinite(gamma) && gamma > 0.0))
        throw ConfigError("LossConfig.gamma must be finite and > 0");
    if (!(std::isfinite(margin1) && margin1 > 0.0))
        throw ConfigError("LossConfig.margin1 must be finite and > 0");
    if (!(std::isfinite(margin2) && margin2 > 0.0))
        throw ConfigError("LossConfig.margin2 must be finite and > 0");
    nonneg(alpha, "alpha");
    nonneg(beta, "beta");
    nonneg(online_alpha, "online_alpha");
    nonneg(online_beta, "online_beta");
    for (const auto& [m, w] : beta_m)
        if (!(std::isfinite(w) && w >= 0.0))
            throw ConfigError("LossConfig.beta_m[" + std::to_string(m) +
                              "] must be finite and >= 0");
}

double pairwise_hinge(double s_i, double s_j, int y_ij, double gamma) {
    if (y_ij == 0) return 0.0;
    return std::max(0.0, gamma - (s_i - s_j));
}

double pairwise_hinge_grad(double s_i, double s_j, int y_ij, double gamma, double& d_si,
                           double& d_sj) {
    d_si = 0.0;
    d_sj = 0.0;
    if (y_ij == 0) return 0.0;
    const double slack = gamma - (s_i - s_j);
    if (slack > 0.0) {
        d_si = -1.0;
        d_sj = 1.0;
        return slack;
    }
    return 0.0;
}

double modality_weighted_pairwise(std::span<const double> scores,
                                  const std::vector<IndexPair>& pairs, const LossConfig& config,
                                  std::span<double> grad) {
    // Per-pair hinges are averaged within each modality before weighting.
    std::map<int, std::pair<double, std::size_t>> sums;  // modality -> (sum, count)
    for (const auto& p : pairs) sums[p.modality].second++;

    double total = 0.0;
    for (const auto& p : pairs) {
        double d_pos = 0.0, d_neg = 0.0;
        const double l =
            pairwise_hinge_grad(scores[p.pos], scores[p.neg], 1, config.gamma, d_pos, d_neg);
        auto& [sum, count] = sums[p.modality];
        sum += l;
        if (!grad.empty()) {
            const double w = config.modality_weight(p.modality) / static_cast<double>(count);
            grad[p.pos] += w * d_pos;
            grad[p.neg] += w * d_neg;
        }
    }
    for (const auto& [m, sc] : sums)
        total += config.modality_weight(m) * (sc.second ? sc.first / static_cast<double>(sc.second)
                                                        : 0.0);
    return total;
}

namespace {

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite score");
}

// softmax with max subtraction
void stable_softmax(std::span<const double> x, std::vector<double>& out) {
    out.resize(x.size());
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        z += out[i];
    }
    for (auto& v : out) v /= z;
}

}  // namespace

double listwise_kl(std::span<const double> upstream, std::span<const double> model,
                   std::span<double> grad_model) {
    if (upstream.empty() || upstream.size() != model.size())
        throw ArgumentError("listwise_kl: lists must be nonempty and equally sized");
    require_finite(upstream, "listwise_kl");
    require_finite(model, "listwise_kl");

    std::vector<double> p, q;
    stable_softmax(upstream, p);
    stable_softmax(model, q);
    double loss = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) loss += p[i] * (std::log(p[i]) - std::log(q[i]));
        if (!grad_model.empty()) grad_model[i] += q[i] - p[i];
    }
    return std::max(0.0, loss);  // clamp -0.0 / rounding at the optimum
}

double list_mle(std::span<const double> ordered_scores, bool normalize, std::span<double> grad) {
    const std::size_t n = ordered_scores.size();
    if (n == 0) throw ArgumentError("list_mle: empty list");
    require_finite(ordered_scores, "list_mle");

    // Suffix log-sum-exp, accumulated from the tail with a running max.
    std::vector<double> lse(n);
    double m = -std::numeric_limits<double>::infinity();
    double s = 0.0;
    for (std::size_t k = n; k-- > 0;) {
        const double f = ordered_scores[k];
        if (f > m) {
            s = s * std::exp(m - f) + 1.0;
            m = f;
        } else {
            s += std::exp(f - m);
        }
        lse[k] = m + std::log(s);
    }
    double loss = 0.0;
    for (std::size_t k = 0; k < n; ++k) loss += lse[k] - ordered_scores[k];
    const double dn = static_cast<double>(n);

    if (!grad.empty()) {
        // d/df_t = sum_{k<=t} softmax of f_t within suffix k, minus 1.
        for (std::size_t t = 0; t < n; ++t) {
            double g = -1.0;
            for (std::size_t k = 0; k <= t; ++k) g += std::exp(ordered_scores[t] - lse[k]);
            grad[t] += normalize ? g / dn : g;
        }
    }
    loss = std::max(0.0, loss);
    return normalize ? loss / dn : loss;
}

double combined_objective_query(std::span<const double> scores, const QuerySupervision& sup,
                                const LossConfig& config, std::span<double> grad) {
    auto gathered = [&](const std::vector<int>& order, std::vector<double>& buf) {
        buf.clear();
        for (int idx : order) buf.push_back(scores[idx]);
    };
    auto scatter = [&](const std::vector<int>& order, const std::vector<double>& g, double w) {
        for (std::size_t k = 0; k < order.size(); ++k) grad[order[k]] += w * g[k];
    };

    double loss = 0.0;
    std::vector<double> buf, gbuf;
    if (sup.labeled()) {
        gathered(sup.label_order, buf);
        gbuf.assign(buf.size(), 0.0);
        loss += list_mle(buf, config.normalize_listmle, grad.empty() ? std::span<double>{} : gbuf);
        if (!grad.empty()) scatter(sup.label_order, gbuf, 1.0);
    }
    if (!sup.labeled() || config.distill_on_labeled) {
        for (const auto& dl : sup.distill_lists) {
            const double w = dl.weight == DistillWeight::Alpha ? config.alpha : config.beta;
            if (w == 0.0 || dl.order.empty()) continue;
            gathered(dl.order, buf);
            gbuf.assign(buf.size(), 0.0);
            loss +=
                w * list_mle(buf, config.normalize_listmle, grad.empty() ? std::span<double>{} : gbuf);
            if (!grad.empty()) scatter(dl.order, gbuf, w);
        }
    }
    return loss;
}

double combined_objective(const std::vector<std::vector<double>>& scores,
                          const SupervisionBatch& batch, const LossConfig& config) {
    if (scores.size() != batch.queries.size())
        throw ArgumentError("combined_objective: scores/supervision size mismatch");
    if (batch.queries.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t q = 0; q < batch.queries.size(); ++q)
        total += combined_objective_query(scores[q], batch.queries[q], config);
    return total / static_cast<double>(batch.queries.size());
}

double online_composite(double pred, double label_target, const std::vector<ScorePair>& label_pairs,
                        const std::vector<ScorePair>& upstream_pairs, const LossConfig& config) {
    const double d = pred - label_target;
    double loss = d * d;
    if (!label_pairs.empty()) {
        double s = 0.0;
        for (const auto& p : label_pairs)
            s += std::max(0.0, config.margin1 - (p.s_pos - p.s_neg));
        loss += config.online_alpha * s / static_cast<double>(label_pairs.size());
    }
    if (!upstream_pairs.empty()) {
        double s = 0.0;
        for (const auto& p : upstream_pairs)
            s += std::max(0.0, config.margin2 - (p.s_pos - p.s_neg));
        loss += config.online_beta * s / static_cast<double>(upstream_pairs.size());
    }
    return loss;
}

double pair_supervision_objective(std::span<const double> scores, const PairQuerySupervision& sup,
                                  const LossConfig& config, std::span<double> grad) {
    double loss = 0.0;
    if (!sup.point_targets.empty()) {
        const double inv = 1.0 / static_cast<double>(sup.point_targets.size());
        for (const auto& [idx, target] : sup.point_targets) {
            const double d = scores[idx] - target;
            loss += inv * d * d;
            if (!grad.empty()) grad[idx] += inv * 2.0 * d;
        }
    }
    if (!sup.label_pairs.empty()) {
        const double w = config.online_alpha / static_cast<double>(sup.label_pairs.size());
        for (const auto& [pos, neg] : sup.label_pairs) {
            const double slack = config.margin1 - (scores[pos] - scores[neg]);
            if (slack > 0.0) {
                loss += config.online_alpha * slack / static_cast<double>(sup.label_pairs.size());
                if (!grad.empty()) {
                    grad[pos] -= w;
                    grad[neg] += w;
                }
            }
        }
    }
    loss += modality_weighted_pairwise(scores, sup.upstream_pairs, config, grad);
    return loss;
}

}  // namespace wpr::objectives
