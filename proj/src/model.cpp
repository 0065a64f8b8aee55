#include "wpr/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <json.hpp>

#include "wpr/common.hpp"

namespace wpr::model {

namespace {

constexpr double kLayerNormEps = 1e-5;

// y = W x (+ b). W is row-major rows x cols.
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
            std::span<double> y) {
    const std::size_t rows = y.size();
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = b.empty() ? 0.0 : b[r];
        const double* wr = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = acc;
    }
}

// Backward of y = W x + b: accumulates dW, db and (optionally) dx.
void affine_backward(std::span<const double> w, std::span<const double> x,
                     std::span<const double> dy, std::span<double> dw, std::span<double> db,
                     std::span<double> dx) {
    const std::size_t rows = dy.size();
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        const double g = dy[r];
        if (!db.empty()) db[r] += g;
        double* dwr = dw.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dwr[c] += g * x[c];
    }
    if (!dx.empty()) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * dy[r];
            dx[c] += acc;
        }
    }
}

void tanh_inplace(std::span<double> v) {
    for (auto& x : v) x = std::tanh(x);
}

struct LayerNormCache {
    double mean = 0.0;
    double rstd = 0.0;
    std::vector<double> xhat;
};

void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, LayerNormCache& cache, std::span<double> y) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    cache.mean = mean;
    cache.rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.xhat.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        cache.xhat[i] = (x[i] - mean) * cache.rstd;
        y[i] = gamma[i] * cache.xhat[i] + beta[i];
    }
}

void layer_norm_backward(const LayerNormCache& cache, std::span<const double> gamma,
                         std::span<const double> dy, std::span<double> dgamma,
                         std::span<double> dbeta, std::span<double> dx) {
    const std::size_t d = dy.size();
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dgamma[i] += dy[i] * cache.xhat[i];
        dbeta[i] += dy[i];
        const double dxhat = dy[i] * gamma[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * cache.xhat[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double dxhat = dy[i] * gamma[i];
        dx[i] += cache.rstd * (dxhat - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
    }
}

}  // namespace

// --- Config & feature plumbing ---------------------------------------------

void ModelConfig::validate() const {
    if (embed_dim < 1 || n_heads < 1 || n_blocks < 1 || mlp_hidden < 1 || user_tokens < 1 ||
        epochs < 1 || batch_queries < 1)
        throw ConfigError("ModelConfig: all counts must be >= 1");
    if (embed_dim % n_heads != 0)
        throw ConfigError("ModelConfig: embed_dim must be divisible by n_heads");
    auto check_bounds = [](const std::vector<std::vector<double>>& bs, const char* what) {
        for (const auto& b : bs) {
            for (std::size_t i = 0; i + 1 < b.size(); ++i)
                if (!(b[i] < b[i + 1]))
                    throw ConfigError(std::string("ModelConfig: ") + what +
                                      " boundaries must be strictly increasing");
        }
    };
    check_bounds(item_boundaries, "item");
    check_bounds(user_boundaries, "user");
    if (!(std::isfinite(learning_rate) && learning_rate >= 0.0))
        throw ConfigError("ModelConfig: learning_rate must be finite and >= 0");
}

std::size_t bucketized_size(const std::vector<std::vector<double>>& boundaries) {
    std::size_t n = 0;
    for (const auto& b : boundaries) n += b.size() + 1;
    return n;
}

std::vector<double> bucketize_features(std::span<const double> raw,
                                       const std::vector<std::vector<double>>& boundaries) {
    if (raw.size() != boundaries.size())
        throw ShapeError("bucketize_features: " + std::to_string(raw.size()) +
                         " values but boundaries for " + std::to_string(boundaries.size()));
    std::vector<double> out(bucketized_size(boundaries), 0.0);
    std::size_t base = 0;
    for (std::size_t f = 0; f < raw.size(); ++f) {
        if (std::isnan(raw[f]))
            throw NumericError("bucketize_features: NaN in feature " + std::to_string(f));
        const auto& b = boundaries[f];
        const auto bucket = static_cast<std::size_t>(
            std::upper_bound(b.begin(), b.end(), raw[f]) - b.begin());
        // upper_bound returns the first boundary > value, so a value equal
        // to a boundary falls in the upper bucket.
        const std::size_t shifted =
            (bucket < b.size() && b[bucket] == raw[f]) ? bucket + 1 : bucket;
        out[base + std::min(shifted, b.size())] = 1.0;
        base += b.size() + 1;
    }
    return out;
}

std::vector<std::vector<double>> quantile_boundaries(const std::vector<std::vector<double>>& rows,
                                                     std::size_t buckets_per_feature) {
    if (buckets_per_feature < 1) throw ArgumentError("quantile_boundaries: buckets must be >= 1");
    if (rows.empty()) return {};
    const std::size_t n_features = rows.front().size();
    std::vector<std::vector<double>> out(n_features);
    std::vector<double> column;
    for (std::size_t f = 0; f < n_features; ++f) {
        column.clear();
        for (const auto& r : rows) column.push_back(r[f]);
        std::sort(column.begin(), column.end());
        auto& cuts = out[f];
        for (std::size_t k = 1; k < buckets_per_feature; ++k) {
            const std::size_t idx = k * column.size() / buckets_per_feature;
            const double cut = column[std::min(idx, column.size() - 1)];
            if (cuts.empty() || cut > cuts.back()) cuts.push_back(cut);
        }
    }
    return out;
}

std::vector<double> hybrid_fusion(std::span<const double> e_visual, std::span<const double> e_text,
                                  std::span<const double> gate_w, std::span<const double> gate_b,
                                  std::vector<double>* gate_out) {
    if (e_visual.empty()) return {e_text.begin(), e_text.end()};
    const std::size_t d = e_text.size();
    if (e_visual.size() != d)
        throw ShapeError("hybrid_fusion: visual dim " + std::to_string(e_visual.size()) +
                         " != text dim " + std::to_string(d));
    if (gate_w.size() != d * 2 * d || gate_b.size() != d)
        throw ShapeError("hybrid_fusion: gate parameter shape mismatch");

    std::vector<double> cat(2 * d);
    std::copy(e_visual.begin(), e_visual.end(), cat.begin());
    std::copy(e_text.begin(), e_text.end(), cat.begin() + d);
    std::vector<double> z(d);
    affine(gate_w, gate_b, cat, z);
    for (auto& v : z) v = 1.0 / (1.0 + std::exp(-v));
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = z[i] * e_visual[i] + (1.0 - z[i]) * e_text[i];
    if (gate_out) *gate_out = z;
    return out;
}

// --- Parameter layout --------------------------------------------------------

namespace {
enum class Init { Xavier, Zero, One };
}

RerankerModel::RerankerModel(ModelConfig config, std::size_t text_dim, std::size_t visual_dim)
    : config_(std::move(config)), text_dim_(text_dim), visual_dim_(visual_dim) {
    config_.validate();
    if (config_.embed_dim <= text_dim_)
        throw ConfigError("ModelConfig: embed_dim must exceed the text embedding dim (" +
                          std::to_string(text_dim_) + ")");
    if (visual_dim_ != 0 && config_.use_hybrid_fusion && visual_dim_ != text_dim_)
        throw ShapeError("hybrid fusion requires visual_dim == text_dim, got " +
                         std::to_string(visual_dim_) + " vs " + std::to_string(text_dim_));
    item_bits_ = bucketized_size(config_.item_boundaries);
    user_bits_ = bucketized_size(config_.user_boundaries);
    if (item_bits_ == 0) throw ConfigError("ModelConfig: item_boundaries not configured");
    if (user_bits_ == 0) throw ConfigError("ModelConfig: user_boundaries not configured");

    const std::size_t d = config_.embed_dim;
    const std::size_t ds = text_dim_;
    const std::size_t df = d - ds;
    const std::size_t mh = config_.mlp_hidden;
    const std::size_t ud = config_.user_tokens * d;

    std::size_t offset = 0;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        tensor_index_[name] = tensors_.size();
        tensors_.push_back({name, offset, rows, cols});
        offset += rows * cols;
    };
    add("fusion.w", ds, 2 * ds);
    add("fusion.b", ds, 1);
    add("item.w1", mh, item_bits_);
    add("item.b1", mh, 1);
    add("item.w2", df, mh);
    add("item.b2", df, 1);
    add("user.w1", mh, user_bits_);
    add("user.b1", mh, 1);
    add("user.w2", ud, mh);
    add("user.b2", ud, 1);
    for (std::size_t l = 0; l < config_.n_blocks; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        add(p + "ln1.g", d, 1);
        add(p + "ln1.b", d, 1);
        add(p + "wq", d, d);
        add(p + "wk", d, d);
        add(p + "wv", d, d);
        add(p + "wo", d, d);
        add(p + "wo.b", d, 1);
        add(p + "ln2.g", d, 1);
        add(p + "ln2.b", d, 1);
        add(p + "mlp.w1", mh, d);
        add(p + "mlp.b1", mh, 1);
        add(p + "mlp.w2", d, mh);
        add(p + "mlp.b2", d, 1);
    }
    add("head.w1", mh, d);
    add("head.b1", mh, 1);
    add("head.w2", 1, mh);
    add("head.b2", 1, 1);

    params_.assign(offset, 0.0);
    init_params();
}

void RerankerModel::init_params() {
    auto rng = make_rng(config_.seed, "model-init");
    for (const auto& t : tensors_) {
        Init kind = Init::Xavier;
        if (t.cols == 1) kind = Init::Zero;  // biases and LN offsets
        if (t.name.find("ln1.g") != std::string::npos ||
            t.name.find("ln2.g") != std::string::npos)
            kind = Init::One;
        double* p = params_.data() + t.offset;
        switch (kind) {
            case Init::Zero:
                std::fill(p, p + t.size(), 0.0);
                break;
            case Init::One:
                std::fill(p, p + t.size(), 1.0);
                break;
            case Init::Xavier: {
                const double lim =
                    std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
                std::uniform_real_distribution<double> u(-lim, lim);
                for (std::size_t i = 0; i < t.size(); ++i) p[i] = u(rng);
                break;
            }
        }
    }
}

// --- Forward / backward -------------------------------------------------------

namespace {
std::span<const double> tensor_span(const std::vector<double>& buf, const TensorInfo& t) {
    return std::span<const double>(buf.data() + t.offset, t.size());
}
std::span<double> tensor_span(std::span<double> buf, const TensorInfo& t) {
    return buf.subspan(t.offset, t.size());
}
}  // namespace

struct ForwardPass {
    const RerankerModel& model;
    const core::Query& query;

    struct BlockCache {
        std::vector<double> x_in;
        LayerNormCache ln1;
        std::vector<double> a;
        std::vector<double> q;
        std::vector<double> attn_w;  // H x U
        std::vector<double> o;
        std::vector<double> x_mid;
        LayerNormCache ln2;
        std::vector<double> m;
        std::vector<double> mlp_h1;
        std::vector<double> x_out;
    };
    struct CandCache {
        bool fused = false;
        std::vector<double> gate_cat;  // [e_visual; e_text] when fused
        std::vector<double> z;
        std::vector<double> e_sem;
        std::vector<double> item_bin;
        std::vector<double> item_h1;
        std::vector<double> x0;
        std::vector<BlockCache> blocks;
        std::vector<double> head_h1;
        double score = 0.0;
    };

    std::vector<double> user_bin, user_h1, tokens;
    std::vector<double> keys, vals;  // [L][U][d]
    std::vector<CandCache> cands;
    std::vector<double> scores;

    ForwardPass(const RerankerModel& m, const core::Query& q) : model(m), query(q) { run(); }

    const TensorInfo& tinfo(const std::string& name) const {
        return model.tensors_[model.tensor_index_.at(name)];
    }
    std::span<const double> p(const std::string& name) const {
        return tensor_span(model.params_, tinfo(name));
    }

    void run() {
        const auto& cfg = model.config_;
        const std::size_t d = cfg.embed_dim;
        const std::size_t ds = model.text_dim_;
        const std::size_t df = d - ds;
        const std::size_t mh = cfg.mlp_hidden;
        const std::size_t U = cfg.user_tokens;
        const std::size_t H = cfg.n_heads;
        const std::size_t dh = d / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool attend = cfg.variant == Variant::CrossAttention;

        if (attend) {
            user_bin = bucketize_features(query.user_features, cfg.user_boundaries);
            user_h1.resize(mh);
            affine(p("user.w1"), p("user.b1"), user_bin, user_h1);
            tanh_inplace(user_h1);
            tokens.resize(U * d);
            affine(p("user.w2"), p("user.b2"), user_h1, tokens);

            keys.assign(cfg.n_blocks * U * d, 0.0);
            vals.assign(cfg.n_blocks * U * d, 0.0);
            for (std::size_t l = 0; l < cfg.n_blocks; ++l) {
                const std::string bp = "block" + std::to_string(l) + ".";
                for (std::size_t t = 0; t < U; ++t) {
                    std::span<const double> tok(tokens.data() + t * d, d);
                    std::span<double> kt(keys.data() + (l * U + t) * d, d);
                    std::span<double> vt(vals.data() + (l * U + t) * d, d);
                    affine(p(bp + "wk"), {}, tok, kt);
                    affine(p(bp + "wv"), {}, tok, vt);
                }
            }
        }

        cands.resize(query.candidates.size());
        scores.resize(query.candidates.size());
        for (std::size_t ci = 0; ci < query.candidates.size(); ++ci) {
            const auto& cand = query.candidates[ci];
            auto& cc = cands[ci];

            // semantic embedding: gated fusion or text-only bypass
            std::span<const double> e_text(cand.text_embedding);
            if (cand.visual_embedding && cfg.use_hybrid_fusion) {
                cc.fused = true;
                const auto& ev = *cand.visual_embedding;
                if (ev.size() != ds)
                    throw ShapeError("candidate " + cand.item_id + ": visual dim " +
                                     std::to_string(ev.size()) + " != text dim " +
                                     std::to_string(ds));
                cc.gate_cat.resize(2 * ds);
                std::copy(ev.begin(), ev.end(), cc.gate_cat.begin());
                std::copy(e_text.begin(), e_text.end(), cc.gate_cat.begin() + ds);
                cc.z.resize(ds);
                affine(p("fusion.w"), p("fusion.b"), cc.gate_cat, cc.z);
                for (auto& v : cc.z) v = 1.0 / (1.0 + std::exp(-v));
                cc.e_sem.resize(ds);
                for (std::size_t i = 0; i < ds; ++i)
                    cc.e_sem[i] = cc.z[i] * ev[i] + (1.0 - cc.z[i]) * e_text[i];
            } else {
                cc.e_sem.assign(e_text.begin(), e_text.end());
                if (cc.e_sem.size() != ds)
                    throw ShapeError("candidate " + cand.item_id + ": text dim " +
                                     std::to_string(cc.e_sem.size()) + " != " +
                                     std::to_string(ds));
            }

            cc.item_bin = bucketize_features(cand.features, cfg.item_boundaries);
            cc.item_h1.resize(mh);
            affine(p("item.w1"), p("item.b1"), cc.item_bin, cc.item_h1);
            tanh_inplace(cc.item_h1);
            cc.x0.resize(d);
            std::copy(cc.e_sem.begin(), cc.e_sem.end(), cc.x0.begin());
            std::span<double> e_feat(cc.x0.data() + ds, df);
            affine(p("item.w2"), p("item.b2"), cc.item_h1, e_feat);

            std::vector<double> x = cc.x0;
            if (attend) {
                cc.blocks.resize(cfg.n_blocks);
                for (std::size_t l = 0; l < cfg.n_blocks; ++l) {
                    const std::string bp = "block" + std::to_string(l) + ".";
                    auto& bc = cc.blocks[l];
                    bc.x_in = x;
                    bc.a.resize(d);
                    layer_norm(bc.x_in, p(bp + "ln1.g"), p(bp + "ln1.b"), bc.ln1, bc.a);
                    bc.q.resize(d);
                    affine(p(bp + "wq"), {}, bc.a, bc.q);

                    bc.attn_w.assign(H * U, 0.0);
                    bc.o.assign(d, 0.0);
                    for (std::size_t h = 0; h < H; ++h) {
                        double m_max = -std::numeric_limits<double>::infinity();
                        for (std::size_t t = 0; t < U; ++t) {
                            const double* kt = keys.data() + (l * U + t) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t e = 0; e < dh; ++e) s += bc.q[h * dh + e] * kt[e];
                            s *= scale;
                            bc.attn_w[h * U + t] = s;
                            m_max = std::max(m_max, s);
                        }
                        double z = 0.0;
                        for (std::size_t t = 0; t < U; ++t) {
                            double& w = bc.attn_w[h * U + t];
                            w = std::exp(w - m_max);
                            z += w;
                        }
                        for (std::size_t t = 0; t < U; ++t) {
                            bc.attn_w[h * U + t] /= z;
                            const double w = bc.attn_w[h * U + t];
                            const double* vt = vals.data() + (l * U + t) * d + h * dh;
                            for (std::size_t e = 0; e < dh; ++e) bc.o[h * dh + e] += w * vt[e];
                        }
                    }
                    bc.x_mid.resize(d);
                    affine(p(bp + "wo"), p(bp + "wo.b"), bc.o, bc.x_mid);
                    for (std::size_t i = 0; i < d; ++i) bc.x_mid[i] += bc.x_in[i];

                    bc.m.resize(d);
                    layer_norm(bc.x_mid, p(bp + "ln2.g"), p(bp + "ln2.b"), bc.ln2, bc.m);
                    bc.mlp_h1.resize(mh);
                    affine(p(bp + "mlp.w1"), p(bp + "mlp.b1"), bc.m, bc.mlp_h1);
                    tanh_inplace(bc.mlp_h1);
                    bc.x_out.resize(d);
                    affine(p(bp + "mlp.w2"), p(bp + "mlp.b2"), bc.mlp_h1, bc.x_out);
                    for (std::size_t i = 0; i < d; ++i) bc.x_out[i] += bc.x_mid[i];
                    x = bc.x_out;
                }
            }

            cc.head_h1.resize(mh);
            affine(p("head.w1"), p("head.b1"), x, cc.head_h1);
            tanh_inplace(cc.head_h1);
            double s = p("head.b2")[0];
            std::span<const double> hw2 = p("head.w2");
            for (std::size_t i = 0; i < mh; ++i) s += hw2[i] * cc.head_h1[i];
            cc.score = s;
            scores[ci] = s;
        }
    }

    void backward(std::span<const double> dscore, std::span<double> grad) const {
        const auto& cfg = model.config_;
        const std::size_t d = cfg.embed_dim;
        const std::size_t ds = model.text_dim_;
        const std::size_t df = d - ds;
        const std::size_t mh = cfg.mlp_hidden;
        const std::size_t U = cfg.user_tokens;
        const std::size_t H = cfg.n_heads;
        const std::size_t dh = d / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool attend = cfg.variant == Variant::CrossAttention;

        auto g = [&](const std::string& name) { return tensor_span(grad, tinfo(name)); };

        std::vector<double> dkeys, dvals;
        if (attend) {
            dkeys.assign(cfg.n_blocks * U * d, 0.0);
            dvals.assign(cfg.n_blocks * U * d, 0.0);
        }

        std::vector<double> dx(d), dh1(mh), dpre(mh);
        for (std::size_t ci = 0; ci < cands.size(); ++ci) {
            const auto& cc = cands[ci];
            const double dsc = dscore[ci];
            if (dsc == 0.0) continue;

            // head
            std::fill(dh1.begin(), dh1.end(), 0.0);
            std::span<const double> hw2 = p("head.w2");
            auto ghw2 = g("head.w2");
            for (std::size_t i = 0; i < mh; ++i) {
                ghw2[i] += dsc * cc.head_h1[i];
                dh1[i] = dsc * hw2[i];
            }
            g("head.b2")[0] += dsc;
            for (std::size_t i = 0; i < mh; ++i)
                dpre[i] = dh1[i] * (1.0 - cc.head_h1[i] * cc.head_h1[i]);
            const std::vector<double>& head_in =
                attend ? cc.blocks.back().x_out : cc.x0;
            std::fill(dx.begin(), dx.end(), 0.0);
            affine_backward(p("head.w1"), head_in, dpre, g("head.w1"), g("head.b1"), dx);

            if (attend) {
                for (std::size_t l = cfg.n_blocks; l-- > 0;) {
                    const std::string bp = "block" + std::to_string(l) + ".";
                    const auto& bc = cc.blocks[l];

                    // x_out = x_mid + mlp(m(x_mid)); dx holds d x_out
                    std::fill(dh1.begin(), dh1.end(), 0.0);
                    std::vector<double> dmlp_h1(mh, 0.0);
                    std::vector<double> dm(d, 0.0);
                    // mlp.w2 backward
                    for (std::size_t r = 0; r < d; ++r) {
                        const double gr = dx[r];
                        if (gr == 0.0) continue;
                        auto gw2 = g(bp + "mlp.w2");
                        const std::span<const double> w2 = p(bp + "mlp.w2");
                        for (std::size_t c = 0; c < mh; ++c) {
                            gw2[r * mh + c] += gr * bc.mlp_h1[c];
                            dmlp_h1[c] += w2[r * mh + c] * gr;
                        }
                        g(bp + "mlp.b2")[r] += gr;
                    }
                    for (std::size_t i = 0; i < mh; ++i)
                        dpre[i] = dmlp_h1[i] * (1.0 - bc.mlp_h1[i] * bc.mlp_h1[i]);
                    affine_backward(p(bp + "mlp.w1"), bc.m, dpre, g(bp + "mlp.w1"),
                                    g(bp + "mlp.b1"), dm);
                    // dx currently also flows through the residual into x_mid
                    std::vector<double> dx_mid = dx;
                    layer_norm_backward(bc.ln2, p(bp + "ln2.g"), dm, g(bp + "ln2.g"),
                                        g(bp + "ln2.b"), dx_mid);

                    // attention branch: x_mid = x_in + wo * o + wo.b
                    std::vector<double> do_(d, 0.0);
                    affine_backward(p(bp + "wo"), bc.o, dx_mid, g(bp + "wo"), g(bp + "wo.b"),
                                    do_);
                    std::vector<double> dq(d, 0.0);
                    for (std::size_t h = 0; h < H; ++h) {
                        double wsum = 0.0;
                        std::vector<double> dw(U, 0.0);
                        for (std::size_t t = 0; t < U; ++t) {
                            const double* vt = vals.data() + (l * U + t) * d + h * dh;
                            double* dvt = dvals.data() + (l * U + t) * d + h * dh;
                            const double w = bc.attn_w[h * U + t];
                            double acc = 0.0;
                            for (std::size_t e = 0; e < dh; ++e) {
                                acc += do_[h * dh + e] * vt[e];
                                dvt[e] += w * do_[h * dh + e];
                            }
                            dw[t] = acc;
                            wsum += w * acc;
                        }
                        for (std::size_t t = 0; t < U; ++t) {
                            const double w = bc.attn_w[h * U + t];
                            const double dst = w * (dw[t] - wsum) * scale;
                            const double* kt = keys.data() + (l * U + t) * d + h * dh;
                            double* dkt = dkeys.data() + (l * U + t) * d + h * dh;
                            for (std::size_t e = 0; e < dh; ++e) {
                                dq[h * dh + e] += dst * kt[e];
                                dkt[e] += dst * bc.q[h * dh + e];
                            }
                        }
                    }
                    std::vector<double> da(d, 0.0);
                    affine_backward(p(bp + "wq"), bc.a, dq, g(bp + "wq"), {}, da);
                    // x_in receives the residual plus the LN1 path
                    dx = dx_mid;
                    layer_norm_backward(bc.ln1, p(bp + "ln1.g"), da, g(bp + "ln1.g"),
                                        g(bp + "ln1.b"), dx);
                }
            }

            // dx now holds d loss / d x0
            std::span<const double> de_feat(dx.data() + ds, df);
            std::fill(dh1.begin(), dh1.end(), 0.0);
            {
                auto gw2 = g("item.w2");
                const std::span<const double> w2 = p("item.w2");
                for (std::size_t r = 0; r < df; ++r) {
                    const double gr = de_feat[r];
                    if (gr == 0.0) continue;
                    for (std::size_t c = 0; c < mh; ++c) {
                        gw2[r * mh + c] += gr * cc.item_h1[c];
                        dh1[c] += w2[r * mh + c] * gr;
                    }
                    g("item.b2")[r] += gr;
                }
            }
            for (std::size_t i = 0; i < mh; ++i)
                dpre[i] = dh1[i] * (1.0 - cc.item_h1[i] * cc.item_h1[i]);
            affine_backward(p("item.w1"), cc.item_bin, dpre, g("item.w1"), g("item.b1"), {});

            if (cc.fused) {
                const auto& ev = *query.candidates[ci].visual_embedding;
                const auto& et = query.candidates[ci].text_embedding;
                std::vector<double> du(ds);
                for (std::size_t i = 0; i < ds; ++i) {
                    const double dz = dx[i] * (ev[i] - et[i]);
                    du[i] = dz * cc.z[i] * (1.0 - cc.z[i]);
                }
                affine_backward(p("fusion.w"), cc.gate_cat, du, g("fusion.w"), g("fusion.b"), {});
            }
        }

        if (attend) {
            // token gradients from every block's keys/values, then the
            // user encoder, once per query.
            std::vector<double> dtok(U * d, 0.0);
            for (std::size_t l = 0; l < cfg.n_blocks; ++l) {
                const std::string bp = "block" + std::to_string(l) + ".";
                for (std::size_t t = 0; t < U; ++t) {
                    std::span<const double> tok(tokens.data() + t * d, d);
                    std::span<const double> dkt(dkeys.data() + (l * U + t) * d, d);
                    std::span<const double> dvt(dvals.data() + (l * U + t) * d, d);
                    std::span<double> dtt(dtok.data() + t * d, d);
                    affine_backward(p(bp + "wk"), tok, dkt, g(bp + "wk"), {}, dtt);
                    affine_backward(p(bp + "wv"), tok, dvt, g(bp + "wv"), {}, dtt);
                }
            }
            std::fill(dh1.begin(), dh1.end(), 0.0);
            {
                auto gw2 = g("user.w2");
                const std::span<const double> w2 = p("user.w2");
                for (std::size_t r = 0; r < U * d; ++r) {
                    const double gr = dtok[r];
                    if (gr == 0.0) continue;
                    for (std::size_t c = 0; c < mh; ++c) {
                        gw2[r * mh + c] += gr * user_h1[c];
                        dh1[c] += w2[r * mh + c] * gr;
                    }
                    g("user.b2")[r] += gr;
                }
            }
            for (std::size_t i = 0; i < mh; ++i)
                dpre[i] = dh1[i] * (1.0 - user_h1[i] * user_h1[i]);
            affine_backward(p("user.w1"), user_bin, dpre, g("user.w1"), g("user.b1"), {});
        }
    }
};

std::vector<double> RerankerModel::forward(const core::Query& query) const {
    return ForwardPass(*this, query).scores;
}

core::RankedList RerankerModel::score_page(const core::Query& query) const {
    const auto scores = forward(query);
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i)
        scored.emplace_back(query.candidates[i].item_id, scores[i]);
    return core::make_ranked_list(query.query_id, std::move(scored));
}

void RerankerModel::forward_backward(const core::Query& query, std::span<const double> score_grad,
                                     std::span<double> param_grad) const {
    ForwardPass pass(*this, query);
    pass.backward(score_grad, param_grad);
}

// --- Checkpointing -------------------------------------------------------------

void RerankerModel::save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "wpr-checkpoint-v1";
    j["text_dim"] = text_dim_;
    j["visual_dim"] = visual_dim_;
    nlohmann::json c;
    c["embed_dim"] = config_.embed_dim;
    c["n_heads"] = config_.n_heads;
    c["n_blocks"] = config_.n_blocks;
    c["mlp_hidden"] = config_.mlp_hidden;
    c["user_tokens"] = config_.user_tokens;
    c["item_boundaries"] = config_.item_boundaries;
    c["user_boundaries"] = config_.user_boundaries;
    c["learning_rate"] = config_.learning_rate;
    c["epochs"] = config_.epochs;
    c["batch_queries"] = config_.batch_queries;
    c["seed"] = config_.seed;
    c["variant"] = config_.variant == Variant::CrossAttention ? "cross_attention" : "mlp";
    c["use_hybrid_fusion"] = config_.use_hybrid_fusion;
    j["config"] = std::move(c);
    j["params"] = params_;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open for writing: " + path);
    f << j.dump() << '\n';
}

RerankerModel RerankerModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint " + path + ": " + e.what());
    }
    if (j.value("format", "") != "wpr-checkpoint-v1")
        throw SchemaError("checkpoint " + path + ": unknown format");
    const auto& c = j.at("config");
    ModelConfig cfg;
    cfg.embed_dim = c.at("embed_dim").get<std::size_t>();
    cfg.n_heads = c.at("n_heads").get<std::size_t>();
    cfg.n_blocks = c.at("n_blocks").get<std::size_t>();
    cfg.mlp_hidden = c.at("mlp_hidden").get<std::size_t>();
    cfg.user_tokens = c.at("user_tokens").get<std::size_t>();
    cfg.item_boundaries = c.at("item_boundaries").get<std::vector<std::vector<double>>>();
    cfg.user_boundaries = c.at("user_boundaries").get<std::vector<std::vector<double>>>();
    cfg.learning_rate = c.at("learning_rate").get<double>();
    cfg.epochs = c.at("epochs").get<std::size_t>();
    cfg.batch_queries = c.at("batch_queries").get<std::size_t>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
    cfg.variant =
        c.at("variant").get<std::string>() == "mlp" ? Variant::Mlp : Variant::CrossAttention;
    cfg.use_hybrid_fusion = c.at("use_hybrid_fusion").get<bool>();
    RerankerModel m(std::move(cfg), j.at("text_dim").get<std::size_t>(),
                    j.at("visual_dim").get<std::size_t>());
    auto params = j.at("params").get<std::vector<double>>();
    if (params.size() != m.params_.size())
        throw SchemaError("checkpoint " + path + ": parameter count " +
                          std::to_string(params.size()) + " != expected " +
                          std::to_string(m.params_.size()));
    m.params_ = std::move(params);
    return m;
}

// --- Training supervision -------------------------------------------------------

annotate::AnnotationPlan full_label_plan(const core::Dataset& dataset) {
    annotate::AnnotationPlan plan;
    for (const auto& q : dataset.queries) {
        for (const auto& c : q.candidates) {
            if (c.label)
                plan.set_labeled(q.query_id, c.item_id, *c.label);
            else
                plan.set_unlabeled(q.query_id, c.item_id);
        }
    }
    plan.oracle_calls = plan.labeled_count();
    return plan;
}

namespace {

struct QueryTraining {
    const core::Query* query = nullptr;
    objectives::QuerySupervision listwise;
    objectives::PairQuerySupervision pairs;
};

std::vector<QueryTraining> build_training(const core::Dataset& dataset,
                                          const annotate::AnnotationPlan& plan,
                                          const TrainOptions& options) {
    std::set<int> visual_modalities;
    for (const auto& q : dataset.queries)
        for (const auto& c : q.candidates)
            if (c.visual_embedding) visual_modalities.insert(c.modality);

    std::vector<QueryTraining> out;
    out.reserve(dataset.queries.size());
    for (const auto& q : dataset.queries) {
        QueryTraining qt;
        qt.query = &q;

        std::vector<std::optional<int>> grades(q.candidates.size());
        for (std::size_t i = 0; i < q.candidates.size(); ++i) {
            const auto& c = q.candidates[i];
            if (!plan.covers(q.query_id, c.item_id))
                throw ArgumentError("annotation plan does not cover (" + q.query_id + ", " +
                                    c.item_id + ")");
            grades[i] = plan.grade_of(q.query_id, c.item_id);
        }

        // Label permutation: grade descending, item_id ascending on ties.
        std::vector<int> labeled;
        for (std::size_t i = 0; i < grades.size(); ++i)
            if (grades[i]) labeled.push_back(static_cast<int>(i));
        std::sort(labeled.begin(), labeled.end(), [&](int a, int b) {
            if (*grades[a] != *grades[b]) return *grades[a] > *grades[b];
            return q.candidates[a].item_id < q.candidates[b].item_id;
        });
        qt.listwise.label_order = labeled;

        // One distillation list per modality, upstream-score descending.
        for (const auto& mod : dataset.modalities) {
            std::vector<int> order;
            for (std::size_t i = 0; i < q.candidates.size(); ++i)
                if (q.candidates[i].modality == mod.id) order.push_back(static_cast<int>(i));
            if (order.size() < 2) continue;
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (q.candidates[a].upstream_score != q.candidates[b].upstream_score)
                    return q.candidates[a].upstream_score > q.candidates[b].upstream_score;
                return q.candidates[a].item_id < q.candidates[b].item_id;
            });
            objectives::QuerySupervision::DistillList dl;
            dl.weight = visual_modalities.count(mod.id) ? objectives::DistillWeight::Alpha
                                                        : objectives::DistillWeight::Beta;
            dl.order = std::move(order);
            qt.listwise.distill_lists.push_back(std::move(dl));
        }

        if (options.objective == TrainObjective::PairSupervision) {
            std::map<std::string, int> index_of;
            for (std::size_t i = 0; i < q.candidates.size(); ++i)
                index_of[q.candidates[i].item_id] = static_cast<int>(i);

            auto it = options.pair_supervision.find(q.query_id);
            if (it != options.pair_supervision.end()) {
                for (const auto& p : it->second.pairs) {
                    const int w = index_of.at(p.winner_id);
                    const int l = index_of.at(p.loser_id);
                    if (p.source == annotate::PairSource::Label)
                        qt.pairs.label_pairs.emplace_back(w, l);
                    else
                        qt.pairs.upstream_pairs.push_back({w, l, q.candidates[w].modality});
                }
                for (const auto& pt : it->second.points)
                    qt.pairs.point_targets.emplace_back(index_of.at(pt.item_id),
                                                        static_cast<double>(pt.grade) / 4.0);
            } else {
                // Derive from the plan: graded pairs order by grade, same-
                // modality pairs lacking a grade order by upstream score.
                const auto n = q.candidates.size();
                for (std::size_t a = 0; a < n; ++a) {
                    for (std::size_t b = a + 1; b < n; ++b) {
                        const auto& ca = q.candidates[a];
                        const auto& cb = q.candidates[b];
                        if (grades[a] && grades[b]) {
                            if (*grades[a] > *grades[b])
                                qt.pairs.label_pairs.emplace_back(a, b);
                            else if (*grades[b] > *grades[a])
                                qt.pairs.label_pairs.emplace_back(b, a);
                        } else if (ca.modality == cb.modality) {
                            if (ca.upstream_score > cb.upstream_score)
                                qt.pairs.upstream_pairs.push_back(
                                    {static_cast<int>(a), static_cast<int>(b), ca.modality});
                            else if (cb.upstream_score > ca.upstream_score)
                                qt.pairs.upstream_pairs.push_back(
                                    {static_cast<int>(b), static_cast<int>(a), ca.modality});
                        }
                    }
                }
                for (std::size_t i = 0; i < n; ++i)
                    if (grades[i])
                        qt.pairs.point_targets.emplace_back(static_cast<int>(i),
                                                            static_cast<double>(*grades[i]) / 4.0);
            }
        }
        out.push_back(std::move(qt));
    }
    return out;
}

double query_objective(std::span<const double> scores, const QueryTraining& qt,
                       const objectives::LossConfig& loss_config, const TrainOptions& options,
                       std::span<double> dscore) {
    if (options.objective == TrainObjective::CombinedListwise)
        return objectives::combined_objective_query(scores, qt.listwise, loss_config, dscore);
    return objectives::pair_supervision_objective(scores, qt.pairs, loss_config, dscore);
}

}  // namespace

std::pair<RerankerModel, TrainLog> train(const core::Dataset& dataset,
                                         const annotate::AnnotationPlan& plan,
                                         const ModelConfig& model_config,
                                         const objectives::LossConfig& loss_config,
                                         const TrainOptions& options) {
    loss_config.validate();
    RerankerModel model(model_config, dataset.text_dim, dataset.visual_dim);
    const auto training = build_training(dataset, plan, options);
    TrainLog log;
    if (training.empty()) throw ArgumentError("train: dataset has no queries");

    std::vector<std::size_t> order(training.size());
    std::iota(order.begin(), order.end(), 0);
    auto order_rng = make_rng(model_config.seed, "batch-order");

    std::vector<double> grad(model.params().size());
    std::vector<double> dscore;
    for (std::size_t epoch = 0; epoch < model_config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += model_config.batch_queries) {
            const std::size_t bn = std::min(model_config.batch_queries, order.size() - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t k = 0; k < bn; ++k) {
                const auto& qt = training[order[start + k]];
                ForwardPass pass(model, *qt.query);
                dscore.assign(pass.scores.size(), 0.0);
                epoch_loss += query_objective(pass.scores, qt, loss_config, options, dscore);
                pass.backward(dscore, grad);
            }
            const double lr = model_config.learning_rate / static_cast<double>(bn);
            auto& params = model.params();
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
        }
        epoch_loss /= static_cast<double>(training.size());
        if (!std::isfinite(epoch_loss))
            throw TrainingError("training diverged at epoch " + std::to_string(epoch));
        log.epoch_loss.push_back(epoch_loss);
    }
    return {std::move(model), std::move(log)};
}

double batch_loss(const RerankerModel& model, const core::Dataset& dataset,
                  const annotate::AnnotationPlan& plan, const objectives::LossConfig& loss_config,
                  const TrainOptions& options, std::span<double> param_grad) {
    const auto training = build_training(dataset, plan, options);
    if (training.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(training.size());
    double total = 0.0;
    std::vector<double> dscore;
    for (const auto& qt : training) {
        ForwardPass pass(model, *qt.query);
        dscore.assign(pass.scores.size(), 0.0);
        total += query_objective(pass.scores, qt, loss_config, options,
                                 param_grad.empty() ? std::span<double>{} : dscore);
        if (!param_grad.empty()) {
            for (auto& g : dscore) g *= inv;
            pass.backward(dscore, param_grad);
        }
    }
    return total * inv;
}

double grad_check(const RerankerModel& model, const core::Dataset& dataset,
                  const annotate::AnnotationPlan& plan, const objectives::LossConfig& loss_config,
                  const TrainOptions& options, const GradCheckOptions& check) {
    if (!(check.step > 0.0)) throw ArgumentError("grad_check: step must be > 0");
    std::vector<double> analytic(model.params().size(), 0.0);
    batch_loss(model, dataset, plan, loss_config, options, analytic);

    if (!check.corrupt_tensor.empty()) {
        bool found = false;
        for (const auto& t : model.tensors()) {
            if (t.name == check.corrupt_tensor) {
                for (std::size_t i = 0; i < t.size(); ++i)
                    analytic[t.offset + i] *= check.corrupt_scale;
                found = true;
            }
        }
        if (!found)
            throw ArgumentError("grad_check: unknown tensor '" + check.corrupt_tensor + "'");
    }

    RerankerModel probe = model;
    auto& params = probe.params();
    auto rng = make_rng(check.seed, "grad-check");
    double worst = 0.0;
    for (const auto& t : model.tensors()) {
        const bool exhaustive =
            check.samples_per_tensor == 0 || check.samples_per_tensor >= t.size();
        const std::size_t n = exhaustive ? t.size() : check.samples_per_tensor;
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t idx =
                t.offset + (exhaustive ? s : rng() % t.size());
            const double saved = params[idx];
            params[idx] = saved + check.step;
            const double lp = batch_loss(probe, dataset, plan, loss_config, options, {});
            params[idx] = saved - check.step;
            const double lm = batch_loss(probe, dataset, plan, loss_config, options, {});
            params[idx] = saved;
            const double fd = (lp - lm) / (2.0 * check.step);
            const double a = analytic[idx];
            const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-4});
            worst = std::max(worst, std::fabs(a - fd) / denom);
        }
    }
    return worst;
}

}  // namespace wpr::model
