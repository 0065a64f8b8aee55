#include "wpr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include "wpr/common.hpp"
#include "wpr/config.hpp"

namespace wpr::datagen {

void SynthConfig::validate() const {
    if (n_queries < 1) throw ConfigError("SynthConfig.n_queries must be >= 1");
    if (modalities.empty()) throw ConfigError("SynthConfig.modalities must be nonempty");
    if (text_dim < 1) throw ConfigError("SynthConfig.text_dim must be >= 1");
    if (item_feature_dim < 1) throw ConfigError("SynthConfig.item_feature_dim must be >= 1");
    if (user_feature_dim < 1) throw ConfigError("SynthConfig.user_feature_dim must be >= 1");
    if (!(label_noise >= 0.0 && label_noise <= 1.0))
        throw ConfigError("SynthConfig.label_noise must be in [0,1]");
    if (!(user_weight >= 0.0 && user_weight < 1.0))
        throw ConfigError("SynthConfig.user_weight must be in [0,1)");
    if (!(visual_signal >= 0.0 && visual_signal <= 1.0))
        throw ConfigError("SynthConfig.visual_signal must be in [0,1]");
    if (!(embedding_noise >= 0.0))
        throw ConfigError("SynthConfig.embedding_noise must be >= 0");
    for (std::size_t i = 0; i < grade_cut.size(); ++i) {
        const double lo = i == 0 ? 0.0 : grade_cut[i - 1];
        if (!(grade_cut[i] > lo && grade_cut[i] < 1.0))
            throw ConfigError("SynthConfig.grade_cut must be strictly increasing within (0,1)");
    }
    bool any_visual = false;
    for (std::size_t i = 0; i < modalities.size(); ++i) {
        const auto& m = modalities[i];
        const std::string tag = "SynthConfig.modalities[" + std::to_string(i) + "].";
        if (m.queue_min < 1) throw ConfigError(tag + "queue_min must be >= 1");
        if (m.queue_max < m.queue_min) throw ConfigError(tag + "queue_max must be >= queue_min");
        if (!(m.beta_a > 0.0)) throw ConfigError(tag + "beta_a must be > 0");
        if (!(m.beta_b > 0.0)) throw ConfigError(tag + "beta_b must be > 0");
        if (!(m.rho >= 0.0 && m.rho <= 1.0)) throw ConfigError(tag + "rho must be in [0,1]");
        any_visual = any_visual || m.has_visual;
    }
    if (any_visual && visual_dim < 1)
        throw ConfigError("SynthConfig.visual_dim must be >= 1 when a modality has visuals");
}

// --- LabelOracle --------------------------------------------------------

struct LabelOracle::State {
    std::unordered_map<std::string, int> grades;
    std::unordered_set<std::string> queried;
    mutable std::mutex mu;
};

namespace {
std::string pair_key(const std::string& q, const std::string& i) {
    return q + '\x1f' + i;
}
}  // namespace

LabelOracle::LabelOracle() : state_(std::make_shared<State>()) {}

LabelOracle LabelOracle::from_dataset(const core::Dataset& dataset) {
    LabelOracle o;
    for (const auto& q : dataset.queries) {
        for (const auto& c : q.candidates) {
            if (c.label) o.state_->grades[pair_key(q.query_id, c.item_id)] = *c.label;
        }
    }
    return o;
}

int LabelOracle::label(const std::string& query_id, const std::string& item_id) const {
    const std::string key = pair_key(query_id, item_id);
    auto it = state_->grades.find(key);
    if (it == state_->grades.end())
        throw LookupError("oracle has no grade for (" + query_id + ", " + item_id + ")");
    {
        std::lock_guard<std::mutex> lock(state_->mu);
        state_->queried.insert(key);
    }
    return it->second;
}

std::size_t LabelOracle::query_count() const {
    std::lock_guard<std::mutex> lock(state_->mu);
    return state_->queried.size();
}

// --- Generation ---------------------------------------------------------

namespace {

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double beta_quantile(double a, double b, double p) {
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    return boost::math::ibeta_inv(a, b, p);
}

// Gaussian copula: Spearman rho_s between two continuous marginals is
// (6/pi)*asin(rho_pearson/2) on the underlying normals; invert to hit
// the configured target.
double pearson_for_spearman(double rho_s) {
    return 2.0 * std::sin(M_PI * rho_s / 6.0);
}

std::vector<double> random_unit_vector(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(dim);
    double norm2 = 0.0;
    for (auto& x : v) {
        x = normal(rng);
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
    for (auto& x : v) x *= inv;
    return v;
}

std::string zero_pad(std::size_t value, int width) {
    std::string s = std::to_string(value);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

struct ItemDraw {
    std::size_t modality_index;  // index into config.modalities
    double tau = 0.0;            // text-visible signal
    double nu = 0.0;             // visual-only signal
    double latent = 0.0;         // full latent relevance incl. user term
    double upstream = 0.0;
};

}  // namespace

std::pair<core::Dataset, LabelOracle> generate_dataset(
    const SynthConfig& config, std::vector<std::vector<double>>* latent_out) {
    config.validate();
    if (latent_out) latent_out->clear();

    const std::size_t M = config.modalities.size();
    const bool any_visual = std::any_of(config.modalities.begin(), config.modalities.end(),
                                        [](const ModalitySpec& m) { return m.has_visual; });

    core::Dataset ds;
    ds.text_dim = config.text_dim;
    ds.visual_dim = any_visual ? config.visual_dim : 0;
    ds.item_feature_dim = config.item_feature_dim;
    ds.user_feature_dim = config.user_feature_dim;
    for (std::size_t m = 0; m < M; ++m)
        ds.modalities.push_back({static_cast<int>(m + 1), config.modalities[m].name});

    // Fixed per-dataset embedding geometry: one signal direction per
    // embedding space plus a per-modality offset, so modalities are
    // separable from embeddings alone.
    auto dir_rng = make_rng(config.seed, "directions");
    const auto text_dir = random_unit_vector(dir_rng, config.text_dim);
    const auto visual_dir =
        any_visual ? random_unit_vector(dir_rng, config.visual_dim) : std::vector<double>{};
    std::vector<std::vector<double>> text_offset(M);
    for (std::size_t m = 0; m < M; ++m) {
        text_offset[m] = random_unit_vector(dir_rng, config.text_dim);
        for (auto& x : text_offset[m]) x *= 0.5;
    }

    // The user-preference term is gated by item quality (modality taste
    // separates good items, not junk), so latent relevance is
    // base + w * pref * affinity * sigmoid(2 * base). The variance factor
    // E[sigmoid(2B)^2] for standard normal B is ~0.454.
    const double latent_sd =
        std::sqrt(1.0 + 0.454 * config.user_weight * config.user_weight);
    const int qid_width = static_cast<int>(std::to_string(config.n_queries).size());

    ds.queries.reserve(config.n_queries);
    for (std::size_t qi = 0; qi < config.n_queries; ++qi) {
        core::Query query;
        query.query_id = "q" + zero_pad(qi, qid_width);

        auto user_rng = make_rng(config.seed, "user", qi);
        std::normal_distribution<double> normal(0.0, 1.0);
        query.user_features.resize(config.user_feature_dim);
        for (auto& x : query.user_features) x = normal(user_rng);
        // First user feature is the modality-preference axis.
        const double affinity = query.user_features[0];

        std::vector<ItemDraw> draws;
        std::vector<std::vector<std::size_t>> per_modality(M);
        for (std::size_t m = 0; m < M; ++m) {
            const auto& spec = config.modalities[m];
            auto rng = make_rng(config.seed, "modality", m, qi);
            std::uniform_int_distribution<std::size_t> len_dist(spec.queue_min, spec.queue_max);
            const std::size_t n_m = len_dist(rng);
            const double pref = spec.has_visual ? 1.0 : -1.0;
            const double rho_p = pearson_for_spearman(spec.rho);
            const double vs = spec.has_visual ? config.visual_signal : 0.0;
            const double ts = std::sqrt(1.0 - vs * vs);
            for (std::size_t j = 0; j < n_m; ++j) {
                ItemDraw d;
                d.modality_index = m;
                d.tau = normal(rng);
                d.nu = normal(rng);
                const double base = ts * d.tau + vs * d.nu;
                const double quality_gate = 1.0 / (1.0 + std::exp(-2.0 * base));
                d.latent = base + config.user_weight * pref * affinity * quality_gate;
                const double z_r = d.latent / latent_sd;
                const double eta = normal(rng);
                const double z_g = rho_p * z_r + std::sqrt(std::max(0.0, 1.0 - rho_p * rho_p)) * eta;
                d.upstream = beta_quantile(spec.beta_a, spec.beta_b, phi(z_g));
                per_modality[m].push_back(draws.size());
                draws.push_back(d);
            }
        }

        // Grades: quantile-bucket the latent relevance within the query
        // into the 0..4 scale, using the configured rank-fraction cuts.
        // The top-ranked item always clears every cut, so the most
        // relevant item of a query is graded 4.
        const std::size_t n = draws.size();
        std::vector<std::size_t> by_latent(n);
        std::iota(by_latent.begin(), by_latent.end(), 0);
        std::sort(by_latent.begin(), by_latent.end(), [&](std::size_t a, std::size_t b) {
            if (draws[a].latent != draws[b].latent) return draws[a].latent < draws[b].latent;
            return a < b;
        });
        std::vector<int> grade(n);
        for (std::size_t rank = 0; rank < n; ++rank) {
            const double frac = static_cast<double>(rank + 1) / static_cast<double>(n);
            int g = 0;
            for (double cut : config.grade_cut) g += frac > cut ? 1 : 0;
            grade[by_latent[rank]] = g;
        }

        // Label noise flips a grade to a uniform neighbor. Drawn from its
        // own stream so noisy and noiseless runs share all latents.
        auto noise_rng = make_rng(config.seed, "labels", qi);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (std::size_t k = 0; k < n; ++k) {
            const double u = unit(noise_rng);
            const double pick = unit(noise_rng);
            if (u < config.label_noise) {
                int g = grade[k];
                if (g == 0)
                    g = 1;
                else if (g == 4)
                    g = 3;
                else
                    g = (pick < 0.5) ? g - 1 : g + 1;
                grade[k] = g;
            }
        }

        // Emit candidates grouped by modality, each queue sorted by
        // upstream score descending; item ids encode the queue position.
        std::vector<double> query_latents;
        for (std::size_t m = 0; m < M; ++m) {
            auto& queue = per_modality[m];
            std::sort(queue.begin(), queue.end(), [&](std::size_t a, std::size_t b) {
                if (draws[a].upstream != draws[b].upstream)
                    return draws[a].upstream > draws[b].upstream;
                return a < b;
            });
            const auto& spec = config.modalities[m];
            auto emb_rng = make_rng(config.seed, "embeddings", m, qi);
            for (std::size_t pos = 0; pos < queue.size(); ++pos) {
                const auto& d = draws[queue[pos]];
                core::Candidate c;
                c.item_id = query.query_id + "_m" + std::to_string(m + 1) + "_i" + zero_pad(pos, 2);
                c.modality = static_cast<int>(m + 1);
                c.upstream_score = d.upstream;
                c.label = grade[queue[pos]];

                c.features.resize(config.item_feature_dim);
                c.features[0] = static_cast<double>(m + 1);
                if (config.item_feature_dim > 1)
                    c.features[1] = 0.5 * d.tau + 0.5 * normal(emb_rng);
                for (std::size_t f = 2; f < config.item_feature_dim; ++f)
                    c.features[f] = normal(emb_rng);

                c.text_embedding.resize(config.text_dim);
                for (std::size_t t = 0; t < config.text_dim; ++t)
                    c.text_embedding[t] = d.tau * text_dir[t] + text_offset[m][t] +
                                          config.embedding_noise * normal(emb_rng);
                if (spec.has_visual) {
                    std::vector<double> ve(config.visual_dim);
                    for (std::size_t t = 0; t < config.visual_dim; ++t)
                        ve[t] = d.nu * visual_dir[t] + config.embedding_noise * normal(emb_rng);
                    c.visual_embedding = std::move(ve);
                }
                query.candidates.push_back(std::move(c));
                query_latents.push_back(d.latent);
            }
        }
        if (latent_out) latent_out->push_back(std::move(query_latents));
        ds.queries.push_back(std::move(query));
    }

    LabelOracle oracle = LabelOracle::from_dataset(ds);
    return {std::move(ds), std::move(oracle)};
}

// --- JSONL ingest ---------------------------------------------------------

namespace {

const nlohmann::json& require_field(const nlohmann::json& j, const char* name,
                                    std::size_t line_no) {
    auto it = j.find(name);
    if (it == j.end())
        throw ParseError("line " + std::to_string(line_no) + ": missing \"" +
                         std::string(name) + "\"");
    return *it;
}

std::vector<double> as_double_vector(const nlohmann::json& j, const char* name,
                                     std::size_t line_no) {
    if (!j.is_array())
        throw ParseError("line " + std::to_string(line_no) + ": \"" + std::string(name) +
                         "\" must be an array");
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number())
            throw ParseError("line " + std::to_string(line_no) + ": \"" + std::string(name) +
                             "\" must contain numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace

core::Dataset ingest_jsonl_stream(std::istream& in) {
    core::Dataset ds;
    bool dims_set = false;
    bool visual_dim_set = false;
    int max_modality = 0;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object())
            throw ParseError("line " + std::to_string(line_no) + ": expected an object");

        core::Query q;
        const auto& jq = require_field(j, "query_id", line_no);
        if (!jq.is_string())
            throw ParseError("line " + std::to_string(line_no) + ": \"query_id\" must be a string");
        q.query_id = jq.get<std::string>();
        q.user_features =
            as_double_vector(require_field(j, "user_features", line_no), "user_features", line_no);

        const auto& jc = require_field(j, "candidates", line_no);
        if (!jc.is_array())
            throw ParseError("line " + std::to_string(line_no) + ": \"candidates\" must be an array");
        for (const auto& cj : jc) {
            core::Candidate c;
            c.item_id = require_field(cj, "item_id", line_no).get<std::string>();
            const auto& jm = require_field(cj, "modality", line_no);
            if (!jm.is_number_integer())
                throw ParseError("line " + std::to_string(line_no) +
                                 ": \"modality\" must be an integer");
            c.modality = jm.get<int>();
            max_modality = std::max(max_modality, c.modality);
            c.upstream_score = require_field(cj, "upstream_score", line_no).get<double>();
            c.features = as_double_vector(require_field(cj, "features", line_no), "features", line_no);
            c.text_embedding = as_double_vector(require_field(cj, "text_embedding", line_no),
                                                "text_embedding", line_no);
            if (auto it = cj.find("visual_embedding"); it != cj.end() && !it->is_null())
                c.visual_embedding = as_double_vector(*it, "visual_embedding", line_no);
            if (auto it = cj.find("label"); it != cj.end() && !it->is_null()) {
                if (!it->is_number_integer())
                    throw ParseError("line " + std::to_string(line_no) +
                                     ": \"label\" must be an integer or null");
                c.label = it->get<int>();
            }
            if (auto it = cj.find("clicked"); it != cj.end() && !it->is_null())
                c.clicked = it->get<bool>();

            if (!dims_set) {
                ds.text_dim = c.text_embedding.size();
                ds.item_feature_dim = c.features.size();
                ds.user_feature_dim = q.user_features.size();
                dims_set = true;
            }
            if (c.text_embedding.size() != ds.text_dim)
                throw SchemaError("line " + std::to_string(line_no) + ", item " + c.item_id +
                                  ": text_embedding length " +
                                  std::to_string(c.text_embedding.size()) +
                                  " != " + std::to_string(ds.text_dim));
            if (c.features.size() != ds.item_feature_dim)
                throw SchemaError("line " + std::to_string(line_no) + ", item " + c.item_id +
                                  ": features length " + std::to_string(c.features.size()) +
                                  " != " + std::to_string(ds.item_feature_dim));
            if (c.visual_embedding) {
                if (!visual_dim_set) {
                    ds.visual_dim = c.visual_embedding->size();
                    visual_dim_set = true;
                }
                if (c.visual_embedding->size() != ds.visual_dim)
                    throw SchemaError("line " + std::to_string(line_no) + ", item " + c.item_id +
                                      ": visual_embedding length " +
                                      std::to_string(c.visual_embedding->size()) +
                                      " != " + std::to_string(ds.visual_dim));
            }
            q.candidates.push_back(std::move(c));
        }
        if (dims_set && q.user_features.size() != ds.user_feature_dim)
            throw SchemaError("line " + std::to_string(line_no) + ": user_features length " +
                              std::to_string(q.user_features.size()) + " != " +
                              std::to_string(ds.user_feature_dim));
        ds.queries.push_back(std::move(q));
    }

    for (int m = 1; m <= max_modality; ++m)
        ds.modalities.push_back({m, "modality_" + std::to_string(m)});
    return ds;
}

core::Dataset ingest_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open dataset file: " + path);
    return ingest_jsonl_stream(f);
}

SynthConfig synth_config_from_file(const std::string& path) {
    return synth_config_from_keyvalues(config::KeyValues::from_file(path));
}

SynthConfig synth_config_from_keyvalues(const config::KeyValues& kv) {
    SynthConfig cfg;
    cfg.n_queries = static_cast<std::size_t>(kv.get_int("dataset.n_queries"));
    cfg.seed = static_cast<std::uint64_t>(kv.get_int("dataset.seed", 0));
    cfg.text_dim = static_cast<std::size_t>(kv.get_int("dataset.text_dim", 16));
    cfg.visual_dim = static_cast<std::size_t>(kv.get_int("dataset.visual_dim", 16));
    cfg.item_feature_dim = static_cast<std::size_t>(kv.get_int("dataset.item_feature_dim", 4));
    cfg.user_feature_dim = static_cast<std::size_t>(kv.get_int("dataset.user_feature_dim", 4));
    cfg.label_noise = kv.get_double("dataset.label_noise", 0.0);
    cfg.user_weight = kv.get_double("dataset.user_weight", 0.0);
    cfg.visual_signal = kv.get_double("dataset.visual_signal", 0.6);
    cfg.embedding_noise = kv.get_double("dataset.embedding_noise", 0.35);
    const auto cuts = kv.get_double_list(
        "dataset.grade_cut", {cfg.grade_cut[0], cfg.grade_cut[1], cfg.grade_cut[2], cfg.grade_cut[3]});
    if (cuts.size() != 4) throw ConfigError("dataset.grade_cut needs exactly 4 values");
    std::copy(cuts.begin(), cuts.end(), cfg.grade_cut.begin());

    for (int k = 1;; ++k) {
        const std::string prefix = "modality." + std::to_string(k) + ".";
        if (!kv.has(prefix + "name")) break;
        ModalitySpec spec;
        spec.name = kv.get_str(prefix + "name");
        spec.queue_min = static_cast<std::size_t>(kv.get_int(prefix + "queue_min", 4));
        spec.queue_max = static_cast<std::size_t>(kv.get_int(prefix + "queue_max", 8));
        spec.beta_a = kv.get_double(prefix + "beta_a", 2.0);
        spec.beta_b = kv.get_double(prefix + "beta_b", 2.0);
        spec.rho = kv.get_double(prefix + "rho", 0.9);
        spec.has_visual = kv.get_bool(prefix + "has_visual", false);
        cfg.modalities.push_back(std::move(spec));
    }
    if (cfg.modalities.empty())
        throw ConfigError("config declares no modalities (expected modality.1.name, ...)");
    return cfg;
}

}  // namespace wpr::datagen
