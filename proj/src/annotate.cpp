#include "wpr/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "wpr/common.hpp"

namespace wpr::annotate {

// --- AnnotationPlan -------------------------------------------------------

void AnnotationPlan::set_labeled(const std::string& query_id, const std::string& item_id,
                                 int grade) {
    entries[{query_id, item_id}] = grade;
}

void AnnotationPlan::set_unlabeled(const std::string& query_id, const std::string& item_id) {
    auto key = std::make_pair(query_id, item_id);
    if (!entries.count(key)) entries[key] = std::nullopt;
}

bool AnnotationPlan::covers(const std::string& query_id, const std::string& item_id) const {
    return entries.count({query_id, item_id}) > 0;
}

std::optional<int> AnnotationPlan::grade_of(const std::string& query_id,
                                            const std::string& item_id) const {
    auto it = entries.find({query_id, item_id});
    if (it == entries.end()) return std::nullopt;
    return it->second;
}

std::size_t AnnotationPlan::labeled_count() const {
    std::size_t n = 0;
    for (const auto& [_, g] : entries)
        if (g) ++n;
    return n;
}

double AnnotationPlan::labeled_fraction() const {
    if (entries.empty()) return 0.0;
    return static_cast<double>(labeled_count()) / static_cast<double>(entries.size());
}

void AnnotationPlan::merge(const AnnotationPlan& other) {
    for (const auto& [key, grade] : other.entries) {
        auto it = entries.find(key);
        if (it == entries.end())
            entries.emplace(key, grade);
        else if (!it->second && grade)
            it->second = grade;
    }
    oracle_calls += other.oracle_calls;
}

void AnnotationPlan::write_jsonl(std::ostream& out) const {
    for (const auto& [key, grade] : entries) {
        nlohmann::json j;
        j["query_id"] = key.first;
        j["item_id"] = key.second;
        j["status"] = grade ? "labeled" : "unlabeled";
        if (grade)
            j["grade"] = *grade;
        else
            j["grade"] = nullptr;
        out << j.dump() << '\n';
    }
    nlohmann::json summary;
    summary["oracle_calls"] = oracle_calls;
    summary["labeled_fraction"] = labeled_fraction();
    out << summary.dump() << '\n';
}

void AnnotationPlan::write_jsonl_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open for writing: " + path);
    write_jsonl(f);
}

AnnotationPlan AnnotationPlan::read_jsonl(std::istream& in) {
    AnnotationPlan plan;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("plan line " + std::to_string(line_no) + ": " + e.what());
        }
        if (j.contains("oracle_calls")) {
            plan.oracle_calls = j["oracle_calls"].get<std::size_t>();
            continue;
        }
        const std::string q = j.at("query_id").get<std::string>();
        const std::string i = j.at("item_id").get<std::string>();
        const std::string status = j.at("status").get<std::string>();
        if (status == "labeled")
            plan.set_labeled(q, i, j.at("grade").get<int>());
        else if (status == "unlabeled")
            plan.set_unlabeled(q, i);
        else
            throw ParseError("plan line " + std::to_string(line_no) + ": bad status '" + status +
                             "'");
    }
    return plan;
}

AnnotationPlan AnnotationPlan::read_jsonl_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArgumentError("cannot open plan file: " + path);
    return read_jsonl(f);
}

// --- Simple strategies ------------------------------------------------------

std::vector<QueueItem> modality_queue(const core::Query& query, int modality_id) {
    std::vector<QueueItem> out;
    for (const auto& c : query.candidates) {
        if (c.modality == modality_id) out.push_back({c.item_id, c.upstream_score});
    }
    std::sort(out.begin(), out.end(), [](const QueueItem& a, const QueueItem& b) {
        if (a.upstream_score != b.upstream_score) return a.upstream_score > b.upstream_score;
        return a.item_id < b.item_id;
    });
    return out;
}

AnnotationPlan select_top_p(const std::string& query_id, const std::vector<QueueItem>& queue,
                            double p, const datagen::LabelOracle& oracle) {
    if (!(p > 0.0 && p <= 1.0))
        throw ArgumentError("select_top_p: p must be in (0,1], got " + std::to_string(p));
    AnnotationPlan plan;
    if (queue.empty()) return plan;
    const std::size_t n = queue.size();
    const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
    for (std::size_t i = 0; i < n; ++i) {
        if (i < k) {
            plan.set_labeled(query_id, queue[i].item_id, oracle.label(query_id, queue[i].item_id));
            ++plan.oracle_calls;
        } else {
            plan.set_unlabeled(query_id, queue[i].item_id);
        }
    }
    return plan;
}

AnnotationPlan percentile_band(const std::string& query_id, const std::vector<QueueItem>& queue,
                               double lo, double hi, const datagen::LabelOracle& oracle) {
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
        throw ArgumentError("percentile_band: need 0 <= lo < hi <= 1, got lo=" +
                            std::to_string(lo) + " hi=" + std::to_string(hi));
    AnnotationPlan plan;
    if (queue.empty()) return plan;
    const double n = static_cast<double>(queue.size());
    const auto first = static_cast<std::size_t>(std::floor(lo * n + 1e-9));
    const auto last = static_cast<std::size_t>(std::ceil(hi * n - 1e-9));
    for (std::size_t i = 0; i < queue.size(); ++i) {
        if (i >= first && i < last) {
            plan.set_labeled(query_id, queue[i].item_id, oracle.label(query_id, queue[i].item_id));
            ++plan.oracle_calls;
        } else {
            plan.set_unlabeled(query_id, queue[i].item_id);
        }
    }
    return plan;
}

AnnotationPlan select_random(const std::string& query_id, const std::vector<QueueItem>& queue,
                             double p, const datagen::LabelOracle& oracle, std::mt19937_64& rng) {
    if (!(p > 0.0 && p <= 1.0))
        throw ArgumentError("select_random: p must be in (0,1], got " + std::to_string(p));
    AnnotationPlan plan;
    if (queue.empty()) return plan;
    const std::size_t n = queue.size();
    const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> pick(n, false);
    for (std::size_t i = 0; i < k; ++i) pick[order[i]] = true;
    for (std::size_t i = 0; i < n; ++i) {
        if (pick[i]) {
            plan.set_labeled(query_id, queue[i].item_id, oracle.label(query_id, queue[i].item_id));
            ++plan.oracle_calls;
        } else {
            plan.set_unlabeled(query_id, queue[i].item_id);
        }
    }
    return plan;
}

// --- Iso-label anchor search -------------------------------------------------

std::vector<AlignedItem> AlignedSequence::flattened() const {
    std::vector<AlignedItem> out;
    for (const auto& seg : segments)
        for (const auto& it : seg.items) out.push_back(it);
    return out;
}

namespace {

class GradeMemo {
  public:
    GradeMemo(const std::string& query_id, const datagen::LabelOracle& oracle)
        : query_id_(query_id), oracle_(oracle) {}

    int grade(const std::string& item_id) {
        auto it = cache_.find(item_id);
        if (it != cache_.end()) return it->second;
        const int g = oracle_.label(query_id_, item_id);
        cache_.emplace(item_id, g);
        ++new_grades_;
        return g;
    }

    bool known(const std::string& item_id) const { return cache_.count(item_id) > 0; }
    std::optional<int> known_grade(const std::string& item_id) const {
        auto it = cache_.find(item_id);
        if (it == cache_.end()) return std::nullopt;
        return it->second;
    }
    std::size_t unique_grades() const { return cache_.size(); }
    std::size_t take_new_count() {
        std::size_t n = new_grades_;
        new_grades_ = 0;
        return n;
    }

  private:
    const std::string& query_id_;
    const datagen::LabelOracle& oracle_;
    std::unordered_map<std::string, int> cache_;
    std::size_t new_grades_ = 0;
};

struct SearchOutcome {
    bool found = false;
    std::size_t index = 0;  // tie index when found, insertion point otherwise
};

// Binary search the descending-grade window [lo, hi) of queue2 for an
// item graded `target`. Returns the tie index or the insertion point
// (first position whose grade is below target). Boundary grades around
// the insertion point are verified; if they contradict the monotone
// assumption the whole window is scanned linearly instead.
SearchOutcome search_window(const std::vector<QueueItem>& queue2, std::size_t lo, std::size_t hi,
                            int target, GradeMemo& memo) {
    std::size_t l = lo, h = hi;
    while (l < h) {
        const std::size_t mid = l + (h - l) / 2;
        const int g = memo.grade(queue2[mid].item_id);
        if (g == target) return {true, mid};
        if (g > target)
            l = mid + 1;
        else
            h = mid;
    }
    bool monotone_ok = true;
    if (l > lo) {
        const int g = memo.grade(queue2[l - 1].item_id);
        if (g == target) return {true, l - 1};
        if (g < target) monotone_ok = false;
    }
    if (l < hi) {
        const int g = memo.grade(queue2[l].item_id);
        if (g == target) return {true, l};
        if (g > target) monotone_ok = false;
    }
    if (monotone_ok) return {false, l};

    // Noisy grades: fall back to an exact linear scan of the window.
    std::size_t insertion = hi;
    for (std::size_t i = lo; i < hi; ++i) {
        const int g = memo.grade(queue2[i].item_id);
        if (g == target) return {true, i};
        if (g < target && insertion == hi) insertion = i;
    }
    if (insertion == lo) return {false, lo};  // everything below target
    // A strictly-higher item exists before `insertion` only if some grade
    // above target was seen there; with no equal grades that holds unless
    // every scanned grade was below target.
    bool any_higher = false;
    for (std::size_t i = lo; i < insertion; ++i) {
        if (memo.grade(queue2[i].item_id) > target) {
            any_higher = true;
            break;
        }
    }
    if (!any_higher) return {false, lo};
    return {false, insertion};
}

}  // namespace

AlignedSequence iso_label_anchor_search(const std::string& query_id,
                                        const std::vector<QueueItem>& queue1,
                                        const std::vector<QueueItem>& queue2,
                                        std::size_t t_rounds,
                                        const datagen::LabelOracle& oracle) {
    AlignedSequence seq;
    seq.query_id = query_id;
    GradeMemo memo(query_id, oracle);

    auto make_item = [&](int queue, const QueueItem& it) {
        AlignedItem a;
        a.queue = queue;
        a.item_id = it.item_id;
        a.upstream_score = it.upstream_score;
        a.grade = memo.known_grade(it.item_id);
        return a;
    };
    auto emit_run = [&](int queue, const std::vector<QueueItem>& src, std::size_t from,
                        std::size_t to) {
        if (from >= to) return;
        Segment seg;
        seg.kind = SegmentKind::Single;
        for (std::size_t i = from; i < to; ++i) seg.items.push_back(make_item(queue, src[i]));
        seq.segments.push_back(std::move(seg));
    };

    std::size_t j = 0;  // consumed prefix of queue2
    bool tail_emitted = false;
    for (std::size_t i1 = 0; i1 < queue1.size(); ++i1) {
        if (seq.rounds_completed >= t_rounds) {
            emit_run(1, queue1, i1, queue1.size());
            emit_run(2, queue2, j, queue2.size());
            tail_emitted = true;
            break;
        }
        if (j >= queue2.size()) {
            emit_run(1, queue1, i1, queue1.size());
            tail_emitted = true;
            break;
        }

        const QueueItem& anchor = queue1[i1];
        const int ga = memo.grade(anchor.item_id);
        memo.take_new_count();  // anchor grading is not a queue-2 probe
        seq.window_sizes.push_back(queue2.size() - j);
        const SearchOutcome out = search_window(queue2, j, queue2.size(), ga, memo);
        seq.probe_counts.push_back(memo.take_new_count());

        if (out.found) {
            emit_run(2, queue2, j, out.index);
            Segment tie;
            tie.kind = SegmentKind::Tie;
            tie.items.push_back(make_item(1, anchor));
            tie.items.push_back(make_item(2, queue2[out.index]));
            seq.segments.push_back(std::move(tie));
            j = out.index + 1;
            ++seq.rounds_completed;
        } else if (out.index == queue2.size()) {
            // Every remaining queue-2 grade is above the anchor's:
            // remainder first, then the anchor.
            emit_run(2, queue2, j, queue2.size());
            Segment one;
            one.kind = SegmentKind::Single;
            one.items.push_back(make_item(1, anchor));
            seq.segments.push_back(std::move(one));
            j = queue2.size();
        } else if (out.index == j) {
            // Every remaining queue-2 grade is below: anchor, then remainder.
            Segment one;
            one.kind = SegmentKind::Single;
            one.items.push_back(make_item(1, anchor));
            seq.segments.push_back(std::move(one));
            emit_run(2, queue2, j, queue2.size());
            j = queue2.size();
        } else {
            // Bracketed between a higher and a lower grade: virtual tie.
            emit_run(2, queue2, j, out.index);
            Segment vt;
            vt.kind = SegmentKind::VirtualTie;
            vt.items.push_back(make_item(1, anchor));
            seq.segments.push_back(std::move(vt));
            j = out.index;
            ++seq.rounds_completed;
        }
    }
    if (!tail_emitted) emit_run(2, queue2, j, queue2.size());

    seq.oracle_calls = memo.unique_grades();
    return seq;
}

AnnotationPlan plan_from_alignment(const AlignedSequence& aligned) {
    AnnotationPlan plan;
    for (const auto& item : aligned.flattened()) {
        if (item.grade)
            plan.set_labeled(aligned.query_id, item.item_id, *item.grade);
        else
            plan.set_unlabeled(aligned.query_id, item.item_id);
    }
    plan.oracle_calls = aligned.oracle_calls;
    return plan;
}

SupervisionSets build_pairs(const AlignedSequence& aligned) {
    SupervisionSets out;
    const auto items = aligned.flattened();

    // Virtual-tie insertions contribute ordering constraints only.
    std::vector<bool> is_virtual(items.size(), false);
    {
        std::size_t idx = 0;
        for (const auto& seg : aligned.segments) {
            for (std::size_t k = 0; k < seg.items.size(); ++k, ++idx)
                is_virtual[idx] = (seg.kind == SegmentKind::VirtualTie);
        }
    }

    for (std::size_t a = 0; a < items.size(); ++a) {
        for (std::size_t b = a + 1; b < items.size(); ++b) {
            const auto& x = items[a];
            const auto& y = items[b];
            if (x.grade && y.grade) {
                if (*x.grade > *y.grade)
                    out.pairs.push_back({x.item_id, y.item_id, PairSource::Label, 0});
                else if (*y.grade > *x.grade)
                    out.pairs.push_back({y.item_id, x.item_id, PairSource::Label, 0});
                // equal grades: no preference derivable
            } else if (x.queue == y.queue) {
                if (x.upstream_score > y.upstream_score)
                    out.pairs.push_back({x.item_id, y.item_id, PairSource::Upstream, x.queue});
                else if (y.upstream_score > x.upstream_score)
                    out.pairs.push_back({y.item_id, x.item_id, PairSource::Upstream, x.queue});
            }
        }
    }
    for (std::size_t a = 0; a < items.size(); ++a) {
        if (items[a].grade && !is_virtual[a])
            out.points.push_back({items[a].item_id, *items[a].grade});
    }
    return out;
}

}  // namespace wpr::annotate
