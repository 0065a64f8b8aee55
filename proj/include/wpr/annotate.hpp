#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "wpr/core.hpp"
#include "wpr/datagen.hpp"

namespace wpr::annotate {

/// Which items the trainer may see grades for, plus cost accounting.
/// Entries with a grade are labeled; entries without are supervised only
/// by their upstream scores.
struct AnnotationPlan {
    std::map<std::pair<std::string, std::string>, std::optional<int>> entries;
    std::size_t oracle_calls = 0;

    void set_labeled(const std::string& query_id, const std::string& item_id, int grade);
    void set_unlabeled(const std::string& query_id, const std::string& item_id);
    bool covers(const std::string& query_id, const std::string& item_id) const;
    std::optional<int> grade_of(const std::string& query_id, const std::string& item_id) const;

    std::size_t labeled_count() const;
    std::size_t total() const { return entries.size(); }
    double labeled_fraction() const;

    /// Union of two plans over disjoint item sets; a labeled entry wins
    /// over an unlabeled one for the same item.
    void merge(const AnnotationPlan& other);

    /// One line per item plus a trailing summary line carrying
    /// oracle_calls and labeled_fraction.
    void write_jsonl(std::ostream& out) const;
    void write_jsonl_file(const std::string& path) const;
    static AnnotationPlan read_jsonl(std::istream& in);
    static AnnotationPlan read_jsonl_file(const std::string& path);
};

/// One entry of a per-modality queue, ranked by upstream score.
struct QueueItem {
    std::string item_id;
    double upstream_score = 0.0;
};

/// The candidates of one modality for one query, sorted by upstream
/// score descending (item_id ascending on ties).
std::vector<QueueItem> modality_queue(const core::Query& query, int modality_id);

/// Labels the top ceil(p * n) items of the queue; p in (0,1].
AnnotationPlan select_top_p(const std::string& query_id, const std::vector<QueueItem>& queue,
                            double p, const datagen::LabelOracle& oracle);

/// Labels rank positions [floor(lo*n), ceil(hi*n)) of the queue.
AnnotationPlan percentile_band(const std::string& query_id, const std::vector<QueueItem>& queue,
                               double lo, double hi, const datagen::LabelOracle& oracle);

/// Labels ceil(p * n) items drawn uniformly without replacement.
AnnotationPlan select_random(const std::string& query_id, const std::vector<QueueItem>& queue,
                             double p, const datagen::LabelOracle& oracle, std::mt19937_64& rng);

// --- Iso-label anchor search ---------------------------------------------

enum class SegmentKind { Tie, VirtualTie, Single };

struct AlignedItem {
    int queue = 0;  // 1 or 2
    std::string item_id;
    double upstream_score = 0.0;
    std::optional<int> grade;  // present iff the item was graded during the search
};

/// Tie: two items (one per queue) with equal grades. VirtualTie: one
/// queue-1 item inserted between a strictly higher and a strictly lower
/// graded neighbor. Single: a run of items from one queue, kept in
/// queue order.
struct Segment {
    SegmentKind kind = SegmentKind::Single;
    std::vector<AlignedItem> items;
};

struct AlignedSequence {
    std::string query_id;
    std::vector<Segment> segments;
    std::size_t rounds_completed = 0;  // successful tie/virtual-tie anchors
    std::size_t oracle_calls = 0;      // unique items graded in this run
    /// Queue-2 items graded per anchor attempt, and the size of the
    /// remaining queue-2 window the attempt searched; on grade-monotone
    /// queues probe_counts[i] <= ceil(log2(window_sizes[i])) + 1.
    std::vector<std::size_t> probe_counts;
    std::vector<std::size_t> window_sizes;

    std::vector<AlignedItem> flattened() const;
};

/// Merges two upstream-ranked queues into a grade-aligned sequence by
/// binary-searching queue 2 for each queue-1 anchor, spending at most
/// `t_rounds` successful anchors. Queue-2 grades are assumed
/// non-increasing along the queue; if grading noise breaks that, the
/// search falls back to a linear scan of the window and every grade
/// requested is still counted.
AlignedSequence iso_label_anchor_search(const std::string& query_id,
                                        const std::vector<QueueItem>& queue1,
                                        const std::vector<QueueItem>& queue2,
                                        std::size_t t_rounds,
                                        const datagen::LabelOracle& oracle);

/// Annotation view of a search result: graded items become labeled.
AnnotationPlan plan_from_alignment(const AlignedSequence& aligned);

// --- Pair construction -----------------------------------------------------

enum class PairSource { Label, Upstream };

struct PreferencePair {
    std::string winner_id;
    std::string loser_id;
    PairSource source = PairSource::Label;
    int queue = 0;  // shared queue for upstream pairs; 0 for label pairs
};

struct PointTarget {
    std::string item_id;
    int grade = 0;
};

struct SupervisionSets {
    std::vector<PreferencePair> pairs;
    std::vector<PointTarget> points;
};

/// Turns an aligned sequence into pairwise and pointwise supervision:
/// both-graded pairs order by grade (equal grades emit nothing),
/// same-queue pairs lacking a grade order by upstream score (ties
/// skipped), cross-queue ungraded pairs emit nothing. Every graded item
/// except virtual-tie insertions becomes a pointwise target.
SupervisionSets build_pairs(const AlignedSequence& aligned);

}  // namespace wpr::annotate
