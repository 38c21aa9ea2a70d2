#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "labpred/ehr.hpp"

namespace labpred {

// ---------------------------------------------------------------------------
// Per-item training statistics: means for fallbacks, units for reports.

struct ItemStats {
    struct Item {
        double mean = 0.0;
        long count = 0;
        std::string unit;  // first unit seen in training data
    };
    std::unordered_map<std::string, Item> items;

    static ItemStats from_stays(const std::vector<IcuStay>& stays);
    bool contains(const std::string& item) const { return items.contains(item); }
    double mean_of(const std::string& item) const;  // throws std::out_of_range
};

// ---------------------------------------------------------------------------
// Baselines. Both look only at lab observations of the item strictly before
// offset_min and fall back to the item's training mean when there are none.

struct BaselineResult {
    double value = 0.0;
    bool from_fallback = false;
};

// Most recent prior value.
BaselineResult naive_predict(const IcuStay& stay, const std::string& item, int offset_min,
                             const ItemStats& train_stats);

// Mean of all prior values.
BaselineResult naive_mean_predict(const IcuStay& stay, const std::string& item, int offset_min,
                                  const ItemStats& train_stats);

// ---------------------------------------------------------------------------
// Equal-frequency value bins fitted on training data, one fit per item.

class QuantileBinning {
public:
    // k bins per item; bin q covers sorted ranks (q*n/k, (q+1)*n/k]. Items
    // with fewer distinct values than bins end up with empty bins whose mean
    // falls back to the bin's upper edge; all-constant items are flagged
    // degenerate. Throws std::invalid_argument on k < 2 or an empty item.
    static QuantileBinning fit(
        const std::unordered_map<std::string, std::vector<double>>& train_values, int k);

    // Collects every parseable lab value per item, then fits.
    static QuantileBinning fit_from_stays(const std::vector<IcuStay>& stays, int k);

    int k() const { return k_; }
    std::vector<std::string> item_names() const;  // sorted
    bool has_item(const std::string& item) const { return items_.contains(item); }
    bool degenerate(const std::string& item) const;

    // Index of the bin whose range covers the value (clamped to the outer
    // bins); nullopt when the item was never fitted.
    std::optional<int> bin_of(const std::string& item, double value) const;

    // Mean training value per bin, k entries. Throws std::out_of_range.
    const std::vector<double>& bin_means(const std::string& item) const;

    std::string serialize() const;  // JSON, stable key order
    static QuantileBinning deserialize(const std::string& text);

private:
    struct ItemBins {
        std::vector<double> upper_edges;  // k ascending edges; last is the item max
        std::vector<double> means;        // k per-bin training means
        bool is_degenerate = false;
    };
    int k_ = 0;
    std::map<std::string, ItemBins> items_;
};

// Expectation of the value under bin probabilities: sum of probs[q] times the
// item's bin mean. probs must have k entries summing to 1 within 1e-6.
double quantile_expected(std::span<const double> probs, const QuantileBinning& binning,
                         const std::string& item);

// ---------------------------------------------------------------------------
// Prediction records and scores.

struct PredictionRecord {
    std::string stay_id;
    std::string item;      // normalized item name
    int offset_min = 0;
    double y_true = 0.0;
    std::optional<double> y_pred;  // absent when parsing failed and no fallback ran
    bool parse_failed = false;
    bool fallback_used = false;
    bool unit_matched = true;
    bool terminated = true;        // generation hit the end-of-event token
    double entropy_nats = 0.0;     // mean per-step distribution entropy
    std::optional<int> minutes_since_prev;  // to the previous observation of the item
    std::vector<std::string> generated_tokens;
};

// Per-item normalization scale: nearest-rank 1st and 99th percentiles of the
// ground-truth values. Computed from the records under evaluation, so the
// scale reflects the observed test distribution.
struct MetricScale {
    double v1 = 0.0;
    double v99 = 0.0;
    long count = 0;
};

std::unordered_map<std::string, MetricScale> metric_scales(
    const std::vector<PredictionRecord>& records);

// One SMAPE term in percent, in [0, 200]; defined as 0 when both sides are 0.
double smape_percent(double y_true, double y_pred);

// Mean absolute error divided by the item's (v99 - v1) scale; macro is the
// unweighted mean over items with a positive scale.
std::map<std::string, double> nmae_by_item(const std::vector<PredictionRecord>& records,
                                           const std::unordered_map<std::string, MetricScale>& scales,
                                           double* macro = nullptr);

std::map<std::string, double> smape_by_item(const std::vector<PredictionRecord>& records,
                                            double* macro = nullptr);

struct ItemScores {
    long count = 0;
    double mae = 0.0;
    double nmae = 0.0;   // negative when the item's scale is degenerate
    double smape = 0.0;  // percent
};

struct MetricReport {
    std::map<std::string, ItemScores> per_item;
    double macro_nmae = 0.0;
    double macro_smape = 0.0;
    double weighted_nmae = 0.0;   // weighted by record count
    double weighted_smape = 0.0;
    long n_records = 0;           // records carrying a prediction
    long n_failed = 0;            // records without one
    double failure_rate = 0.0;
    std::vector<std::string> degenerate_items;
};

// Records without y_pred count as failures and are excluded from the scores.
MetricReport evaluate_records(const std::vector<PredictionRecord>& records,
                              const std::unordered_map<std::string, MetricScale>& scales);

// Split by history freshness: records whose previous observation of the item
// is under 24 hours old versus the rest (stale or absent). Both halves are
// scored against the same scales.
struct StratifiedReport {
    MetricReport recent;
    MetricReport stale;
};

StratifiedReport stratified_report(const std::vector<PredictionRecord>& records,
                                   const std::unordered_map<std::string, MetricScale>& scales);

// ---------------------------------------------------------------------------
// Report emission.

void write_predictions_csv(const std::string& path,
                           const std::vector<PredictionRecord>& records);

std::string report_to_csv(const MetricReport& report);
std::string report_to_json(const MetricReport& report);  // single compact object

}  // namespace labpred
