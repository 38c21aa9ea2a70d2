#include "labpred/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace labpred {

using nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

bool parseable_lab(const MedicalEvent& e) {
    return e.type == EventType::labevent && e.value && is_valid_value_string(*e.value);
}

}  // namespace

ItemStats ItemStats::from_stays(const std::vector<IcuStay>& stays) {
    ItemStats stats;
    std::unordered_map<std::string, double> sums;
    for (const IcuStay& stay : stays) {
        for (const MedicalEvent& e : stay.events) {
            if (!parseable_lab(e)) continue;
            std::string item = normalize_item_name(e.desc);
            Item& it = stats.items[item];
            sums[item] += std::strtod(e.value->c_str(), nullptr);
            ++it.count;
            if (it.unit.empty() && e.unit) it.unit = *e.unit;
        }
    }
    for (auto& [item, it] : stats.items) it.mean = sums[item] / static_cast<double>(it.count);
    return stats;
}

double ItemStats::mean_of(const std::string& item) const {
    auto found = items.find(item);
    if (found == items.end())
        throw std::out_of_range("item \"" + item + "\" absent from training statistics");
    return found->second.mean;
}

namespace {

template <typename Fold>
BaselineResult prior_fold(const IcuStay& stay, const std::string& item, int offset_min,
                          const ItemStats& train_stats, Fold&& fold) {
    bool any = false;
    for (const MedicalEvent& e : stay.events) {
        if (e.offset_min >= offset_min) break;  // events are time-sorted
        if (!parseable_lab(e) || normalize_item_name(e.desc) != item) continue;
        fold(std::strtod(e.value->c_str(), nullptr));
        any = true;
    }
    if (!any) return {train_stats.mean_of(item), true};
    return {0.0, false};  // caller fills value
}

}  // namespace

BaselineResult naive_predict(const IcuStay& stay, const std::string& item, int offset_min,
                             const ItemStats& train_stats) {
    double last = 0.0;
    BaselineResult r =
        prior_fold(stay, item, offset_min, train_stats, [&](double v) { last = v; });
    if (!r.from_fallback) r.value = last;
    return r;
}

BaselineResult naive_mean_predict(const IcuStay& stay, const std::string& item, int offset_min,
                                  const ItemStats& train_stats) {
    double sum = 0.0;
    long n = 0;
    BaselineResult r =
        prior_fold(stay, item, offset_min, train_stats, [&](double v) { sum += v, ++n; });
    if (!r.from_fallback) r.value = sum / static_cast<double>(n);
    return r;
}

// ---------------------------------------------------------------------------

QuantileBinning QuantileBinning::fit(
    const std::unordered_map<std::string, std::vector<double>>& train_values, int k) {
    if (k < 2) throw std::invalid_argument("quantile bin count must be >= 2");
    QuantileBinning b;
    b.k_ = k;
    for (const auto& [item, raw] : train_values) {
        if (raw.empty())
            throw std::invalid_argument("no training values for item \"" + item + "\"");
        std::vector<double> sorted = raw;
        std::sort(sorted.begin(), sorted.end());
        size_t n = sorted.size();
        ItemBins bins;
        bins.is_degenerate = sorted.front() == sorted.back();
        for (int q = 0; q < k; ++q) {
            size_t lo = n * static_cast<size_t>(q) / static_cast<size_t>(k);
            size_t hi = n * static_cast<size_t>(q + 1) / static_cast<size_t>(k);
            double edge = sorted[hi == 0 ? 0 : hi - 1];
            bins.upper_edges.push_back(edge);
            if (hi > lo) {
                double sum = 0.0;
                for (size_t i = lo; i < hi; ++i) sum += sorted[i];
                bins.means.push_back(sum / static_cast<double>(hi - lo));
            } else {
                bins.means.push_back(edge);  // empty bin: collapse onto its edge
            }
        }
        b.items_[item] = std::move(bins);
    }
    return b;
}

QuantileBinning QuantileBinning::fit_from_stays(const std::vector<IcuStay>& stays, int k) {
    std::unordered_map<std::string, std::vector<double>> values;
    for (const IcuStay& stay : stays)
        for (const MedicalEvent& e : stay.events)
            if (parseable_lab(e))
                values[normalize_item_name(e.desc)].push_back(
                    std::strtod(e.value->c_str(), nullptr));
    return fit(values, k);
}

std::vector<std::string> QuantileBinning::item_names() const {
    std::vector<std::string> names;
    names.reserve(items_.size());
    for (const auto& [item, bins] : items_) names.push_back(item);
    return names;
}

bool QuantileBinning::degenerate(const std::string& item) const {
    auto found = items_.find(item);
    return found != items_.end() && found->second.is_degenerate;
}

std::optional<int> QuantileBinning::bin_of(const std::string& item, double value) const {
    auto found = items_.find(item);
    if (found == items_.end()) return std::nullopt;
    const std::vector<double>& edges = found->second.upper_edges;
    for (int q = 0; q < k_; ++q)
        if (value <= edges[q]) return q;
    return k_ - 1;  // above the training maximum: clamp to the top bin
}

const std::vector<double>& QuantileBinning::bin_means(const std::string& item) const {
    auto found = items_.find(item);
    if (found == items_.end())
        throw std::out_of_range("item \"" + item + "\" has no fitted bins");
    return found->second.means;
}

std::string QuantileBinning::serialize() const {
    ordered_json j;
    j["k"] = k_;
    ordered_json items = ordered_json::object();
    for (const auto& [item, bins] : items_) {
        ordered_json jb;
        jb["edges"] = bins.upper_edges;
        jb["means"] = bins.means;
        jb["degenerate"] = bins.is_degenerate;
        items[item] = std::move(jb);
    }
    j["items"] = std::move(items);
    return j.dump();
}

QuantileBinning QuantileBinning::deserialize(const std::string& text) {
    ordered_json j = ordered_json::parse(text);
    QuantileBinning b;
    b.k_ = j.at("k").get<int>();
    for (const auto& [item, jb] : j.at("items").items()) {
        ItemBins bins;
        bins.upper_edges = jb.at("edges").get<std::vector<double>>();
        bins.means = jb.at("means").get<std::vector<double>>();
        bins.is_degenerate = jb.at("degenerate").get<bool>();
        b.items_[item] = std::move(bins);
    }
    return b;
}

double quantile_expected(std::span<const double> probs, const QuantileBinning& binning,
                         const std::string& item) {
    const std::vector<double>& means = binning.bin_means(item);
    if (probs.size() != means.size())
        throw std::invalid_argument("expected " + std::to_string(means.size()) +
                                    " bin probabilities, got " + std::to_string(probs.size()));
    double sum = 0.0;
    for (double p : probs) sum += p;
    if (std::abs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("bin probabilities sum to " + std::to_string(sum) +
                                    ", not 1");
    double expected = 0.0;
    for (size_t q = 0; q < means.size(); ++q) expected += probs[q] * means[q];
    return expected;
}

// ---------------------------------------------------------------------------

std::unordered_map<std::string, MetricScale> metric_scales(
    const std::vector<PredictionRecord>& records) {
    // Scales come from every ground truth in the evaluation set, not only the
    // successfully predicted ones, so they do not move with the failure rate.
    std::unordered_map<std::string, std::vector<double>> truths;
    for (const PredictionRecord& r : records) truths[r.item].push_back(r.y_true);
    std::unordered_map<std::string, MetricScale> scales;
    for (auto& [item, values] : truths) {
        std::sort(values.begin(), values.end());
        size_t n = values.size();
        auto nearest_rank = [&](double pct) {
            size_t rank = static_cast<size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
            if (rank < 1) rank = 1;
            return values[rank - 1];
        };
        scales[item] = {nearest_rank(1.0), nearest_rank(99.0), static_cast<long>(n)};
    }
    return scales;
}

double smape_percent(double y_true, double y_pred) {
    double denom = std::abs(y_true) + std::abs(y_pred);
    if (denom == 0.0) return 0.0;
    // Ratio first: it is <= 1 exactly, so the scaled term never exceeds 200.
    return 200.0 * (std::abs(y_true - y_pred) / denom);
}

namespace {

struct ItemAccum {
    long count = 0;
    double abs_err = 0.0;
    double smape = 0.0;
};

std::map<std::string, ItemAccum> accumulate(const std::vector<PredictionRecord>& records) {
    std::map<std::string, ItemAccum> acc;
    for (const PredictionRecord& r : records) {
        if (!r.y_pred) continue;
        ItemAccum& a = acc[r.item];
        ++a.count;
        a.abs_err += std::abs(r.y_true - *r.y_pred);
        a.smape += smape_percent(r.y_true, *r.y_pred);
    }
    return acc;
}

}  // namespace

std::map<std::string, double> nmae_by_item(
    const std::vector<PredictionRecord>& records,
    const std::unordered_map<std::string, MetricScale>& scales, double* macro) {
    std::map<std::string, double> out;
    double macro_sum = 0.0;
    long macro_n = 0;
    for (const auto& [item, a] : accumulate(records)) {
        auto found = scales.find(item);
        if (found == scales.end())
            throw std::invalid_argument("no metric scale for item \"" + item + "\"");
        double range = found->second.v99 - found->second.v1;
        double mae = a.abs_err / static_cast<double>(a.count);
        if (range > 0.0) {
            out[item] = mae / range;
            macro_sum += out[item];
            ++macro_n;
        } else {
            out[item] = -1.0;  // degenerate scale; excluded from the macro mean
        }
    }
    if (macro) *macro = macro_n > 0 ? macro_sum / static_cast<double>(macro_n) : 0.0;
    return out;
}

std::map<std::string, double> smape_by_item(const std::vector<PredictionRecord>& records,
                                            double* macro) {
    std::map<std::string, double> out;
    double macro_sum = 0.0;
    for (const auto& [item, a] : accumulate(records)) {
        out[item] = a.smape / static_cast<double>(a.count);
        macro_sum += out[item];
    }
    if (macro) *macro = out.empty() ? 0.0 : macro_sum / static_cast<double>(out.size());
    return out;
}

MetricReport evaluate_records(const std::vector<PredictionRecord>& records,
                              const std::unordered_map<std::string, MetricScale>& scales) {
    MetricReport report;
    std::map<std::string, ItemAccum> acc = accumulate(records);
    std::map<std::string, double> nmae = nmae_by_item(records, scales, &report.macro_nmae);
    std::map<std::string, double> smape = smape_by_item(records, &report.macro_smape);

    double wn_sum = 0.0, ws_sum = 0.0;
    long wn_count = 0, ws_count = 0;
    for (const auto& [item, a] : acc) {
        ItemScores s;
        s.count = a.count;
        s.mae = a.abs_err / static_cast<double>(a.count);
        s.nmae = nmae.at(item);
        s.smape = smape.at(item);
        report.per_item[item] = s;
        if (s.nmae >= 0.0) {
            wn_sum += s.nmae * static_cast<double>(a.count);
            wn_count += a.count;
        } else {
            report.degenerate_items.push_back(item);
        }
        ws_sum += s.smape * static_cast<double>(a.count);
        ws_count += a.count;
        report.n_records += a.count;
    }
    report.weighted_nmae = wn_count > 0 ? wn_sum / static_cast<double>(wn_count) : 0.0;
    report.weighted_smape = ws_count > 0 ? ws_sum / static_cast<double>(ws_count) : 0.0;
    for (const PredictionRecord& r : records)
        if (!r.y_pred) ++report.n_failed;
    long attempted = static_cast<long>(records.size());
    report.failure_rate =
        attempted > 0 ? static_cast<double>(report.n_failed) / static_cast<double>(attempted)
                      : 0.0;
    return report;
}

StratifiedReport stratified_report(const std::vector<PredictionRecord>& records,
                                   const std::unordered_map<std::string, MetricScale>& scales) {
    std::vector<PredictionRecord> recent, stale;
    for (const PredictionRecord& r : records) {
        if (r.minutes_since_prev && *r.minutes_since_prev < 1440)
            recent.push_back(r);
        else
            stale.push_back(r);
    }
    return {evaluate_records(recent, scales), evaluate_records(stale, scales)};
}

// ---------------------------------------------------------------------------

void write_predictions_csv(const std::string& path,
                           const std::vector<PredictionRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << "stay_id,item,offset_min,y_true,y_pred,parse_failed,fallback_used,unit_matched,"
           "terminated,entropy_nats,minutes_since_prev,generated\n";
    for (const PredictionRecord& r : records) {
        out << r.stay_id << ',' << r.item << ',' << r.offset_min << ',' << fmt_double(r.y_true)
            << ',' << (r.y_pred ? fmt_double(*r.y_pred) : "") << ',' << int(r.parse_failed)
            << ',' << int(r.fallback_used) << ',' << int(r.unit_matched) << ','
            << int(r.terminated) << ',' << fmt_double(r.entropy_nats) << ','
            << (r.minutes_since_prev ? std::to_string(*r.minutes_since_prev) : "") << ',';
        for (size_t i = 0; i < r.generated_tokens.size(); ++i)
            out << (i ? " " : "") << r.generated_tokens[i];
        out << '\n';
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

std::string report_to_csv(const MetricReport& report) {
    std::string out = "item,count,mae,nmae,smape_pct\n";
    for (const auto& [item, s] : report.per_item)
        out += item + ',' + std::to_string(s.count) + ',' + fmt_double(s.mae) + ',' +
               fmt_double(s.nmae) + ',' + fmt_double(s.smape) + '\n';
    out += "__macro__," + std::to_string(report.n_records) + ",," +
           fmt_double(report.macro_nmae) + ',' + fmt_double(report.macro_smape) + '\n';
    out += "__weighted__," + std::to_string(report.n_records) + ",," +
           fmt_double(report.weighted_nmae) + ',' + fmt_double(report.weighted_smape) + '\n';
    return out;
}

std::string report_to_json(const MetricReport& report) {
    ordered_json j;
    j["macro_nmae"] = report.macro_nmae;
    j["macro_smape"] = report.macro_smape;
    j["weighted_nmae"] = report.weighted_nmae;
    j["weighted_smape"] = report.weighted_smape;
    j["n_records"] = report.n_records;
    j["n_failed"] = report.n_failed;
    j["failure_rate"] = report.failure_rate;
    j["degenerate_items"] = report.degenerate_items;
    ordered_json items = ordered_json::object();
    for (const auto& [item, s] : report.per_item) {
        ordered_json js;
        js["count"] = s.count;
        js["mae"] = s.mae;
        js["nmae"] = s.nmae;
        js["smape"] = s.smape;
        items[item] = std::move(js);
    }
    j["per_item"] = std::move(items);
    return j.dump();
}

}  // namespace labpred
