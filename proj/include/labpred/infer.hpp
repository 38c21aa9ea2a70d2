#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "labpred/checkpoint.hpp"
#include "labpred/metrics.hpp"
#include "labpred/textualize.hpp"
#include "labpred/vocab.hpp"

namespace labpred {

// One lab value to predict: the tokenized context (demographics, every event
// strictly before the target time, and the target's header up to where the
// value would start) plus bookkeeping for scoring and attention analysis.
struct InferencePrompt {
    std::string stay_id;
    int target_ordinal = 0;  // index into IcuStay::events
    std::string item;        // normalized item name
    int offset_min = 0;
    std::string y_true_text;
    std::optional<std::string> unit;
    std::optional<int> minutes_since_prev;

    std::vector<int32_t> ids;
    int demo_len = 0;                              // prompt[0, demo_len) is demographics
    std::vector<std::pair<int, int>> event_spans;  // history blocks, [begin, end)
    std::vector<int32_t> event_ordinals;           // source ordinal per span
    int target_begin = 0;                          // first token of the target header
};

struct PromptOptions {
    TimeMode time_mode = TimeMode::absolute;
    ValueMode value_mode = ValueMode::digit;
    const QuantileBinning* binning = nullptr;
    std::vector<EventType> include_types{kAllEventTypes,
                                         kAllEventTypes + std::size(kAllEventTypes)};
    int max_seq_len = 512;
    int max_new_tokens = 24;
    // Items eligible as targets; normally the training-set item names.
    const ItemStats* universe = nullptr;
};

// Prompts for every lab event whose item is in the universe and whose value
// text parses. History events at the exact target minute are excluded (the
// cut is strictly earlier in time); oldest events are dropped first when the
// prompt would not leave room for generation.
std::vector<InferencePrompt> build_prompts(const IcuStay& stay, const Vocabulary& vocab,
                                           const PromptOptions& opts);

// Longest valid numeric prefix of the generated tokens. Each consumed token
// must be a single value character; everything after the prefix is returned
// as the trailing (unit) tokens.
struct ParsedValue {
    bool ok = false;
    double value = 0.0;
    std::string value_text;
    std::vector<std::string> trailing;
};

ParsedValue parse_value(std::span<const std::string> tokens);

// Mean Shannon entropy (nats) over per-step distributions; each distribution
// must be non-negative and sum to 1 within 1e-6.
double mean_entropy(const std::vector<std::vector<double>>& stepwise);

struct PredictOptions {
    // Target universe and fallback means; usually the training statistics.
    // Null allows every item and disables the fallback.
    const ItemStats* train_stats = nullptr;
    bool fallback_mean = false;  // substitute the training mean on parse failure
    int max_new_tokens = 24;
    int threads = 1;
    std::function<void(size_t done, size_t total)> on_progress;
};

// Runs greedy decoding (digit mode) or a single scored forward position
// (quantile mode) for every prompt of every stay. The textualization modes,
// event-type filter and quantile bins are taken from the checkpoint itself so
// inference cannot drift from how the model was trained. Throws if the
// vocabulary hash does not match the checkpoint.
std::vector<PredictionRecord> predict_all(const LoadedCheckpoint& checkpoint,
                                          const std::vector<IcuStay>& stays,
                                          const Vocabulary& vocab, const PredictOptions& opts);

// Elementwise mean of equally-shaped attention maps (layer aggregation).
MatF average_maps(const std::vector<MatF>& maps);

// Where the model looked while generating: attention averaged over heads,
// layers and the generated token positions, summed per region. Scores over
// the history events are renormalized to sum to 1.
struct AttentionSummary {
    std::vector<int32_t> event_ordinals;  // prompt order
    std::vector<double> event_scores;     // same length; non-negative, sums to 1
    double demo_share = 0.0;              // raw shares before renormalization
    double history_share = 0.0;
    double target_share = 0.0;
    double generated_share = 0.0;
};

AttentionSummary attention_summary(const ModelParams& params, const InferencePrompt& prompt,
                                   std::span<const int32_t> generated);

}  // namespace labpred
