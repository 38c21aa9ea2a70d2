#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "labpred/checkpoint.hpp"
#include "labpred/infer.hpp"
#include "labpred/metrics.hpp"
#include "labpred/runconfig.hpp"
#include "labpred/trainer.hpp"
#include "labpred/vocab.hpp"

namespace labpred {

// Glue between the experiment config and the individual stages, shared by the
// command-line tool and the end-to-end tests so both always run the exact
// same recipe.

TextualizeOptions textualize_options(const RunConfig& config, const QuantileBinning* binning);

// Textualizes, crops to max_seq_len and tokenizes stays into training
// sequences (ids plus loss mask). A permute seed shuffles same-minute event
// groups, with a distinct stream per stay.
std::vector<EncodedSequence> encode_stays(const std::vector<IcuStay>& stays,
                                          const Vocabulary& vocab,
                                          const TextualizeOptions& topts, int max_seq_len,
                                          std::optional<uint64_t> permute_seed);

struct TrainingRun {
    TrainResult result;
    CheckpointMeta meta;  // ready to save next to the best parameters
};

// Full training stage: quantile bins must already be fitted when the config
// asks for them. Each epoch re-textualizes the training stays with a fresh
// permutation stream; validation sequences are fixed. `resume` continues from
// a previous checkpoint (step counter and epoch count carry on).
TrainingRun run_training(const RunConfig& config, const std::vector<IcuStay>& train_stays,
                         const std::vector<IcuStay>& val_stays, const Vocabulary& vocab,
                         const QuantileBinning* binning,
                         const LoadedCheckpoint* resume = nullptr,
                         const std::function<void(const EpochLog&)>& on_epoch = nullptr);

// Fits bins on the training stays when the config's value mode needs them.
std::optional<QuantileBinning> fit_binning(const RunConfig& config,
                                           const std::vector<IcuStay>& train_stays);

struct EvaluationOutput {
    std::vector<PredictionRecord> model;       // one record per eval target
    std::vector<PredictionRecord> naive;       // last prior value, same targets
    std::vector<PredictionRecord> naive_mean;  // mean of prior values
    std::unordered_map<std::string, MetricScale> scales;
    MetricReport model_report;
    MetricReport naive_report;
    MetricReport naive_mean_report;
    StratifiedReport model_stratified;
};

struct EvaluateParams {
    int max_new_tokens = 24;
    bool fallback_mean = true;
    int threads = 1;
    std::function<void(size_t, size_t)> on_progress;
};

// Runs the model over every eval target, scores the two history baselines on
// the identical targets, and reports all three against shared scales.
EvaluationOutput run_evaluation(const LoadedCheckpoint& checkpoint,
                                const std::vector<IcuStay>& eval_stays,
                                const std::vector<IcuStay>& train_stays,
                                const Vocabulary& vocab, const EvaluateParams& params = {});

}  // namespace labpred
