#include "labpred/pipeline.hpp"

#include <stdexcept>
#include <unordered_map>

#include "labpred/rng.hpp"

namespace labpred {

TextualizeOptions textualize_options(const RunConfig& config, const QuantileBinning* binning) {
    TextualizeOptions opts;
    opts.time_mode = config.time_mode;
    opts.value_mode = config.value_mode;
    opts.include_types = config.include_types;
    opts.binning = binning;
    if (config.value_mode == ValueMode::quantile && binning == nullptr)
        throw std::invalid_argument("quantile value mode needs fitted bins");
    return opts;
}

std::vector<EncodedSequence> encode_stays(const std::vector<IcuStay>& stays,
                                          const Vocabulary& vocab,
                                          const TextualizeOptions& topts, int max_seq_len,
                                          std::optional<uint64_t> permute_seed) {
    std::vector<EncodedSequence> out;
    out.reserve(stays.size());
    for (size_t i = 0; i < stays.size(); ++i) {
        std::optional<uint64_t> stay_seed;
        if (permute_seed) stay_seed = derive_seed(*permute_seed, "stay-permute", i);
        SequenceRecord record = assemble_sequence(stays[i], stay_seed, topts);
        for (const SequenceRecord& window : crop_sequence(record, max_seq_len)) {
            EncodedSequence seq;
            seq.ids = vocab.encode(window.tokens);
            seq.loss_mask = compute_loss_mask(window);
            out.push_back(std::move(seq));
        }
    }
    return out;
}

std::optional<QuantileBinning> fit_binning(const RunConfig& config,
                                           const std::vector<IcuStay>& train_stays) {
    if (config.value_mode != ValueMode::quantile) return std::nullopt;
    return QuantileBinning::fit_from_stays(train_stays, config.quantile_bins);
}

TrainingRun run_training(const RunConfig& config, const std::vector<IcuStay>& train_stays,
                         const std::vector<IcuStay>& val_stays, const Vocabulary& vocab,
                         const QuantileBinning* binning, const LoadedCheckpoint* resume,
                         const std::function<void(const EpochLog&)>& on_epoch) {
    TextualizeOptions topts = textualize_options(config, binning);

    ModelConfig mcfg = config.model;
    mcfg.vocab_size = vocab.size();

    ModelParams initial;
    long initial_step = 0;
    int prior_epochs = 0;
    if (resume != nullptr) {
        if (resume->meta.vocab_hash != vocab.hash())
            throw std::invalid_argument("vocabulary hash does not match the resume checkpoint");
        const ModelConfig& prev = resume->params.config;
        if (prev.n_layers != mcfg.n_layers || prev.n_heads != mcfg.n_heads ||
            prev.d_model != mcfg.d_model || prev.d_ff_resolved() != mcfg.d_ff_resolved() ||
            prev.max_seq_len != mcfg.max_seq_len || prev.vocab_size != mcfg.vocab_size)
            throw std::invalid_argument("resume checkpoint has a different model shape");
        initial = resume->params;
        initial_step = resume->meta.steps;
        prior_epochs = resume->meta.epochs;
    } else {
        initial = ModelParams::init(mcfg, config.seed);
    }

    std::vector<EncodedSequence> val =
        encode_stays(val_stays, vocab, topts, mcfg.max_seq_len, std::nullopt);

    EpochSource source = [&, topts, msl = mcfg.max_seq_len](int epoch) {
        uint64_t seed = derive_seed(config.seed, "epoch-permute", static_cast<uint64_t>(epoch));
        return encode_stays(train_stays, vocab, topts, msl, seed);
    };

    TrainOptions opts;
    opts.adam = config.adam;
    opts.batch_size = config.batch_size;
    opts.max_epochs = config.max_epochs;
    opts.patience = config.patience;
    opts.full_ar = config.full_ar;
    opts.dropout = config.model.dropout;
    opts.seed = config.seed;
    opts.initial_step = initial_step;
    opts.on_epoch = on_epoch;

    TrainingRun run;
    run.result = train(std::move(initial), source, val, opts);

    CheckpointMeta meta;
    meta.vocab_hash = vocab.hash();
    meta.seed = config.seed;
    meta.steps = run.result.total_steps;
    meta.epochs = prior_epochs + run.result.epochs_run;
    meta.best_epoch = run.result.best_epoch;
    meta.best_val_loss = run.result.best_val_loss;
    meta.time_mode = to_string(config.time_mode);
    meta.value_mode = to_string(config.value_mode);
    meta.quantile_bins = config.value_mode == ValueMode::quantile ? config.quantile_bins : 0;
    if (binning != nullptr && config.value_mode == ValueMode::quantile)
        meta.binning = binning->serialize();
    for (EventType t : config.include_types) meta.include_types.push_back(to_string(t));
    meta.full_ar = config.full_ar;
    run.meta = meta;
    return run;
}

EvaluationOutput run_evaluation(const LoadedCheckpoint& checkpoint,
                                const std::vector<IcuStay>& eval_stays,
                                const std::vector<IcuStay>& train_stays,
                                const Vocabulary& vocab, const EvaluateParams& params) {
    ItemStats train_stats = ItemStats::from_stays(train_stays);

    PredictOptions popts;
    popts.train_stats = &train_stats;
    popts.fallback_mean = params.fallback_mean;
    popts.max_new_tokens = params.max_new_tokens;
    popts.threads = params.threads;
    popts.on_progress = params.on_progress;

    EvaluationOutput out;
    out.model = predict_all(checkpoint, eval_stays, vocab, popts);

    std::unordered_map<std::string, const IcuStay*> by_id;
    by_id.reserve(eval_stays.size());
    for (const IcuStay& stay : eval_stays) by_id[stay.stay_id] = &stay;

    // Both baselines answer the exact targets the model saw, so every system
    // is scored on identical records.
    out.naive.reserve(out.model.size());
    out.naive_mean.reserve(out.model.size());
    for (const PredictionRecord& r : out.model) {
        const IcuStay* stay = by_id.at(r.stay_id);
        PredictionRecord base;
        base.stay_id = r.stay_id;
        base.item = r.item;
        base.offset_min = r.offset_min;
        base.y_true = r.y_true;
        base.minutes_since_prev = r.minutes_since_prev;

        BaselineResult last = naive_predict(*stay, r.item, r.offset_min, train_stats);
        PredictionRecord n = base;
        n.y_pred = last.value;
        n.fallback_used = last.from_fallback;
        out.naive.push_back(std::move(n));

        BaselineResult mean = naive_mean_predict(*stay, r.item, r.offset_min, train_stats);
        PredictionRecord m = base;
        m.y_pred = mean.value;
        m.fallback_used = mean.from_fallback;
        out.naive_mean.push_back(std::move(m));
    }

    out.scales = metric_scales(out.model);
    out.model_report = evaluate_records(out.model, out.scales);
    out.naive_report = evaluate_records(out.naive, out.scales);
    out.naive_mean_report = evaluate_records(out.naive_mean, out.scales);
    out.model_stratified = stratified_report(out.model, out.scales);
    return out;
}

}  // namespace labpred
