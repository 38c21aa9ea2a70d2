// Command-line front end for the lab-value prediction pipeline:
// synthetic data generation, vocabulary building, training, evaluation
// against history baselines, ablation sweeps, and attention inspection.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "labpred/checkpoint.hpp"
#include "labpred/decode.hpp"
#include "labpred/ehr.hpp"
#include "labpred/infer.hpp"
#include "labpred/metrics.hpp"
#include "labpred/pipeline.hpp"
#include "labpred/runconfig.hpp"
#include "labpred/trainer.hpp"
#include "labpred/vocab.hpp"

namespace fs = std::filesystem;
using namespace labpred;

namespace {

// ---------------------------------------------------------------------------
// Config resolution: JSON file first, then explicit flags on top.

struct ConfigArgs {
    std::string config_path;
    uint64_t seed = 1;
    int threads = 1;
    bool deterministic = false;
    std::string time_mode;
    std::string value_mode;
    int quantile_bins = 0;
    std::string include_types;  // comma separated
    bool full_ar = false;
    int epochs = 0;
    int batch_size = 0;
    double lr = 0.0;
    int patience = 0;
    int max_new = 0;
    bool no_fallback = false;

    CLI::Option* seed_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
    CLI::Option* deterministic_opt = nullptr;
    CLI::Option* time_mode_opt = nullptr;
    CLI::Option* value_mode_opt = nullptr;
    CLI::Option* bins_opt = nullptr;
    CLI::Option* types_opt = nullptr;
    CLI::Option* full_ar_opt = nullptr;
    CLI::Option* epochs_opt = nullptr;
    CLI::Option* batch_opt = nullptr;
    CLI::Option* lr_opt = nullptr;
    CLI::Option* patience_opt = nullptr;
    CLI::Option* max_new_opt = nullptr;
    CLI::Option* no_fallback_opt = nullptr;
};

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.config_path, "JSON config file; flags override its values")
        ->check(CLI::ExistingFile);
    a.seed_opt = cmd->add_option("--seed", a.seed, "master seed (also drives data generation)");
    a.threads_opt = cmd->add_option("--threads", a.threads, "worker threads for inference")
                        ->envname("LABPRED_THREADS");
    a.deterministic_opt = cmd->add_flag("--deterministic", a.deterministic,
                                        "bitwise-reproducible runs; forces one thread");
    a.time_mode_opt = cmd->add_option("--time-mode", a.time_mode, "absolute | relative");
    a.value_mode_opt = cmd->add_option("--value-mode", a.value_mode, "digit | quantile");
    a.bins_opt = cmd->add_option("--quantile-bins", a.quantile_bins, "bins for quantile mode");
    a.types_opt = cmd->add_option("--include-types", a.include_types,
                                  "comma-separated event types to keep");
    a.full_ar_opt = cmd->add_flag("--full-ar", a.full_ar, "charge the loss on every token");
    a.epochs_opt = cmd->add_option("--epochs", a.epochs, "max training epochs");
    a.batch_opt = cmd->add_option("--batch-size", a.batch_size, "training batch size");
    a.lr_opt = cmd->add_option("--lr", a.lr, "Adam learning rate");
    a.patience_opt = cmd->add_option("--patience", a.patience, "early-stopping patience");
    a.max_new_opt = cmd->add_option("--max-new", a.max_new, "generation cap per prediction");
    a.no_fallback_opt = cmd->add_flag("--no-fallback", a.no_fallback,
                                      "do not substitute the training mean on parse failure");
}

RunConfig resolve_config(const ConfigArgs& a) {
    RunConfig cfg;
    if (!a.config_path.empty()) cfg = load_run_config(a.config_path);
    if (a.seed_opt->count() > 0) {
        cfg.seed = a.seed;
        cfg.synth.seed = a.seed;  // one master seed; generation derives its own streams
    }
    if (a.threads_opt->count() > 0) cfg.threads = a.threads;
    if (a.deterministic_opt->count() > 0) cfg.deterministic = true;
    if (a.time_mode_opt->count() > 0) cfg.time_mode = time_mode_from_string(a.time_mode);
    if (a.value_mode_opt->count() > 0) cfg.value_mode = value_mode_from_string(a.value_mode);
    if (a.bins_opt->count() > 0) cfg.quantile_bins = a.quantile_bins;
    if (a.types_opt->count() > 0) {
        cfg.include_types.clear();
        for (const std::string& t : split_csv(a.include_types))
            cfg.include_types.push_back(event_type_from_string(t));
    }
    if (a.full_ar_opt->count() > 0) cfg.full_ar = true;
    if (a.epochs_opt->count() > 0) cfg.max_epochs = a.epochs;
    if (a.batch_opt->count() > 0) cfg.batch_size = a.batch_size;
    if (a.lr_opt->count() > 0) cfg.adam.lr = a.lr;
    if (a.patience_opt->count() > 0) cfg.patience = a.patience;
    if (a.max_new_opt->count() > 0) cfg.max_new_tokens = a.max_new;
    if (a.no_fallback_opt->count() > 0) cfg.fallback_mean = false;
    if (cfg.deterministic) {
        cfg.threads = 1;
        Eigen::setNbThreads(1);  // pin the matrix kernels too
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Shared plumbing.

long count_lab_events(const std::vector<IcuStay>& stays) {
    long n = 0;
    for (const IcuStay& s : stays)
        for (const MedicalEvent& e : s.events)
            if (e.type == EventType::labevent) ++n;
    return n;
}

std::vector<IcuStay> load_split(const std::string& data_dir, const std::string& split) {
    fs::path path = fs::path(data_dir) / (split + ".jsonl");
    LoadResult r = load_dataset(path.string());
    if (r.dropped_short_stays > 0)
        std::fprintf(stderr, "note: dropped %d short stays from %s\n", r.dropped_short_stays,
                     path.string().c_str());
    return std::move(r.stays);
}

// Vocabulary building always textualizes with every event type and digit
// values: special tokens cover the quantile bins and digits either way, so
// one table serves every mode and every ablation leg.
Vocabulary build_vocab_from(const std::vector<IcuStay>& stays) {
    TextualizeOptions topts;  // absolute/digit/all types
    std::vector<SequenceRecord> corpus;
    corpus.reserve(stays.size());
    for (const IcuStay& stay : stays) corpus.push_back(assemble_sequence(stay, std::nullopt, topts));
    return Vocabulary::build(corpus);
}

Vocabulary load_or_build_vocab(const std::string& path, const std::vector<IcuStay>& train_stays) {
    if (fs::exists(path)) return Vocabulary::load(path);
    Vocabulary vocab = build_vocab_from(train_stays);
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    vocab.save(path);
    std::printf("built vocabulary: %d tokens -> %s\n", vocab.size(), path.c_str());
    return vocab;
}

void check_vocab_hash(const LoadedCheckpoint& ckpt, const Vocabulary& vocab) {
    if (ckpt.meta.vocab_hash != vocab.hash())
        throw std::invalid_argument(
            "vocabulary hash does not match the checkpoint; evaluate with the table the model "
            "was trained on");
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

void write_file(const std::string& path, const std::string& text) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
    ConfigArgs cfg;
    std::string out_dir;
};

void run_gen_data(const GenDataArgs& args) {
    RunConfig cfg = resolve_config(args.cfg);
    std::vector<IcuStay> stays = generate_synthetic(cfg.synth);
    DatasetSplit split = split_dataset(stays, cfg.split, cfg.seed);

    fs::create_directories(args.out_dir);
    const std::pair<const char*, const std::vector<IcuStay>*> parts[] = {
        {"train", &split.train}, {"val", &split.val}, {"test", &split.test}};
    for (const auto& [name, part] : parts) {
        fs::path path = fs::path(args.out_dir) / (std::string(name) + ".jsonl");
        write_dataset(path.string(), *part);
        std::printf("%s: %zu stays, %ld lab events -> %s\n", name, part->size(),
                    count_lab_events(*part), path.string().c_str());
    }
}

// ---------------------------------------------------------------------------
// build-vocab

struct BuildVocabArgs {
    std::string data_dir;
    std::string out_path;
};

void run_build_vocab(const BuildVocabArgs& args) {
    std::vector<IcuStay> train_stays = load_split(args.data_dir, "train");
    Vocabulary vocab = build_vocab_from(train_stays);
    if (fs::path(args.out_path).has_parent_path())
        fs::create_directories(fs::path(args.out_path).parent_path());
    vocab.save(args.out_path);
    std::printf("built vocabulary: %d tokens -> %s\n", vocab.size(), args.out_path.c_str());
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    ConfigArgs cfg;
    std::string data_dir;
    std::string vocab_path;
    std::string out_path;
    std::string resume_path;
    std::string log_path;
};

void run_train(const TrainArgs& args) {
    RunConfig cfg = resolve_config(args.cfg);
    std::vector<IcuStay> train_stays = load_split(args.data_dir, "train");
    std::vector<IcuStay> val_stays = load_split(args.data_dir, "val");

    std::string vocab_path = args.vocab_path.empty()
                                 ? (fs::path(args.data_dir) / "vocab.txt").string()
                                 : args.vocab_path;
    Vocabulary vocab = load_or_build_vocab(vocab_path, train_stays);

    std::optional<QuantileBinning> binning = fit_binning(cfg, train_stays);

    std::optional<LoadedCheckpoint> resume;
    if (!args.resume_path.empty()) resume = load_checkpoint(args.resume_path);

    std::ofstream log;
    if (!args.log_path.empty()) {
        if (fs::path(args.log_path).has_parent_path())
            fs::create_directories(fs::path(args.log_path).parent_path());
        log.open(args.log_path, std::ios::binary);
        if (!log) throw std::runtime_error("cannot write " + args.log_path);
        log << "epoch,train_loss,val_loss,steps,lr,improved\n";
    }
    auto on_epoch = [&](const EpochLog& e) {
        std::printf("epoch %d train %.6f val %.6f steps %ld lr %.6g%s\n", e.epoch, e.train_loss,
                    e.val_loss, e.steps, e.lr, e.improved ? " *" : "");
        std::fflush(stdout);
        if (log)
            log << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.steps << ','
                << e.lr << ',' << (e.improved ? 1 : 0) << '\n'
                << std::flush;
    };

    TrainingRun run = run_training(cfg, train_stays, val_stays, vocab,
                                   binning ? &*binning : nullptr,
                                   resume ? &*resume : nullptr, on_epoch);

    if (fs::path(args.out_path).has_parent_path())
        fs::create_directories(fs::path(args.out_path).parent_path());
    save_checkpoint(args.out_path, run.result.best_params, run.meta);
    std::printf("best epoch %d val %.6f after %d epochs (%ld steps) -> %s\n",
                run.result.best_epoch, run.result.best_val_loss, run.result.epochs_run,
                run.result.total_steps, args.out_path.c_str());
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
    ConfigArgs cfg;
    std::string model_path;
    std::string data_dir;
    std::string vocab_path;
    std::string split = "test";
    std::string out_dir;
};

void print_report_row(const char* name, const MetricReport& r) {
    std::printf("%-12s %6ld %8.4f %12.4f %13.2f %14.4f %15.2f\n", name, r.n_records,
                r.failure_rate, r.macro_nmae, r.macro_smape, r.weighted_nmae, r.weighted_smape);
}

std::string comparison_csv_row(const std::string& name, const MetricReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%ld,%ld,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(),
                  r.n_records, r.n_failed, r.failure_rate, r.macro_nmae, r.macro_smape,
                  r.weighted_nmae, r.weighted_smape);
    return buf;
}

void run_evaluate(const EvaluateArgs& args) {
    RunConfig cfg = resolve_config(args.cfg);
    LoadedCheckpoint ckpt = load_checkpoint(args.model_path);
    std::string vocab_path = args.vocab_path.empty()
                                 ? (fs::path(args.data_dir) / "vocab.txt").string()
                                 : args.vocab_path;
    Vocabulary vocab = Vocabulary::load(vocab_path);
    check_vocab_hash(ckpt, vocab);

    std::vector<IcuStay> eval_stays = load_split(args.data_dir, args.split);
    std::vector<IcuStay> train_stays = load_split(args.data_dir, "train");

    EvaluateParams params;
    params.max_new_tokens = cfg.max_new_tokens;
    params.fallback_mean = cfg.fallback_mean;
    params.threads = cfg.threads;
    size_t last_pct = SIZE_MAX;
    if (cfg.threads == 1) {
        params.on_progress = [&](size_t done, size_t total) {
            size_t pct = total == 0 ? 100 : done * 100 / total;
            if (pct != last_pct) {
                std::fprintf(stderr, "\rpredicting %zu/%zu (%zu%%)", done, total, pct);
                if (done == total) std::fprintf(stderr, "\n");
                std::fflush(stderr);
                last_pct = pct;
            }
        };
    }

    EvaluationOutput out = run_evaluation(ckpt, eval_stays, train_stays, vocab, params);

    std::printf("%-12s %6s %8s %12s %13s %14s %15s\n", "system", "n", "fail", "macro_nmae",
                "macro_smape", "weighted_nmae", "weighted_smape");
    print_report_row("model", out.model_report);
    print_report_row("naive", out.naive_report);
    print_report_row("naive_mean", out.naive_mean_report);
    print_report_row("model[<24h]", out.model_stratified.recent);
    print_report_row("model[>=24h]", out.model_stratified.stale);

    if (!args.out_dir.empty()) {
        fs::create_directories(args.out_dir);
        fs::path dir(args.out_dir);
        write_predictions_csv((dir / "predictions.csv").string(), out.model);
        write_file((dir / "model_report.json").string(), report_to_json(out.model_report) + "\n");
        write_file((dir / "naive_report.json").string(), report_to_json(out.naive_report) + "\n");
        write_file((dir / "naive_mean_report.json").string(),
                   report_to_json(out.naive_mean_report) + "\n");
        std::string cmp =
            "system,n_records,n_failed,failure_rate,macro_nmae,macro_smape,weighted_nmae,"
            "weighted_smape\n";
        cmp += comparison_csv_row("model", out.model_report);
        cmp += comparison_csv_row("naive", out.naive_report);
        cmp += comparison_csv_row("naive_mean", out.naive_mean_report);
        cmp += comparison_csv_row("model_recent", out.model_stratified.recent);
        cmp += comparison_csv_row("model_stale", out.model_stratified.stale);
        write_file((dir / "comparison.csv").string(), cmp);
        std::printf("wrote %s\n", (dir / "comparison.csv").string().c_str());
    }
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
    ConfigArgs cfg;
    std::string data_dir;
    std::string out_path = "ablation.csv";
    std::vector<std::string> axes;
    std::string seeds;  // comma separated
};

struct Leg {
    std::string value_mode;  // digit | quantile5 | quantile20
    std::string time_mode;   // absolute | relative
    std::string events;      // labs | labs+meds
    std::string loss;        // masked | full_ar
};

void apply_leg(RunConfig& cfg, const Leg& leg) {
    if (leg.value_mode == "digit") {
        cfg.value_mode = ValueMode::digit;
    } else if (leg.value_mode == "quantile5") {
        cfg.value_mode = ValueMode::quantile;
        cfg.quantile_bins = 5;
    } else if (leg.value_mode == "quantile20") {
        cfg.value_mode = ValueMode::quantile;
        cfg.quantile_bins = 20;
    } else {
        throw std::invalid_argument("unknown value leg: " + leg.value_mode);
    }
    cfg.time_mode = time_mode_from_string(leg.time_mode);
    cfg.include_types = leg.events == "labs"
                            ? std::vector<EventType>{EventType::labevent}
                            : std::vector<EventType>{EventType::labevent, EventType::medication};
    cfg.full_ar = leg.loss == "full_ar";
}

void run_ablate(const AblateArgs& args) {
    RunConfig base = resolve_config(args.cfg);

    Leg base_leg;
    base_leg.value_mode = base.value_mode == ValueMode::digit
                              ? "digit"
                              : (base.quantile_bins <= 5 ? "quantile5" : "quantile20");
    base_leg.time_mode = to_string(base.time_mode);
    bool base_has_meds = false;
    for (EventType t : base.include_types)
        if (t == EventType::medication) base_has_meds = true;
    base_leg.events = base_has_meds ? "labs+meds" : "labs";
    base_leg.loss = base.full_ar ? "full_ar" : "masked";

    std::vector<std::string> value_axis{base_leg.value_mode};
    std::vector<std::string> time_axis{base_leg.time_mode};
    std::vector<std::string> events_axis{base_leg.events};
    std::vector<std::string> loss_axis{base_leg.loss};
    for (const std::string& axis : args.axes) {
        if (axis == "value") value_axis = {"digit", "quantile5", "quantile20"};
        else if (axis == "time") time_axis = {"absolute", "relative"};
        else if (axis == "events") events_axis = {"labs", "labs+meds"};
        else if (axis == "loss") loss_axis = {"masked", "full_ar"};
        else throw std::invalid_argument("unknown ablation axis: " + axis +
                                         " (have value, time, events, loss)");
    }

    std::vector<uint64_t> seeds;
    if (!args.seeds.empty()) {
        for (const std::string& s : split_csv(args.seeds)) seeds.push_back(std::stoull(s));
    } else {
        seeds.push_back(base.seed);
    }
    if (seeds.empty()) throw std::invalid_argument("no seeds given");

    std::vector<IcuStay> train_stays = load_split(args.data_dir, "train");
    std::vector<IcuStay> val_stays = load_split(args.data_dir, "val");
    std::vector<IcuStay> test_stays = load_split(args.data_dir, "test");
    Vocabulary vocab = build_vocab_from(train_stays);  // one table for every leg

    std::string csv =
        "value_mode,time_mode,events,loss,seed,status,epochs,best_val_loss,macro_nmae,"
        "macro_smape,weighted_smape,failure_rate,error\n";
    for (const std::string& vm : value_axis)
        for (const std::string& tm : time_axis)
            for (const std::string& ev : events_axis)
                for (const std::string& lo : loss_axis)
                    for (uint64_t seed : seeds) {
                        Leg leg{vm, tm, ev, lo};
                        char head[160];
                        std::snprintf(head, sizeof(head), "%s,%s,%s,%s,%" PRIu64, vm.c_str(),
                                      tm.c_str(), ev.c_str(), lo.c_str(), seed);
                        std::printf("leg %s ...\n", head);
                        std::fflush(stdout);
                        std::string row;
                        try {
                            RunConfig cfg = base;
                            cfg.seed = seed;
                            apply_leg(cfg, leg);
                            cfg.validate();
                            std::optional<QuantileBinning> binning =
                                fit_binning(cfg, train_stays);
                            TrainingRun run =
                                run_training(cfg, train_stays, val_stays, vocab,
                                             binning ? &*binning : nullptr);
                            LoadedCheckpoint ckpt{run.result.best_params, run.meta};
                            EvaluateParams params;
                            params.max_new_tokens = cfg.max_new_tokens;
                            params.fallback_mean = cfg.fallback_mean;
                            params.threads = cfg.threads;
                            EvaluationOutput out =
                                run_evaluation(ckpt, test_stays, train_stays, vocab, params);
                            char buf[320];
                            std::snprintf(buf, sizeof(buf),
                                          "%s,ok,%d,%.6f,%.6f,%.6f,%.6f,%.6f,\n", head,
                                          run.result.epochs_run, run.result.best_val_loss,
                                          out.model_report.macro_nmae,
                                          out.model_report.macro_smape,
                                          out.model_report.weighted_smape,
                                          out.model_report.failure_rate);
                            row = buf;
                        } catch (const std::exception& e) {
                            row = std::string(head) + ",failed,,,,,,," +
                                  csv_escape(e.what()) + "\n";
                        }
                        csv += row;
                        std::printf("  %s", row.c_str());
                        std::fflush(stdout);
                    }
    write_file(args.out_path, csv);
    std::printf("wrote %s\n", args.out_path.c_str());
}

// ---------------------------------------------------------------------------
// attn

struct AttnArgs {
    std::string model_path;
    std::string vocab_path;
    std::string data_path;  // .jsonl file
    std::string stay_id;
    int target = -1;  // event ordinal of the target lab; -1 = last prompt
    int max_new = 24;
    std::string out_path;
};

void run_attn(const AttnArgs& args) {
    LoadedCheckpoint ckpt = load_checkpoint(args.model_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);
    check_vocab_hash(ckpt, vocab);

    LoadResult data = load_dataset(args.data_path);
    const IcuStay* stay = nullptr;
    if (args.stay_id.empty()) {
        if (data.stays.empty()) throw std::runtime_error("dataset has no stays");
        stay = &data.stays.front();
    } else {
        for (const IcuStay& s : data.stays)
            if (s.stay_id == args.stay_id) stay = &s;
        if (stay == nullptr) throw std::runtime_error("no stay with id " + args.stay_id);
    }

    PromptOptions popts;
    popts.time_mode = time_mode_from_string(ckpt.meta.time_mode);
    popts.value_mode = value_mode_from_string(ckpt.meta.value_mode);
    popts.include_types.clear();
    for (const std::string& t : ckpt.meta.include_types)
        popts.include_types.push_back(event_type_from_string(t));
    QuantileBinning binning;
    if (!ckpt.meta.binning.empty()) {
        binning = QuantileBinning::deserialize(ckpt.meta.binning);
        popts.binning = &binning;
    }
    popts.max_seq_len = ckpt.params.config.max_seq_len;
    popts.max_new_tokens = args.max_new;

    std::vector<InferencePrompt> prompts = build_prompts(*stay, vocab, popts);
    if (prompts.empty()) throw std::runtime_error("stay has no predictable lab events");
    const InferencePrompt* prompt = nullptr;
    if (args.target < 0) {
        prompt = &prompts.back();
    } else {
        for (const InferencePrompt& p : prompts)
            if (p.target_ordinal == args.target) prompt = &p;
        if (prompt == nullptr)
            throw std::runtime_error("no predictable lab event with ordinal " +
                                     std::to_string(args.target));
    }

    DecoderSession session(ckpt.params);
    GreedyResult gen = greedy_decode(session, prompt->ids, Vocabulary::kEoeId, args.max_new);
    AttentionSummary summary = attention_summary(ckpt.params, *prompt, gen.ids);

    std::string text;
    for (int32_t id : gen.ids) {
        if (!text.empty()) text += ' ';
        text += vocab.token_of(id);
    }
    std::printf("stay %s target #%d %s@%dmin true=%s predicted=\"%s\"\n", stay->stay_id.c_str(),
                prompt->target_ordinal, prompt->item.c_str(), prompt->offset_min,
                prompt->y_true_text.c_str(), text.c_str());
    std::printf("attention shares: demographics %.4f history %.4f target %.4f generated %.4f\n",
                summary.demo_share, summary.history_share, summary.target_share,
                summary.generated_share);

    std::string csv = "event_ordinal,offset_min,type,item,score\n";
    for (size_t i = 0; i < summary.event_ordinals.size(); ++i) {
        const MedicalEvent& e = stay->events.at(summary.event_ordinals[i]);
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%d,%d,%s,%s,%.6f\n", summary.event_ordinals[i],
                      e.offset_min, to_string(e.type),
                      csv_escape(normalize_item_name(e.desc)).c_str(), summary.event_scores[i]);
        csv += buf;
    }
    if (!args.out_path.empty()) {
        write_file(args.out_path, csv);
        std::printf("wrote %s\n", args.out_path.c_str());
    } else {
        std::fputs(csv.c_str(), stdout);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lab-value prediction on ICU event streams"};
    app.require_subcommand(1);
    app.failure_message([](const CLI::App*, const CLI::Error& e) {
        return std::string("error: ") + e.what() + "\n";
    });

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset and split it");
    add_config_options(gen_cmd, gen.cfg);
    gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();

    BuildVocabArgs bv;
    CLI::App* bv_cmd = app.add_subcommand("build-vocab", "build the token table from train data");
    bv_cmd->add_option("--data", bv.data_dir, "dataset directory")->required();
    bv_cmd->add_option("--out", bv.out_path, "vocabulary file")->required();

    TrainArgs tr;
    CLI::App* tr_cmd = app.add_subcommand("train", "train a model");
    add_config_options(tr_cmd, tr.cfg);
    tr_cmd->add_option("--data", tr.data_dir, "dataset directory")->required();
    tr_cmd->add_option("--vocab", tr.vocab_path, "vocabulary file (built there if absent)");
    tr_cmd->add_option("--out", tr.out_path, "checkpoint file")->required();
    tr_cmd->add_option("--resume", tr.resume_path, "checkpoint to continue from")
        ->check(CLI::ExistingFile);
    tr_cmd->add_option("--log", tr.log_path, "per-epoch CSV log");

    EvaluateArgs ev;
    CLI::App* ev_cmd = app.add_subcommand("evaluate", "score a model against the baselines");
    add_config_options(ev_cmd, ev.cfg);
    ev_cmd->add_option("--model", ev.model_path, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    ev_cmd->add_option("--data", ev.data_dir, "dataset directory")->required();
    ev_cmd->add_option("--vocab", ev.vocab_path, "vocabulary file");
    ev_cmd->add_option("--split", ev.split, "train | val | test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    ev_cmd->add_option("--out", ev.out_dir, "directory for predictions and reports");

    AblateArgs ab;
    CLI::App* ab_cmd = app.add_subcommand("ablate", "train and score every leg of chosen axes");
    add_config_options(ab_cmd, ab.cfg);
    ab_cmd->add_option("--data", ab.data_dir, "dataset directory")->required();
    ab_cmd->add_option("--out", ab.out_path, "consolidated CSV path");
    ab_cmd->add_option("--axes", ab.axes, "axes to sweep: value, time, events, loss")
        ->required()
        ->delimiter(',');
    ab_cmd->add_option("--seeds", ab.seeds, "comma-separated seeds shared by every leg");

    AttnArgs at;
    CLI::App* at_cmd = app.add_subcommand("attn", "per-event attention scores for one prediction");
    at_cmd->add_option("--model", at.model_path, "checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    at_cmd->add_option("--vocab", at.vocab_path, "vocabulary file")->required();
    at_cmd->add_option("--data", at.data_path, "dataset file (.jsonl)")->required();
    at_cmd->add_option("--stay", at.stay_id, "stay id (default: first stay)");
    at_cmd->add_option("--target", at.target, "event ordinal of the target lab");
    at_cmd->add_option("--max-new", at.max_new, "generation cap");
    at_cmd->add_option("--out", at.out_path, "CSV path (default: stdout)");

    try {
        app.parse(argc, argv);
        if (*gen_cmd) run_gen_data(gen);
        if (*bv_cmd) run_build_vocab(bv);
        if (*tr_cmd) run_train(tr);
        if (*ev_cmd) run_evaluate(ev);
        if (*ab_cmd) run_ablate(ab);
        if (*at_cmd) run_attn(at);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fflush(stdout);
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
