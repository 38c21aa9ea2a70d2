#include "labpred/infer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include "labpred/decode.hpp"

namespace labpred {

namespace {

bool single_char(const std::string& t) { return t.size() == 1; }
bool digit_token(const std::string& t) { return single_char(t) && t[0] >= '0' && t[0] <= '9'; }

}  // namespace

std::vector<InferencePrompt> build_prompts(const IcuStay& stay, const Vocabulary& vocab,
                                           const PromptOptions& opts) {
    TextualizeOptions topts;
    topts.time_mode = opts.time_mode;
    topts.value_mode = opts.value_mode;
    topts.binning = opts.binning;
    topts.include_types = opts.include_types;

    std::vector<std::string> demo_tokens = textualize_demographics(stay.demographics);
    std::vector<int32_t> demo_ids = vocab.encode(demo_tokens);

    // History blocks for every kept event, with intervals over consecutive
    // kept events exactly as training assembly computes them.
    struct Block {
        int32_t ordinal;
        int offset;
        std::vector<int32_t> ids;
    };
    std::vector<Block> blocks;
    std::optional<int> prev_offset;
    for (size_t i = 0; i < stay.events.size(); ++i) {
        const MedicalEvent& e = stay.events[i];
        if (!topts.includes(e.type)) continue;
        TokenSpan span = event_block(stay, e, prev_offset, topts);
        blocks.push_back({static_cast<int32_t>(i), e.offset_min, vocab.encode(span.tokens)});
        prev_offset = e.offset_min;
    }

    std::vector<InferencePrompt> prompts;
    for (size_t k = 0; k < stay.events.size(); ++k) {
        const MedicalEvent& target = stay.events[k];
        if (target.type != EventType::labevent) continue;
        if (!target.value || !is_valid_value_string(*target.value)) continue;
        std::string item = normalize_item_name(target.desc);
        if (opts.universe && !opts.universe->contains(item)) continue;

        InferencePrompt p;
        p.stay_id = stay.stay_id;
        p.target_ordinal = static_cast<int>(k);
        p.item = item;
        p.offset_min = target.offset_min;
        p.y_true_text = *target.value;
        p.unit = target.unit;
        for (size_t i = 0; i < k; ++i) {
            const MedicalEvent& e = stay.events[i];
            if (e.type == EventType::labevent && e.offset_min < target.offset_min &&
                e.value && is_valid_value_string(*e.value) &&
                normalize_item_name(e.desc) == item)
                p.minutes_since_prev = target.offset_min - e.offset_min;
        }

        // Target header: timestamp (absolute mode only), type word, item
        // words. Generation picks up right where the value would start.
        std::vector<std::string> header;
        if (opts.time_mode == TimeMode::absolute) {
            TimeTokens t = encode_time(stay.admit_datetime, target.offset_min);
            header = {t.day, t.weekday, t.hour, t.minute};
        }
        header.push_back(to_string(target.type));
        for (const std::string& w : split_item_words(item)) header.push_back(w);
        std::vector<int32_t> header_ids = vocab.encode(header);

        // Strictly earlier history only; then drop the oldest blocks until
        // the prompt leaves room to generate.
        size_t first_block = 0;
        std::vector<const Block*> history;
        for (const Block& b : blocks)
            if (b.offset < target.offset_min) history.push_back(&b);
        size_t total = demo_ids.size() + header_ids.size();
        for (const Block* b : history) total += b->ids.size();
        while (first_block < history.size() &&
               total + size_t(opts.max_new_tokens) > size_t(opts.max_seq_len))
            total -= history[first_block++]->ids.size();
        if (total + size_t(opts.max_new_tokens) > size_t(opts.max_seq_len))
            throw std::invalid_argument("prompt for stay " + stay.stay_id +
                                        " cannot fit in max_seq_len " +
                                        std::to_string(opts.max_seq_len));

        p.ids = demo_ids;
        p.demo_len = static_cast<int>(demo_ids.size());
        for (size_t b = first_block; b < history.size(); ++b) {
            p.event_spans.emplace_back(static_cast<int>(p.ids.size()),
                                       static_cast<int>(p.ids.size() + history[b]->ids.size()));
            p.event_ordinals.push_back(history[b]->ordinal);
            p.ids.insert(p.ids.end(), history[b]->ids.begin(), history[b]->ids.end());
        }
        p.target_begin = static_cast<int>(p.ids.size());
        p.ids.insert(p.ids.end(), header_ids.begin(), header_ids.end());
        prompts.push_back(std::move(p));
    }
    return prompts;
}

ParsedValue parse_value(std::span<const std::string> tokens) {
    ParsedValue out;
    size_t i = 0;
    std::string text;
    if (i < tokens.size() && tokens[i] == "-") {
        text = "-";
        ++i;
    }
    size_t int_digits = 0;
    while (i < tokens.size() && digit_token(tokens[i])) {
        text += tokens[i];
        ++i, ++int_digits;
    }
    if (int_digits == 0) {
        out.trailing.assign(tokens.begin(), tokens.end());
        return out;  // ok = false
    }
    if (i < tokens.size() && tokens[i] == ".") {
        size_t j = i + 1;
        std::string frac;
        while (j < tokens.size() && digit_token(tokens[j])) frac += tokens[j], ++j;
        if (!frac.empty()) {
            text += "." + frac;
            i = j;
        }
        // A dot without following digits stays unconsumed: the longest valid
        // prefix ends before it.
    }
    out.ok = true;
    out.value_text = text;
    out.value = std::strtod(text.c_str(), nullptr);
    out.trailing.assign(tokens.begin() + long(i), tokens.end());
    return out;
}

double mean_entropy(const std::vector<std::vector<double>>& stepwise) {
    if (stepwise.empty()) return 0.0;
    double total = 0.0;
    for (const std::vector<double>& dist : stepwise) {
        double sum = 0.0;
        double h = 0.0;
        for (double p : dist) {
            if (p < 0.0) throw std::invalid_argument("negative probability in distribution");
            sum += p;
            if (p > 0.0) h -= p * std::log(p);
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::invalid_argument("distribution sums to " + std::to_string(sum) +
                                        ", not 1");
        total += h;
    }
    return total / static_cast<double>(stepwise.size());
}

namespace {

// Softmax in double of a float logits row.
std::vector<double> softmax_row(const VecF& logits) {
    double mx = double(logits.maxCoeff());
    std::vector<double> p(size_t(logits.size()));
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        p[size_t(i)] = std::exp(double(logits(i)) - mx);
        sum += p[size_t(i)];
    }
    for (double& x : p) x /= sum;
    return p;
}

PredictionRecord predict_one(const LoadedCheckpoint& ckpt, const Vocabulary& vocab,
                             const InferencePrompt& prompt, ValueMode value_mode,
                             const QuantileBinning* binning, const PredictOptions& opts) {
    PredictionRecord rec;
    rec.stay_id = prompt.stay_id;
    rec.item = prompt.item;
    rec.offset_min = prompt.offset_min;
    rec.y_true = std::strtod(prompt.y_true_text.c_str(), nullptr);
    rec.minutes_since_prev = prompt.minutes_since_prev;

    DecoderSession session(ckpt.params);
    if (value_mode == ValueMode::digit) {
        GreedyResult gen =
            greedy_decode(session, prompt.ids, Vocabulary::kEoeId, opts.max_new_tokens);
        rec.generated_tokens = vocab.decode(gen.ids);
        rec.terminated = gen.terminated;
        double entropy_sum = 0.0;
        for (double e : gen.entropies) entropy_sum += e;
        rec.entropy_nats =
            gen.entropies.empty() ? 0.0
                                  : entropy_sum / static_cast<double>(gen.entropies.size());
        ParsedValue parsed = parse_value(rec.generated_tokens);
        if (parsed.ok) {
            rec.y_pred = parsed.value;
            std::vector<std::string> expected =
                prompt.unit ? unit_tokens(*prompt.unit) : std::vector<std::string>{};
            rec.unit_matched =
                parsed.trailing.size() >= expected.size() &&
                std::equal(expected.begin(), expected.end(), parsed.trailing.begin());
        } else {
            rec.parse_failed = true;
            rec.unit_matched = false;
        }
    } else {
        VecF logits = session.begin(prompt.ids);
        if (binning == nullptr || !binning->has_item(prompt.item)) {
            rec.parse_failed = true;
            rec.unit_matched = false;
        } else {
            std::vector<double> full = softmax_row(logits);
            const int k = binning->k();
            std::vector<double> probs(static_cast<size_t>(k), 0.0);
            double sum = 0.0;
            for (int q = 0; q < k; ++q) {
                int32_t id = vocab.id_of("[Q" + std::to_string(q) + "]");
                probs[size_t(q)] = full[size_t(id)];
                sum += probs[size_t(q)];
            }
            if (sum <= 0.0) {
                rec.parse_failed = true;
            } else {
                int best = 0;
                double entropy = 0.0;
                for (int q = 0; q < k; ++q) {
                    probs[size_t(q)] /= sum;
                    if (probs[size_t(q)] > probs[size_t(best)]) best = q;
                    if (probs[size_t(q)] > 0.0)
                        entropy -= probs[size_t(q)] * std::log(probs[size_t(q)]);
                }
                rec.y_pred = quantile_expected(probs, *binning, prompt.item);
                rec.entropy_nats = entropy;
                rec.generated_tokens = {"[Q" + std::to_string(best) + "]"};
            }
        }
    }

    if (rec.parse_failed && opts.fallback_mean && opts.train_stats &&
        opts.train_stats->contains(prompt.item)) {
        rec.y_pred = opts.train_stats->mean_of(prompt.item);
        rec.fallback_used = true;
    }
    return rec;
}

}  // namespace

std::vector<PredictionRecord> predict_all(const LoadedCheckpoint& checkpoint,
                                          const std::vector<IcuStay>& stays,
                                          const Vocabulary& vocab, const PredictOptions& opts) {
    if (vocab.hash() != checkpoint.meta.vocab_hash)
        throw std::invalid_argument(
            "vocabulary hash does not match the checkpoint; the model was trained with a "
            "different token table");
    if (opts.fallback_mean && opts.train_stats == nullptr)
        throw std::invalid_argument("the training-mean fallback requires training statistics");

    PromptOptions popts;
    popts.time_mode = time_mode_from_string(checkpoint.meta.time_mode);
    popts.value_mode = value_mode_from_string(checkpoint.meta.value_mode);
    popts.include_types.clear();
    for (const std::string& t : checkpoint.meta.include_types)
        popts.include_types.push_back(event_type_from_string(t));
    popts.max_seq_len = checkpoint.params.config.max_seq_len;
    popts.max_new_tokens = opts.max_new_tokens;
    popts.universe = opts.train_stats;
    QuantileBinning binning;
    if (!checkpoint.meta.binning.empty()) {
        binning = QuantileBinning::deserialize(checkpoint.meta.binning);
        popts.binning = &binning;
    }

    std::vector<InferencePrompt> prompts;
    for (const IcuStay& stay : stays) {
        std::vector<InferencePrompt> per_stay = build_prompts(stay, vocab, popts);
        for (InferencePrompt& p : per_stay) prompts.push_back(std::move(p));
    }

    std::vector<PredictionRecord> records(prompts.size());
    const int threads = std::max(1, opts.threads);
    std::atomic<size_t> next{0}, done{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= prompts.size()) break;
            records[i] = predict_one(checkpoint, vocab, prompts[i], popts.value_mode,
                                     popts.binning, opts);
            size_t finished = done.fetch_add(1) + 1;
            if (opts.on_progress && threads == 1 && finished % 100 == 0)
                opts.on_progress(finished, prompts.size());
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (opts.on_progress) opts.on_progress(prompts.size(), prompts.size());
    return records;
}

MatF average_maps(const std::vector<MatF>& maps) {
    if (maps.empty()) throw std::invalid_argument("no attention maps to average");
    MatF avg = MatF::Zero(maps[0].rows(), maps[0].cols());
    for (const MatF& m : maps) {
        if (m.rows() != avg.rows() || m.cols() != avg.cols())
            throw std::invalid_argument("attention maps disagree on shape");
        avg += m;
    }
    return avg / float(maps.size());
}

AttentionSummary attention_summary(const ModelParams& params, const InferencePrompt& prompt,
                                   std::span<const int32_t> generated) {
    std::vector<int32_t> ids(prompt.ids.begin(), prompt.ids.end());
    ids.insert(ids.end(), generated.begin(), generated.end());
    const int T = static_cast<int>(ids.size());
    const int L = static_cast<int>(prompt.ids.size());

    std::vector<std::vector<MatF>> per_layer;
    ForwardOptions fopts;
    fopts.capture_attention = true;
    forward(params, ids, 1, T, fopts, &per_layer);
    std::vector<MatF> maps;
    maps.reserve(per_layer.size());
    for (std::vector<MatF>& batch_maps : per_layer) maps.push_back(std::move(batch_maps[0]));
    MatF avg = average_maps(maps);

    // Mean attention row over the generated tokens' query positions; when
    // nothing was generated, the final prompt position (the query that would
    // produce the first token) stands in.
    Eigen::RowVectorXf row = Eigen::RowVectorXf::Zero(T);
    if (generated.empty()) {
        row = avg.row(L - 1);
    } else {
        for (int i = L; i < T; ++i) row += avg.row(i);
        row /= float(T - L);
    }

    AttentionSummary summary;
    summary.event_ordinals = prompt.event_ordinals;
    for (int i = 0; i < prompt.demo_len; ++i) summary.demo_share += double(row(i));
    std::vector<double> event_sums;
    for (const auto& [begin, end] : prompt.event_spans) {
        double s = 0.0;
        for (int i = begin; i < end; ++i) s += double(row(i));
        event_sums.push_back(s);
        summary.history_share += s;
    }
    for (int i = prompt.target_begin; i < L; ++i) summary.target_share += double(row(i));
    for (int i = L; i < T; ++i) summary.generated_share += double(row(i));

    if (summary.history_share > 0.0)
        for (double s : event_sums) summary.event_scores.push_back(s / summary.history_share);
    else
        summary.event_scores.assign(event_sums.size(), 0.0);
    return summary;
}

}  // namespace labpred
