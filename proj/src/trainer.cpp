#include "labpred/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "labpred/vocab.hpp"

namespace labpred {

double AdamState::step(ModelParams& params, const ModelParams& grads, const AdamConfig& cfg) {
    ++t_;
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && t_ < cfg.warmup_steps)
        lr = cfg.lr * static_cast<double>(t_) / static_cast<double>(cfg.warmup_steps);
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float corr1 = 1.0f - std::pow(b1, static_cast<float>(t_));
    const float corr2 = 1.0f - std::pow(b2, static_cast<float>(t_));
    const float eps = static_cast<float>(cfg.eps);
    const float step_size = static_cast<float>(lr);

    std::vector<const float*> gsrc;
    grads.visit([&gsrc](const char*, const float* data, Eigen::Index) { gsrc.push_back(data); });
    size_t offset = 0, tensor = 0;
    params.visit([&](const char*, float* data, Eigen::Index size) {
        const float* g = gsrc[tensor++];
        for (Eigen::Index i = 0; i < size; ++i) {
            float& m = m_[offset + size_t(i)];
            float& v = v_[offset + size_t(i)];
            m = b1 * m + (1.0f - b1) * g[i];
            v = b2 * v + (1.0f - b2) * g[i] * g[i];
            float mhat = m / corr1;
            float vhat = v / corr2;
            data[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
        }
        offset += size_t(size);
    });
    return lr;
}

std::vector<TrainBatch> make_batches(const std::vector<EncodedSequence>& sequences,
                                     int batch_size, bool full_ar, int32_t pad_id) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    std::vector<size_t> order;
    for (size_t i = 0; i < sequences.size(); ++i)
        if (sequences[i].ids.size() >= 2) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return sequences[a].ids.size() > sequences[b].ids.size();
    });

    std::vector<TrainBatch> batches;
    for (size_t begin = 0; begin < order.size(); begin += size_t(batch_size)) {
        size_t end = std::min(order.size(), begin + size_t(batch_size));
        int B = static_cast<int>(end - begin);
        int T = static_cast<int>(sequences[order[begin]].ids.size()) - 1;  // longest first
        TrainBatch batch;
        batch.B = B;
        batch.T = T;
        batch.input.assign(size_t(B) * size_t(T), pad_id);
        batch.target.assign(size_t(B) * size_t(T), pad_id);
        batch.mask.assign(size_t(B) * size_t(T), 0);
        for (int b = 0; b < B; ++b) {
            const EncodedSequence& seq = sequences[order[begin + size_t(b)]];
            if (!seq.loss_mask.empty() && seq.loss_mask.size() != seq.ids.size())
                throw std::invalid_argument("loss mask length does not match sequence length");
            int len = static_cast<int>(seq.ids.size());
            for (int t = 0; t + 1 < len; ++t) {
                size_t at = size_t(b) * size_t(T) + size_t(t);
                batch.input[at] = seq.ids[size_t(t)];
                batch.target[at] = seq.ids[size_t(t) + 1];
                batch.mask[at] =
                    full_ar ? 1 : (seq.loss_mask.empty() ? 0 : seq.loss_mask[size_t(t) + 1]);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

namespace {

double batched_loss(const ModelParams& params, const std::vector<TrainBatch>& batches) {
    double total = 0.0;
    long count = 0;
    for (const TrainBatch& batch : batches) {
        MatF logits = forward(params, batch.input, batch.B, batch.T);
        LossStats stats = masked_nll(logits, batch.target, batch.mask);
        total += stats.loss * static_cast<double>(stats.masked);
        count += stats.masked;
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

double evaluate_loss(const ModelParams& params, const std::vector<EncodedSequence>& sequences,
                     int batch_size, bool full_ar) {
    return batched_loss(params, make_batches(sequences, batch_size, full_ar, Vocabulary::kPadId));
}

TrainResult train(ModelParams initial, const EpochSource& train_source,
                  const std::vector<EncodedSequence>& val, const TrainOptions& opts) {
    initial.config.validate();
    if (val.empty()) throw std::invalid_argument("validation set is empty");
    if (opts.max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (opts.patience < 1) throw std::invalid_argument("patience must be >= 1");

    ModelParams params = std::move(initial);
    AdamState adam(params.parameter_count());
    adam.set_steps(opts.initial_step);
    ModelParams grads = ModelParams::shaped(params.config);
    Rng dropout_rng(derive_seed(opts.seed, "dropout"));

    std::vector<TrainBatch> val_batches =
        make_batches(val, opts.batch_size, opts.full_ar, Vocabulary::kPadId);

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    int since_improvement = 0;

    for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
        std::vector<EncodedSequence> sequences = train_source(epoch);
        std::vector<TrainBatch> batches =
            make_batches(sequences, opts.batch_size, opts.full_ar, Vocabulary::kPadId);
        if (batches.empty()) throw std::invalid_argument("training set produced no batches");
        Rng order_rng(derive_seed(opts.seed, "batch-order", static_cast<uint64_t>(epoch)));
        order_rng.shuffle(batches);

        double epoch_loss_sum = 0.0;
        long epoch_masked = 0;
        double last_lr = 0.0;
        BackwardOptions bopts;
        bopts.dropout = opts.dropout;
        bopts.dropout_rng = &dropout_rng;
        for (TrainBatch& batch : batches) {
            LossStats stats = loss_and_grad(params, batch, grads, bopts);
            if (stats.empty_mask) continue;
            if (!std::isfinite(stats.loss))
                throw std::runtime_error(
                    "training diverged: non-finite loss at step " +
                    std::to_string(adam.steps() + 1) + " (lr " +
                    std::to_string(opts.adam.lr) + ", epoch " + std::to_string(epoch) + ")");
            last_lr = adam.step(params, grads, opts.adam);
            epoch_loss_sum += stats.loss * static_cast<double>(stats.masked);
            epoch_masked += stats.masked;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss =
            epoch_masked > 0 ? epoch_loss_sum / static_cast<double>(epoch_masked) : 0.0;
        log.val_loss = batched_loss(params, val_batches);
        log.steps = adam.steps();
        log.lr = last_lr;
        log.improved = log.val_loss < result.best_val_loss;
        if (log.improved) {
            result.best_val_loss = log.val_loss;
            result.best_epoch = epoch;
            result.best_params = params;
            since_improvement = 0;
        } else {
            ++since_improvement;
        }
        result.history.push_back(log);
        result.epochs_run = epoch;
        result.total_steps = adam.steps();
        if (opts.on_epoch) opts.on_epoch(log);
        if (since_improvement >= opts.patience) break;
    }
    if (result.best_epoch == 0) {
        // Every epoch failed to produce a measurable val loss improvement
        // over infinity, which cannot happen with a finite val set; guard
        // anyway so callers never see an empty model.
        result.best_params = params;
    }
    return result;
}

}  // namespace labpred
