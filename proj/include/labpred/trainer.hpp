#pragma once

#include <functional>
#include <vector>

#include "labpred/model.hpp"

namespace labpred {

// One tokenized training sequence: ids plus the aligned loss-mask flags
// (mask[i] says whether predicting token i counts toward the loss).
struct EncodedSequence {
    std::vector<int32_t> ids;
    std::vector<uint8_t> loss_mask;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 100;  // linear ramp from 0 to lr
};

// Flat first/second-moment buffers over the canonical tensor order.
class AdamState {
public:
    explicit AdamState(size_t parameter_count)
        : m_(parameter_count, 0.0f), v_(parameter_count, 0.0f) {}

    long steps() const { return t_; }
    void set_steps(long t) { t_ = t; }

    // One update with bias correction; returns the learning rate used.
    double step(ModelParams& params, const ModelParams& grads, const AdamConfig& cfg);

private:
    std::vector<float> m_, v_;
    long t_ = 0;
};

// Pads sequences into fixed-shape batches: sequences are ordered longest
// first so each batch wastes little padding, then cut into chunks of
// batch_size. Targets are the inputs shifted left; the batch mask is the
// sequence loss mask aligned to targets, or every non-pad target when
// full_ar is set. Sequences shorter than two tokens are skipped.
std::vector<TrainBatch> make_batches(const std::vector<EncodedSequence>& sequences,
                                     int batch_size, bool full_ar, int32_t pad_id);

struct EpochLog {
    int epoch = 0;         // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    long steps = 0;        // cumulative optimizer steps
    double lr = 0.0;       // last learning rate of the epoch
    bool improved = false;
};

struct TrainOptions {
    AdamConfig adam;
    int batch_size = 32;
    int max_epochs = 100;
    int patience = 5;      // epochs without val improvement before stopping
    bool full_ar = false;
    double dropout = 0.0;
    uint64_t seed = 1;
    long initial_step = 0;  // non-zero when resuming from a checkpoint
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    ModelParams best_params;  // snapshot from the best validation epoch
    double best_val_loss = 0.0;
    int best_epoch = 0;
    int epochs_run = 0;
    long total_steps = 0;
    std::vector<EpochLog> history;
};

// Fresh sequences for each epoch; re-invoked so same-timestamp event groups
// can be re-shuffled between epochs.
using EpochSource = std::function<std::vector<EncodedSequence>(int epoch)>;

// Trains until val loss stops improving for `patience` epochs or max_epochs
// is hit. Throws std::runtime_error naming the step and learning rate if the
// loss ever turns non-finite.
TrainResult train(ModelParams initial, const EpochSource& train_source,
                  const std::vector<EncodedSequence>& val, const TrainOptions& opts);

// Mean masked NLL of a sequence set under the model, without gradients.
double evaluate_loss(const ModelParams& params, const std::vector<EncodedSequence>& sequences,
                     int batch_size, bool full_ar);

}  // namespace labpred
