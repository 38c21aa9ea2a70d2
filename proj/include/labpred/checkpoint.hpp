#pragma once

#include <string>
#include <vector>

#include "labpred/model.hpp"

namespace labpred {

// Everything needed to run the model the same way it was trained: the vocab
// it was tokenized with (by hash), the textualization modes, and training
// provenance. Deliberately no wall-clock fields: the same training run must
// produce byte-identical files.
struct CheckpointMeta {
    uint64_t vocab_hash = 0;
    uint64_t seed = 0;
    long steps = 0;
    int epochs = 0;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    std::string time_mode = "absolute";   // "absolute" | "relative"
    std::string value_mode = "digit";     // "digit" | "quantile"
    int quantile_bins = 0;                // > 0 only in quantile mode
    std::string binning;                  // serialized QuantileBinning, or empty
    std::vector<std::string> include_types;  // event types seen in training
    bool full_ar = false;                 // loss charged on all tokens, not only labs
};

struct LoadedCheckpoint {
    ModelParams params;
    CheckpointMeta meta;
};

// Binary container: magic, little-endian u64 header length, JSON header
// (model config, meta, tensor directory), then raw float32 tensor data in
// canonical visit order.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace labpred
