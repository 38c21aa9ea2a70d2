#pragma once

#include <string>
#include <vector>

#include "labpred/ehr.hpp"
#include "labpred/model.hpp"
#include "labpred/textualize.hpp"
#include "labpred/trainer.hpp"

namespace labpred {

// Everything one experiment needs, round-trippable through a JSON file whose
// keys match the member names. Absent keys keep their defaults; unknown keys
// are rejected so typos fail loudly instead of silently running the default.
struct RunConfig {
    uint64_t seed = 1;
    SplitRatios split;
    SyntheticConfig synth = default_synthetic_config();

    TimeMode time_mode = TimeMode::absolute;
    ValueMode value_mode = ValueMode::digit;
    int quantile_bins = kQuantileBins;
    std::vector<EventType> include_types{kAllEventTypes,
                                         kAllEventTypes + std::size(kAllEventTypes)};
    bool full_ar = false;  // train on every token instead of lab values only

    ModelConfig model;  // model.vocab_size is filled in at train time

    AdamConfig adam;
    int batch_size = 32;
    int max_epochs = 100;
    int patience = 5;

    int max_new_tokens = 24;
    bool fallback_mean = true;  // back off to the training mean when decoding fails
    int threads = 1;
    bool deterministic = false;  // bitwise-reproducible forward passes, single thread

    void validate() const;  // throws std::invalid_argument
};

// Parse/serialize; the serialized form has a stable key order so identical
// configs produce identical bytes.
RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& config);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

}  // namespace labpred
