#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace labpred {

enum class Gender : uint8_t { female, male };

enum class EventType : uint8_t {
    labevent,
    medication,
    inputevent,
    procedureevent,
    outputevent,
    microbiologyevent,
};

inline constexpr EventType kAllEventTypes[] = {
    EventType::labevent,      EventType::medication,  EventType::inputevent,
    EventType::procedureevent, EventType::outputevent, EventType::microbiologyevent,
};

const char* to_string(EventType t);
EventType event_type_from_string(const std::string& s);  // throws std::invalid_argument

struct Demographics {
    Gender gender = Gender::female;
    int age = 0;        // years
    std::string race;   // free text, e.g. "asian"
};

struct MedicalEvent {
    int offset_min = 0;  // minutes since ICU admission
    EventType type = EventType::labevent;
    std::string code;    // opaque source identifier
    std::string desc;    // human-readable item name
    std::optional<std::string> value;  // numeric text exactly as recorded, e.g. "1.23"
    std::optional<std::string> unit;   // e.g. "mg/dL"
};

struct IcuStay {
    std::string stay_id;
    std::string patient_id;
    std::string admit_datetime;  // "YYYY-MM-DDTHH:MM", minute precision
    Demographics demographics;
    std::vector<MedicalEvent> events;  // sorted by offset_min, ties in recorded order
};

// Accepts an optional leading '-', at least one digit, and an optional '.'
// followed by at least one digit. No exponents, no thousands separators.
bool is_valid_value_string(const std::string& s);

struct AdmitTime {
    int year, month, day, hour, minute;
};

// Parses "YYYY-MM-DDTHH:MM"; throws std::invalid_argument on malformed input.
AdmitTime parse_admit_datetime(const std::string& s);

// Lower-cases and collapses runs of whitespace to single spaces. Items are
// grouped by this key everywhere (statistics, baselines, metric reports).
std::string normalize_item_name(const std::string& desc);

// ---------------------------------------------------------------------------
// Dataset IO: one JSON object per line, UTF-8, LF line endings.

struct LoadResult {
    std::vector<IcuStay> stays;
    int dropped_short_stays = 0;  // stays whose last event lands before 6h
};

// Parses, validates and sorts. Stays shorter than six hours (last event
// offset < 360) are dropped and counted rather than kept. Malformed input
// throws std::runtime_error naming the 1-based line number.
LoadResult load_dataset(const std::string& path);

// Canonical serialization of one stay: fixed key order, no added whitespace.
std::string stay_to_json_line(const IcuStay& stay);

void write_dataset(const std::string& path, const std::vector<IcuStay>& stays);

// ---------------------------------------------------------------------------
// Patient-level split: all stays of one patient land in the same part.

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct DatasetSplit {
    std::vector<IcuStay> train;
    std::vector<IcuStay> val;
    std::vector<IcuStay> test;
};

// Shuffles the distinct patient ids with the given seed and cuts the shuffled
// list at floor(cumulative ratio * n_patients). Ratios must sum to 1.
DatasetSplit split_dataset(const std::vector<IcuStay>& stays, const SplitRatios& ratios,
                           uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic data generator.
//
// Each lab item follows
//   value(t) = baseline + demographic offset + AR(1) drift + circadian term
//              + medication response + observation noise
// where the drift updates as d_k = ar_coef * d_{k-1} + N(0, ar_noise_sd) per
// observation, the circadian term is a sinusoid in absolute minute-of-day,
// and each administration of a coupled medication adds an exponentially
// decaying impulse scaled by dose.

struct LabItemSpec {
    std::string name;   // e.g. "glucose"; doubles as the event description
    std::string code;
    std::string unit;
    double baseline_mean = 0.0;
    double baseline_sd = 1.0;   // scales the deterministic demographic offset
    int decimals = 0;           // fixed-point digits in the recorded string
    double circadian_amp = 0.0;       // peak deviation in item units
    double circadian_phase_min = 0.0; // minute-of-day where the sinusoid crosses zero upward
    double ar_coef = 0.0;             // [0, 1)
    double ar_noise_sd = 0.0;
    double obs_noise_sd = 0.0;
    double mean_interval_min = 360.0;  // mean sampling interval
    std::optional<double> min_value;   // physiological floor, applied after summing
};

struct MedItemSpec {
    std::string name;
    std::string code;
    std::string dose_unit;            // e.g. "units", "mg"
    std::vector<double> dose_choices; // sampled uniformly
    double reference_dose = 1.0;      // impulse scales by dose / reference_dose
    std::string affected_item;        // lab item name; empty = no coupling
    double impulse_magnitude = 0.0;   // effect in lab item units at administration
    double decay_halflife_min = 180.0;
    double mean_interval_min = 480.0;
};

struct SyntheticConfig {
    int n_patients = 100;
    int stays_per_patient_min = 1;
    int stays_per_patient_max = 2;
    int stay_minutes_min = 720;
    int stay_minutes_max = 2880;
    double circadian_scale = 1.0;    // multiplies every item's circadian_amp
    double coupling_scale = 1.0;     // multiplies every medication impulse
    bool include_context_events = true;  // infusions, procedures, outputs, cultures
    std::vector<LabItemSpec> lab_items;
    std::vector<MedItemSpec> med_items;
    uint64_t seed = 1;
};

// Throws std::invalid_argument on out-of-range fields (counts, intervals,
// ar_coef outside [0,1), empty lab catalog, unknown affected_item, ...).
void validate(const SyntheticConfig& config);

// Eight-item lab catalog with two medication couplings; see README.
SyntheticConfig default_synthetic_config();

// Deterministic for a fixed config: every stay draws from its own RNG stream
// derived from (seed, patient index, stay index), so the output is
// independent of evaluation order.
std::vector<IcuStay> generate_synthetic(const SyntheticConfig& config);

}  // namespace labpred
