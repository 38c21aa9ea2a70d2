#include "labpred/runconfig.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace labpred {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads known keys out of one JSON object and rejects the rest.
class object_reader {
public:
    object_reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object())
            throw std::invalid_argument("\"" + where_ + "\" must be a JSON object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception& e) {
            throw std::invalid_argument("\"" + where_ + "." + key + "\": " + e.what());
        }
    }

    // Enum-ish fields: parse the string form with `from`, which throws
    // std::invalid_argument itself.
    template <typename T, typename Fn>
    void read_as(const char* key, T& out, Fn from) {
        std::string text;
        bool present = false;
        seen_.insert(key);
        auto it = j_.find(key);
        if (it != j_.end()) {
            if (!it->is_string())
                throw std::invalid_argument("\"" + where_ + "." + key + "\" must be a string");
            text = it->get<std::string>();
            present = true;
        }
        if (present) out = from(text);
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw std::invalid_argument("unknown config key \"" + where_ + "." +
                                            item.key() + "\"");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

LabItemSpec lab_item_from_json(const json& j, const std::string& where) {
    LabItemSpec item;
    object_reader r(j, where);
    r.read("name", item.name);
    r.read("code", item.code);
    r.read("unit", item.unit);
    r.read("baseline_mean", item.baseline_mean);
    r.read("baseline_sd", item.baseline_sd);
    r.read("decimals", item.decimals);
    r.read("circadian_amp", item.circadian_amp);
    r.read("circadian_phase_min", item.circadian_phase_min);
    r.read("ar_coef", item.ar_coef);
    r.read("ar_noise_sd", item.ar_noise_sd);
    r.read("obs_noise_sd", item.obs_noise_sd);
    r.read("mean_interval_min", item.mean_interval_min);
    if (const json* mv = r.child("min_value"); mv && !mv->is_null())
        item.min_value = mv->get<double>();
    r.finish();
    return item;
}

MedItemSpec med_item_from_json(const json& j, const std::string& where) {
    MedItemSpec item;
    object_reader r(j, where);
    r.read("name", item.name);
    r.read("code", item.code);
    r.read("dose_unit", item.dose_unit);
    r.read("dose_choices", item.dose_choices);
    r.read("reference_dose", item.reference_dose);
    r.read("affected_item", item.affected_item);
    r.read("impulse_magnitude", item.impulse_magnitude);
    r.read("decay_halflife_min", item.decay_halflife_min);
    r.read("mean_interval_min", item.mean_interval_min);
    r.finish();
    return item;
}

SyntheticConfig synth_from_json(const json& j, const SyntheticConfig& base) {
    SyntheticConfig c = base;
    object_reader r(j, "synth");
    r.read("n_patients", c.n_patients);
    r.read("stays_per_patient_min", c.stays_per_patient_min);
    r.read("stays_per_patient_max", c.stays_per_patient_max);
    r.read("stay_minutes_min", c.stay_minutes_min);
    r.read("stay_minutes_max", c.stay_minutes_max);
    r.read("circadian_scale", c.circadian_scale);
    r.read("coupling_scale", c.coupling_scale);
    r.read("include_context_events", c.include_context_events);
    r.read("seed", c.seed);
    if (const json* labs = r.child("lab_items")) {
        if (!labs->is_array())
            throw std::invalid_argument("\"synth.lab_items\" must be an array");
        c.lab_items.clear();
        for (size_t i = 0; i < labs->size(); ++i)
            c.lab_items.push_back(lab_item_from_json(
                (*labs)[i], "synth.lab_items[" + std::to_string(i) + "]"));
    }
    if (const json* meds = r.child("med_items")) {
        if (!meds->is_array())
            throw std::invalid_argument("\"synth.med_items\" must be an array");
        c.med_items.clear();
        for (size_t i = 0; i < meds->size(); ++i)
            c.med_items.push_back(med_item_from_json(
                (*meds)[i], "synth.med_items[" + std::to_string(i) + "]"));
    }
    r.finish();
    return c;
}

ordered_json lab_item_to_json(const LabItemSpec& item) {
    ordered_json j;
    j["name"] = item.name;
    j["code"] = item.code;
    j["unit"] = item.unit;
    j["baseline_mean"] = item.baseline_mean;
    j["baseline_sd"] = item.baseline_sd;
    j["decimals"] = item.decimals;
    j["circadian_amp"] = item.circadian_amp;
    j["circadian_phase_min"] = item.circadian_phase_min;
    j["ar_coef"] = item.ar_coef;
    j["ar_noise_sd"] = item.ar_noise_sd;
    j["obs_noise_sd"] = item.obs_noise_sd;
    j["mean_interval_min"] = item.mean_interval_min;
    j["min_value"] = item.min_value ? ordered_json(*item.min_value) : ordered_json(nullptr);
    return j;
}

ordered_json med_item_to_json(const MedItemSpec& item) {
    ordered_json j;
    j["name"] = item.name;
    j["code"] = item.code;
    j["dose_unit"] = item.dose_unit;
    j["dose_choices"] = item.dose_choices;
    j["reference_dose"] = item.reference_dose;
    j["affected_item"] = item.affected_item;
    j["impulse_magnitude"] = item.impulse_magnitude;
    j["decay_halflife_min"] = item.decay_halflife_min;
    j["mean_interval_min"] = item.mean_interval_min;
    return j;
}

}  // namespace

void RunConfig::validate() const {
    double sum = split.train + split.val + split.test;
    if (split.train <= 0.0 || split.val <= 0.0 || split.test <= 0.0 ||
        std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must be positive and sum to 1");
    labpred::validate(synth);
    if (value_mode == ValueMode::quantile && quantile_bins != 5 && quantile_bins != 10 &&
        quantile_bins != 20)
        throw std::invalid_argument("quantile value mode requires quantile_bins in {5, 10, 20}");
    if (quantile_bins < 2 || quantile_bins > kQuantileBins)
        throw std::invalid_argument("quantile_bins must be in [2, " +
                                    std::to_string(kQuantileBins) + "]");
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = 4;  // real size is known only after build-vocab
    m.validate();
    if (adam.lr <= 0.0) throw std::invalid_argument("adam.lr must be positive");
    if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0)
        throw std::invalid_argument("adam betas must be in [0, 1)");
    if (adam.eps <= 0.0) throw std::invalid_argument("adam.eps must be positive");
    if (adam.warmup_steps < 0) throw std::invalid_argument("adam.warmup_steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    object_reader r(j, "config");
    r.read("seed", c.seed);
    if (const json* split = r.child("split")) {
        object_reader s(*split, "split");
        s.read("train", c.split.train);
        s.read("val", c.split.val);
        s.read("test", c.split.test);
        s.finish();
    }
    if (const json* synth = r.child("synth"))
        c.synth = synth_from_json(*synth, default_synthetic_config());
    r.read_as("time_mode", c.time_mode, time_mode_from_string);
    r.read_as("value_mode", c.value_mode, value_mode_from_string);
    r.read("quantile_bins", c.quantile_bins);
    if (const json* types = r.child("include_types")) {
        if (!types->is_array())
            throw std::invalid_argument("\"include_types\" must be an array of strings");
        c.include_types.clear();
        for (const json& t : *types)
            c.include_types.push_back(event_type_from_string(t.get<std::string>()));
    }
    r.read("full_ar", c.full_ar);
    if (const json* model = r.child("model")) {
        object_reader m(*model, "model");
        m.read("n_layers", c.model.n_layers);
        m.read("n_heads", c.model.n_heads);
        m.read("d_model", c.model.d_model);
        m.read("d_ff", c.model.d_ff);
        m.read("max_seq_len", c.model.max_seq_len);
        m.read("vocab_size", c.model.vocab_size);
        m.read("dropout", c.model.dropout);
        m.finish();
    }
    if (const json* adam = r.child("adam")) {
        object_reader a(*adam, "adam");
        a.read("lr", c.adam.lr);
        a.read("beta1", c.adam.beta1);
        a.read("beta2", c.adam.beta2);
        a.read("eps", c.adam.eps);
        a.read("warmup_steps", c.adam.warmup_steps);
        a.finish();
    }
    r.read("batch_size", c.batch_size);
    r.read("max_epochs", c.max_epochs);
    r.read("patience", c.patience);
    r.read("max_new_tokens", c.max_new_tokens);
    r.read("fallback_mean", c.fallback_mean);
    r.read("threads", c.threads);
    r.read("deterministic", c.deterministic);
    r.finish();
    c.validate();
    return c;
}

std::string run_config_to_json(const RunConfig& config) {
    ordered_json j;
    j["seed"] = config.seed;
    j["split"] = {{"train", config.split.train},
                  {"val", config.split.val},
                  {"test", config.split.test}};
    ordered_json synth;
    synth["n_patients"] = config.synth.n_patients;
    synth["stays_per_patient_min"] = config.synth.stays_per_patient_min;
    synth["stays_per_patient_max"] = config.synth.stays_per_patient_max;
    synth["stay_minutes_min"] = config.synth.stay_minutes_min;
    synth["stay_minutes_max"] = config.synth.stay_minutes_max;
    synth["circadian_scale"] = config.synth.circadian_scale;
    synth["coupling_scale"] = config.synth.coupling_scale;
    synth["include_context_events"] = config.synth.include_context_events;
    synth["seed"] = config.synth.seed;
    synth["lab_items"] = ordered_json::array();
    for (const LabItemSpec& item : config.synth.lab_items)
        synth["lab_items"].push_back(lab_item_to_json(item));
    synth["med_items"] = ordered_json::array();
    for (const MedItemSpec& item : config.synth.med_items)
        synth["med_items"].push_back(med_item_to_json(item));
    j["synth"] = std::move(synth);
    j["time_mode"] = to_string(config.time_mode);
    j["value_mode"] = to_string(config.value_mode);
    j["quantile_bins"] = config.quantile_bins;
    ordered_json types = ordered_json::array();
    for (EventType t : config.include_types) types.push_back(to_string(t));
    j["include_types"] = std::move(types);
    j["full_ar"] = config.full_ar;
    j["model"] = {{"n_layers", config.model.n_layers},
                  {"n_heads", config.model.n_heads},
                  {"d_model", config.model.d_model},
                  {"d_ff", config.model.d_ff},
                  {"max_seq_len", config.model.max_seq_len},
                  {"vocab_size", config.model.vocab_size},
                  {"dropout", config.model.dropout}};
    j["adam"] = {{"lr", config.adam.lr},
                 {"beta1", config.adam.beta1},
                 {"beta2", config.adam.beta2},
                 {"eps", config.adam.eps},
                 {"warmup_steps", config.adam.warmup_steps}};
    j["batch_size"] = config.batch_size;
    j["max_epochs"] = config.max_epochs;
    j["patience"] = config.patience;
    j["max_new_tokens"] = config.max_new_tokens;
    j["fallback_mean"] = config.fallback_mean;
    j["threads"] = config.threads;
    j["deterministic"] = config.deterministic;
    return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file \"" + path + "\"");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

void save_run_config(const RunConfig& config, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write config file \"" + path + "\"");
    out << run_config_to_json(config);
    if (!out) throw std::runtime_error("failed writing config file \"" + path + "\"");
}

}  // namespace labpred
