#include "labpred/ehr.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "labpred/rng.hpp"

namespace labpred {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(EventType t) {
    switch (t) {
        case EventType::labevent: return "labevent";
        case EventType::medication: return "medication";
        case EventType::inputevent: return "inputevent";
        case EventType::procedureevent: return "procedureevent";
        case EventType::outputevent: return "outputevent";
        case EventType::microbiologyevent: return "microbiologyevent";
    }
    throw std::logic_error("unreachable event type");
}

EventType event_type_from_string(const std::string& s) {
    for (EventType t : kAllEventTypes)
        if (s == to_string(t)) return t;
    throw std::invalid_argument("unknown event type \"" + s + "\"");
}

bool is_valid_value_string(const std::string& s) {
    size_t i = 0;
    if (i < s.size() && s[i] == '-') ++i;
    size_t int_digits = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i, ++int_digits;
    if (int_digits == 0) return false;
    if (i == s.size()) return true;
    if (s[i] != '.') return false;
    ++i;
    size_t frac_digits = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i, ++frac_digits;
    return frac_digits > 0 && i == s.size();
}

std::string normalize_item_name(const std::string& desc) {
    std::string out;
    out.reserve(desc.size());
    bool pending_space = false;
    for (unsigned char c : desc) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
        } else {
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    return out;
}

AdmitTime parse_admit_datetime(const std::string& s) {
    AdmitTime t{};
    char sep1, sep2, sep3, sep4;
    int n = std::sscanf(s.c_str(), "%4d%c%2d%c%2d%c%2d%c%2d", &t.year, &sep1, &t.month, &sep2,
                        &t.day, &sep3, &t.hour, &sep4, &t.minute);
    if (n != 9 || sep1 != '-' || sep2 != '-' || sep3 != 'T' || sep4 != ':' || s.size() != 16)
        throw std::invalid_argument("admit_datetime must be YYYY-MM-DDTHH:MM, got \"" + s + "\"");
    if (t.month < 1 || t.month > 12 || t.hour < 0 || t.hour > 23 || t.minute < 0 ||
        t.minute > 59)
        throw std::invalid_argument("admit_datetime out of range: \"" + s + "\"");
    static const int days[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    bool leap = (t.year % 4 == 0 && t.year % 100 != 0) || t.year % 400 == 0;
    int month_days = days[t.month - 1] + (t.month == 2 && leap ? 1 : 0);
    if (t.day < 1 || t.day > month_days)
        throw std::invalid_argument("admit_datetime out of range: \"" + s + "\"");
    return t;
}

namespace {

void validate_stay(const IcuStay& stay) {
    if (stay.stay_id.empty()) throw std::invalid_argument("stay_id must be non-empty");
    if (stay.patient_id.empty()) throw std::invalid_argument("patient_id must be non-empty");
    parse_admit_datetime(stay.admit_datetime);
    if (stay.demographics.age < 0 || stay.demographics.age > 120)
        throw std::invalid_argument("age " + std::to_string(stay.demographics.age) +
                                    " outside [0, 120]");
    if (stay.demographics.race.empty()) throw std::invalid_argument("race must be non-empty");
    for (size_t i = 0; i < stay.events.size(); ++i) {
        const MedicalEvent& e = stay.events[i];
        std::string where = "events[" + std::to_string(i) + "]";
        if (e.offset_min < 0)
            throw std::invalid_argument(where + ": negative offset_min " +
                                        std::to_string(e.offset_min));
        if (e.desc.empty()) throw std::invalid_argument(where + ": desc must be non-empty");
        if (e.value && !is_valid_value_string(*e.value))
            throw std::invalid_argument(where + ": value \"" + *e.value +
                                        "\" is not numeric text");
        if (!e.value && e.type == EventType::labevent)
            throw std::invalid_argument(where + ": labevent without a value");
    }
}

std::string require_string(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string())
        throw std::invalid_argument(std::string(key) + " must be a string");
    return j[key].get<std::string>();
}

IcuStay stay_from_json(const json& j) {
    IcuStay stay;
    stay.stay_id = require_string(j, "stay_id");
    stay.patient_id = require_string(j, "patient_id");
    stay.admit_datetime = require_string(j, "admit_datetime");
    if (!j.contains("demographics") || !j["demographics"].is_object())
        throw std::invalid_argument("demographics must be an object");
    const json& d = j["demographics"];
    std::string gender = require_string(d, "gender");
    if (gender == "F")
        stay.demographics.gender = Gender::female;
    else if (gender == "M")
        stay.demographics.gender = Gender::male;
    else
        throw std::invalid_argument("gender must be \"F\" or \"M\", got \"" + gender + "\"");
    if (!d.contains("age") || !d["age"].is_number_integer())
        throw std::invalid_argument("age must be an integer");
    stay.demographics.age = d["age"].get<int>();
    stay.demographics.race = require_string(d, "race");
    if (!j.contains("events") || !j["events"].is_array())
        throw std::invalid_argument("events must be an array");
    for (const json& je : j["events"]) {
        MedicalEvent e;
        if (!je.contains("offset_min") || !je["offset_min"].is_number_integer())
            throw std::invalid_argument("offset_min must be an integer");
        e.offset_min = je["offset_min"].get<int>();
        e.type = event_type_from_string(require_string(je, "type"));
        e.code = require_string(je, "code");
        e.desc = require_string(je, "desc");
        if (je.contains("value") && !je["value"].is_null())
            e.value = require_string(je, "value");
        if (je.contains("unit") && !je["unit"].is_null()) e.unit = require_string(je, "unit");
        stay.events.push_back(std::move(e));
    }
    // Recorded order is kept for events at the same minute.
    std::stable_sort(stay.events.begin(), stay.events.end(),
                     [](const MedicalEvent& a, const MedicalEvent& b) {
                         return a.offset_min < b.offset_min;
                     });
    validate_stay(stay);
    return stay;
}

}  // namespace

LoadResult load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    LoadResult result;
    std::unordered_set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::string where = path + " line " + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        IcuStay stay;
        try {
            stay = stay_from_json(j);
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        if (!seen.insert(stay.stay_id).second)
            throw std::runtime_error(where + ": duplicate stay_id \"" + stay.stay_id + "\"");
        if (stay.events.empty() || stay.events.back().offset_min < 360) {
            ++result.dropped_short_stays;
            continue;
        }
        result.stays.push_back(std::move(stay));
    }
    return result;
}

std::string stay_to_json_line(const IcuStay& stay) {
    ordered_json j;
    j["stay_id"] = stay.stay_id;
    j["patient_id"] = stay.patient_id;
    j["admit_datetime"] = stay.admit_datetime;
    ordered_json d;
    d["gender"] = stay.demographics.gender == Gender::female ? "F" : "M";
    d["age"] = stay.demographics.age;
    d["race"] = stay.demographics.race;
    j["demographics"] = std::move(d);
    ordered_json events = ordered_json::array();
    for (const MedicalEvent& e : stay.events) {
        ordered_json je;
        je["offset_min"] = e.offset_min;
        je["type"] = to_string(e.type);
        je["code"] = e.code;
        je["desc"] = e.desc;
        je["value"] = e.value ? ordered_json(*e.value) : ordered_json(nullptr);
        je["unit"] = e.unit ? ordered_json(*e.unit) : ordered_json(nullptr);
        events.push_back(std::move(je));
    }
    j["events"] = std::move(events);
    return j.dump();
}

void write_dataset(const std::string& path, const std::vector<IcuStay>& stays) {
    std::ofstream out(path, std::ios::binary);  // binary: LF on every platform
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    for (const IcuStay& s : stays) out << stay_to_json_line(s) << '\n';
    if (!out) throw std::runtime_error(path + ": write failed");
}

DatasetSplit split_dataset(const std::vector<IcuStay>& stays, const SplitRatios& ratios,
                           uint64_t seed) {
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    if (stays.empty()) throw std::invalid_argument("cannot split an empty dataset");

    std::vector<std::string> patients;
    std::unordered_set<std::string> seen;
    for (const IcuStay& s : stays)
        if (seen.insert(s.patient_id).second) patients.push_back(s.patient_id);

    Rng rng(derive_seed(seed, "patient-split"));
    rng.shuffle(patients);

    size_t n = patients.size();
    size_t b1 = static_cast<size_t>(std::floor(ratios.train * static_cast<double>(n)));
    size_t b2 = static_cast<size_t>(std::floor((ratios.train + ratios.val) * static_cast<double>(n)));
    std::unordered_map<std::string, int> part;
    for (size_t i = 0; i < n; ++i) part[patients[i]] = i < b1 ? 0 : (i < b2 ? 1 : 2);

    DatasetSplit split;
    for (const IcuStay& s : stays) {
        switch (part.at(s.patient_id)) {
            case 0: split.train.push_back(s); break;
            case 1: split.val.push_back(s); break;
            default: split.test.push_back(s); break;
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Synthetic generation

void validate(const SyntheticConfig& c) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("synthetic config: " + msg); };
    if (c.n_patients < 1) fail("n_patients must be >= 1");
    if (c.stays_per_patient_min < 1 || c.stays_per_patient_max < c.stays_per_patient_min)
        fail("stays_per_patient range is invalid");
    if (c.stay_minutes_min < 360) fail("stay_minutes_min must be >= 360 (six hours)");
    if (c.stay_minutes_max < c.stay_minutes_min) fail("stay_minutes range is invalid");
    if (c.circadian_scale < 0) fail("circadian_scale must be >= 0");
    if (c.coupling_scale < 0) fail("coupling_scale must be >= 0");
    if (c.lab_items.empty()) fail("lab catalog is empty");
    std::unordered_set<std::string> lab_names;
    for (const LabItemSpec& it : c.lab_items) {
        if (it.name.empty()) fail("lab item with empty name");
        if (!lab_names.insert(it.name).second) fail("duplicate lab item \"" + it.name + "\"");
        if (it.decimals < 0 || it.decimals > 2)
            fail(it.name + ": decimals must be in {0, 1, 2}");
        if (it.ar_coef < 0.0 || it.ar_coef >= 1.0)
            fail(it.name + ": ar_coef must be in [0, 1)");
        if (it.ar_noise_sd < 0 || it.obs_noise_sd < 0 || it.baseline_sd < 0)
            fail(it.name + ": noise scales must be >= 0");
        if (it.mean_interval_min <= 0) fail(it.name + ": mean_interval_min must be > 0");
    }
    std::unordered_set<std::string> med_names;
    for (const MedItemSpec& m : c.med_items) {
        if (m.name.empty()) fail("medication with empty name");
        if (!med_names.insert(m.name).second) fail("duplicate medication \"" + m.name + "\"");
        if (m.dose_choices.empty()) fail(m.name + ": dose_choices is empty");
        for (double d : m.dose_choices)
            if (d <= 0) fail(m.name + ": doses must be positive");
        if (m.reference_dose <= 0) fail(m.name + ": reference_dose must be positive");
        if (m.decay_halflife_min <= 0) fail(m.name + ": decay_halflife_min must be positive");
        if (m.mean_interval_min <= 0) fail(m.name + ": mean_interval_min must be positive");
        if (!m.affected_item.empty() && !lab_names.contains(m.affected_item))
            fail(m.name + ": affected_item \"" + m.affected_item + "\" is not a lab item");
    }
}

SyntheticConfig default_synthetic_config() {
    SyntheticConfig c;
    c.lab_items = {
        // name, code, unit, mean, sd, dec, circ_amp, circ_phase, ar, ar_sd, obs_sd, interval, floor
        {"glucose", "lab50931", "mg/dL", 135.0, 25.0, 0, 12.0, 360.0, 0.85, 10.0, 8.0, 240.0, 40.0},
        {"potassium", "lab50971", "mEq/L", 4.1, 0.45, 1, 0.12, 600.0, 0.80, 0.18, 0.12, 360.0, 2.0},
        {"sodium", "lab50983", "mEq/L", 139.0, 3.0, 0, 0.8, 720.0, 0.90, 1.2, 1.0, 360.0, 115.0},
        {"creatinine", "lab50912", "mg/dL", 1.1, 0.4, 2, 0.05, 200.0, 0.95, 0.07, 0.05, 720.0, 0.2},
        {"hemoglobin", "lab51222", "g/dL", 11.5, 1.6, 1, 0.15, 540.0, 0.92, 0.30, 0.20, 720.0, 5.0},
        {"lactate", "lab50813", "mmol/L", 1.8, 0.7, 1, 0.20, 840.0, 0.75, 0.35, 0.15, 480.0, 0.3},
        {"base excess", "lab50802", "mEq/L", 0.5, 2.2, 1, 0.50, 120.0, 0.85, 0.90, 0.50, 480.0,
         std::nullopt},
        {"ph", "lab50820", "", 7.38, 0.04, 2, 0.01, 300.0, 0.80, 0.02, 0.015, 480.0, 6.8},
    };
    c.med_items = {
        {"insulin", "med223258", "units", {2, 4, 6, 8, 10}, 6.0, "glucose", -45.0, 240.0, 480.0},
        {"furosemide", "med221794", "mg", {20, 40, 80}, 40.0, "potassium", -0.5, 360.0, 720.0},
        {"heparin", "med225152", "units", {500, 1000}, 1000.0, "", 0.0, 180.0, 720.0},
    };
    return c;
}

namespace {

std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    // Normalize the IEEE negative zero so "-0.0" never reaches a dataset.
    bool all_zero = true;
    for (char ch : s)
        if (ch != '-' && ch != '.' && ch != '0') all_zero = false;
    if (all_zero && s[0] == '-') s.erase(0, 1);
    return s;
}

struct MedAdmin {
    int offset;
    double scaled_magnitude;  // impulse height in lab item units
    double halflife;
};

}  // namespace

std::vector<IcuStay> generate_synthetic(const SyntheticConfig& config) {
    validate(config);
    static const char* kRaces[] = {"asian", "black", "hispanic", "white", "other"};
    static const int kMonthDays[] = {31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};  // 2024

    std::vector<IcuStay> stays;
    for (int p = 0; p < config.n_patients; ++p) {
        Rng prng(derive_seed(config.seed, "patient", static_cast<uint64_t>(p)));
        Demographics demo;
        demo.gender = prng.below(2) == 0 ? Gender::female : Gender::male;
        demo.age = static_cast<int>(prng.range(18, 95));
        demo.race = kRaces[prng.below(std::size(kRaces))];
        int n_stays =
            static_cast<int>(prng.range(config.stays_per_patient_min, config.stays_per_patient_max));

        char pid[32];
        std::snprintf(pid, sizeof pid, "p%05d", p + 1);

        for (int s = 0; s < n_stays; ++s) {
            Rng rng(derive_seed(config.seed, "stay",
                                static_cast<uint64_t>(p) * 64 + static_cast<uint64_t>(s)));
            IcuStay stay;
            stay.patient_id = pid;
            stay.stay_id = std::string(pid) + "-s" + std::to_string(s + 1);
            stay.demographics = demo;

            int doy = static_cast<int>(rng.below(366));
            int month = 0;
            while (doy >= kMonthDays[month]) doy -= kMonthDays[month], ++month;
            int hour = static_cast<int>(rng.below(24));
            int minute = static_cast<int>(rng.below(60));
            char admit[24];
            std::snprintf(admit, sizeof admit, "2024-%02d-%02dT%02d:%02d", month + 1, doy + 1,
                          hour, minute);
            stay.admit_datetime = admit;
            int admit_mod = hour * 60 + minute;

            int duration = static_cast<int>(rng.range(config.stay_minutes_min,
                                                      config.stay_minutes_max));

            // Medication administrations first: lab values depend on them.
            std::unordered_map<std::string, std::vector<MedAdmin>> admins;
            std::vector<MedicalEvent> events;
            for (const MedItemSpec& m : config.med_items) {
                double t = rng.uniform(0.3, 1.0) * m.mean_interval_min;
                while (t < duration) {
                    int offset = static_cast<int>(std::lround(t));
                    double dose = m.dose_choices[rng.below(m.dose_choices.size())];
                    if (!m.affected_item.empty())
                        admins[m.affected_item].push_back(
                            {offset,
                             config.coupling_scale * m.impulse_magnitude * dose / m.reference_dose,
                             m.decay_halflife_min});
                    MedicalEvent e;
                    e.offset_min = offset;
                    e.type = EventType::medication;
                    e.code = m.code;
                    e.desc = m.name;
                    e.value = format_fixed(dose, 0);
                    e.unit = m.dose_unit;
                    events.push_back(std::move(e));
                    t += m.mean_interval_min * rng.uniform(0.6, 1.4);
                }
            }

            for (const LabItemSpec& it : config.lab_items) {
                const std::vector<MedAdmin>* med = nullptr;
                if (auto found = admins.find(it.name); found != admins.end()) med = &found->second;
                // Stationary initial drift so early observations are not
                // systematically calmer than late ones.
                double drift = it.ar_noise_sd > 0
                                   ? rng.gaussian(0.0, it.ar_noise_sd /
                                                           std::sqrt(1.0 - it.ar_coef * it.ar_coef))
                                   : 0.0;
                double demo_offset =
                    it.baseline_sd * (0.5 * (demo.gender == Gender::male ? 1.0 : -1.0) +
                                      0.9 * (demo.age - 60) / 40.0);

                auto emit = [&](int offset) {
                    double mod = static_cast<double>((admit_mod + offset) % 1440);
                    double circ = config.circadian_scale * it.circadian_amp *
                                  std::sin(2.0 * std::numbers::pi *
                                           (mod - it.circadian_phase_min) / 1440.0);
                    double response = 0.0;
                    if (med)
                        for (const MedAdmin& a : *med)
                            if (a.offset < offset)
                                response += a.scaled_magnitude *
                                            std::exp2(-(offset - a.offset) / a.halflife);
                    double v = it.baseline_mean + demo_offset + drift + circ + response +
                               rng.gaussian(0.0, it.obs_noise_sd);
                    if (it.min_value && v < *it.min_value) v = *it.min_value;
                    MedicalEvent e;
                    e.offset_min = offset;
                    e.type = EventType::labevent;
                    e.code = it.code;
                    e.desc = it.name;
                    e.value = format_fixed(v, it.decimals);
                    if (!it.unit.empty()) e.unit = it.unit;
                    events.push_back(std::move(e));
                    drift = it.ar_coef * drift + (it.ar_noise_sd > 0
                                                      ? rng.gaussian(0.0, it.ar_noise_sd)
                                                      : 0.0);
                };

                double t = rng.uniform(0.3, 1.0) * it.mean_interval_min;
                while (t < duration) {
                    emit(static_cast<int>(std::lround(t)));
                    t += it.mean_interval_min * rng.uniform(0.6, 1.4);
                }
                // Closing panel at discharge: keeps every stay at six-plus
                // hours of data and produces a same-minute event group.
                emit(duration);
            }

            if (config.include_context_events) {
                struct Context {
                    EventType type;
                    const char* code;
                    const char* desc;
                    double interval;
                    bool has_volume;
                    int lo, hi;
                };
                static const Context kContext[] = {
                    {EventType::inputevent, "inp225158", "normal saline", 480.0, true, 250, 1000},
                    {EventType::outputevent, "out226559", "urine output", 360.0, true, 50, 400},
                    {EventType::procedureevent, "proc225459", "chest xray", 1440.0, false, 0, 0},
                    {EventType::microbiologyevent, "micro90201", "blood culture", 2160.0, false, 0,
                     0},
                };
                for (const Context& ctx : kContext) {
                    double t = rng.uniform(0.3, 1.0) * ctx.interval;
                    while (t < duration) {
                        MedicalEvent e;
                        e.offset_min = static_cast<int>(std::lround(t));
                        e.type = ctx.type;
                        e.code = ctx.code;
                        e.desc = ctx.desc;
                        if (ctx.has_volume) {
                            e.value = format_fixed(
                                std::floor(rng.uniform(ctx.lo, ctx.hi + 1)), 0);
                            e.unit = "ml";
                        }
                        events.push_back(std::move(e));
                        t += ctx.interval * rng.uniform(0.6, 1.4);
                    }
                }
            }

            std::stable_sort(events.begin(), events.end(),
                             [](const MedicalEvent& a, const MedicalEvent& b) {
                                 return a.offset_min < b.offset_min;
                             });
            stay.events = std::move(events);
            stays.push_back(std::move(stay));
        }
    }
    return stays;
}

}  // namespace labpred
