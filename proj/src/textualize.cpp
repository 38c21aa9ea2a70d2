#include "labpred/textualize.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "labpred/metrics.hpp"
#include "labpred/rng.hpp"

namespace labpred {

const char* to_string(TokenRole r) {
    switch (r) {
        case TokenRole::demo: return "demo";
        case TokenRole::time: return "time";
        case TokenRole::event_type: return "event_type";
        case TokenRole::item_text: return "item_text";
        case TokenRole::value: return "value";
        case TokenRole::unit: return "unit";
        case TokenRole::eoe: return "eoe";
        case TokenRole::pad: return "pad";
    }
    throw std::logic_error("unreachable token role");
}

const char* to_string(TimeMode m) {
    return m == TimeMode::absolute ? "absolute" : "relative";
}

const char* to_string(ValueMode m) {
    return m == ValueMode::digit ? "digit" : "quantile";
}

TimeMode time_mode_from_string(const std::string& s) {
    if (s == "absolute") return TimeMode::absolute;
    if (s == "relative") return TimeMode::relative;
    throw std::invalid_argument("unknown time mode \"" + s + "\"");
}

ValueMode value_mode_from_string(const std::string& s) {
    if (s == "digit") return ValueMode::digit;
    if (s == "quantile") return ValueMode::quantile;
    throw std::invalid_argument("unknown value mode \"" + s + "\"");
}

namespace {

// Days since 1970-01-01 for a proleptic Gregorian date (Howard Hinnant's
// civil-days algorithm).
int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const int yoe = y - era * 400;
    const int doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const int doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return static_cast<int64_t>(era) * 146097 + doe - 719468;
}

const char* kWeekdays[] = {"[MON]", "[TUE]", "[WED]", "[THU]", "[FRI]", "[SAT]", "[SUN]"};

std::vector<std::string> digit_split(const std::string& s) {
    std::vector<std::string> out;
    out.reserve(s.size());
    for (char c : s) out.emplace_back(1, c);
    return out;
}

}  // namespace

TimeTokens encode_time(const std::string& admit_datetime, int offset_min) {
    if (offset_min < 0) throw std::invalid_argument("offset_min must be >= 0");
    AdmitTime at = parse_admit_datetime(admit_datetime);
    int day = offset_min / 1440 + 1;
    if (day > kMaxDay) day = kMaxDay;
    int64_t total_min =
        (days_from_civil(at.year, at.month, at.day) * 24 + at.hour) * 60 + at.minute + offset_min;
    int64_t civil_day = total_min / (24 * 60);
    int weekday = static_cast<int>((civil_day + 3) % 7);  // 1970-01-01 is a Thursday
    int mod = static_cast<int>(total_min - civil_day * 24 * 60);
    TimeTokens t;
    t.day = "[DAY" + std::to_string(day) + "]";
    t.weekday = kWeekdays[weekday];
    t.hour = "[" + std::to_string(mod / 60) + "h]";
    char minute[8];
    std::snprintf(minute, sizeof minute, "[%02dm]", mod % 60 / 10 * 10);
    t.minute = minute;
    return t;
}

std::vector<std::string> encode_relative_time(std::optional<int> prev_offset_min, int offset_min) {
    int delta = prev_offset_min ? offset_min - *prev_offset_min : 0;
    if (delta < 0) throw std::invalid_argument("events are not in time order");
    return digit_split(std::to_string(delta));
}

std::vector<std::string> value_tokens(const std::string& value_text) {
    return digit_split(value_text);
}

std::vector<std::string> unit_tokens(const std::string& unit_text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : unit_text) {
        if (c == '/') {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            out.emplace_back("/");
        } else if (!std::isspace(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<std::string> split_item_words(const std::string& normalized) {
    std::vector<std::string> out;
    size_t begin = 0;
    while (begin < normalized.size()) {
        size_t end = normalized.find(' ', begin);
        if (end == std::string::npos) end = normalized.size();
        if (end > begin) out.push_back(normalized.substr(begin, end - begin));
        begin = end + 1;
    }
    return out;
}

void TokenSpan::append(std::string token, TokenRole role) {
    tokens.push_back(std::move(token));
    roles.push_back(role);
}

void TokenSpan::append(const TokenSpan& other) {
    tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    roles.insert(roles.end(), other.roles.begin(), other.roles.end());
}

bool TextualizeOptions::includes(EventType t) const {
    if (t == EventType::labevent) return true;
    return std::find(include_types.begin(), include_types.end(), t) != include_types.end();
}

namespace {

// Type word, item words, value, unit. No timestamp, no terminator.
TokenSpan body_tokens(const MedicalEvent& e, const TextualizeOptions& opts) {
    TokenSpan span;
    span.append(to_string(e.type), TokenRole::event_type);
    for (std::string& w : split_item_words(normalize_item_name(e.desc)))
        span.append(std::move(w), TokenRole::item_text);
    if (e.value) {
        bool quantized = false;
        if (opts.value_mode == ValueMode::quantile && e.type == EventType::labevent &&
            opts.binning != nullptr) {
            if (std::optional<int> bin =
                    opts.binning->bin_of(normalize_item_name(e.desc), std::strtod(e.value->c_str(), nullptr))) {
                span.append("[Q" + std::to_string(*bin) + "]", TokenRole::value);
                quantized = true;
            }
        }
        if (!quantized)
            for (std::string& t : value_tokens(*e.value)) span.append(std::move(t), TokenRole::value);
    }
    if (e.unit)
        for (std::string& t : unit_tokens(*e.unit)) span.append(std::move(t), TokenRole::unit);
    return span;
}

}  // namespace

TokenSpan textualize_event(const MedicalEvent& e) {
    TokenSpan span = body_tokens(e, TextualizeOptions{});
    span.append(kEoeToken, TokenRole::eoe);
    return span;
}

std::vector<std::string> textualize_demographics(const Demographics& d) {
    std::vector<std::string> out{"gender", d.gender == Gender::female ? "f" : "m", "age"};
    for (std::string& t : digit_split(std::to_string(d.age))) out.push_back(std::move(t));
    out.push_back("race");
    for (std::string& w : split_item_words(normalize_item_name(d.race))) out.push_back(std::move(w));
    return out;
}

TokenSpan event_block(const IcuStay& stay, const MedicalEvent& e,
                      std::optional<int> prev_offset_min, const TextualizeOptions& opts) {
    TokenSpan span;
    if (opts.time_mode == TimeMode::absolute) {
        TimeTokens t = encode_time(stay.admit_datetime, e.offset_min);
        span.append(std::move(t.day), TokenRole::time);
        span.append(std::move(t.weekday), TokenRole::time);
        span.append(std::move(t.hour), TokenRole::time);
        span.append(std::move(t.minute), TokenRole::time);
        span.append(body_tokens(e, opts));
    } else {
        span.append(body_tokens(e, opts));
        for (std::string& t : encode_relative_time(prev_offset_min, e.offset_min))
            span.append(std::move(t), TokenRole::time);
    }
    span.append(kEoeToken, TokenRole::eoe);
    return span;
}

SequenceRecord assemble_sequence(const IcuStay& stay, std::optional<uint64_t> permute_seed,
                                 const TextualizeOptions& opts) {
    SequenceRecord rec;
    rec.stay_id = stay.stay_id;

    for (const std::string& t : textualize_demographics(stay.demographics)) {
        rec.tokens.push_back(t);
        rec.roles.push_back(TokenRole::demo);
        rec.event_index.push_back(-1);
        rec.lab_flags.push_back(0);
    }

    // Kept events with their source ordinal and the interval to the previous
    // kept event, all derived from the original time order. The interval
    // travels with its event if a shuffle reorders a same-timestamp group.
    struct Entry {
        int32_t ordinal;
        std::optional<int> prev_offset;
    };
    std::vector<Entry> entries;
    std::optional<int> prev;
    for (size_t i = 0; i < stay.events.size(); ++i) {
        if (!opts.includes(stay.events[i].type)) continue;
        entries.push_back({static_cast<int32_t>(i), prev});
        prev = stay.events[i].offset_min;
    }

    if (permute_seed) {
        Rng rng(derive_seed(*permute_seed, "event-permutation"));
        auto time_key = [&](const Entry& en) {
            TimeTokens t = encode_time(stay.admit_datetime, stay.events[en.ordinal].offset_min);
            return t.day + t.weekday + t.hour + t.minute;
        };
        size_t begin = 0;
        while (begin < entries.size()) {
            size_t end = begin + 1;
            std::string key = time_key(entries[begin]);
            while (end < entries.size() && time_key(entries[end]) == key) ++end;
            if (end - begin > 1) {
                std::vector<Entry> group(entries.begin() + begin, entries.begin() + end);
                rng.shuffle(group);
                std::copy(group.begin(), group.end(), entries.begin() + begin);
            }
            begin = end;
        }
    }

    for (const Entry& en : entries) {
        const MedicalEvent& e = stay.events[en.ordinal];
        TokenSpan block = event_block(stay, e, en.prev_offset, opts);
        uint8_t lab = e.type == EventType::labevent ? 1 : 0;
        for (size_t k = 0; k < block.size(); ++k) {
            rec.tokens.push_back(std::move(block.tokens[k]));
            rec.roles.push_back(block.roles[k]);
            rec.event_index.push_back(en.ordinal);
            rec.lab_flags.push_back(lab);
        }
    }
    return rec;
}

std::vector<SequenceRecord> crop_sequence(const SequenceRecord& record, int max_len) {
    if (max_len < 1) throw std::invalid_argument("max_len must be positive");

    size_t prefix_len = 0;
    while (prefix_len < record.size() && record.event_index[prefix_len] == -1) ++prefix_len;

    struct Block {
        size_t begin, end;  // token range
    };
    std::vector<Block> blocks;
    size_t i = prefix_len;
    while (i < record.size()) {
        size_t j = i + 1;
        while (j < record.size() && record.event_index[j] == record.event_index[i]) ++j;
        blocks.push_back({i, j});
        i = j;
    }

    if (record.size() <= static_cast<size_t>(max_len)) return {record};

    auto copy_range = [&](SequenceRecord& dst, size_t begin, size_t end) {
        dst.tokens.insert(dst.tokens.end(), record.tokens.begin() + begin,
                          record.tokens.begin() + end);
        dst.roles.insert(dst.roles.end(), record.roles.begin() + begin,
                         record.roles.begin() + end);
        dst.event_index.insert(dst.event_index.end(), record.event_index.begin() + begin,
                               record.event_index.begin() + end);
        dst.lab_flags.insert(dst.lab_flags.end(), record.lab_flags.begin() + begin,
                             record.lab_flags.begin() + end);
    };

    std::vector<SequenceRecord> crops;
    SequenceRecord cur;
    cur.stay_id = record.stay_id;
    copy_range(cur, 0, prefix_len);
    bool has_block = false;
    for (const Block& b : blocks) {
        size_t block_len = b.end - b.begin;
        if (prefix_len + block_len > static_cast<size_t>(max_len))
            throw std::invalid_argument(
                "event block of " + std::to_string(block_len) + " tokens (event ordinal " +
                std::to_string(record.event_index[b.begin]) + ") cannot fit in max_len " +
                std::to_string(max_len));
        if (cur.size() + block_len > static_cast<size_t>(max_len)) {
            crops.push_back(std::move(cur));
            cur = SequenceRecord{};
            cur.stay_id = record.stay_id;
            copy_range(cur, 0, prefix_len);
            has_block = false;
        }
        copy_range(cur, b.begin, b.end);
        has_block = true;
    }
    if (has_block) crops.push_back(std::move(cur));
    return crops;
}

std::vector<uint8_t> compute_loss_mask(const SequenceRecord& record) {
    std::vector<uint8_t> mask(record.size(), 0);
    for (size_t i = 0; i < record.size(); ++i) {
        TokenRole r = record.roles[i];
        mask[i] = record.lab_flags[i] &&
                  (r == TokenRole::value || r == TokenRole::unit || r == TokenRole::eoe);
    }
    return mask;
}

const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> tokens = [] {
        std::vector<std::string> t{kPadToken, kEoeToken, kUnkToken};
        for (int d = 1; d <= kMaxDay; ++d) t.push_back("[DAY" + std::to_string(d) + "]");
        for (const char* w : kWeekdays) t.push_back(w);
        for (int h = 0; h < 24; ++h) t.push_back("[" + std::to_string(h) + "h]");
        for (int m = 0; m < 60; m += 10) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "[%02dm]", m);
            t.push_back(buf);
        }
        for (int q = 0; q < kQuantileBins; ++q) t.push_back("[Q" + std::to_string(q) + "]");
        return t;
    }();
    return tokens;
}

}  // namespace labpred
