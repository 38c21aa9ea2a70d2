#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "labpred/ehr.hpp"

namespace labpred {

class QuantileBinning;  // metrics.hpp

// Why each token exists in a sequence; drives loss masking and diagnostics.
enum class TokenRole : uint8_t { demo, time, event_type, item_text, value, unit, eoe, pad };

const char* to_string(TokenRole r);

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kEoeToken = "[EOE]";
inline constexpr const char* kUnkToken = "[UNK]";
inline constexpr int kMaxDay = 60;         // offsets beyond day 60 clamp to [DAY60]
inline constexpr int kQuantileBins = 20;   // [Q0] .. [Q19] are always reserved

// Absolute timestamp of an event, as four special tokens: elapsed day of
// stay (24-hour periods since admission, 1-based), calendar weekday, clock
// hour, and minute floored to ten minutes.
struct TimeTokens {
    std::string day;      // "[DAY1]" .. "[DAY60]"
    std::string weekday;  // "[MON]" .. "[SUN]"
    std::string hour;     // "[0h]" .. "[23h]"
    std::string minute;   // "[00m]", "[10m]", .. "[50m]"
};

TimeTokens encode_time(const std::string& admit_datetime, int offset_min);

// Minutes since the previous event, split into digit tokens ("90" -> "9","0").
// The first event of a stay gets interval 0.
std::vector<std::string> encode_relative_time(std::optional<int> prev_offset_min, int offset_min);

// One token per character: digits, '.', '-'.
std::vector<std::string> value_tokens(const std::string& value_text);

// Lower-cased unit split only at '/' ("mEq/L" -> "meq","/","l").
std::vector<std::string> unit_tokens(const std::string& unit_text);

// Whitespace-separated words of a normalized item name.
std::vector<std::string> split_item_words(const std::string& normalized);

struct TokenSpan {
    std::vector<std::string> tokens;
    std::vector<TokenRole> roles;
    void append(std::string token, TokenRole role);
    void append(const TokenSpan& other);
    size_t size() const { return tokens.size(); }
};

// Event body and terminator: type word, item words, value digits, unit words,
// "[EOE]". Timestamp tokens are not included here; sequence assembly owns
// them because their shape depends on the time mode.
TokenSpan textualize_event(const MedicalEvent& e);

// "gender f age 6 5 race asian" (age digit-split), all role demo.
std::vector<std::string> textualize_demographics(const Demographics& d);

enum class TimeMode : uint8_t { absolute, relative };
enum class ValueMode : uint8_t { digit, quantile };

const char* to_string(TimeMode m);
const char* to_string(ValueMode m);
TimeMode time_mode_from_string(const std::string& s);    // throws std::invalid_argument
ValueMode value_mode_from_string(const std::string& s);  // throws std::invalid_argument

struct TextualizeOptions {
    TimeMode time_mode = TimeMode::absolute;
    ValueMode value_mode = ValueMode::digit;
    // Required in quantile mode: lab values with a fitted item map to one
    // "[Qk]" token; items without a fit keep their digits.
    const QuantileBinning* binning = nullptr;
    // Event types to keep; labevent is always kept regardless.
    std::vector<EventType> include_types{kAllEventTypes,
                                         kAllEventTypes + std::size(kAllEventTypes)};

    bool includes(EventType t) const;
};

// One stay flattened to a token sequence, with per-token provenance.
struct SequenceRecord {
    std::string stay_id;
    std::vector<std::string> tokens;
    std::vector<TokenRole> roles;
    std::vector<int32_t> event_index;  // ordinal into IcuStay::events; -1 for the prefix
    std::vector<uint8_t> lab_flags;    // token belongs to a labevent block
    size_t size() const { return tokens.size(); }
};

// Full block for one event as it appears in a sequence: timestamp tokens (or
// trailing interval digits in relative mode) plus the textualized body.
TokenSpan event_block(const IcuStay& stay, const MedicalEvent& e,
                      std::optional<int> prev_offset_min, const TextualizeOptions& opts);

// Demographics prefix, then every kept event in time order. Events that share
// all four timestamp tokens form a group; when permute_seed is set each
// group's order is shuffled (fresh order per seed, so each training epoch
// sees a different arrangement). Relative-time intervals are computed from
// the original time order before any shuffle.
SequenceRecord assemble_sequence(const IcuStay& stay, std::optional<uint64_t> permute_seed,
                                 const TextualizeOptions& opts = {});

// Splits an over-long record into windows of at most max_len tokens. Every
// window restarts with the demographics prefix and contains only whole event
// blocks. Throws std::invalid_argument if a single block cannot fit.
std::vector<SequenceRecord> crop_sequence(const SequenceRecord& record, int max_len);

// True exactly at lab-event tokens with role value, unit or eoe: the
// positions the training loss is charged on.
std::vector<uint8_t> compute_loss_mask(const SequenceRecord& record);

// Every special token the pipeline can emit, in fixed id order:
// [PAD], [EOE], [UNK], day/weekday/hour/minute tokens, [Q0]..[Q19].
const std::vector<std::string>& special_tokens();

}  // namespace labpred
