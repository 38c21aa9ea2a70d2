#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "labpred/metrics.hpp"
#include "labpred/textualize.hpp"
#include "test_util.hpp"

using namespace labpred;
using namespace labpred::testing;

namespace {

using Tokens = std::vector<std::string>;

// Multiset of (tokens, roles) per event block, recovered via event_index.
std::map<std::vector<std::pair<std::string, TokenRole>>, int> block_multiset(
    const SequenceRecord& rec) {
    std::map<std::vector<std::pair<std::string, TokenRole>>, int> blocks;
    std::vector<std::pair<std::string, TokenRole>> cur;
    int32_t cur_event = -1;
    for (size_t i = 0; i < rec.size(); ++i) {
        if (rec.event_index[i] != cur_event) {
            if (cur_event >= 0) ++blocks[cur];
            cur.clear();
            cur_event = rec.event_index[i];
        }
        if (cur_event >= 0) cur.emplace_back(rec.tokens[i], rec.roles[i]);
    }
    if (cur_event >= 0) ++blocks[cur];
    return blocks;
}

long mask_count(const SequenceRecord& rec) {
    std::vector<uint8_t> mask = compute_loss_mask(rec);
    long n = 0;
    for (uint8_t m : mask) n += m;
    return n;
}

}  // namespace

TEST_SUITE("textualize") {

TEST_CASE("time tokens derive from admission plus offset") {
    // 2024-01-02 is a Tuesday; 13:38 falls in the [30m] bucket.
    TimeTokens t = encode_time("2024-01-02T00:00", 13 * 60 + 38);
    CHECK(t.day == "[DAY1]");
    CHECK(t.weekday == "[TUE]");
    CHECK(t.hour == "[13h]");
    CHECK(t.minute == "[30m]");

    t = encode_time("2024-01-01T00:00", 0);
    CHECK(t.day == "[DAY1]");
    CHECK(t.weekday == "[MON]");
    CHECK(t.hour == "[0h]");
    CHECK(t.minute == "[00m]");

    // One full day later: day index advances and so does the calendar weekday.
    t = encode_time("2024-01-01T00:00", 1440);
    CHECK(t.day == "[DAY2]");
    CHECK(t.weekday == "[TUE]");
    CHECK(t.hour == "[0h]");
    CHECK(t.minute == "[00m]");
}

TEST_CASE("time tokens roll calendar boundaries") {
    // Admission late on 2024-02-28 (leap year, a Wednesday); 120 minutes
    // later is 01:30 on the 29th.
    TimeTokens t = encode_time("2024-02-28T23:30", 120);
    CHECK(t.day == "[DAY1]");
    CHECK(t.weekday == "[THU]");
    CHECK(t.hour == "[1h]");
    CHECK(t.minute == "[30m]");

    // Sunday wraps to Monday.
    t = encode_time("2024-01-07T23:00", 60);
    CHECK(t.weekday == "[MON]");
}

TEST_CASE("day index clamps at the cap") {
    TimeTokens t = encode_time("2024-01-01T00:00", 200 * 1440);
    CHECK(t.day == "[DAY60]");
    CHECK_THROWS_AS(encode_time("2024-01-01T00:00", -1), std::invalid_argument);
}

TEST_CASE("relative intervals digit-split the elapsed minutes") {
    CHECK(encode_relative_time(100, 160) == Tokens{"6", "0"});
    CHECK(encode_relative_time(std::nullopt, 500) == Tokens{"0"});
    CHECK(encode_relative_time(0, 0) == Tokens{"0"});
    CHECK(encode_relative_time(0, 1234) == Tokens{"1", "2", "3", "4"});
    CHECK_THROWS_AS(encode_relative_time(100, 50), std::invalid_argument);
}

TEST_CASE("value and unit tokens split by the grammar") {
    CHECK(value_tokens("1.23") == Tokens{"1", ".", "2", "3"});
    CHECK(value_tokens("-3.5") == Tokens{"-", "3", ".", "5"});
    CHECK(value_tokens("240") == Tokens{"2", "4", "0"});
    CHECK(unit_tokens("mEq/L") == Tokens{"meq", "/", "l"});
    CHECK(unit_tokens("mg/dL") == Tokens{"mg", "/", "dl"});
    CHECK(unit_tokens("units") == Tokens{"units"});
}

TEST_CASE("a lab event textualizes to type, item, digits, unit, terminator") {
    TokenSpan span = textualize_event(lab_event(0, "Creatinine", "1.23", "mg/dL"));
    CHECK(span.tokens ==
          Tokens{"labevent", "creatinine", "1", ".", "2", "3", "mg", "/", "dl", "[EOE]"});
    CHECK(span.roles ==
          std::vector<TokenRole>{TokenRole::event_type, TokenRole::item_text, TokenRole::value,
                                 TokenRole::value, TokenRole::value, TokenRole::value,
                                 TokenRole::unit, TokenRole::unit, TokenRole::unit,
                                 TokenRole::eoe});
}

TEST_CASE("a unitless lab event omits unit tokens") {
    TokenSpan span = textualize_event(lab_event(0, "pH", "7.0"));
    CHECK(span.tokens == Tokens{"labevent", "ph", "7", ".", "0", "[EOE]"});
    CHECK(span.roles ==
          std::vector<TokenRole>{TokenRole::event_type, TokenRole::item_text, TokenRole::value,
                                 TokenRole::value, TokenRole::value, TokenRole::eoe});
}

TEST_CASE("a valueless medication textualizes to its words") {
    TokenSpan span = textualize_event(med_event(0, "Insulin Regular"));
    CHECK(span.tokens == Tokens{"medication", "insulin", "regular", "[EOE]"});
}

TEST_CASE("demographics become a digit-split prefix") {
    Demographics d{Gender::female, 65, "asian"};
    CHECK(textualize_demographics(d) == Tokens{"gender", "f", "age", "6", "5", "race", "asian"});
    d = {Gender::male, 5, "other"};
    CHECK(textualize_demographics(d) == Tokens{"gender", "m", "age", "5", "race", "other"});
    d = {Gender::female, 100, "African American"};
    Tokens t = textualize_demographics(d);
    REQUIRE(t.size() == 9);
    CHECK(Tokens(t.begin() + 6, t.end()) == Tokens{"race", "african", "american"});
}

TEST_CASE("an assembled sequence is prefix then blocks in time order") {
    IcuStay stay = make_stay(
        "s1", {lab_event(60, "Glucose", "101", "mg/dL"), lab_event(600, "pH", "7.40")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    Tokens expected = textualize_demographics(stay.demographics);
    for (const MedicalEvent& e : stay.events) {
        TimeTokens t = encode_time(stay.admit_datetime, e.offset_min);
        expected.insert(expected.end(), {t.day, t.weekday, t.hour, t.minute});
        TokenSpan body = textualize_event(e);
        expected.insert(expected.end(), body.tokens.begin(), body.tokens.end());
    }
    CHECK(rec.tokens == expected);
    for (size_t i = 0; i < 7; ++i) CHECK(rec.event_index[i] == -1);
    CHECK(rec.event_index.back() == 1);
    CHECK(rec.lab_flags.back() == 1);
}

TEST_CASE("an empty stay assembles to the prefix alone") {
    IcuStay stay = make_stay("s1", {});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    CHECK(rec.tokens == textualize_demographics(stay.demographics));
}

TEST_CASE("permutation shuffles only within equal-timestamp groups") {
    IcuStay stay = make_stay("s1", {
                                       lab_event(100, "Glucose", "101", "mg/dL"),
                                       lab_event(102, "Potassium", "4.1", "mEq/L"),
                                       lab_event(104, "Sodium", "139", "mEq/L"),
                                       lab_event(800, "pH", "7.40"),
                                   });
    SequenceRecord plain = assemble_sequence(stay, std::nullopt);
    bool reordered = false;
    for (uint64_t seed = 0; seed < 12; ++seed) {
        SequenceRecord rec = assemble_sequence(stay, seed);
        CHECK(block_multiset(rec) == block_multiset(plain));
        // The lone event at 800 stays last.
        CHECK(rec.event_index.back() == 3);
        if (rec.tokens != plain.tokens) reordered = true;
    }
    CHECK(reordered);  // 3! orderings over 12 seeds: some must differ
}

TEST_CASE("events in different buckets never swap") {
    IcuStay stay = make_stay("s1", {lab_event(100, "Glucose", "101", "mg/dL"),
                                    lab_event(200, "pH", "7.40")});
    for (uint64_t seed = 0; seed < 8; ++seed) {
        SequenceRecord rec = assemble_sequence(stay, seed);
        std::vector<int32_t> order;
        for (int32_t e : rec.event_index)
            if (e >= 0 && (order.empty() || order.back() != e)) order.push_back(e);
        CHECK(order == std::vector<int32_t>{0, 1});
    }
}

TEST_CASE("assembled absolute timestamps match each event's own encoding") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 5;
    for (const IcuStay& stay : generate_synthetic(cfg)) {
        SequenceRecord rec = assemble_sequence(stay, 3);
        int prev_day = 0;
        for (size_t i = 0; i + 3 < rec.size(); ++i) {
            if (rec.roles[i] != TokenRole::time) continue;
            if (i > 0 && rec.roles[i - 1] == TokenRole::time) continue;  // not a group start
            const MedicalEvent& e = stay.events.at(size_t(rec.event_index[i]));
            TimeTokens t = encode_time(stay.admit_datetime, e.offset_min);
            CHECK(rec.tokens[i] == t.day);
            CHECK(rec.tokens[i + 1] == t.weekday);
            CHECK(rec.tokens[i + 2] == t.hour);
            CHECK(rec.tokens[i + 3] == t.minute);
            // The elapsed-day index never goes backwards, even after the
            // same-minute groups are shuffled (the clock hour may wrap
            // within a day, so only the day index is ordered).
            int day = std::stoi(rec.tokens[i].substr(4));
            CHECK(day >= prev_day);
            prev_day = day;
        }
    }
}

TEST_CASE("relative mode appends interval digits computed before any shuffle") {
    IcuStay stay = make_stay("s1", {lab_event(100, "Glucose", "101", "mg/dL"),
                                    lab_event(160, "pH", "7.40")});
    TextualizeOptions opts;
    opts.time_mode = TimeMode::relative;
    SequenceRecord rec = assemble_sequence(stay, std::nullopt, opts);
    Tokens expected = textualize_demographics(stay.demographics);
    expected.insert(expected.end(), {"labevent", "glucose", "1", "0", "1", "mg", "/", "dl", "0",
                                     "[EOE]", "labevent", "ph", "7", ".", "4", "0", "6", "0",
                                     "[EOE]"});
    CHECK(rec.tokens == expected);
    // Interval digits carry the time role, so they stay out of the loss mask.
    size_t interval_pos = rec.size() - 3;
    CHECK(rec.tokens[interval_pos] == "6");
    CHECK(rec.roles[interval_pos] == TokenRole::time);
}

TEST_CASE("event filtering keeps lab events unconditionally") {
    IcuStay stay = make_stay("s1", {med_event(50, "Insulin Regular"),
                                    lab_event(100, "Glucose", "101", "mg/dL")});
    TextualizeOptions opts;
    opts.include_types = {};  // ask for nothing: labs still survive
    SequenceRecord rec = assemble_sequence(stay, std::nullopt, opts);
    std::set<int32_t> events(rec.event_index.begin(), rec.event_index.end());
    CHECK(events == std::set<int32_t>{-1, 1});
}

TEST_CASE("quantile mode swaps digits for a bin token") {
    std::unordered_map<std::string, std::vector<double>> train;
    for (int v = 1; v <= 100; ++v) train["glucose"].push_back(double(v));
    QuantileBinning binning = QuantileBinning::fit(train, 5);
    TextualizeOptions opts;
    opts.value_mode = ValueMode::quantile;
    opts.binning = &binning;
    IcuStay stay = make_stay("s1", {lab_event(100, "Glucose", "31", "mg/dL")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt, opts);
    // 31 falls in bin 1 of the 1..100 fit (bins of 20).
    Tokens tail(rec.tokens.end() - 7, rec.tokens.end());
    CHECK(tail == Tokens{"labevent", "glucose", "[Q1]", "mg", "/", "dl", "[EOE]"});
    // Items without a fit keep digits.
    IcuStay other = make_stay("s2", {lab_event(100, "pH", "7.40")});
    SequenceRecord rec2 = assemble_sequence(other, std::nullopt, opts);
    Tokens tail2(rec2.tokens.end() - 7, rec2.tokens.end());
    CHECK(tail2 == Tokens{"labevent", "ph", "7", ".", "4", "0", "[EOE]"});
}

TEST_CASE("loss mask marks exactly lab value, unit and terminator tokens") {
    IcuStay stay = make_stay("s1", {lab_event(0, "Creatinine", "1.23", "mg/dL")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    std::vector<uint8_t> mask = compute_loss_mask(rec);
    // 4 value chars + 3 unit tokens + EOE.
    CHECK(mask_count(rec) == 8);
    for (size_t i = 0; i < rec.size(); ++i) {
        bool expect = rec.roles[i] == TokenRole::value || rec.roles[i] == TokenRole::unit ||
                      rec.roles[i] == TokenRole::eoe;
        CHECK(mask[i] == uint8_t(expect));
    }
}

TEST_CASE("medication-only records have an all-false mask") {
    IcuStay stay = make_stay("s1", {med_event(0, "Insulin Regular", "6", "units")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    CHECK(mask_count(rec) == 0);
}

TEST_CASE("mask count follows the counting formula and ignores permutation") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 8;
    for (const IcuStay& stay : generate_synthetic(cfg)) {
        long expected = 0;
        for (const MedicalEvent& e : stay.events) {
            if (e.type != EventType::labevent) continue;
            expected += long(value_tokens(*e.value).size());
            if (e.unit) expected += long(unit_tokens(*e.unit).size());
            expected += 1;  // terminator
        }
        long base = mask_count(assemble_sequence(stay, std::nullopt));
        CHECK(base == expected);
        CHECK(mask_count(assemble_sequence(stay, 1)) == expected);
        CHECK(mask_count(assemble_sequence(stay, 2)) == expected);
    }
}

TEST_CASE("roles are complete before padding") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 3;
    for (const IcuStay& stay : generate_synthetic(cfg)) {
        SequenceRecord rec = assemble_sequence(stay, 7);
        for (size_t i = 0; i < rec.size(); ++i) {
            CHECK(rec.roles[i] != TokenRole::pad);
            if (rec.roles[i] == TokenRole::eoe) CHECK(rec.tokens[i] == kEoeToken);
        }
    }
}

TEST_CASE("cropping packs whole event blocks under the cap") {
    // Prefix of 7 demo tokens; each glucose block is 4 time + 8 body + the
    // terminator = 13 tokens.
    IcuStay stay = make_stay("s1", {
                                       lab_event(60, "Glucose", "101", "mg/dL"),
                                       lab_event(2000, "Glucose", "102", "mg/dL"),
                                       lab_event(4000, "Glucose", "103", "mg/dL"),
                                       lab_event(6000, "Glucose", "104", "mg/dL"),
                                   });
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    REQUIRE(rec.size() == 7 + 4 * 13);

    // Everything fits: one crop, unchanged.
    std::vector<SequenceRecord> whole = crop_sequence(rec, 100);
    REQUIRE(whole.size() == 1);
    CHECK(whole[0].tokens == rec.tokens);

    // 7 + 13 + 13 = 33 fits under 35; a third block would need 46.
    std::vector<SequenceRecord> crops = crop_sequence(rec, 35);
    REQUIRE(crops.size() == 2);
    for (const SequenceRecord& c : crops) {
        CHECK(c.size() == 33);
        CHECK(Tokens(c.tokens.begin(), c.tokens.begin() + 7) ==
              textualize_demographics(stay.demographics));
    }

    // Coverage: concatenating the crops' event tokens reproduces the original.
    Tokens concat;
    for (const SequenceRecord& c : crops)
        for (size_t i = 0; i < c.size(); ++i)
            if (c.event_index[i] >= 0) concat.push_back(c.tokens[i]);
    Tokens original;
    for (size_t i = 0; i < rec.size(); ++i)
        if (rec.event_index[i] >= 0) original.push_back(rec.tokens[i]);
    CHECK(concat == original);
}

TEST_CASE("a block that cannot fit names its event") {
    IcuStay stay = make_stay("s1", {lab_event(60, "Glucose", "101", "mg/dL")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    CHECK_THROWS_WITH_AS(crop_sequence(rec, 10), doctest::Contains("0"),
                         std::invalid_argument);
}

TEST_CASE("the special token table is stable and complete") {
    const std::vector<std::string>& s = special_tokens();
    CHECK(s.size() == 3 + 60 + 7 + 24 + 6 + 20);
    CHECK(s[0] == kPadToken);
    CHECK(s[1] == kEoeToken);
    CHECK(s[2] == kUnkToken);
    CHECK(std::find(s.begin(), s.end(), "[DAY60]") != s.end());
    CHECK(std::find(s.begin(), s.end(), "[SUN]") != s.end());
    CHECK(std::find(s.begin(), s.end(), "[23h]") != s.end());
    CHECK(std::find(s.begin(), s.end(), "[50m]") != s.end());
    CHECK(std::find(s.begin(), s.end(), "[Q19]") != s.end());
    CHECK(std::find(s.begin(), s.end(), "[DAY61]") == s.end());
}

}  // TEST_SUITE
