#include <doctest.h>

#include <algorithm>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "labpred/ehr.hpp"
#include "test_util.hpp"

using namespace labpred;
using namespace labpred::testing;

namespace {

std::string stay_line(const std::string& stay_id, const std::string& patient_id,
                      int last_offset) {
    return "{\"stay_id\":\"" + stay_id + "\",\"patient_id\":\"" + patient_id +
           "\",\"admit_datetime\":\"2024-03-05T08:30\","
           "\"demographics\":{\"gender\":\"F\",\"age\":65,\"race\":\"asian\"},"
           "\"events\":[{\"offset_min\":10,\"type\":\"labevent\",\"code\":\"c1\","
           "\"desc\":\"glucose\",\"value\":\"101\",\"unit\":\"mg/dL\"},"
           "{\"offset_min\":" +
           std::to_string(last_offset) +
           ",\"type\":\"medication\",\"code\":\"c2\",\"desc\":\"insulin\","
           "\"value\":null,\"unit\":null}]}";
}

}  // namespace

TEST_SUITE("ehr") {

TEST_CASE("value strings accept plain decimals only") {
    CHECK(is_valid_value_string("0"));
    CHECK(is_valid_value_string("101"));
    CHECK(is_valid_value_string("1.23"));
    CHECK(is_valid_value_string("-3.5"));
    CHECK(is_valid_value_string("-0.5"));
    CHECK_FALSE(is_valid_value_string(""));
    CHECK_FALSE(is_valid_value_string("-"));
    CHECK_FALSE(is_valid_value_string("1."));
    CHECK_FALSE(is_valid_value_string(".5"));
    CHECK_FALSE(is_valid_value_string("1e3"));
    CHECK_FALSE(is_valid_value_string("1,000"));
    CHECK_FALSE(is_valid_value_string("--1"));
    CHECK_FALSE(is_valid_value_string("1.2.3"));
    CHECK_FALSE(is_valid_value_string(" 1"));
}

TEST_CASE("item names lower-case and collapse whitespace") {
    CHECK(normalize_item_name("Creatinine") == "creatinine");
    CHECK(normalize_item_name("Insulin Regular") == "insulin regular");
    CHECK(normalize_item_name("  Base   Excess ") == "base excess");
}

TEST_CASE("admit datetimes parse and reject malformed input") {
    AdmitTime t = parse_admit_datetime("2024-03-05T08:30");
    CHECK(t.year == 2024);
    CHECK(t.month == 3);
    CHECK(t.day == 5);
    CHECK(t.hour == 8);
    CHECK(t.minute == 30);
    CHECK_THROWS_AS(parse_admit_datetime("2024-03-05 08:30"), std::invalid_argument);
    CHECK_THROWS_AS(parse_admit_datetime("2024-13-05T08:30"), std::invalid_argument);
    CHECK_THROWS_AS(parse_admit_datetime("2024-02-30T08:30"), std::invalid_argument);
    CHECK_THROWS_AS(parse_admit_datetime("2024-03-05T24:00"), std::invalid_argument);
    CHECK_THROWS_AS(parse_admit_datetime("nonsense"), std::invalid_argument);
}

TEST_CASE("well-formed file loads every stay") {
    std::string path = scratch_file("ok.jsonl");
    write_text(path, stay_line("s1", "p1", 400) + "\n" + stay_line("s2", "p2", 500) + "\n" +
                         stay_line("s3", "p3", 600) + "\n");
    LoadResult r = load_dataset(path);
    CHECK(r.stays.size() == 3);
    CHECK(r.dropped_short_stays == 0);
    CHECK(r.stays[0].stay_id == "s1");
    CHECK(r.stays[0].events.size() == 2);
    CHECK(r.stays[0].events[0].value == "101");
}

TEST_CASE("stays ending before six hours are dropped and counted") {
    std::string path = scratch_file("short.jsonl");
    write_text(path, stay_line("s1", "p1", 300) + "\n" + stay_line("s2", "p2", 360) + "\n");
    LoadResult r = load_dataset(path);
    CHECK(r.stays.size() == 1);
    CHECK(r.stays[0].stay_id == "s2");
    CHECK(r.dropped_short_stays == 1);
}

TEST_CASE("parse errors name the offending line") {
    std::string path = scratch_file("bad_line.jsonl");
    write_text(path, stay_line("s1", "p1", 400) + "\n" +
                         "{\"stay_id\":\"s2\",\"patient_id\":\"p2\","
                         "\"admit_datetime\":\"2024-03-05T08:30\","
                         "\"demographics\":{\"gender\":\"F\",\"age\":65,\"race\":\"asian\"}}\n");
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("line 2"), std::runtime_error);
}

TEST_CASE("duplicate stay ids are rejected") {
    std::string path = scratch_file("dup.jsonl");
    write_text(path, stay_line("s1", "p1", 400) + "\n" + stay_line("s1", "p2", 420) + "\n");
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("s1"), std::runtime_error);
}

TEST_CASE("events are re-sorted by offset on load") {
    std::string path = scratch_file("unsorted.jsonl");
    write_text(path,
               "{\"stay_id\":\"s1\",\"patient_id\":\"p1\","
               "\"admit_datetime\":\"2024-03-05T08:30\","
               "\"demographics\":{\"gender\":\"M\",\"age\":40,\"race\":\"other\"},"
               "\"events\":[{\"offset_min\":400,\"type\":\"labevent\",\"code\":\"c\","
               "\"desc\":\"glucose\",\"value\":\"99\",\"unit\":\"mg/dL\"},"
               "{\"offset_min\":5,\"type\":\"labevent\",\"code\":\"c\","
               "\"desc\":\"glucose\",\"value\":\"98\",\"unit\":\"mg/dL\"}]}\n");
    LoadResult r = load_dataset(path);
    REQUIRE(r.stays.size() == 1);
    CHECK(r.stays[0].events[0].offset_min == 5);
    CHECK(r.stays[0].events[1].offset_min == 400);
}

TEST_CASE("write-load round trip is byte-identical") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 5;
    std::vector<IcuStay> stays = generate_synthetic(cfg);
    std::string p1 = scratch_file("round1.jsonl");
    std::string p2 = scratch_file("round2.jsonl");
    write_dataset(p1, stays);
    write_dataset(p2, load_dataset(p1).stays);
    CHECK(read_text(p1) == read_text(p2));
    CHECK(read_text(p1).find("\r") == std::string::npos);
}

TEST_CASE("split respects ratios at patient granularity") {
    std::vector<IcuStay> stays;
    for (int p = 0; p < 10; ++p)
        stays.push_back(make_stay("s" + std::to_string(p), {lab_event(400, "glucose", "100")}));
    DatasetSplit split = split_dataset(stays, SplitRatios{0.8, 0.1, 0.1}, 7);
    CHECK(split.train.size() == 8);
    CHECK(split.val.size() == 1);
    CHECK(split.test.size() == 1);
}

TEST_CASE("all stays of one patient land together") {
    std::vector<IcuStay> stays;
    for (int s = 0; s < 5; ++s) {
        IcuStay stay = make_stay("s" + std::to_string(s), {lab_event(400, "glucose", "100")});
        stay.patient_id = "p_only";
        stays.push_back(stay);
    }
    DatasetSplit split = split_dataset(stays, SplitRatios{0.8, 0.1, 0.1}, 1);
    size_t in_one = std::max({split.train.size(), split.val.size(), split.test.size()});
    CHECK(in_one == 5);
    CHECK(split.train.size() + split.val.size() + split.test.size() == 5);
}

TEST_CASE("split is a deterministic partition") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 40;
    std::vector<IcuStay> stays = generate_synthetic(cfg);
    DatasetSplit a = split_dataset(stays, SplitRatios{0.8, 0.1, 0.1}, 7);
    DatasetSplit b = split_dataset(stays, SplitRatios{0.8, 0.1, 0.1}, 7);
    CHECK(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i)
        CHECK(a.train[i].stay_id == b.train[i].stay_id);

    std::set<std::string> train_p, val_p, test_p;
    for (const IcuStay& s : a.train) train_p.insert(s.patient_id);
    for (const IcuStay& s : a.val) val_p.insert(s.patient_id);
    for (const IcuStay& s : a.test) test_p.insert(s.patient_id);
    for (const std::string& p : val_p) CHECK(train_p.count(p) == 0);
    for (const std::string& p : test_p) {
        CHECK(train_p.count(p) == 0);
        CHECK(val_p.count(p) == 0);
    }
    CHECK(a.train.size() + a.val.size() + a.test.size() == stays.size());
}

TEST_CASE("splitting nothing is an error") {
    CHECK_THROWS_AS(split_dataset({}, SplitRatios{0.8, 0.1, 0.1}, 1), std::invalid_argument);
}

TEST_CASE("generator is deterministic and satisfies stay invariants") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 15;
    std::vector<IcuStay> a = generate_synthetic(cfg);
    std::vector<IcuStay> b = generate_synthetic(cfg);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(stay_to_json_line(a[i]) == stay_to_json_line(b[i]));

    std::set<std::string> ids;
    for (const IcuStay& stay : a) {
        CHECK(ids.insert(stay.stay_id).second);
        REQUIRE_FALSE(stay.events.empty());
        CHECK(stay.events.back().offset_min >= 360);
        for (size_t i = 1; i < stay.events.size(); ++i)
            CHECK(stay.events[i - 1].offset_min <= stay.events[i].offset_min);
        for (const MedicalEvent& e : stay.events) {
            CHECK(e.offset_min >= 0);
            if (e.value) CHECK(is_valid_value_string(*e.value));
            if (e.type == EventType::labevent) CHECK(e.value.has_value());
        }
    }
}

TEST_CASE("every stay closes with a full same-minute lab panel") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 10;
    for (const IcuStay& stay : generate_synthetic(cfg)) {
        int last = stay.events.back().offset_min;
        std::set<std::string> items_at_last;
        for (const MedicalEvent& e : stay.events)
            if (e.offset_min == last && e.type == EventType::labevent)
                items_at_last.insert(e.desc);
        CHECK(items_at_last.size() == cfg.lab_items.size());
    }
}

TEST_CASE("decimal formatting matches the item spec") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 6;
    std::unordered_map<std::string, int> decimals;
    for (const LabItemSpec& it : cfg.lab_items) decimals[it.name] = it.decimals;
    for (const IcuStay& stay : generate_synthetic(cfg))
        for (const MedicalEvent& e : stay.events) {
            if (e.type != EventType::labevent) continue;
            REQUIRE(decimals.count(e.desc) == 1);
            int want = decimals[e.desc];
            size_t dot = e.value->find('.');
            if (want == 0)
                CHECK(dot == std::string::npos);
            else {
                REQUIRE(dot != std::string::npos);
                CHECK(e.value->size() - dot - 1 == size_t(want));
            }
        }
}

TEST_CASE("a flat item reduces to its demographic-adjusted baseline") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 4;
    cfg.include_context_events = false;
    cfg.med_items.clear();
    cfg.lab_items = {{"flatline", "lab0", "u", 50.0, 2.0, 1, 0.0, 0.0, 0.0, 0.0, 0.0, 240.0,
                      std::nullopt}};
    for (const IcuStay& stay : generate_synthetic(cfg)) {
        std::set<std::string> distinct;
        for (const MedicalEvent& e : stay.events)
            if (e.type == EventType::labevent) distinct.insert(*e.value);
        CHECK(distinct.size() == 1);  // constant within a stay
    }
}

TEST_CASE("uncoupled generator ignores medications") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 8;
    SyntheticConfig off = cfg;
    off.coupling_scale = 0.0;
    std::vector<IcuStay> with = generate_synthetic(cfg);
    std::vector<IcuStay> without = generate_synthetic(off);
    REQUIRE(with.size() == without.size());
    bool lab_changed = false;
    for (size_t i = 0; i < with.size(); ++i) {
        REQUIRE(with[i].events.size() == without[i].events.size());
        for (size_t j = 0; j < with[i].events.size(); ++j) {
            const MedicalEvent& a = with[i].events[j];
            const MedicalEvent& b = without[i].events[j];
            CHECK(a.desc == b.desc);
            if (a.type == EventType::labevent && *a.value != *b.value) lab_changed = true;
        }
    }
    CHECK(lab_changed);  // coupling-on data really differs from coupling-off
}

TEST_CASE("config validation rejects bad catalogs") {
    SyntheticConfig cfg = default_synthetic_config();
    cfg.n_patients = 0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    cfg = default_synthetic_config();
    cfg.lab_items[0].ar_coef = 1.0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    cfg = default_synthetic_config();
    cfg.lab_items[0].decimals = 3;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    cfg = default_synthetic_config();
    cfg.med_items[0].affected_item = "no such item";
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    cfg = default_synthetic_config();
    cfg.lab_items.clear();
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    cfg = default_synthetic_config();
    cfg.stay_minutes_min = 100;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

    CHECK_NOTHROW(validate(default_synthetic_config()));
}

}  // TEST_SUITE
