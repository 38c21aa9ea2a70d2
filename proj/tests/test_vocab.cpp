#include <doctest.h>

#include <string>
#include <vector>

#include "labpred/textualize.hpp"
#include "labpred/vocab.hpp"
#include "test_util.hpp"

using namespace labpred;
using namespace labpred::testing;

namespace {

SequenceRecord record_of(std::vector<std::string> tokens) {
    SequenceRecord rec;
    rec.stay_id = "s";
    rec.tokens = std::move(tokens);
    rec.roles.assign(rec.tokens.size(), TokenRole::item_text);
    rec.event_index.assign(rec.tokens.size(), 0);
    rec.lab_flags.assign(rec.tokens.size(), 1);
    return rec;
}

}  // namespace

TEST_SUITE("vocab") {

TEST_CASE("reserved ids come first, value characters always present") {
    Vocabulary v = Vocabulary::build({record_of({"creatinine"})});
    CHECK(v.id_of("[PAD]") == Vocabulary::kPadId);
    CHECK(v.id_of("[EOE]") == Vocabulary::kEoeId);
    CHECK(v.id_of("[UNK]") == Vocabulary::kUnkId);
    const std::vector<std::string>& specials = special_tokens();
    for (size_t i = 0; i < specials.size(); ++i)
        CHECK(v.id_of(specials[i]) == int32_t(i));
    for (const char* c : {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-"})
        CHECK(v.id_of(c) != Vocabulary::kUnkId);
    CHECK(v.contains("creatinine"));
}

TEST_CASE("a creatinine corpus covers its own tokens") {
    IcuStay stay = make_stay("s1", {lab_event(60, "Creatinine", "1.23", "mg/dL")});
    Vocabulary v = Vocabulary::build({assemble_sequence(stay, std::nullopt)});
    for (const char* tok : {"labevent", "creatinine", "mg", "/", "dl", "gender", "f"})
        CHECK(v.contains(tok));
}

TEST_CASE("corpus words rank by frequency with lexicographic ties") {
    Vocabulary v = Vocabulary::build(
        {record_of({"zz", "zz", "zz", "bb", "aa", "bb", "aa", "mm"})});
    // zz appears 3 times; aa and bb twice each (tie -> "aa" first); mm once.
    CHECK(v.id_of("zz") < v.id_of("aa"));
    CHECK(v.id_of("aa") < v.id_of("bb"));
    CHECK(v.id_of("bb") < v.id_of("mm"));
}

TEST_CASE("stay order does not change the vocabulary") {
    SequenceRecord a = record_of({"x", "y", "x"});
    SequenceRecord b = record_of({"y", "z"});
    CHECK(Vocabulary::build({a, b}).serialize() == Vocabulary::build({b, a}).serialize());
}

TEST_CASE("unknown tokens encode to the UNK sentinel") {
    Vocabulary v = Vocabulary::build({record_of({"known"})});
    std::vector<std::string> toks{"known", "unknown-token"};
    std::vector<int32_t> ids = v.encode(toks);
    REQUIRE(ids.size() == 2);
    CHECK(ids[0] == v.id_of("known"));
    CHECK(ids[1] == Vocabulary::kUnkId);
}

TEST_CASE("encode and decode invert each other") {
    IcuStay stay = make_stay("s1", {lab_event(60, "Creatinine", "1.23", "mg/dL")});
    SequenceRecord rec = assemble_sequence(stay, std::nullopt);
    Vocabulary v = Vocabulary::build({rec});
    std::vector<int32_t> ids = v.encode(rec.tokens);
    CHECK(v.decode(ids) == rec.tokens);
    CHECK(v.encode(v.decode(ids)) == ids);
}

TEST_CASE("out-of-range ids are an error") {
    Vocabulary v = Vocabulary::build({record_of({"a"})});
    CHECK_THROWS_AS(v.token_of(v.size()), std::out_of_range);
    CHECK_THROWS_AS((void)v.decode(std::vector<int32_t>{-1}), std::out_of_range);
}

TEST_CASE("serialize round-trips through file and memory") {
    IcuStay stay = make_stay("s1", {lab_event(60, "Glucose", "99", "mg/dL")});
    Vocabulary v = Vocabulary::build({assemble_sequence(stay, std::nullopt)});
    Vocabulary mem = Vocabulary::from_serialized(v.serialize());
    CHECK(mem.serialize() == v.serialize());
    CHECK(mem.hash() == v.hash());

    std::string path = scratch_file("vocab.txt");
    v.save(path);
    Vocabulary file = Vocabulary::load(path);
    CHECK(file.serialize() == v.serialize());
    CHECK(file.hash() == v.hash());
}

TEST_CASE("different vocabularies hash differently") {
    Vocabulary a = Vocabulary::build({record_of({"alpha"})});
    Vocabulary b = Vocabulary::build({record_of({"beta"})});
    CHECK(a.hash() != b.hash());
}

}  // TEST_SUITE
