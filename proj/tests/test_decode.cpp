#include <doctest.h>

#include <cmath>
#include <vector>

#include "labpred/decode.hpp"

using namespace labpred;

namespace {

// Plays back a fixed list of logits rows, recording what it was fed.
class scripted_scorer : public TokenScorer {
public:
    explicit scripted_scorer(std::vector<VecF> rows) : rows_(std::move(rows)) {}

    VecF begin(std::span<const int32_t> prompt) override {
        prompt_.assign(prompt.begin(), prompt.end());
        next_ = 0;
        return rows_.at(next_++);
    }
    VecF advance(int32_t id) override {
        fed_.push_back(id);
        return rows_.at(next_++);
    }

    const std::vector<int32_t>& prompt() const { return prompt_; }
    const std::vector<int32_t>& fed() const { return fed_; }

private:
    std::vector<VecF> rows_;
    std::vector<int32_t> prompt_;
    std::vector<int32_t> fed_;
    size_t next_ = 0;
};

VecF peaked(int vocab, int at, float height = 5.0f) {
    VecF row = VecF::Zero(vocab);
    row(at) = height;
    return row;
}

ModelConfig session_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.max_seq_len = 24;
    cfg.vocab_size = 30;
    return cfg;
}

float max_abs_diff(const VecF& a, const Eigen::RowVectorXf& b) {
    REQUIRE(a.size() == b.size());
    float worst = 0.0f;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a(i) - b(i)));
    return worst;
}

}  // namespace

TEST_SUITE("decode") {

TEST_CASE("greedy decoding follows the argmax until the end token") {
    const int vocab = 12;
    const int32_t end = 1;
    std::vector<int32_t> want{5, 7, 3, 4, 9, 6, 8};  // a digits-then-unit shaped run
    std::vector<VecF> rows;
    for (int32_t id : want) rows.push_back(peaked(vocab, id));
    rows.push_back(peaked(vocab, end));
    scripted_scorer scorer(std::move(rows));

    std::vector<int32_t> prompt{2, 3, 4};
    GreedyResult result = greedy_decode(scorer, prompt, end);
    CHECK(result.ids == want);
    CHECK(result.terminated);
    CHECK(result.entropies.size() == want.size() + 1);  // end step is scored too
    CHECK(scorer.prompt() == prompt);
    CHECK(scorer.fed() == want);  // every generated token went back in
}

TEST_CASE("argmax ties resolve to the smaller id") {
    VecF row = VecF::Zero(10);
    row(3) = 2.0f;
    row(7) = 2.0f;
    scripted_scorer scorer({row, peaked(10, 1)});
    GreedyResult result = greedy_decode(scorer, std::vector<int32_t>{0}, 1);
    REQUIRE(result.ids.size() == 1);
    CHECK(result.ids[0] == 3);
}

TEST_CASE("the token cap stops an unterminated run") {
    std::vector<VecF> rows(5, peaked(8, 4));
    scripted_scorer scorer(std::move(rows));
    GreedyResult result = greedy_decode(scorer, std::vector<int32_t>{0}, 1, 5);
    CHECK(result.ids == std::vector<int32_t>(5, 4));
    CHECK_FALSE(result.terminated);
    CHECK(result.entropies.size() == 5);
    CHECK(scorer.fed().size() == 4);  // nothing is fed after the final pick
}

TEST_CASE("an immediate end token yields no ids but one entropy") {
    scripted_scorer scorer({peaked(8, 1)});
    GreedyResult result = greedy_decode(scorer, std::vector<int32_t>{0}, 1);
    CHECK(result.ids.empty());
    CHECK(result.terminated);
    CHECK(result.entropies.size() == 1);
}

TEST_CASE("a non-positive cap is rejected") {
    scripted_scorer scorer({peaked(8, 1)});
    CHECK_THROWS_AS(greedy_decode(scorer, std::vector<int32_t>{0}, 1, 0),
                    std::invalid_argument);
}

TEST_CASE("logits entropy matches closed forms") {
    CHECK(logits_entropy(VecF::Zero(10)) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(logits_entropy(VecF::Zero(2)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    VecF spike = VecF::Zero(6);
    spike(2) = 60.0f;
    CHECK(logits_entropy(spike) == doctest::Approx(0.0).epsilon(1e-9));
    VecF shifted = VecF::Constant(5, 123.0f);  // entropy is shift invariant
    CHECK(logits_entropy(shifted) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("the incremental session reproduces full forward passes") {
    ModelConfig cfg = session_config();
    ModelParams params = ModelParams::init(cfg, 21);
    std::vector<int32_t> prompt{3, 11, 7, 0, 25, 14, 9, 2, 18, 5};

    DecoderSession session(params);
    VecF last = session.begin(prompt);
    CHECK(session.length() == int(prompt.size()));
    CHECK(session.capacity() == cfg.max_seq_len);

    MatF full = forward<float>(params, prompt, 1, int(prompt.size()));
    CHECK(max_abs_diff(last, full.row(full.rows() - 1)) < 1e-4f);

    // Growing the session one token at a time keeps matching the batch path.
    std::vector<int32_t> grown = prompt;
    for (int32_t id : {6, 22, 1}) {
        last = session.advance(id);
        grown.push_back(id);
        MatF again = forward<float>(params, grown, 1, int(grown.size()));
        CHECK(max_abs_diff(last, again.row(again.rows() - 1)) < 1e-4f);
    }
    CHECK(session.length() == int(grown.size()));
}

TEST_CASE("stepwise session logits match every prefix") {
    ModelConfig cfg = session_config();
    ModelParams params = ModelParams::init(cfg, 22);
    std::vector<int32_t> ids{4, 17, 8, 29, 0, 13};

    DecoderSession session(params);
    VecF logits = session.begin(std::vector<int32_t>{ids[0]});
    for (size_t n = 1; n <= ids.size(); ++n) {
        std::vector<int32_t> prefix(ids.begin(), ids.begin() + long(n));
        MatF full = forward<float>(params, prefix, 1, int(n));
        CHECK(max_abs_diff(logits, full.row(full.rows() - 1)) < 1e-4f);
        if (n < ids.size()) logits = session.advance(ids[n]);
    }
}

TEST_CASE("a session can be restarted with a fresh prompt") {
    ModelConfig cfg = session_config();
    ModelParams params = ModelParams::init(cfg, 23);
    DecoderSession session(params);
    session.begin(std::vector<int32_t>{1, 2, 3, 4, 5});
    VecF reused = session.begin(std::vector<int32_t>{9, 8});
    CHECK(session.length() == 2);

    DecoderSession fresh(params);
    VecF clean = fresh.begin(std::vector<int32_t>{9, 8});
    for (Eigen::Index i = 0; i < clean.size(); ++i) CHECK(reused(i) == clean(i));
}

TEST_CASE("session guards its inputs") {
    ModelConfig cfg = session_config();
    cfg.max_seq_len = 4;
    ModelParams params = ModelParams::init(cfg, 24);
    DecoderSession session(params);
    CHECK_THROWS_AS(session.begin(std::vector<int32_t>{}), std::invalid_argument);
    CHECK_THROWS_AS(session.advance(-1), std::invalid_argument);
    CHECK_THROWS_AS(session.advance(cfg.vocab_size), std::invalid_argument);
    session.begin(std::vector<int32_t>{1, 2, 3, 4});
    CHECK_THROWS_AS(session.advance(1), std::invalid_argument);  // cache is full
}

TEST_CASE("greedy decoding through a real model is deterministic") {
    ModelConfig cfg = session_config();
    ModelParams params = ModelParams::init(cfg, 25);
    std::vector<int32_t> prompt{3, 14, 15, 9, 2, 6};
    DecoderSession a(params), b(params);
    GreedyResult ra = greedy_decode(a, prompt, 1, 8);
    GreedyResult rb = greedy_decode(b, prompt, 1, 8);
    CHECK(ra.ids == rb.ids);
    CHECK(ra.entropies == rb.entropies);
    CHECK(ra.terminated == rb.terminated);
}

}  // TEST_SUITE
