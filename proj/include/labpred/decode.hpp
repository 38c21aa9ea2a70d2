#pragma once

#include <span>
#include <vector>

#include "labpred/model.hpp"

namespace labpred {

// Minimal next-token interface so decoding logic is testable against
// scripted models.
class TokenScorer {
public:
    virtual ~TokenScorer() = default;
    // Resets, feeds the whole prompt, returns logits for the next position.
    virtual VecF begin(std::span<const int32_t> prompt) = 0;
    // Appends one token, returns logits for the position after it.
    virtual VecF advance(int32_t id) = 0;
};

// Incremental decoding with per-layer key/value caches: each new token costs
// one row of work instead of a full-sequence forward pass. Logits match
// forward() up to float reassociation.
class DecoderSession : public TokenScorer {
public:
    explicit DecoderSession(const ModelParams& params);

    VecF begin(std::span<const int32_t> prompt) override;
    VecF advance(int32_t id) override;
    int length() const { return pos_; }
    int capacity() const { return params_.config.max_seq_len; }

private:
    const ModelParams& params_;
    std::vector<MatF> k_cache_, v_cache_;  // per layer, max_seq_len × d_model
    int pos_ = 0;
};

struct GreedyResult {
    std::vector<int32_t> ids;        // generated tokens, end token excluded
    std::vector<double> entropies;   // per step in nats, end step included
    bool terminated = false;         // end token seen before the cap
};

// Argmax decoding (ties break to the smaller id) until end_id or the cap.
GreedyResult greedy_decode(TokenScorer& scorer, std::span<const int32_t> prompt, int32_t end_id,
                           int max_new_tokens = 24);

// Shannon entropy in nats of the softmax of a logits row.
double logits_entropy(const VecF& logits);

}  // namespace labpred
