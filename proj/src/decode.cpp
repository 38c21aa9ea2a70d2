#include "labpred/decode.hpp"

#include <cmath>
#include <stdexcept>

namespace labpred {

DecoderSession::DecoderSession(const ModelParams& params) : params_(params) {
    const ModelConfig& cfg = params_.config;
    cfg.validate();
    k_cache_.assign(size_t(cfg.n_layers), MatF::Zero(cfg.max_seq_len, cfg.d_model));
    v_cache_.assign(size_t(cfg.n_layers), MatF::Zero(cfg.max_seq_len, cfg.d_model));
}

VecF DecoderSession::begin(std::span<const int32_t> prompt) {
    if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
    pos_ = 0;
    VecF logits;
    for (int32_t id : prompt) logits = advance(id);
    return logits;
}

VecF DecoderSession::advance(int32_t id) {
    const ModelConfig& cfg = params_.config;
    if (id < 0 || id >= cfg.vocab_size)
        throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
    if (pos_ >= cfg.max_seq_len)
        throw std::invalid_argument("decode session exceeded max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    const int H = cfg.n_heads, dh = cfg.head_dim(), d = cfg.d_model;
    const float scale = 1.0f / std::sqrt(float(dh));

    using RowF = Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>;
    RowF x = params_.tok_emb.row(id) + params_.pos_emb.row(pos_);

    auto layer_norm_row = [d](const RowF& in, const VecF& g, const VecF& b) {
        float mean = in.mean();
        float var = (in.array() - mean).square().sum() / float(d);
        float rstd = 1.0f / std::sqrt(var + 1e-5f);
        RowF out(d);
        for (int c = 0; c < d; ++c) out(c) = (in(c) - mean) * rstd * g(c) + b(c);
        return out;
    };

    RowF q(d), concat(d);
    for (int li = 0; li < cfg.n_layers; ++li) {
        const LayerParamsT<float>& l = params_.layers[size_t(li)];
        RowF a = layer_norm_row(x, l.ln1_g, l.ln1_b);
        q.noalias() = a * l.wq;
        q += l.bq.transpose();
        RowF k = a * l.wk + l.bk.transpose();
        RowF v = a * l.wv + l.bv.transpose();
        k_cache_[size_t(li)].row(pos_) = k;
        v_cache_[size_t(li)].row(pos_) = v;

        const int n = pos_ + 1;  // keys visible to this query
        for (int h = 0; h < H; ++h) {
            auto kh = k_cache_[size_t(li)].block(0, h * dh, n, dh);
            auto vh = v_cache_[size_t(li)].block(0, h * dh, n, dh);
            Eigen::VectorXf scores = (kh * q.segment(h * dh, dh).transpose()) * scale;
            float mx = scores.maxCoeff();
            Eigen::ArrayXf probs = (scores.array() - mx).exp();
            probs /= probs.sum();
            concat.segment(h * dh, dh).noalias() = probs.matrix().transpose() * vh;
        }
        x += concat * l.wo + l.bo.transpose();

        RowF a2 = layer_norm_row(x, l.ln2_g, l.ln2_b);
        RowF h_pre = a2 * l.w1 + l.b1.transpose();
        for (int c = 0; c < h_pre.size(); ++c) h_pre(c) = detail::gelu(h_pre(c));
        x += h_pre * l.w2 + l.b2.transpose();
    }

    RowF normed = layer_norm_row(x, params_.lnf_g, params_.lnf_b);
    VecF logits = params_.tok_emb * normed.transpose();
    ++pos_;
    return logits;
}

double logits_entropy(const VecF& logits) {
    double mx = double(logits.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) sum += std::exp(double(logits(i)) - mx);
    double log_sum = std::log(sum);
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        double logp = double(logits(i)) - mx - log_sum;
        entropy -= std::exp(logp) * logp;
    }
    return entropy;
}

GreedyResult greedy_decode(TokenScorer& scorer, std::span<const int32_t> prompt, int32_t end_id,
                           int max_new_tokens) {
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
    GreedyResult result;
    VecF logits = scorer.begin(prompt);
    for (int step = 0; step < max_new_tokens; ++step) {
        result.entropies.push_back(logits_entropy(logits));
        int32_t best = 0;
        float best_score = logits(0);
        for (Eigen::Index i = 1; i < logits.size(); ++i)
            if (logits(i) > best_score) best = int32_t(i), best_score = logits(i);
        if (best == end_id) {
            result.terminated = true;
            break;
        }
        result.ids.push_back(best);
        if (step + 1 < max_new_tokens) logits = scorer.advance(best);
    }
    return result;
}

}  // namespace labpred
