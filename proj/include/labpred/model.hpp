#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "labpred/rng.hpp"

namespace labpred {

// Decoder-only transformer over event-stream tokens: learned token and
// position embeddings (input and output embeddings tied), pre-norm residual
// blocks with causal multi-head attention and a GELU feed-forward, and a
// final layer norm. Templated on the scalar so training runs in float while
// gradient checking runs the identical code in double.

template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using MatF = MatT<float>;
using VecF = VecT<float>;

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 0;  // 0 resolves to 4 * d_model
    int max_seq_len = 512;
    int vocab_size = 0;
    double dropout = 0.0;

    int d_ff_resolved() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
        if (n_heads < 1) throw std::invalid_argument("n_heads must be >= 1");
        if (d_model < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("d_model must be a positive multiple of n_heads");
        if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
        if (vocab_size < 4) throw std::invalid_argument("vocab_size must cover the sentinels");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("dropout must be in [0, 1)");
    }
};

template <typename S>
struct LayerParamsT {
    VecT<S> ln1_g, ln1_b;
    MatT<S> wq, wk, wv, wo;
    VecT<S> bq, bk, bv, bo;
    VecT<S> ln2_g, ln2_b;
    MatT<S> w1, w2;
    VecT<S> b1, b2;
};

template <typename S>
struct ModelParamsT {
    ModelConfig config;
    MatT<S> tok_emb;  // vocab_size × d_model; also the output projection
    MatT<S> pos_emb;  // max_seq_len × d_model
    std::vector<LayerParamsT<S>> layers;
    VecT<S> lnf_g, lnf_b;

    // Zero-valued tensors with the right shapes (gradient buffers, tests).
    static ModelParamsT shaped(const ModelConfig& config) {
        config.validate();
        ModelParamsT p;
        p.config = config;
        int d = config.d_model, ff = config.d_ff_resolved();
        p.tok_emb = MatT<S>::Zero(config.vocab_size, d);
        p.pos_emb = MatT<S>::Zero(config.max_seq_len, d);
        p.layers.resize(config.n_layers);
        for (LayerParamsT<S>& l : p.layers) {
            l.ln1_g = VecT<S>::Zero(d);
            l.ln1_b = VecT<S>::Zero(d);
            l.wq = MatT<S>::Zero(d, d);
            l.wk = MatT<S>::Zero(d, d);
            l.wv = MatT<S>::Zero(d, d);
            l.wo = MatT<S>::Zero(d, d);
            l.bq = VecT<S>::Zero(d);
            l.bk = VecT<S>::Zero(d);
            l.bv = VecT<S>::Zero(d);
            l.bo = VecT<S>::Zero(d);
            l.ln2_g = VecT<S>::Zero(d);
            l.ln2_b = VecT<S>::Zero(d);
            l.w1 = MatT<S>::Zero(d, ff);
            l.w2 = MatT<S>::Zero(ff, d);
            l.b1 = VecT<S>::Zero(ff);
            l.b2 = VecT<S>::Zero(d);
        }
        p.lnf_g = VecT<S>::Zero(d);
        p.lnf_b = VecT<S>::Zero(d);
        return p;
    }

    // Gaussian init, std 0.02, with residual-facing projections scaled down
    // by 1/sqrt(2 * n_layers); norm gains start at 1, every bias at 0.
    static ModelParamsT init(const ModelConfig& config, uint64_t seed) {
        ModelParamsT p = shaped(config);
        Rng rng(derive_seed(seed, "model-init"));
        const S base = S(0.02);
        const S residual = base / S(std::sqrt(2.0 * config.n_layers));
        auto fill = [&rng](MatT<S>& m, S std_dev) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    m(r, c) = S(rng.gaussian()) * std_dev;
        };
        fill(p.tok_emb, base);
        fill(p.pos_emb, base);
        for (LayerParamsT<S>& l : p.layers) {
            l.ln1_g.setOnes();
            l.ln2_g.setOnes();
            fill(l.wq, base);
            fill(l.wk, base);
            fill(l.wv, base);
            fill(l.wo, residual);
            fill(l.w1, base);
            fill(l.w2, residual);
        }
        p.lnf_g.setOnes();
        return p;
    }

    // Visits every tensor in a fixed canonical order. The visitor receives
    // (name, data pointer, element count); matrices are row-major.
    template <typename Self, typename F>
    static void visit_impl(Self& self, F&& f) {
        auto mat = [&f](const char* name, auto& m) { f(name, m.data(), m.size()); };
        mat("tok_emb", self.tok_emb);
        mat("pos_emb", self.pos_emb);
        for (size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            std::string prefix = "layer" + std::to_string(i) + ".";
            auto named = [&](const char* field, auto& m) {
                std::string full = prefix + field;
                f(full.c_str(), m.data(), m.size());
            };
            named("ln1_g", l.ln1_g);
            named("ln1_b", l.ln1_b);
            named("wq", l.wq);
            named("bq", l.bq);
            named("wk", l.wk);
            named("bk", l.bk);
            named("wv", l.wv);
            named("bv", l.bv);
            named("wo", l.wo);
            named("bo", l.bo);
            named("ln2_g", l.ln2_g);
            named("ln2_b", l.ln2_b);
            named("w1", l.w1);
            named("b1", l.b1);
            named("w2", l.w2);
            named("b2", l.b2);
        }
        mat("lnf_g", self.lnf_g);
        mat("lnf_b", self.lnf_b);
    }
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, std::forward<F>(f));
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, std::forward<F>(f));
    }

    size_t parameter_count() const {
        size_t n = 0;
        visit([&n](const char*, const S*, Eigen::Index size) { n += size_t(size); });
        return n;
    }

    void set_zero() {
        visit([](const char*, S* data, Eigen::Index size) {
            std::fill(data, data + size, S(0));
        });
    }

    bool all_finite() const {
        bool ok = true;
        visit([&ok](const char*, const S* data, Eigen::Index size) {
            for (Eigen::Index i = 0; i < size; ++i)
                if (!std::isfinite(double(data[i]))) ok = false;
        });
        return ok;
    }

    template <typename S2>
    ModelParamsT<S2> cast() const {
        ModelParamsT<S2> out = ModelParamsT<S2>::shaped(config);
        std::vector<S2*> dst;
        out.visit([&dst](const char*, S2* data, Eigen::Index) { dst.push_back(data); });
        size_t t = 0;
        visit([&](const char*, const S* data, Eigen::Index size) {
            for (Eigen::Index i = 0; i < size; ++i) dst[t][i] = S2(data[i]);
            ++t;
        });
        return out;
    }
};

using ModelParams = ModelParamsT<float>;

// ---------------------------------------------------------------------------
// Kernels. The deterministic variants run fixed-order scalar loops whose
// per-row results cannot depend on the surrounding matrix shape, which is
// what makes logits over a shared prefix bit-identical across prompt
// lengths; the fast variants hand the work to Eigen's blocked products.

namespace detail {

template <typename S>
void matmul(const MatT<S>& a, const MatT<S>& b, MatT<S>& c, bool deterministic) {
    if (!deterministic) {
        c.noalias() = a * b;
        return;
    }
    c.resize(a.rows(), b.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            S acc = S(0);
            for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(r, k) * b(k, j);
            c(r, j) = acc;
        }
    }
}

// y = norm(x) * gain + bias per row; saves xhat and 1/std for the backward.
template <typename S>
void layer_norm(const MatT<S>& x, const VecT<S>& gain, const VecT<S>& bias, MatT<S>& y,
                MatT<S>& xhat, VecT<S>& rstd, bool deterministic) {
    const Eigen::Index n = x.rows(), d = x.cols();
    const S eps = S(1e-5);
    y.resize(n, d);
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        S mean, var;
        if (deterministic) {
            S sum = S(0);
            for (Eigen::Index c = 0; c < d; ++c) sum += x(r, c);
            mean = sum / S(d);
            S sq = S(0);
            for (Eigen::Index c = 0; c < d; ++c) {
                S dev = x(r, c) - mean;
                sq += dev * dev;
            }
            var = sq / S(d);
        } else {
            mean = x.row(r).mean();
            var = (x.row(r).array() - mean).square().sum() / S(d);
        }
        S rs = S(1) / std::sqrt(var + eps);
        rstd(r) = rs;
        for (Eigen::Index c = 0; c < d; ++c) {
            S xh = (x(r, c) - mean) * rs;
            xhat(r, c) = xh;
            y(r, c) = xh * gain(c) + bias(c);
        }
    }
}

template <typename S>
void layer_norm_backward(const MatT<S>& dy, const MatT<S>& xhat, const VecT<S>& rstd,
                         const VecT<S>& gain, MatT<S>& dx, VecT<S>& dgain, VecT<S>& dbias) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    dx.resize(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
        for (Eigen::Index c = 0; c < d; ++c) {
            S dxh = dy(r, c) * gain(c);
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat(r, c);
            dgain(c) += dy(r, c) * xhat(r, c);
            dbias(c) += dy(r, c);
        }
        S m1 = sum_dxhat / S(d), m2 = sum_dxhat_xhat / S(d);
        for (Eigen::Index c = 0; c < d; ++c)
            dx(r, c) = rstd(r) * (dy(r, c) * gain(c) - m1 - xhat(r, c) * m2);
    }
}

template <typename S>
S gelu(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S a = S(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
    const S c = S(0.7978845608028654);
    const S a = S(0.044715);
    S u = c * (x + a * x * x * x);
    S t = std::tanh(u);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3) * a * x * x);
}

// In-place causal row softmax over the first `valid` columns of each row i
// (valid = i + 1); the rest is zeroed.
template <typename S>
void causal_softmax(MatT<S>& scores, bool deterministic) {
    const Eigen::Index t = scores.rows();
    for (Eigen::Index i = 0; i < t; ++i) {
        const Eigen::Index n = i + 1;
        S mx = scores(i, 0);
        if (deterministic) {
            for (Eigen::Index j = 1; j < n; ++j) mx = std::max(mx, scores(i, j));
        } else if (n > 1) {
            mx = scores.row(i).head(n).maxCoeff();
        }
        S sum = S(0);
        for (Eigen::Index j = 0; j < n; ++j) {
            S e = std::exp(scores(i, j) - mx);
            scores(i, j) = e;
            sum += e;
        }
        for (Eigen::Index j = 0; j < n; ++j) scores(i, j) /= sum;
        for (Eigen::Index j = n; j < t; ++j) scores(i, j) = S(0);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct ForwardOptions {
    bool deterministic = false;
    bool capture_attention = false;
};

template <typename S>
struct LayerCache {
    MatT<S> x_in, xhat1, a, q, k, v, attn_concat, x_mid, xhat2, a2, h_pre, h_act;
    VecT<S> rstd1, rstd2;
    std::vector<MatT<S>> probs;  // B*n_heads matrices of T×T
    std::vector<uint8_t> drop_attn, drop_ff;
};

template <typename S>
struct ForwardCache {
    std::vector<LayerCache<S>> layers;
    MatT<S> x_last, xhat_f, x_final;
    VecT<S> rstd_f;
    std::vector<uint8_t> drop_emb;
};

namespace detail {

struct DropoutSpec {
    double rate = 0.0;
    Rng* rng = nullptr;
};

// Inverted dropout in place; records the kept positions.
template <typename S>
void apply_dropout(MatT<S>& x, const DropoutSpec& spec, std::vector<uint8_t>& mask) {
    if (spec.rate <= 0.0) return;
    const S scale = S(1.0 / (1.0 - spec.rate));
    mask.resize(size_t(x.size()));
    S* data = x.data();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        bool keep = spec.rng->uniform() >= spec.rate;
        mask[size_t(i)] = keep;
        data[i] = keep ? data[i] * scale : S(0);
    }
}

template <typename S>
void dropout_backward(MatT<S>& dx, double rate, const std::vector<uint8_t>& mask) {
    if (rate <= 0.0) return;
    const S scale = S(1.0 / (1.0 - rate));
    S* data = dx.data();
    for (Eigen::Index i = 0; i < dx.size(); ++i)
        data[i] = mask[size_t(i)] ? data[i] * scale : S(0);
}

// Runs the decoder over a B×T batch of token ids (flattened row-major) and
// returns logits for every position. Saves intermediate activations into
// `cache` when training, and head-averaged attention maps per layer and batch
// row into `attention` when requested.
template <typename S>
MatT<S> forward_impl(const ModelParamsT<S>& p, std::span<const int32_t> ids, int B, int T,
                     const ForwardOptions& opts, ForwardCache<S>* cache,
                     std::vector<std::vector<MatT<S>>>* attention,
                     const DropoutSpec& dropout = {}) {
    const ModelConfig& cfg = p.config;
    if (B < 1 || T < 1 || ids.size() != size_t(B) * size_t(T))
        throw std::invalid_argument("batch shape does not match id count");
    if (T > cfg.max_seq_len)
        throw std::invalid_argument("sequence length " + std::to_string(T) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int32_t id : ids)
        if (id < 0 || id >= cfg.vocab_size)
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " outside vocabulary");
    const bool det = opts.deterministic;
    const Eigen::Index N = Eigen::Index(B) * T, d = cfg.d_model, H = cfg.n_heads,
                       dh = cfg.head_dim(), ff = cfg.d_ff_resolved();
    const S scale = S(1) / S(std::sqrt(double(dh)));

    if (attention) {
        attention->assign(size_t(cfg.n_layers), {});
        for (auto& per_batch : *attention) per_batch.assign(size_t(B), MatT<S>());
    }
    if (cache) cache->layers.resize(size_t(cfg.n_layers));

    MatT<S> x(N, d);
    for (Eigen::Index n = 0; n < N; ++n)
        x.row(n) = p.tok_emb.row(ids[size_t(n)]) + p.pos_emb.row(n % T);
    if (cache)
        apply_dropout(x, dropout, cache->drop_emb);

    MatT<S> normed, q, k, v, concat, proj, h_pre, h_act, f;
    for (int li = 0; li < cfg.n_layers; ++li) {
        const LayerParamsT<S>& l = p.layers[size_t(li)];
        LayerCache<S>* lc = cache ? &cache->layers[size_t(li)] : nullptr;
        if (lc) lc->x_in = x;

        MatT<S> xhat;
        VecT<S> rstd;
        layer_norm(x, l.ln1_g, l.ln1_b, normed, xhat, rstd, det);
        if (lc) {
            lc->xhat1 = std::move(xhat);
            lc->rstd1 = std::move(rstd);
            lc->a = normed;
        }

        matmul(normed, l.wq, q, det);
        q.rowwise() += l.bq.transpose();
        matmul(normed, l.wk, k, det);
        k.rowwise() += l.bk.transpose();
        matmul(normed, l.wv, v, det);
        v.rowwise() += l.bv.transpose();
        if (lc) {
            lc->q = q;
            lc->k = k;
            lc->v = v;
            lc->probs.assign(size_t(B) * size_t(H), MatT<S>());
        }

        concat.resize(N, d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                auto qh = q.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto kh = k.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto vh = v.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto oh = concat.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                if (det) {
                    // Fixed-order scalar attention: row i only ever reads
                    // rows 0..i, so a longer batch cannot perturb it.
                    MatT<S> probs(T, T);
                    for (Eigen::Index i = 0; i < T; ++i) {
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            S acc = S(0);
                            for (Eigen::Index c = 0; c < dh; ++c) acc += qh(i, c) * kh(j, c);
                            probs(i, j) = acc * scale;
                        }
                        for (Eigen::Index j = i + 1; j < T; ++j) probs(i, j) = S(0);
                    }
                    causal_softmax(probs, true);
                    for (Eigen::Index i = 0; i < T; ++i)
                        for (Eigen::Index c = 0; c < dh; ++c) {
                            S acc = S(0);
                            for (Eigen::Index j = 0; j <= i; ++j) acc += probs(i, j) * vh(j, c);
                            oh(i, c) = acc;
                        }
                    if (lc) lc->probs[size_t(b) * size_t(H) + size_t(h)] = probs;
                    if (attention) {
                        MatT<S>& avg = (*attention)[size_t(li)][size_t(b)];
                        if (avg.size() == 0) avg = MatT<S>::Zero(T, T);
                        avg += probs / S(H);
                    }
                } else {
                    MatT<S> probs(T, T);
                    probs.noalias() = qh * kh.transpose();
                    probs *= scale;
                    causal_softmax(probs, false);
                    oh.noalias() = probs * vh;
                    if (attention) {
                        MatT<S>& avg = (*attention)[size_t(li)][size_t(b)];
                        if (avg.size() == 0) avg = MatT<S>::Zero(T, T);
                        avg += probs / S(H);
                    }
                    if (lc) lc->probs[size_t(b) * size_t(H) + size_t(h)] = std::move(probs);
                }
            }
        }
        if (lc) lc->attn_concat = concat;

        matmul(concat, l.wo, proj, det);
        proj.rowwise() += l.bo.transpose();
        if (lc) apply_dropout(proj, dropout, lc->drop_attn);
        x += proj;
        if (lc) lc->x_mid = x;

        layer_norm(x, l.ln2_g, l.ln2_b, normed, xhat, rstd, det);
        if (lc) {
            lc->xhat2 = std::move(xhat);
            lc->rstd2 = std::move(rstd);
            lc->a2 = normed;
        }
        matmul(normed, l.w1, h_pre, det);
        h_pre.rowwise() += l.b1.transpose();
        h_act.resize(N, ff);
        for (Eigen::Index i = 0; i < h_pre.size(); ++i)
            h_act.data()[i] = gelu(h_pre.data()[i]);
        if (lc) {
            lc->h_pre = h_pre;
            lc->h_act = h_act;
        }
        matmul(h_act, l.w2, f, det);
        f.rowwise() += l.b2.transpose();
        if (lc) apply_dropout(f, dropout, lc->drop_ff);
        x += f;
    }

    if (cache) cache->x_last = x;
    MatT<S> xhat_f;
    VecT<S> rstd_f;
    layer_norm(x, p.lnf_g, p.lnf_b, normed, xhat_f, rstd_f, det);
    if (cache) {
        cache->xhat_f = std::move(xhat_f);
        cache->rstd_f = std::move(rstd_f);
        cache->x_final = normed;
    }
    MatT<S> logits;
    if (det) {
        logits.resize(N, cfg.vocab_size);
        for (Eigen::Index n = 0; n < N; ++n)
            for (Eigen::Index vcol = 0; vcol < cfg.vocab_size; ++vcol) {
                S acc = S(0);
                for (Eigen::Index c = 0; c < d; ++c) acc += normed(n, c) * p.tok_emb(vcol, c);
                logits(n, vcol) = acc;
            }
    } else {
        logits.noalias() = normed * p.tok_emb.transpose();
    }
    return logits;
}

}  // namespace detail

template <typename S>
MatT<S> forward(const ModelParamsT<S>& params, std::span<const int32_t> ids, int B, int T,
                const ForwardOptions& opts = {},
                std::vector<std::vector<MatT<S>>>* attention = nullptr) {
    return detail::forward_impl(params, ids, B, T, opts, static_cast<ForwardCache<S>*>(nullptr),
                                attention);
}

// ---------------------------------------------------------------------------
// Loss and gradients.

struct TrainBatch {
    std::vector<int32_t> input;   // B*T, row-major
    std::vector<int32_t> target;  // input shifted left by one within each row
    std::vector<uint8_t> mask;    // positions the loss is charged on
    int B = 0;
    int T = 0;
};

struct LossStats {
    double loss = 0.0;  // mean NLL over masked positions, nats
    long masked = 0;
    bool empty_mask = false;  // no masked position in the batch; loss is 0
};

template <typename S>
LossStats masked_nll(const MatT<S>& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
    if (size_t(logits.rows()) != targets.size() || targets.size() != mask.size())
        throw std::invalid_argument("logits, targets and mask disagree on position count");
    double total = 0.0;
    long n = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        if (!mask[size_t(r)]) continue;
        int32_t t = targets[size_t(r)];
        if (t < 0 || t >= logits.cols())
            throw std::invalid_argument("target id outside vocabulary");
        S mx = logits.row(r).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c)
            sum += std::exp(double(logits(r, c) - mx));
        total += double(mx) + std::log(sum) - double(logits(r, t));
        ++n;
    }
    if (n == 0) return {0.0, 0, true};
    return {total / double(n), n, false};
}

struct BackwardOptions {
    bool deterministic = false;
    double dropout = 0.0;
    Rng* dropout_rng = nullptr;
};

// Forward, masked NLL, and a full backward pass accumulated into `grads`
// (which is zeroed first). Returns the same statistics as masked_nll.
template <typename S>
LossStats loss_and_grad(const ModelParamsT<S>& p, const TrainBatch& batch,
                        ModelParamsT<S>& grads, const BackwardOptions& opts = {}) {
    const ModelConfig& cfg = p.config;
    const Eigen::Index N = Eigen::Index(batch.B) * batch.T, d = cfg.d_model, H = cfg.n_heads,
                       dh = cfg.head_dim(), T = batch.T;
    const S scale = S(1) / S(std::sqrt(double(dh)));
    if (opts.dropout > 0.0 && opts.dropout_rng == nullptr)
        throw std::invalid_argument("dropout requires an rng");

    ForwardCache<S> cache;
    detail::DropoutSpec dropout{opts.dropout, opts.dropout_rng};
    ForwardOptions fwd{opts.deterministic, false};
    MatT<S> logits = detail::forward_impl<S>(p, batch.input, batch.B, batch.T, fwd, &cache,
                                             nullptr, dropout);

    LossStats stats = masked_nll(logits, batch.target, batch.mask);
    grads.set_zero();
    if (stats.empty_mask) return stats;

    // d loss / d logits, nonzero only on masked rows.
    MatT<S> dlogits = MatT<S>::Zero(N, cfg.vocab_size);
    const S inv_m = S(1.0 / double(stats.masked));
    for (Eigen::Index r = 0; r < N; ++r) {
        if (!batch.mask[size_t(r)]) continue;
        S mx = logits.row(r).maxCoeff();
        S sum = S(0);
        for (Eigen::Index c = 0; c < cfg.vocab_size; ++c) {
            S e = std::exp(logits(r, c) - mx);
            dlogits(r, c) = e;
            sum += e;
        }
        dlogits.row(r) /= sum;
        dlogits(r, batch.target[size_t(r)]) -= S(1);
        dlogits.row(r) *= inv_m;
    }

    // Output projection is the tied token embedding.
    MatT<S> dx(N, d);
    dx.noalias() = dlogits * p.tok_emb;
    grads.tok_emb.noalias() += dlogits.transpose() * cache.x_final;

    MatT<S> dstream;
    detail::layer_norm_backward(dx, cache.xhat_f, cache.rstd_f, p.lnf_g, dstream, grads.lnf_g,
                                grads.lnf_b);

    MatT<S> dnormed, dh_act, dh_pre, dconcat, dq, dk, dv, dproj, dln;
    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const LayerParamsT<S>& l = p.layers[size_t(li)];
        LayerParamsT<S>& gl = grads.layers[size_t(li)];
        LayerCache<S>& lc = cache.layers[size_t(li)];

        // Feed-forward sub-block: x = x_mid + drop(gelu(ln2(x_mid) w1 + b1) w2 + b2)
        MatT<S> df = dstream;
        detail::dropout_backward(df, opts.dropout, lc.drop_ff);
        gl.b2.noalias() += df.colwise().sum().transpose();
        gl.w2.noalias() += lc.h_act.transpose() * df;
        dh_act.noalias() = df * l.w2.transpose();
        dh_pre.resize(N, cfg.d_ff_resolved());
        for (Eigen::Index i = 0; i < dh_act.size(); ++i)
            dh_pre.data()[i] = dh_act.data()[i] * detail::gelu_grad(lc.h_pre.data()[i]);
        gl.b1.noalias() += dh_pre.colwise().sum().transpose();
        gl.w1.noalias() += lc.a2.transpose() * dh_pre;
        dnormed.noalias() = dh_pre * l.w1.transpose();
        detail::layer_norm_backward(dnormed, lc.xhat2, lc.rstd2, l.ln2_g, dln, gl.ln2_g,
                                    gl.ln2_b);
        dstream += dln;  // residual join at x_mid

        // Attention sub-block: x_mid = x_in + drop(concat wo + bo)
        dproj = dstream;
        detail::dropout_backward(dproj, opts.dropout, lc.drop_attn);
        gl.bo.noalias() += dproj.colwise().sum().transpose();
        gl.wo.noalias() += lc.attn_concat.transpose() * dproj;
        dconcat.noalias() = dproj * l.wo.transpose();

        dq.setZero(N, d);
        dk.setZero(N, d);
        dv.setZero(N, d);
        for (int b = 0; b < batch.B; ++b) {
            for (int h = 0; h < H; ++h) {
                const MatT<S>& probs = lc.probs[size_t(b) * size_t(H) + size_t(h)];
                auto qh = lc.q.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto kh = lc.k.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto vh = lc.v.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                auto doh = dconcat.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh);
                MatT<S> dprobs(T, T);
                dprobs.noalias() = doh * vh.transpose();
                dv.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh).noalias() +=
                    probs.transpose() * doh;
                // Softmax backward row by row; masked columns have prob 0.
                MatT<S> dscores(T, T);
                for (Eigen::Index i = 0; i < T; ++i) {
                    S dot = probs.row(i).dot(dprobs.row(i));
                    dscores.row(i) = probs.row(i).cwiseProduct(
                        dprobs.row(i) - MatT<S>::Constant(1, T, dot));
                }
                dq.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh).noalias() +=
                    dscores * kh * scale;
                dk.block(Eigen::Index(b) * T, Eigen::Index(h) * dh, T, dh).noalias() +=
                    dscores.transpose() * qh * scale;
            }
        }

        gl.bq.noalias() += dq.colwise().sum().transpose();
        gl.wq.noalias() += lc.a.transpose() * dq;
        gl.bk.noalias() += dk.colwise().sum().transpose();
        gl.wk.noalias() += lc.a.transpose() * dk;
        gl.bv.noalias() += dv.colwise().sum().transpose();
        gl.wv.noalias() += lc.a.transpose() * dv;
        dnormed.noalias() = dq * l.wq.transpose();
        dnormed.noalias() += dk * l.wk.transpose();
        dnormed.noalias() += dv * l.wv.transpose();
        detail::layer_norm_backward(dnormed, lc.xhat1, lc.rstd1, l.ln1_g, dln, gl.ln1_g,
                                    gl.ln1_b);
        dstream += dln;  // residual join at x_in
    }

    detail::dropout_backward(dstream, opts.dropout, cache.drop_emb);
    for (Eigen::Index n = 0; n < N; ++n) {
        grads.tok_emb.row(batch.input[size_t(n)]) += dstream.row(n);
        grads.pos_emb.row(n % T) += dstream.row(n);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification, run in double precision.

struct GradCheckDeviation {
    std::string tensor;
    long flat_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    long n_checked = 0;
    std::vector<GradCheckDeviation> worst;  // descending, at most 10
};

inline GradCheckReport grad_check(const ModelParamsT<double>& params, const TrainBatch& batch,
                                  double epsilon = 1e-4, int n_samples = 200,
                                  uint64_t seed = 17) {
    ModelParamsT<double> grads = ModelParamsT<double>::shaped(params.config);
    BackwardOptions opts;
    opts.deterministic = true;
    loss_and_grad(params, batch, grads, opts);

    struct TensorRef {
        std::string name;
        long size = 0;
    };
    std::vector<TensorRef> tensors;
    long total = 0;
    params.visit([&](const char* name, const double*, Eigen::Index size) {
        tensors.push_back({name, long(size)});
        total += long(size);
    });

    std::set<long> picked;
    Rng rng(derive_seed(seed, "grad-check"));
    long want = std::min<long>(n_samples, total);
    while (long(picked.size()) < want) picked.insert(long(rng.below(uint64_t(total))));

    auto loss_at = [&](const ModelParamsT<double>& pp) {
        ForwardOptions fwd;
        fwd.deterministic = true;
        MatT<double> logits = forward(pp, batch.input, batch.B, batch.T, fwd);
        return masked_nll(logits, batch.target, batch.mask).loss;
    };

    // Flat offset -> (tensor ordinal, offset) lookup plus mutation helpers.
    auto locate = [&](long flat) {
        size_t t = 0;
        long off = flat;
        while (off >= tensors[t].size) off -= tensors[t].size, ++t;
        return std::pair<size_t, long>(t, off);
    };
    auto element_ptr = [&](ModelParamsT<double>& pp, size_t tensor_ord, long off) {
        double* out = nullptr;
        size_t cur = 0;
        pp.visit([&](const char*, double* data, Eigen::Index) {
            if (cur++ == tensor_ord) out = data + off;
        });
        return out;
    };
    auto grad_at = [&](size_t tensor_ord, long off) {
        double out = 0.0;
        size_t cur = 0;
        grads.visit([&](const char*, const double* data, Eigen::Index) {
            if (cur++ == tensor_ord) out = data[off];
        });
        return out;
    };

    GradCheckReport report;
    ModelParamsT<double> work = params;
    for (long flat : picked) {
        auto [tensor_ord, off] = locate(flat);
        double* elem = element_ptr(work, tensor_ord, off);
        double original = *elem;
        *elem = original + epsilon;
        double up = loss_at(work);
        *elem = original - epsilon;
        double down = loss_at(work);
        *elem = original;
        double numeric = (up - down) / (2.0 * epsilon);
        double analytic = grad_at(tensor_ord, off);
        double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
        double rel = std::abs(analytic - numeric) / denom;
        if (std::abs(analytic) < 1e-12 && std::abs(numeric) < 1e-12) rel = 0.0;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.n_checked;
        report.worst.push_back({tensors[tensor_ord].name, off, analytic, numeric, rel});
    }
    std::sort(report.worst.begin(), report.worst.end(),
              [](const GradCheckDeviation& a, const GradCheckDeviation& b) {
                  return a.rel_error > b.rel_error;
              });
    if (report.worst.size() > 10) report.worst.resize(10);
    return report;
}

}  // namespace labpred
