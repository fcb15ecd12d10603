#pragma once

// Small transformer encoder with CLS pooling, a 3-way relevance head and a
// projection head, plus the student/teacher input constructors and the frozen
// reason embedder. The teacher is the same parameter value run on a longer
// input; no separate teacher weights exist.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "crsd/common.hpp"
#include "crsd/tensor.hpp"

namespace crsd {

struct EncoderConfig {
    int vocab = 300;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int ffn_mult = 4;
    int max_len = 160;
    int d_reason = 32;
    double init_std = 0.02;
};

// ---------------------------------------------------------------------------
// input construction
// ---------------------------------------------------------------------------

namespace detail {
inline void check_ids(const std::vector<int>& toks, int vocab_size, const char* what) {
    if (vocab_size < 0) return;
    for (int t : toks)
        if (t < 0 || t >= vocab_size)
            throw DataError(std::string(what) + ": token id " + std::to_string(t) +
                            " outside vocabulary of size " + std::to_string(vocab_size));
}
}  // namespace detail

// [CLS] query [SEP] service; truncation drops the service tail first, then the
// query tail. vocab_size < 0 skips id validation.
inline std::vector<int> build_student_input(const std::vector<int>& query,
                                            const std::vector<int>& service, int max_len = 64,
                                            int vocab_size = -1) {
    if (max_len < 2) throw ConfigError("build_student_input: max_len below 2 cannot hold CLS+SEP");
    detail::check_ids(query, vocab_size, "student input");
    detail::check_ids(service, vocab_size, "student input");
    long q = static_cast<long>(query.size());
    long s = static_cast<long>(service.size());
    long total = 2 + q + s;
    if (total > max_len) {
        const long cut = total - max_len;
        const long from_service = std::min(cut, s);
        s -= from_service;
        q -= cut - from_service;
        if (q < 0) q = 0;
    }
    std::vector<int> seq;
    seq.reserve(2 + q + s);
    seq.push_back(kClsId);
    seq.insert(seq.end(), query.begin(), query.begin() + q);
    seq.push_back(kSepId);
    seq.insert(seq.end(), service.begin(), service.begin() + s);
    return seq;
}

// Student sequence followed by [SEP] reason; truncation drops the reason tail
// first. An empty reason leaves exactly the student sequence.
inline std::vector<int> build_teacher_input(const std::vector<int>& query,
                                            const std::vector<int>& service,
                                            const std::vector<int>& reason, int max_len = 150,
                                            int vocab_size = -1) {
    detail::check_ids(reason, vocab_size, "teacher input");
    std::vector<int> base = build_student_input(query, service, max_len, vocab_size);
    if (reason.empty()) return base;
    long r = static_cast<long>(reason.size());
    const long room = max_len - static_cast<long>(base.size()) - 1;  // minus the reason SEP
    if (room <= 0) return base;
    if (r > room) r = room;
    base.push_back(kSepId);
    base.insert(base.end(), reason.begin(), reason.begin() + r);
    return base;
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

struct EncoderLayer {
    Tensor wq, bq, wk, wv, bv, wo, bo;  // keys carry no bias: softmax ignores a uniform row shift
    Tensor w1, b1, w2, b2;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct Encoder {
    EncoderConfig cfg;
    Tensor tok_emb;  // V x d
    Tensor pos_emb;  // L x d
    std::vector<EncoderLayer> layers;
    Tensor head_w, head_b;  // d x 3
    Tensor proj_w, proj_b;  // d x d_reason

    static Encoder init(const EncoderConfig& cfg, uint64_t seed) {
        if (cfg.d_model % cfg.n_heads != 0)
            throw ConfigError("encoder: d_model " + std::to_string(cfg.d_model) +
                              " not divisible by " + std::to_string(cfg.n_heads) + " heads");
        if (cfg.vocab < 6 || cfg.d_model < 1 || cfg.n_layers < 1 || cfg.max_len < 2)
            throw ConfigError("encoder: degenerate size configuration");
        std::mt19937_64 rng = make_rng(seed, 200);
        const double w0 = cfg.init_std;
        Encoder e;
        e.cfg = cfg;
        e.tok_emb = Tensor::randn({cfg.vocab, cfg.d_model}, rng, w0);
        e.pos_emb = Tensor::randn({cfg.max_len, cfg.d_model}, rng, w0);
        const int d = cfg.d_model, f = cfg.ffn_mult * cfg.d_model;
        for (int l = 0; l < cfg.n_layers; ++l) {
            EncoderLayer lay;
            lay.wq = Tensor::randn({d, d}, rng, w0);
            lay.bq = Tensor::zeros({d});
            lay.wk = Tensor::randn({d, d}, rng, w0);
            lay.wv = Tensor::randn({d, d}, rng, w0);
            lay.bv = Tensor::zeros({d});
            lay.wo = Tensor::randn({d, d}, rng, w0);
            lay.bo = Tensor::zeros({d});
            lay.w1 = Tensor::randn({d, f}, rng, w0);
            lay.b1 = Tensor::zeros({f});
            lay.w2 = Tensor::randn({f, d}, rng, w0);
            lay.b2 = Tensor::zeros({d});
            lay.ln1_g = Tensor::full({d}, 1.0);
            lay.ln1_b = Tensor::zeros({d});
            lay.ln2_g = Tensor::full({d}, 1.0);
            lay.ln2_b = Tensor::zeros({d});
            e.layers.push_back(std::move(lay));
        }
        e.head_w = Tensor::randn({d, kNumLabels}, rng, w0);
        e.head_b = Tensor::zeros({kNumLabels});
        e.proj_w = Tensor::randn({d, cfg.d_reason}, rng, w0);
        e.proj_b = Tensor::zeros({cfg.d_reason});
        e.for_each_param([](const std::string&, Tensor& p) { p.set_requires_grad(true); });
        return e;
    }

    // Visits the actual parameter members; copies handed out elsewhere share
    // data and gradient storage with these.
    template <class F>
    void for_each_param(F f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            EncoderLayer& y = layers[l];
            f(p + "wq", y.wq);
            f(p + "bq", y.bq);
            f(p + "wk", y.wk);
            f(p + "wv", y.wv);
            f(p + "bv", y.bv);
            f(p + "wo", y.wo);
            f(p + "bo", y.bo);
            f(p + "w1", y.w1);
            f(p + "b1", y.b1);
            f(p + "w2", y.w2);
            f(p + "b2", y.b2);
            f(p + "ln1_g", y.ln1_g);
            f(p + "ln1_b", y.ln1_b);
            f(p + "ln2_g", y.ln2_g);
            f(p + "ln2_b", y.ln2_b);
        }
        f("head_w", head_w);
        f("head_b", head_b);
        f("proj_w", proj_w);
        f("proj_b", proj_b);
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        for_each_param([&](const std::string& n, Tensor& p) { out.emplace_back(n, p); });
        return out;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out;
        for (auto& [name, p] : named_params()) out.push_back(p);
        return out;
    }

    long param_count() {
        long n = 0;
        for (auto& [name, p] : named_params()) n += p.size();
        return n;
    }

    // Full sequence of hidden states, [T, d].
    Tensor encode_all(const std::vector<int>& seq) const {
        const int t = static_cast<int>(seq.size());
        if (t == 0) throw DataError("encode: empty sequence");
        if (t > cfg.max_len)
            throw DataError("encode: sequence length " + std::to_string(t) + " exceeds " +
                            std::to_string(cfg.max_len));
        std::vector<int> positions(t);
        for (int i = 0; i < t; ++i) positions[i] = i;
        Tensor x = add(rows(tok_emb, seq), rows(pos_emb, positions));

        const int heads = cfg.n_heads;
        const int dh = cfg.d_model / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (const EncoderLayer& lay : layers) {
            Tensor q = linear(x, lay.wq, lay.bq);
            Tensor k = matmul(x, lay.wk);
            Tensor v = linear(x, lay.wv, lay.bv);
            std::vector<Tensor> head_out;
            head_out.reserve(heads);
            for (int h = 0; h < heads; ++h) {
                Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
                Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
                Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
                Tensor attn = softmax(mul(matmul(qh, transpose(kh)), scale));
                head_out.push_back(matmul(attn, vh));
            }
            Tensor mixed = linear(concat_cols(head_out), lay.wo, lay.bo);
            x = layernorm(add(x, mixed), lay.ln1_g, lay.ln1_b);
            Tensor f = linear(tanh(linear(x, lay.w1, lay.b1)), lay.w2, lay.b2);
            x = layernorm(add(x, f), lay.ln2_g, lay.ln2_b);
        }
        return x;
    }

    // Position-0 (CLS) representation, [1, d].
    Tensor encode(const std::vector<int>& seq) const { return slice_rows(encode_all(seq), 0, 1); }

    // Affine relevance head over CLS rows, [n, 3]. Softmax stays in the losses.
    Tensor classify(const Tensor& cls) const { return linear(cls, head_w, head_b); }

    // Projection into the reason-embedding space, [n, d_reason].
    Tensor project(const Tensor& cls) const { return linear(cls, proj_w, proj_b); }
};

inline int argmax_label(const Tensor& logits_row, int row = 0) {
    const int k = logits_row.cols();
    int best = 0;
    double bv = logits_row.at(row, 0);
    for (int j = 1; j < k; ++j)
        if (logits_row.at(row, j) > bv) {  // ties keep the lowest index
            bv = logits_row.at(row, j);
            best = j;
        }
    return best;
}

// Frozen stand-in for an external sentence embedder: mean of fixed random
// rows, L2-normalized. Never trained.
class ReasonEmbedder {
public:
    ReasonEmbedder(int vocab, int d_reason, uint64_t seed) {
        std::mt19937_64 rng = make_rng(seed, 300);
        table_ = Tensor::randn({vocab, d_reason}, rng, 1.0);
    }

    int dim() const { return table_.cols(); }

    bool degenerate(const std::vector<int>& reason) const { return reason.empty(); }

    // [1, d_reason]; the zero vector for an empty reason.
    Tensor embed(const std::vector<int>& reason) const {
        NoGradScope plain;
        if (reason.empty()) return Tensor::zeros({1, table_.cols()});
        Tensor m = rows(table_, reason);
        Tensor avg = Tensor::zeros({1, table_.cols()});
        for (int j = 0; j < m.cols(); ++j) {
            double acc = 0.0;
            for (int i = 0; i < m.rows(); ++i) acc += m.at(i, j);
            avg.ptr()[j] = acc / m.rows();
        }
        return l2norm_rows(avg);
    }

private:
    Tensor table_;
};

}  // namespace crsd
