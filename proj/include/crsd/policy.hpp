#pragma once

// Small causal language model used as the reasoning policy. One transformer
// layer over the dataset vocabulary; generates a short reason followed by a
// single answer token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crsd/common.hpp"
#include "crsd/tensor.hpp"

namespace crsd {

struct PolicyConfig {
    int vocab = 300;
    int d_model = 32;
    int n_heads = 4;
    int ffn_mult = 4;
    int max_len = 48;
    int reason_cap = 12;   // generated reason tokens before the answer is forced
    double init_std = 0.02;
};

// Tokens emitted after the prompt. The final token is always one of the
// answer ids; logprobs[i] is the sampling-time log-probability of tokens[i].
struct PolicyOutput {
    std::vector<int> tokens;
    std::vector<double> logprobs;
    bool forced_answer = false;   // last token came from the renormalized answer sub-vocabulary
};

// prompt = [CLS] query [SEP] service [SEP]; generation starts after the final separator
inline std::vector<int> build_policy_prompt(const std::vector<int>& query,
                                            const std::vector<int>& service,
                                            int vocab_size = -1) {
    std::vector<int> ids;
    ids.reserve(query.size() + service.size() + 3);
    ids.push_back(kClsId);
    for (int t : query) ids.push_back(t);
    ids.push_back(kSepId);
    for (int t : service) ids.push_back(t);
    ids.push_back(kSepId);
    if (vocab_size >= 0) {
        for (int t : ids)
            if (t < 0 || t >= vocab_size)
                throw DataError("policy prompt token " + std::to_string(t) +
                                " outside vocabulary of size " + std::to_string(vocab_size));
    }
    return ids;
}

class Policy {
  public:
    PolicyConfig cfg;

    Tensor tok_emb, pos_emb;
    Tensor wq, bq, wk, wv, bv, wo, bo;   // keys carry no bias: softmax ignores a uniform row shift
    Tensor w1, b1, w2, b2;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor out_w, out_b;

    static Policy init(const PolicyConfig& cfg, uint64_t seed) {
        if (cfg.d_model % cfg.n_heads != 0)
            throw ConfigError("policy d_model " + std::to_string(cfg.d_model) +
                              " not divisible by n_heads " + std::to_string(cfg.n_heads));
        if (cfg.vocab <= kAnswerBase + kNumLabels - 1)
            throw ConfigError("policy vocab too small for answer tokens");
        if (cfg.reason_cap < 0) throw ConfigError("reason_cap must be non-negative");

        Policy p;
        p.cfg = cfg;
        std::mt19937_64 rng = make_rng(seed, 400);
        const int d = cfg.d_model, f = cfg.ffn_mult * cfg.d_model, v = cfg.vocab;
        const double s = cfg.init_std;

        p.tok_emb = Tensor::randn({v, d}, rng, s);
        p.pos_emb = Tensor::randn({cfg.max_len, d}, rng, s);
        p.wq = Tensor::randn({d, d}, rng, s);
        p.bq = Tensor::zeros({d});
        p.wk = Tensor::randn({d, d}, rng, s);
        p.wv = Tensor::randn({d, d}, rng, s);
        p.bv = Tensor::zeros({d});
        p.wo = Tensor::randn({d, d}, rng, s);
        p.bo = Tensor::zeros({d});
        p.w1 = Tensor::randn({d, f}, rng, s);
        p.b1 = Tensor::zeros({f});
        p.w2 = Tensor::randn({f, d}, rng, s);
        p.b2 = Tensor::zeros({d});
        p.ln1_g = Tensor::full({d}, 1.0);
        p.ln1_b = Tensor::zeros({d});
        p.ln2_g = Tensor::full({d}, 1.0);
        p.ln2_b = Tensor::zeros({d});
        p.out_w = Tensor::randn({d, v}, rng, s);
        p.out_b = Tensor::zeros({v});

        p.for_each_param([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
        return p;
    }

    template <typename F>
    void for_each_param(F&& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        fn("wq", wq);
        fn("bq", bq);
        fn("wk", wk);
        fn("wv", wv);
        fn("bv", bv);
        fn("wo", wo);
        fn("bo", bo);
        fn("w1", w1);
        fn("b1", b1);
        fn("w2", w2);
        fn("b2", b2);
        fn("ln1_g", ln1_g);
        fn("ln1_b", ln1_b);
        fn("ln2_g", ln2_g);
        fn("ln2_b", ln2_b);
        fn("out_w", out_w);
        fn("out_b", out_b);
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        for_each_param([&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
        return out;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out;
        for_each_param([&](const std::string&, Tensor& t) { out.push_back(t); });
        return out;
    }

    long param_count() {
        long n = 0;
        for_each_param([&](const std::string&, Tensor& t) { n += t.size(); });
        return n;
    }

    // Fresh buffers with identical values; used for the frozen reference and
    // for snapshotting the sampling-time policy.
    Policy clone() const {
        Policy c = *this;
        c.for_each_param([](const std::string&, Tensor& t) {
            Tensor fresh = Tensor::from(t.shape(), t.values());
            fresh.set_requires_grad(true);
            t = std::move(fresh);
        });
        return c;
    }

    // Next-token logits at every position, [T, vocab].
    Tensor logits_all(const std::vector<int>& seq) const {
        if (seq.empty()) throw DataError("policy sequence is empty");
        if (static_cast<int>(seq.size()) > cfg.max_len)
            throw DataError("policy sequence length " + std::to_string(seq.size()) +
                            " exceeds max_len " + std::to_string(cfg.max_len));
        for (int t : seq)
            if (t < 0 || t >= cfg.vocab)
                throw DataError("policy token " + std::to_string(t) +
                                " outside vocabulary of size " + std::to_string(cfg.vocab));

        const int T = static_cast<int>(seq.size());
        std::vector<int> pos(T);
        for (int i = 0; i < T; ++i) pos[i] = i;
        Tensor x = add(rows(tok_emb, seq), rows(pos_emb, pos));

        Tensor q = linear(x, wq, bq);
        Tensor k = matmul(x, wk);
        Tensor v = linear(x, wv, bv);

        Tensor mask = Tensor::zeros({T, T});
        for (int i = 0; i < T; ++i)
            for (int j = i + 1; j < T; ++j) mask.values()[static_cast<long>(i) * T + j] = -1e9;

        const int dh = cfg.d_model / cfg.n_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> heads;
        heads.reserve(cfg.n_heads);
        for (int h = 0; h < cfg.n_heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor att = softmax_rows(add(mul(matmul(qh, transpose(kh)), scale), mask));
            heads.push_back(matmul(att, vh));
        }
        Tensor mixed = linear(concat_cols(heads), wo, bo);
        Tensor h1 = layernorm(add(x, mixed), ln1_g, ln1_b);
        Tensor ffn = linear(tanh(linear(h1, w1, b1)), w2, b2);
        Tensor h2 = layernorm(add(h1, ffn), ln2_g, ln2_b);
        return linear(h2, out_w, out_b);
    }

    // Per-token log-probabilities of `out_tokens` given `prompt`, shape
    // [n, 1]. When `forced_answer` is set the final step is scored over the
    // renormalized answer sub-vocabulary, mirroring how it was sampled.
    // Temperature rescales logits before the softmax.
    Tensor output_logprobs(const std::vector<int>& prompt, const std::vector<int>& out_tokens,
                           bool forced_answer, double temperature = 1.0) const {
        if (prompt.empty()) throw DataError("policy prompt is empty");
        if (out_tokens.empty()) throw DataError("policy output is empty");
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");

        std::vector<int> seq = prompt;
        seq.insert(seq.end(), out_tokens.begin(), out_tokens.end());
        const int plen = static_cast<int>(prompt.size());
        const int n = static_cast<int>(out_tokens.size());

        Tensor logits = logits_all(seq);
        Tensor scaled = mul(slice_rows(logits, plen - 1, plen - 1 + n), 1.0 / temperature);

        Tensor last = slice_rows(scaled, n - 1, n);
        int last_tok = out_tokens[n - 1];
        Tensor lp_last;
        if (forced_answer) {
            if (!is_answer_token(last_tok))
                throw DataError("forced final token " + std::to_string(last_tok) +
                                " is not an answer token");
            Tensor sub = slice_cols(last, kAnswerBase, kAnswerBase + kNumLabels);
            lp_last = pick_per_row(log_softmax_rows(sub), {last_tok - kAnswerBase});
        } else {
            lp_last = pick_per_row(log_softmax_rows(last), {last_tok});
        }
        lp_last = reshape(lp_last, {1, 1});
        if (n == 1) return lp_last;

        std::vector<int> head_ids(out_tokens.begin(), out_tokens.end() - 1);
        Tensor lp_head = pick_per_row(log_softmax_rows(slice_rows(scaled, 0, n - 1)), head_ids);
        return concat_rows({reshape(lp_head, {n - 1, 1}), lp_last});
    }
};

namespace detail {

// softmax of one logit row at the given temperature, optionally restricted to
// the answer sub-vocabulary
inline std::vector<double> next_token_probs(const Tensor& row, double temperature,
                                            bool answers_only) {
    const int v = row.shape().back();
    int lo = answers_only ? kAnswerBase : 0;
    int hi = answers_only ? kAnswerBase + kNumLabels : v;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = lo; j < hi; ++j) mx = std::max(mx, row.values()[j] / temperature);
    std::vector<double> p(hi - lo);
    double z = 0.0;
    for (int j = lo; j < hi; ++j) {
        p[j - lo] = std::exp(row.values()[j] / temperature - mx);
        z += p[j - lo];
    }
    for (double& x : p) x /= z;
    return p;
}

inline int sample_index(const std::vector<double>& p, std::mt19937_64& rng) {
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(p.size()) - 1;
}

}   // namespace detail

// One rollout: ancestral sampling until an answer token appears, forcing the
// answer sub-vocabulary once reason_cap reason tokens have been emitted.
// temperature <= 0 means greedy decoding (logprobs then reported at
// temperature 1).
inline PolicyOutput sample_output(const Policy& policy, const std::vector<int>& prompt,
                                  double temperature, std::mt19937_64& rng) {
    NoGradScope ng;
    const bool greedy = temperature <= 0.0;
    const double temp = greedy ? 1.0 : temperature;

    PolicyOutput out;
    std::vector<int> seq = prompt;
    for (int step = 0;; ++step) {
        if (static_cast<int>(seq.size()) >= policy.cfg.max_len)
            throw DataError("policy rollout exceeded max_len " +
                            std::to_string(policy.cfg.max_len));
        Tensor logits = policy.logits_all(seq);
        Tensor row = slice_rows(logits, static_cast<int>(seq.size()) - 1,
                                static_cast<int>(seq.size()));
        const bool force = step >= policy.cfg.reason_cap;
        std::vector<double> p = detail::next_token_probs(row, temp, force);

        int idx;
        if (greedy)
            idx = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        else
            idx = detail::sample_index(p, rng);
        int tok = force ? kAnswerBase + idx : idx;

        out.tokens.push_back(tok);
        out.logprobs.push_back(std::log(p[idx]));
        seq.push_back(tok);
        if (is_answer_token(tok)) {
            out.forced_answer = force;
            return out;
        }
    }
}

// G aligned rollouts from the same prompt plus their scoring slots.
struct GroupSample {
    std::vector<int> prompt;
    std::vector<PolicyOutput> outputs;
    std::vector<double> rewards;      // final scalar reward per output
    std::vector<double> advantages;   // group-normalized rewards
    double temperature = 1.0;
};

inline GroupSample sample_group(const Policy& policy, const std::vector<int>& prompt, int G,
                                double temperature, uint64_t seed) {
    if (G < 2) throw ConfigError("group size must be at least 2, got " + std::to_string(G));
    GroupSample gs;
    gs.prompt = prompt;
    gs.temperature = temperature;
    std::mt19937_64 rng = make_rng(seed, 410);
    gs.outputs.reserve(G);
    for (int i = 0; i < G; ++i) gs.outputs.push_back(sample_output(policy, prompt, temperature, rng));
    return gs;
}

// Supervised warm start: mean per-token NLL of gold (reason, answer)
// sequences given their prompts, pooled over every gold token in the batch.
inline Tensor sft_loss(const Policy& policy,
                       const std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch) {
    if (batch.empty()) throw DataError("sft batch is empty");
    Tensor total = Tensor::scalar(0.0);
    long tokens = 0;
    for (const auto& [prompt, gold] : batch) {
        if (gold.empty()) throw DataError("sft gold sequence is empty");
        Tensor lp = policy.output_logprobs(prompt, gold, false, 1.0);
        total = sub(total, sum(lp));
        tokens += static_cast<long>(gold.size());
    }
    return mul(total, 1.0 / static_cast<double>(tokens));
}

}   // namespace crsd
