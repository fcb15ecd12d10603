#pragma once

// Self-contained verification suites: finite-difference gradient checks for
// every differentiable op and every training loss, plus closed-form value
// checks. Both are exposed as CLI subcommands and reused by the acceptance
// harness.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "crsd/encoder.hpp"
#include "crsd/grad_check.hpp"
#include "crsd/grpo.hpp"
#include "crsd/losses.hpp"
#include "crsd/metrics.hpp"
#include "crsd/policy.hpp"
#include "crsd/reward.hpp"
#include "crsd/tensor.hpp"

namespace crsd {

struct CheckLine {
    std::string name;
    double value = 0.0;   // max relative error, or |observed - expected|
    double tol = 0.0;
    bool ok = false;
};

namespace detail {

inline Tensor weighted_sum(const Tensor& x, uint64_t salt) {
    std::mt19937_64 rng = make_rng(salt, 900);
    Tensor w = Tensor::randn(x.shape(), rng, 1.0);
    return sum(mul(x, w));
}

inline CheckLine grad_line(const std::string& name,
                           std::vector<std::pair<std::string, Tensor>>& params,
                           const std::function<Tensor()>& loss, double tol = 1e-4) {
    GradCheckReport rep = grad_check(params, loss, 1e-5);
    return {name, rep.max_rel_err, tol, rep.max_rel_err < tol};
}

}   // namespace detail

// Gradient integrity across the op set and all losses. Every reported line
// must stay below 1e-4.
inline std::vector<CheckLine> run_grad_suite() {
    std::vector<CheckLine> out;
    std::mt19937_64 rng = make_rng(2024, 901);

    auto fresh = [&](Shape s, double scale = 1.0, double offset = 0.0) {
        Tensor t = Tensor::randn(std::move(s), rng, scale);
        if (offset != 0.0)
            for (double& v : t.values()) v = offset + std::abs(v);
        t.set_requires_grad(true);
        return t;
    };

    Tensor a = fresh({3, 4});
    Tensor b = fresh({3, 4});
    Tensor pos = fresh({3, 4}, 0.5, 0.8);   // strictly positive, away from zero
    std::vector<std::pair<std::string, Tensor>> ab{{"a", a}, {"b", b}};
    std::vector<std::pair<std::string, Tensor>> pa{{"pos", pos}};

    auto ws = [&](const Tensor& t, uint64_t salt) { return detail::weighted_sum(t, salt); };

    out.push_back(detail::grad_line("op.add", ab, [&] { return ws(add(a, b), 1); }));
    out.push_back(detail::grad_line("op.sub", ab, [&] { return ws(sub(a, b), 2); }));
    out.push_back(detail::grad_line("op.mul", ab, [&] { return ws(mul(a, b), 3); }));
    out.push_back(detail::grad_line("op.div", ab, [&] { return ws(div(a, pos), 4); }));
    out.push_back(detail::grad_line("op.add_scalar", ab, [&] { return ws(add(a, 1.5), 5); }));
    out.push_back(detail::grad_line("op.mul_scalar", ab, [&] { return ws(mul(a, -2.5), 6); }));
    out.push_back(detail::grad_line("op.neg", ab, [&] { return ws(neg(a), 7); }));
    out.push_back(detail::grad_line("op.exp", ab, [&] { return ws(exp(a), 8); }));
    out.push_back(detail::grad_line("op.log", pa, [&] { return ws(log(pos), 9); }));
    out.push_back(detail::grad_line("op.tanh", ab, [&] { return ws(tanh(a), 10); }));
    out.push_back(detail::grad_line("op.square", ab, [&] { return ws(square(a), 11); }));
    out.push_back(detail::grad_line("op.sqrt", pa, [&] { return ws(sqrt(pos), 12); }));
    out.push_back(detail::grad_line("op.clip", ab, [&] { return ws(clip(a, -8.0, 8.0), 13); }));
    out.push_back(detail::grad_line("op.min_elem", ab, [&] {
        return ws(min_elem(a, add(b, 10.0)), 14);
    }));

    Tensor m1 = fresh({3, 4});
    Tensor m2 = fresh({4, 5});
    Tensor bias = fresh({5});
    std::vector<std::pair<std::string, Tensor>> mm{{"m1", m1}, {"m2", m2}, {"bias", bias}};
    out.push_back(detail::grad_line("op.matmul", mm, [&] { return ws(matmul(m1, m2), 15); }));
    out.push_back(detail::grad_line("op.transpose", mm, [&] { return ws(transpose(m1), 16); }));
    out.push_back(detail::grad_line("op.linear", mm, [&] { return ws(linear(m1, m2, bias), 17); }));

    Tensor table = fresh({6, 3});
    std::vector<std::pair<std::string, Tensor>> tb{{"table", table}};
    out.push_back(detail::grad_line("op.rows", tb, [&] {
        return ws(rows(table, {0, 2, 2, 5}), 18);
    }));

    out.push_back(detail::grad_line("op.slice_rows", ab, [&] { return ws(slice_rows(a, 1, 3), 19); }));
    out.push_back(detail::grad_line("op.slice_cols", ab, [&] { return ws(slice_cols(a, 1, 4), 20); }));
    out.push_back(detail::grad_line("op.concat_rows", ab, [&] {
        return ws(concat_rows({a, b}), 21);
    }));
    out.push_back(detail::grad_line("op.concat_cols", ab, [&] {
        return ws(concat_cols({a, b}), 22);
    }));
    out.push_back(detail::grad_line("op.reshape", ab, [&] { return ws(reshape(a, {4, 3}), 23); }));
    out.push_back(detail::grad_line("op.sum", ab, [&] { return sum(a); }));
    out.push_back(detail::grad_line("op.mean", ab, [&] { return mean(square(a)); }));
    out.push_back(detail::grad_line("op.softmax", ab, [&] { return ws(softmax(a), 24); }));
    out.push_back(detail::grad_line("op.softmax_axis0", ab, [&] { return ws(softmax(a, 0), 25); }));
    out.push_back(detail::grad_line("op.log_softmax", ab, [&] {
        return ws(log_softmax_rows(a), 26);
    }));

    Tensor gain = fresh({4}, 0.3, 0.7);
    Tensor shift = fresh({4}, 0.3);
    std::vector<std::pair<std::string, Tensor>> ln{{"a", a}, {"gain", gain}, {"shift", shift}};
    out.push_back(detail::grad_line("op.layernorm", ln, [&] {
        return ws(layernorm(a, gain, shift), 27);
    }));

    out.push_back(detail::grad_line("op.pick_per_row", ab, [&] {
        return ws(pick_per_row(a, {0, 3, 1}), 28);
    }));
    out.push_back(detail::grad_line("op.l2norm_rows", ab, [&] {
        return ws(l2norm_rows(a), 29);
    }));

    std::vector<int> labels{0, 2, 1};
    out.push_back(detail::grad_line("loss.classification_ce", ab, [&] {
        return classification_ce(a, labels);
    }));
    out.push_back(detail::grad_line("loss.classification_ce_sum", ab, [&] {
        return cross_entropy_rows(a, labels, false);
    }));

    Tensor u = fresh({4, 5});
    Tensor v = fresh({4, 5});
    std::vector<std::pair<std::string, Tensor>> uv{{"u", u}, {"v", v}};
    out.push_back(detail::grad_line("loss.cosine_align", uv, [&] {
        return cosine_align_loss(u, v);
    }));
    out.push_back(detail::grad_line("loss.info_nce_b4", uv, [&] {
        return info_nce(u, v, 0.5);
    }));

    // full composite through a two-layer encoder
    {
        EncoderConfig cfg;
        cfg.vocab = 14;
        cfg.d_model = 8;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.ffn_mult = 2;
        cfg.max_len = 12;
        cfg.d_reason = 4;
        cfg.init_std = 0.3;
        Encoder enc = Encoder::init(cfg, 23);
        const std::vector<std::vector<int>> queries{{6}, {7}};
        const std::vector<std::vector<int>> services{{8, 9}, {10}};
        const std::vector<std::vector<int>> reasons{{11, 12}, {13}};
        const std::vector<int> labels2{2, 0};
        auto loss_fn = [&]() {
            std::vector<Tensor> s_rows, t_rows;
            for (int i = 0; i < 2; ++i) {
                s_rows.push_back(
                    enc.encode(build_student_input(queries[i], services[i], 12, cfg.vocab)));
                t_rows.push_back(enc.encode(
                    build_teacher_input(queries[i], services[i], reasons[i], 12, cfg.vocab)));
            }
            Tensor cls = concat_rows(s_rows);
            Tensor cls_r = concat_rows(t_rows);
            return crsd_total(classification_ce(enc.classify(cls), labels2),
                              classification_ce(enc.classify(cls_r), labels2),
                              info_nce(cls, cls_r, 0.2), 0.01, 0.01);
        };
        auto params = enc.named_params();
        out.push_back(detail::grad_line("loss.crsd_composite", params, loss_fn));
    }

    // warm-start loss on a small causal policy
    {
        PolicyConfig cfg;
        cfg.vocab = 12;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.ffn_mult = 2;
        cfg.max_len = 24;
        cfg.reason_cap = 3;
        cfg.init_std = 0.3;
        Policy p = Policy::init(cfg, 77);
        std::vector<std::pair<std::vector<int>, std::vector<int>>> batch{
            {build_policy_prompt({7}, {8, 9}), {10, 11, 4}},
            {build_policy_prompt({6, 11}, {10}), {9, 3}},
        };
        auto params = p.named_params();
        out.push_back(
            detail::grad_line("loss.sft", params, [&] { return sft_loss(p, batch); }));
    }

    // clipped surrogate with kl penalty on a toy policy, two groups of four
    {
        PolicyConfig cfg;
        cfg.vocab = 6;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.ffn_mult = 2;
        cfg.max_len = 12;
        cfg.reason_cap = 2;
        cfg.init_std = 0.3;
        Policy sampler = Policy::init(cfg, 43);
        auto group = [&](std::vector<int> prompt, uint64_t seed, std::vector<double> rewards) {
            GroupSample gs = sample_group(sampler, prompt, 4, 1.0, seed);
            gs.rewards = std::move(rewards);
            gs.advantages = compute_advantages(gs.rewards);
            return gs;
        };
        std::vector<GroupSample> batch{group(build_policy_prompt({1}, {2}), 21, {0, 2, 3, 1}),
                                       group(build_policy_prompt({2}, {1}), 22, {4, 1, 0, 0})};
        Policy p = sampler.clone();
        std::mt19937_64 nrng = make_rng(53, 9);
        std::normal_distribution<double> noise(0.0, 0.02);
        p.for_each_param([&](const std::string&, Tensor& t) {
            for (double& val : t.values()) val += noise(nrng);
        });
        Policy ref = sampler.clone();
        GrpoConfig gcfg;
        auto params = p.named_params();
        out.push_back(detail::grad_line("loss.grpo", params,
                                        [&] { return grpo_loss(p, ref, batch, gcfg); }));
    }

    return out;
}

// Closed-form value checks for every loss and the metric layer.
inline std::vector<CheckLine> run_selftest() {
    std::vector<CheckLine> out;
    auto expect = [&](const std::string& name, double observed, double expected, double tol) {
        double err = std::abs(observed - expected);
        out.push_back({name, err, tol, err <= tol});
    };

    {
        Tensor single = l2norm_rows(Tensor::from({1, 3}, {1, 2, 3}));
        expect("info_nce.single_row_zero", info_nce(single, single, 0.05).item(), 0.0, 0.0);

        Tensor same = Tensor::from({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
        expect("info_nce.identical_rows_lnN", info_nce(same, same, 0.05).item(), std::log(4.0),
               1e-9);

        Tensor ortho = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
        expect("info_nce.orthonormal_tau1", info_nce(ortho, ortho, 1.0).item(), want, 1e-12);
    }
    {
        Tensor logits = Tensor::zeros({4, 3});
        expect("ce.uniform_ln3", classification_ce(logits, {0, 1, 2, 0}).item(), std::log(3.0),
               1e-9);
    }
    {
        Tensor x = Tensor::from({1, 3}, {1, 2, 3});
        expect("cosine.identical", cosine_align_loss(x, x).item(), 0.0, 1e-12);
        Tensor e1 = Tensor::from({1, 2}, {1, 0});
        Tensor e2 = Tensor::from({1, 2}, {0, 1});
        expect("cosine.orthogonal", cosine_align_loss(e1, e2).item(), 1.0, 1e-12);
        expect("cosine.antiparallel", cosine_align_loss(x, neg(x)).item(), 2.0, 1e-12);
    }
    {
        Tensor a = Tensor::scalar(1.0), b = Tensor::scalar(2.0), c = Tensor::scalar(3.0);
        expect("crsd_total.weighted_sum", crsd_total(a, b, c, 0.01, 0.01).item(), 1.05, 1e-12);
        expect("baseline_total.weighted_sum", baseline_total(a, c, 0.1).item(), 1.3, 1e-12);
    }
    {
        PolicyConfig cfg;
        cfg.vocab = 10;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.ffn_mult = 2;
        cfg.max_len = 16;
        Policy p = Policy::init(cfg, 2);
        std::fill(p.out_w.values().begin(), p.out_w.values().end(), 0.0);
        std::fill(p.out_b.values().begin(), p.out_b.values().end(), 0.0);
        Tensor loss = sft_loss(p, {{build_policy_prompt({7}, {8}), {6, 9, 3}}});
        expect("sft.uniform_head_ln_vocab", loss.item(), std::log(10.0), 1e-12);
    }
    {
        std::vector<double> adv = compute_advantages({0.0, 2.0});
        expect("advantage.two_point_lo", adv[0], -1.0, 0.0);
        expect("advantage.two_point_hi", adv[1], 1.0, 0.0);
        std::vector<double> flat = compute_advantages({1, 1, 1, 1});
        expect("advantage.flat_guard", std::abs(flat[0]) + std::abs(flat[3]), 0.0, 0.0);
    }
    {
        RewardVector rv;
        rv.intent_coverage = rv.attribute_coverage = rv.rule_citation = rv.rule_consistency = 4;
        rv.answer_correct = 4;
        expect("reward.full_marks", aggregate_reward(rv), 4.0, 0.0);
        rv.intent_coverage = 2;
        rv.rule_citation = 2;
        rv.answer_correct = 0;
        expect("reward.partial_blend", aggregate_reward(rv), 1.5, 0.0);
    }
    {
        EvalReport rep = score_predictions({0, 1, 2}, {0, 1, 1});
        expect("metrics.worked_accuracy", rep.accuracy, 2.0 / 3.0, 1e-12);
        expect("metrics.worked_macro_f1", rep.macro_f1, 5.0 / 9.0, 1e-12);
        expect("metrics.worked_weighted_f1", rep.weighted_f1, 5.0 / 9.0, 1e-12);
    }
    return out;
}

}   // namespace crsd
