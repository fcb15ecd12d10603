#pragma once

// Group-relative policy optimization step: per-token clipped importance
// ratios against the sampling-time policy, penalized toward a frozen
// reference, averaged per output and then per group.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crsd/common.hpp"
#include "crsd/policy.hpp"
#include "crsd/tensor.hpp"

namespace crsd {

struct GrpoConfig {
    double clip_eps = 0.2;    // infinity disables clipping exactly
    double kl_coeff = 0.01;
    double alpha = 0.5;       // reasoning-dimension weight in the reward blend
    double beta = 0.5;        // answer-correctness weight
};

// Per-step diagnostics, filled from the forward pass.
struct GrpoStats {
    double clip_fraction = 0.0;   // tokens whose ratio left [1-eps, 1+eps]
    double mean_ratio = 0.0;
    double mean_kl = 0.0;
    long tokens = 0;
};

// Negated GRPO objective over a batch of scored groups, ready to minimize.
// Gradients flow only through `policy`; the recorded sampling logprobs act as
// the old policy and `ref` is evaluated without a tape.
inline Tensor grpo_loss(const Policy& policy, const Policy& ref,
                        const std::vector<GroupSample>& batch, const GrpoConfig& cfg,
                        GrpoStats* stats = nullptr) {
    if (batch.empty()) throw DataError("grpo batch is empty");
    if (cfg.clip_eps <= 0.0) throw ConfigError("clip_eps must be positive");
    if (cfg.kl_coeff < 0.0) throw ConfigError("kl_coeff must be non-negative");

    const double lo = 1.0 - cfg.clip_eps;
    const double hi = 1.0 + cfg.clip_eps;

    Tensor objective = Tensor::scalar(0.0);
    for (const GroupSample& gs : batch) {
        if (gs.outputs.size() < 2)
            throw DataError("group has fewer than 2 outputs");
        if (gs.advantages.size() != gs.outputs.size())
            throw DataError("group advantages missing or misaligned");

        Tensor group_term = Tensor::scalar(0.0);
        for (size_t i = 0; i < gs.outputs.size(); ++i) {
            const PolicyOutput& out = gs.outputs[i];
            if (out.tokens.empty())
                throw DataError("group output " + std::to_string(i) + " is empty");
            if (out.logprobs.size() != out.tokens.size())
                throw DataError("output " + std::to_string(i) +
                                " lacks sampling logprobs for some tokens");

            const int n = static_cast<int>(out.tokens.size());
            Tensor lp_new =
                policy.output_logprobs(gs.prompt, out.tokens, out.forced_answer, gs.temperature);
            Tensor lp_old = Tensor::from({n, 1}, out.logprobs);
            Tensor lp_ref;
            {
                NoGradScope ng;
                lp_ref = ref.output_logprobs(gs.prompt, out.tokens, out.forced_answer,
                                             gs.temperature);
            }

            Tensor ratio = exp(sub(lp_new, lp_old));
            Tensor surr = min_elem(mul(ratio, gs.advantages[i]),
                                   mul(clip(ratio, lo, hi), gs.advantages[i]));

            // k3 estimator of KL(policy || ref): r - log r - 1 with r = ref/policy
            Tensor diff = sub(lp_ref, lp_new);
            Tensor k3 = sub(exp(diff), add(diff, 1.0));

            if (stats) {
                for (long t = 0; t < ratio.size(); ++t) {
                    double r = ratio[t];
                    stats->clip_fraction += (r < lo || r > hi) ? 1.0 : 0.0;
                    stats->mean_ratio += r;
                    stats->mean_kl += k3[t];
                }
                stats->tokens += ratio.size();
            }

            group_term = add(group_term, mean(sub(surr, mul(k3, cfg.kl_coeff))));
        }
        objective =
            add(objective, mul(group_term, 1.0 / static_cast<double>(gs.outputs.size())));
    }
    if (stats && stats->tokens > 0) {
        stats->clip_fraction /= static_cast<double>(stats->tokens);
        stats->mean_ratio /= static_cast<double>(stats->tokens);
        stats->mean_kl /= static_cast<double>(stats->tokens);
    }
    return mul(objective, -1.0 / static_cast<double>(batch.size()));
}

}   // namespace crsd
