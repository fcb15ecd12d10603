#pragma once

// Rule-grounded scoring of policy rollouts. Each output is scored on five
// dimensions in [0, 4]; the final reward blends the reasoning dimensions with
// answer correctness.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "crsd/common.hpp"
#include "crsd/policy.hpp"
#include "crsd/world.hpp"

namespace crsd {

struct RewardVector {
    double intent_coverage = 0.0;     // query intent tokens mentioned in the reason
    double attribute_coverage = 0.0;  // service attribute tokens mentioned in the reason
    double rule_citation = 0.0;       // reason names the rule that actually decides
    double rule_consistency = 0.0;    // answer matches the label of the first cited rule
    double answer_correct = 0.0;      // answer token equals the ground-truth label

    std::vector<double> as_vector() const {
        return {intent_coverage, attribute_coverage, rule_citation, rule_consistency,
                answer_correct};
    }
};

// Scores one rollout against the world's rule table. The reason segment is
// everything before the final answer token.
inline RewardVector score_output(const World& world, const Example& ex,
                                 const std::vector<int>& output) {
    if (output.empty()) throw DataError("cannot score an empty output");
    const int answer = output.back();
    if (!is_answer_token(answer))
        throw DataError("output does not end with an answer token, got id " +
                        std::to_string(answer));

    std::set<int> reason(output.begin(), output.end() - 1);
    RewardVector rv;

    std::vector<int> intent_tokens;
    for (int t : ex.query)
        if (world.surface_to_intent.count(t)) intent_tokens.push_back(t);
    if (!intent_tokens.empty()) {
        int hit = 0;
        for (int t : intent_tokens) hit += reason.count(t) ? 1 : 0;
        rv.intent_coverage = 4.0 * hit / static_cast<double>(intent_tokens.size());
    }

    std::vector<int> attr_tokens;
    for (int t : ex.service)
        if (world.token_to_attr.count(t)) attr_tokens.push_back(t);
    std::sort(attr_tokens.begin(), attr_tokens.end());
    attr_tokens.erase(std::unique(attr_tokens.begin(), attr_tokens.end()), attr_tokens.end());
    if (!attr_tokens.empty()) {
        int hit = 0;
        for (int t : attr_tokens) hit += reason.count(t) ? 1 : 0;
        rv.attribute_coverage = 4.0 * hit / static_cast<double>(attr_tokens.size());
    } else if (!reason.empty()) {
        rv.attribute_coverage = 4.0;   // nothing to cover
    }

    World::Decision truth = world.decide(ex.query, ex.service);
    if (reason.count(truth.rule_token)) rv.rule_citation = 4.0;

    int first_cited = -1;
    for (auto it = output.begin(); it != output.end() - 1; ++it) {
        if (world.rule_token_label.count(*it)) {
            first_cited = *it;
            break;
        }
    }
    if (first_cited >= 0 &&
        answer == answer_token(world.rule_token_label.at(first_cited)))
        rv.rule_consistency = 4.0;

    if (answer == answer_token(ex.label)) rv.answer_correct = 4.0;
    return rv;
}

// mean of the four reasoning dimensions, in [0, 4]
inline double thinking_score(const RewardVector& rv) {
    return (rv.intent_coverage + rv.attribute_coverage + rv.rule_citation +
            rv.rule_consistency) / 4.0;
}

// alpha weighs the mean of the four reasoning dimensions, beta the answer
// dimension
inline double aggregate_reward(const RewardVector& rv, double alpha = 0.5, double beta = 0.5) {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("reward weights must be non-negative");
    if (alpha == 0.0 && beta == 0.0)
        throw ConfigError("reward weights alpha and beta are both zero");
    return alpha * thinking_score(rv) + beta * rv.answer_correct;
}

// Group-relative advantages: (r - mean) / population std, all zeros when the
// group is (numerically) constant.
inline std::vector<double> compute_advantages(const std::vector<double>& rewards) {
    if (rewards.size() < 2)
        throw DataError("advantage normalization needs at least 2 rewards, got " +
                        std::to_string(rewards.size()));
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    double sd = std::sqrt(var / n);
    std::vector<double> adv(rewards.size(), 0.0);
    if (sd < 1e-8) return adv;
    for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
    return adv;
}

// Fills the reward and advantage slots of a sampled group.
inline void score_group(const World& world, const Example& ex, GroupSample& gs,
                        double alpha = 0.5, double beta = 0.5) {
    gs.rewards.clear();
    gs.rewards.reserve(gs.outputs.size());
    for (const PolicyOutput& out : gs.outputs)
        gs.rewards.push_back(aggregate_reward(score_output(world, ex, out.tokens), alpha, beta));
    gs.advantages = compute_advantages(gs.rewards);
}

}   // namespace crsd
