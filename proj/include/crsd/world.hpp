#pragma once

// Seeded synthetic relevance world: a closed vocabulary, latent intents with
// synonym surfaces, service attributes, and an ordered first-match rule table
// that decides 3-way labels. Examples carry oracle / random / absent reasons.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "crsd/common.hpp"

namespace crsd {

class Vocab {
public:
    Vocab() {
        for (const char* t : {"<pad>", "<cls>", "<sep>", "ans0", "ans1", "ans2"}) push(t);
    }

    int push(const std::string& tok) {
        auto [it, fresh] = ids_.emplace(tok, static_cast<int>(toks_.size()));
        if (!fresh) throw DataError("vocab: duplicate token " + tok);
        toks_.push_back(tok);
        return it->second;
    }

    int size() const { return static_cast<int>(toks_.size()); }

    int id(const std::string& tok) const {
        auto it = ids_.find(tok);
        if (it == ids_.end()) throw DataError("vocab: unknown token " + tok);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size())
            throw DataError("vocab: id " + std::to_string(id) + " outside 0.." +
                            std::to_string(size() - 1));
        return toks_[id];
    }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        size_t i = 0;
        while (i < text.size()) {
            size_t j = text.find(' ', i);
            if (j == std::string::npos) j = text.size();
            if (j > i) out.push_back(id(text.substr(i, j - i)));
            i = j + 1;
        }
        return out;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

    const std::vector<std::string>& tokens() const { return toks_; }

private:
    std::vector<std::string> toks_;
    std::unordered_map<std::string, int> ids_;
};

struct WorldConfig {
    int n_intents = 30;
    int n_attributes = 60;
    int n_rules = 120;  // content rules (relevant + moderate); per-intent defaults are implicit
    int n_fillers = 40;
    int attr_pool = 4;  // attributes each intent draws its rules from
};

struct Rule {
    int intent = -1;
    std::vector<int> attrs;  // attribute indices, sorted; all must appear in the service
    int label = 0;
    int token = -1;  // surface token naming this rule
};

struct World {
    WorldConfig cfg;
    uint64_t seed = 0;
    Vocab vocab;
    std::vector<std::vector<int>> intent_surfaces;  // surface token ids per intent
    std::vector<int> attr_tokens;                   // token id per attribute index
    std::vector<int> filler_tokens;
    std::vector<Rule> rules;          // ordered; first match decides
    std::vector<int> default_tokens;  // per-intent token for the implicit label-0 rule
    std::vector<std::vector<int>> intent_pools;  // attribute indices per intent

    std::unordered_map<int, int> surface_to_intent;
    std::unordered_map<int, int> token_to_attr;
    std::unordered_map<int, int> rule_token_label;

    void rebuild_lookups() {
        surface_to_intent.clear();
        token_to_attr.clear();
        rule_token_label.clear();
        for (size_t i = 0; i < intent_surfaces.size(); ++i)
            for (int t : intent_surfaces[i]) surface_to_intent[t] = static_cast<int>(i);
        for (size_t a = 0; a < attr_tokens.size(); ++a)
            token_to_attr[attr_tokens[a]] = static_cast<int>(a);
        for (const Rule& r : rules) rule_token_label[r.token] = r.label;
        for (int t : default_tokens) rule_token_label[t] = 0;
    }

    int intent_of_query(const std::vector<int>& query) const {
        for (int t : query) {
            auto it = surface_to_intent.find(t);
            if (it != surface_to_intent.end()) return it->second;
        }
        return -1;
    }

    // sorted unique attribute indices mentioned by the service
    std::vector<int> attrs_of_service(const std::vector<int>& service) const {
        std::vector<int> out;
        for (int t : service) {
            auto it = token_to_attr.find(t);
            if (it != token_to_attr.end()) out.push_back(it->second);
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    struct Decision {
        int label = 0;
        int rule_token = -1;
        const Rule* rule = nullptr;  // null when the implicit default decided
    };

    Decision decide(const std::vector<int>& query, const std::vector<int>& service) const {
        const int intent = intent_of_query(query);
        if (intent < 0) throw DataError("decide: query has no intent token");
        const std::vector<int> have = attrs_of_service(service);
        for (const Rule& r : rules) {
            if (r.intent != intent) continue;
            const bool hit = std::includes(have.begin(), have.end(), r.attrs.begin(), r.attrs.end());
            if (hit) return Decision{r.label, r.token, &r};
        }
        return Decision{0, default_tokens[intent], nullptr};
    }
};

inline World gen_world(uint64_t seed, WorldConfig cfg = {}) {
    if (cfg.n_intents < 1 || cfg.n_attributes < 1 || cfg.n_rules < 1 || cfg.n_fillers < 0)
        throw ConfigError("gen_world: sizes must be positive");
    if (cfg.n_rules < cfg.n_intents && cfg.n_intents > 1)
        throw ConfigError("gen_world: need at least one rule per intent, got " +
                          std::to_string(cfg.n_rules) + " rules for " +
                          std::to_string(cfg.n_intents) + " intents");

    World w;
    w.cfg = cfg;
    w.seed = seed;
    std::mt19937_64 rng = make_rng(seed, 100);

    // Intent surfaces: every even intent gets a synonym pair, so at least one
    // pair exists in any world.
    for (int i = 0; i < cfg.n_intents; ++i) {
        std::vector<int> surfaces;
        surfaces.push_back(w.vocab.push("q" + std::to_string(i) + "a"));
        if (i % 2 == 0) surfaces.push_back(w.vocab.push("q" + std::to_string(i) + "b"));
        w.intent_surfaces.push_back(std::move(surfaces));
    }
    for (int a = 0; a < cfg.n_attributes; ++a)
        w.attr_tokens.push_back(w.vocab.push("attr" + std::to_string(a)));

    // Per-intent attribute pools.
    const int pool_size = std::min(cfg.attr_pool, cfg.n_attributes);
    std::vector<int> all_attrs(cfg.n_attributes);
    for (int a = 0; a < cfg.n_attributes; ++a) all_attrs[a] = a;
    for (int i = 0; i < cfg.n_intents; ++i) {
        std::vector<int> pool = all_attrs;
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(pool_size);
        std::sort(pool.begin(), pool.end());
        w.intent_pools.push_back(std::move(pool));
    }

    // Content rules, round-robin over intents, alternating specific (label 2,
    // pair of pool attributes) and partial (label 1, subset of an existing
    // specific rule). Specific rules are ordered ahead of partial ones so the
    // most specific match decides.
    std::vector<Rule> specific, partial;
    std::vector<std::vector<std::vector<int>>> seen(cfg.n_intents);  // attr sets per intent
    std::vector<int> per_intent(cfg.n_intents, 0);
    const int set_size = std::min(2, pool_size);
    for (int r = 0; r < cfg.n_rules; ++r) {
        const int intent = r % cfg.n_intents;
        const std::vector<int>& pool = w.intent_pools[intent];
        const int slot = per_intent[intent]++;
        Rule rule;
        rule.intent = intent;
        if (slot % 2 == 0) {
            rule.label = 2;
            bool placed = false;
            for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
                std::vector<int> attrs = pool;
                std::shuffle(attrs.begin(), attrs.end(), rng);
                attrs.resize(set_size);
                std::sort(attrs.begin(), attrs.end());
                if (std::find(seen[intent].begin(), seen[intent].end(), attrs) ==
                    seen[intent].end()) {
                    rule.attrs = attrs;
                    placed = true;
                }
            }
            if (!placed)
                throw ConfigError("gen_world: rule count exceeds distinct attribute patterns for intent " +
                                  std::to_string(intent));
        } else {
            const int nth = slot / 2;
            int found = -1, count = 0;
            for (size_t s = 0; s < specific.size(); ++s) {
                if (specific[s].intent != intent) continue;
                if (count++ == nth) {
                    found = static_cast<int>(s);
                    break;
                }
            }
            if (found < 0 || specific[found].attrs.size() < 2)
                throw ConfigError("gen_world: no specific rule to derive a partial rule from for intent " +
                                  std::to_string(intent));
            // drop one attribute; try every drop position starting from a
            // random one so both subsets stay reachable
            const std::vector<int>& base = specific[found].attrs;
            std::uniform_int_distribution<size_t> pick(0, base.size() - 1);
            const size_t start = pick(rng);
            bool placed = false;
            for (size_t off = 0; off < base.size() && !placed; ++off) {
                std::vector<int> attrs = base;
                attrs.erase(attrs.begin() + static_cast<long>((start + off) % base.size()));
                if (std::find(seen[intent].begin(), seen[intent].end(), attrs) ==
                    seen[intent].end()) {
                    rule.attrs = attrs;
                    placed = true;
                }
            }
            if (!placed)
                throw ConfigError("gen_world: rule count exceeds distinct attribute patterns for intent " +
                                  std::to_string(intent));
            rule.label = 1;
        }
        seen[intent].push_back(rule.attrs);
        rule.token = w.vocab.push("rule" + std::to_string(r));
        (rule.label == 2 ? specific : partial).push_back(std::move(rule));
    }
    w.rules = std::move(specific);
    w.rules.insert(w.rules.end(), partial.begin(), partial.end());

    for (int i = 0; i < cfg.n_intents; ++i)
        w.default_tokens.push_back(w.vocab.push("base" + std::to_string(i)));
    for (int f = 0; f < cfg.n_fillers; ++f)
        w.filler_tokens.push_back(w.vocab.push("f" + std::to_string(f)));

    w.rebuild_lookups();
    return w;
}

enum class ReasonMode { oracle, random_other, none };

inline std::string reason_mode_name(ReasonMode m) {
    switch (m) {
        case ReasonMode::oracle: return "oracle";
        case ReasonMode::random_other: return "random";
        case ReasonMode::none: return "none";
    }
    throw std::logic_error("reason_mode_name: bad mode");
}

inline ReasonMode reason_mode_from(const std::string& s) {
    if (s == "oracle") return ReasonMode::oracle;
    if (s == "random") return ReasonMode::random_other;
    if (s == "none") return ReasonMode::none;
    throw DataError("unknown reason mode: " + s);
}

struct Example {
    long id = 0;
    std::vector<int> query, service, reason;
    int label = 0;
    ReasonMode mode = ReasonMode::oracle;
};

// Surface intent tokens first, then the deciding rule's attributes, the rule
// token, and the answer token. Always contains the deciding rule token.
inline std::vector<int> oracle_reason(const World& w, const std::vector<int>& query,
                                      const std::vector<int>& service) {
    World::Decision d = w.decide(query, service);
    std::vector<int> reason;
    for (int t : query)
        if (w.surface_to_intent.count(t)) reason.push_back(t);
    if (d.rule)
        for (int a : d.rule->attrs) reason.push_back(w.attr_tokens[a]);
    reason.push_back(d.rule_token);
    reason.push_back(answer_token(d.label));
    return reason;
}

inline std::vector<Example> gen_dataset(const World& w, long n,
                                        std::array<double, 3> mix, ReasonMode mode,
                                        uint64_t seed) {
    const double mix_sum = mix[0] + mix[1] + mix[2];
    if (std::abs(mix_sum - 1.0) > 1e-9)
        throw ConfigError("gen_dataset: label mix sums to " + std::to_string(mix_sum));
    if (n < 0) throw ConfigError("gen_dataset: negative size");

    std::mt19937_64 rng = make_rng(seed, 101);

    // Stratified target labels, shuffled.
    std::vector<int> targets;
    const long n0 = std::lround(mix[0] * static_cast<double>(n));
    const long n1 = std::lround(mix[1] * static_cast<double>(n));
    if (n0 + n1 > n) throw ConfigError("gen_dataset: label mix rounds above 1");
    targets.insert(targets.end(), n0, 0);
    targets.insert(targets.end(), n1, 1);
    targets.insert(targets.end(), n - n0 - n1, 2);
    std::shuffle(targets.begin(), targets.end(), rng);

    std::uniform_int_distribution<int> intent_dist(0, w.cfg.n_intents - 1);
    std::uniform_int_distribution<int> attr_dist(0, w.cfg.n_attributes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto filler = [&]() {
        std::uniform_int_distribution<size_t> d(0, w.filler_tokens.size() - 1);
        return w.filler_tokens[d(rng)];
    };

    std::vector<Example> out;
    out.reserve(n);
    constexpr int kMaxTries = 500;
    for (long i = 0; i < n; ++i) {
        const int target = targets[i];
        Example ex;
        ex.id = i;
        ex.label = target;
        ex.mode = mode;
        bool done = false;
        for (int attempt = 0; attempt < kMaxTries && !done; ++attempt) {
            const int intent = intent_dist(rng);
            const std::vector<int>& surfaces = w.intent_surfaces[intent];
            std::uniform_int_distribution<size_t> sd(0, surfaces.size() - 1);
            std::vector<int> query{surfaces[sd(rng)]};
            if (unit(rng) < 0.5 && !w.filler_tokens.empty()) query.push_back(filler());

            // Candidate rules of the target class for this intent.
            std::vector<const Rule*> candidates;
            for (const Rule& r : w.rules)
                if (r.intent == intent && r.label == target) candidates.push_back(&r);

            std::vector<int> attrs;
            if (target == 0) {
                const int k = static_cast<int>(unit(rng) * 4.0);  // 0..3 attributes
                for (int j = 0; j < k; ++j) attrs.push_back(attr_dist(rng));
            } else {
                if (candidates.empty()) continue;
                std::uniform_int_distribution<size_t> cd(0, candidates.size() - 1);
                attrs = candidates[cd(rng)]->attrs;
                if (unit(rng) < 0.4) attrs.push_back(attr_dist(rng));
            }
            std::sort(attrs.begin(), attrs.end());
            attrs.erase(std::unique(attrs.begin(), attrs.end()), attrs.end());
            std::shuffle(attrs.begin(), attrs.end(), rng);

            std::vector<int> service;
            for (int a : attrs) service.push_back(w.attr_tokens[a]);
            if (unit(rng) < 0.5 && !w.filler_tokens.empty()) service.push_back(filler());
            if (service.empty() && !w.filler_tokens.empty()) service.push_back(filler());

            if (w.decide(query, service).label != target) continue;
            ex.query = std::move(query);
            ex.service = std::move(service);
            done = true;
        }
        if (!done)
            throw DataError("gen_dataset: label stratum " + std::to_string(target) +
                            " unreachable after " + std::to_string(kMaxTries) + " attempts");
        if (mode == ReasonMode::oracle || mode == ReasonMode::random_other)
            ex.reason = oracle_reason(w, ex.query, ex.service);
        out.push_back(std::move(ex));
    }

    if (mode == ReasonMode::random_other && n > 1) {
        // Each example carries the oracle reason of a uniformly re-drawn other
        // example.
        std::vector<std::vector<int>> own;
        own.reserve(n);
        for (const Example& e : out) own.push_back(e.reason);
        std::uniform_int_distribution<long> jd(0, n - 1);
        for (long i = 0; i < n; ++i) {
            long j = jd(rng);
            while (j == i) j = jd(rng);
            out[i].reason = own[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline nlohmann::json world_to_json(const World& w) {
    nlohmann::json j;
    j["seed"] = w.seed;
    j["config"] = {{"n_intents", w.cfg.n_intents},
                   {"n_attributes", w.cfg.n_attributes},
                   {"n_rules", w.cfg.n_rules},
                   {"n_fillers", w.cfg.n_fillers},
                   {"attr_pool", w.cfg.attr_pool}};
    j["vocab"] = w.vocab.tokens();
    j["intent_surfaces"] = w.intent_surfaces;
    j["attr_tokens"] = w.attr_tokens;
    j["filler_tokens"] = w.filler_tokens;
    j["default_tokens"] = w.default_tokens;
    j["intent_pools"] = w.intent_pools;
    nlohmann::json rules = nlohmann::json::array();
    for (const Rule& r : w.rules)
        rules.push_back({{"intent", r.intent}, {"attrs", r.attrs}, {"label", r.label}, {"token", r.token}});
    j["rules"] = rules;
    return j;
}

inline World world_from_json(const nlohmann::json& j) {
    try {
        World w;
        w.seed = j.at("seed").get<uint64_t>();
        const auto& c = j.at("config");
        w.cfg.n_intents = c.at("n_intents").get<int>();
        w.cfg.n_attributes = c.at("n_attributes").get<int>();
        w.cfg.n_rules = c.at("n_rules").get<int>();
        w.cfg.n_fillers = c.at("n_fillers").get<int>();
        w.cfg.attr_pool = c.at("attr_pool").get<int>();
        std::vector<std::string> toks = j.at("vocab").get<std::vector<std::string>>();
        const std::vector<std::string>& fixed = w.vocab.tokens();
        if (toks.size() < fixed.size() ||
            !std::equal(fixed.begin(), fixed.end(), toks.begin()))
            throw DataError("world file: vocabulary does not start with the reserved tokens");
        for (size_t i = fixed.size(); i < toks.size(); ++i) w.vocab.push(toks[i]);
        w.intent_surfaces = j.at("intent_surfaces").get<std::vector<std::vector<int>>>();
        w.attr_tokens = j.at("attr_tokens").get<std::vector<int>>();
        w.filler_tokens = j.at("filler_tokens").get<std::vector<int>>();
        w.default_tokens = j.at("default_tokens").get<std::vector<int>>();
        w.intent_pools = j.at("intent_pools").get<std::vector<std::vector<int>>>();
        for (const auto& rj : j.at("rules")) {
            Rule r;
            r.intent = rj.at("intent").get<int>();
            r.attrs = rj.at("attrs").get<std::vector<int>>();
            r.label = rj.at("label").get<int>();
            r.token = rj.at("token").get<int>();
            w.rules.push_back(std::move(r));
        }
        w.rebuild_lookups();
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("world file: ") + e.what());
    }
}

inline void write_world(const std::string& path, const World& w) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << world_to_json(w).dump(2) << "\n";
}

inline World read_world(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return world_from_json(j);
}

inline void write_jsonl(const std::string& path, const std::vector<Example>& examples,
                        const Vocab& vocab) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    for (const Example& e : examples) {
        nlohmann::json j{{"id", e.id},
                         {"query", vocab.detokenize(e.query)},
                         {"service", vocab.detokenize(e.service)},
                         {"reason", vocab.detokenize(e.reason)},
                         {"label", e.label},
                         {"reason_mode", reason_mode_name(e.mode)}};
        f << j.dump() << "\n";
    }
}

inline std::vector<Example> read_jsonl(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path);
    std::vector<Example> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            Example e;
            e.id = j.at("id").get<long>();
            e.query = vocab.tokenize(j.at("query").get<std::string>());
            e.service = vocab.tokenize(j.at("service").get<std::string>());
            e.reason = vocab.tokenize(j.at("reason").get<std::string>());
            e.label = j.at("label").get<int>();
            if (e.label < 0 || e.label >= kNumLabels)
                throw DataError("label " + std::to_string(e.label) + " outside 0..2");
            e.mode = reason_mode_from(j.at("reason_mode").get<std::string>());
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& err) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + err.what());
        } catch (const DataError& err) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + err.what());
        }
    }
    return out;
}

}  // namespace crsd
