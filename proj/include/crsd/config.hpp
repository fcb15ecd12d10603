#pragma once

// Flat sectioned key = value experiment configuration. Every field has a
// default, files round-trip losslessly, and unknown keys are rejected.

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crsd/common.hpp"
#include "crsd/world.hpp"

namespace crsd {

struct ExperimentConfig {
    // run
    std::vector<long> seeds{0, 1, 2, 3, 4};
    std::string method = "crsd_full";
    long world_seed = 7;
    std::string data_dir;   // empty: datasets are generated from the config

    // world
    WorldConfig world;

    // data
    long train_size = 3000;
    long test_size = 1000;
    std::vector<double> label_mix{0.162, 0.117, 0.721};

    // encoder
    long d_model = 32;
    long n_layers = 2;
    long n_heads = 4;
    long ffn_mult = 2;
    long d_reason = 32;
    double init_std = 0.02;
    long student_len = 32;
    long teacher_len = 64;

    // optim
    double lr = 1e-3;
    long batch = 32;
    long steps = 500;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 0.0;   // 0 disables; divergence aborts instead
    long log_every = 1;

    // loss
    double mu = 0.1;
    double gamma = 0.01;
    double delta = 0.01;
    double tau = 0.05;

    // grpo
    long group_size = 16;
    double clip_eps = 0.2;
    double kl_coeff = 0.01;
    double alpha = 0.5;
    double beta = 0.5;
    std::string reward_mode = "weighted";
    long policy_d_model = 32;
    long policy_heads = 4;
    long policy_ffn_mult = 2;
    long reason_cap = 12;
    double temperature = 1.0;
    long sft_steps = 150;
    long sft_batch = 16;
    double sft_lr = 1e-3;
    long grpo_steps = 150;
    long prompts_per_step = 2;
    double grpo_lr = 3e-4;
    long eval_prompts = 300;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s, const std::string& key) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse '" + s + "' as a number");
    }
}

inline long parse_long(const std::string& s, const std::string& key) {
    try {
        size_t pos = 0;
        long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse '" + s + "' as an integer");
    }
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// One bound config field: how to print, parse, and export it.
struct ConfigField {
    std::string section, key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<nlohmann::json(const ExperimentConfig&)> to_json;
};

inline std::vector<ConfigField> config_fields() {
    std::vector<ConfigField> f;
    auto str = [&](const char* sec, const char* key, std::string ExperimentConfig::*m) {
        f.push_back({sec, key, [m](const ExperimentConfig& c) { return c.*m; },
                     [m](ExperimentConfig& c, const std::string& v) { c.*m = v; },
                     [m](const ExperimentConfig& c) { return nlohmann::json(c.*m); }});
    };
    auto num = [&](const char* sec, const char* key, double ExperimentConfig::*m) {
        f.push_back({sec, key, [m](const ExperimentConfig& c) { return fmt_double(c.*m); },
                     [m, key](ExperimentConfig& c, const std::string& v) {
                         c.*m = parse_double(v, key);
                     },
                     [m](const ExperimentConfig& c) { return nlohmann::json(c.*m); }});
    };
    auto intl = [&](const char* sec, const char* key, long ExperimentConfig::*m) {
        f.push_back({sec, key, [m](const ExperimentConfig& c) { return std::to_string(c.*m); },
                     [m, key](ExperimentConfig& c, const std::string& v) {
                         c.*m = parse_long(v, key);
                     },
                     [m](const ExperimentConfig& c) { return nlohmann::json(c.*m); }});
    };
    auto world_int = [&](const char* key, int WorldConfig::*m) {
        f.push_back({"world", key,
                     [m](const ExperimentConfig& c) { return std::to_string(c.world.*m); },
                     [m, key](ExperimentConfig& c, const std::string& v) {
                         c.world.*m = static_cast<int>(parse_long(v, key));
                     },
                     [m](const ExperimentConfig& c) { return nlohmann::json(c.world.*m); }});
    };

    f.push_back({"run", "seeds",
                 [](const ExperimentConfig& c) {
                     std::string out;
                     for (size_t i = 0; i < c.seeds.size(); ++i)
                         out += (i ? "," : "") + std::to_string(c.seeds[i]);
                     return out;
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                     c.seeds.clear();
                     std::stringstream ss(v);
                     std::string item;
                     while (std::getline(ss, item, ','))
                         c.seeds.push_back(parse_long(trim(item), "seeds"));
                     if (c.seeds.empty()) throw ConfigError("seeds: empty list");
                 },
                 [](const ExperimentConfig& c) { return nlohmann::json(c.seeds); }});
    str("run", "method", &ExperimentConfig::method);
    intl("run", "world_seed", &ExperimentConfig::world_seed);
    str("run", "data_dir", &ExperimentConfig::data_dir);

    world_int("intents", &WorldConfig::n_intents);
    world_int("attributes", &WorldConfig::n_attributes);
    world_int("rules", &WorldConfig::n_rules);
    world_int("fillers", &WorldConfig::n_fillers);
    world_int("attr_pool", &WorldConfig::attr_pool);

    intl("data", "train_size", &ExperimentConfig::train_size);
    intl("data", "test_size", &ExperimentConfig::test_size);
    f.push_back({"data", "label_mix",
                 [](const ExperimentConfig& c) {
                     std::string out;
                     for (size_t i = 0; i < c.label_mix.size(); ++i)
                         out += (i ? "," : "") + fmt_double(c.label_mix[i]);
                     return out;
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                     c.label_mix.clear();
                     std::stringstream ss(v);
                     std::string item;
                     while (std::getline(ss, item, ','))
                         c.label_mix.push_back(parse_double(trim(item), "label_mix"));
                 },
                 [](const ExperimentConfig& c) { return nlohmann::json(c.label_mix); }});

    intl("encoder", "d_model", &ExperimentConfig::d_model);
    intl("encoder", "n_layers", &ExperimentConfig::n_layers);
    intl("encoder", "n_heads", &ExperimentConfig::n_heads);
    intl("encoder", "ffn_mult", &ExperimentConfig::ffn_mult);
    intl("encoder", "d_reason", &ExperimentConfig::d_reason);
    num("encoder", "init_std", &ExperimentConfig::init_std);
    intl("encoder", "student_len", &ExperimentConfig::student_len);
    intl("encoder", "teacher_len", &ExperimentConfig::teacher_len);

    num("optim", "lr", &ExperimentConfig::lr);
    intl("optim", "batch", &ExperimentConfig::batch);
    intl("optim", "steps", &ExperimentConfig::steps);
    num("optim", "weight_decay", &ExperimentConfig::weight_decay);
    num("optim", "beta1", &ExperimentConfig::beta1);
    num("optim", "beta2", &ExperimentConfig::beta2);
    num("optim", "adam_eps", &ExperimentConfig::adam_eps);
    num("optim", "clip_norm", &ExperimentConfig::clip_norm);
    intl("optim", "log_every", &ExperimentConfig::log_every);

    num("loss", "mu", &ExperimentConfig::mu);
    num("loss", "gamma", &ExperimentConfig::gamma);
    num("loss", "delta", &ExperimentConfig::delta);
    num("loss", "tau", &ExperimentConfig::tau);

    intl("grpo", "group_size", &ExperimentConfig::group_size);
    num("grpo", "clip_eps", &ExperimentConfig::clip_eps);
    num("grpo", "kl_coeff", &ExperimentConfig::kl_coeff);
    num("grpo", "alpha", &ExperimentConfig::alpha);
    num("grpo", "beta", &ExperimentConfig::beta);
    str("grpo", "reward_mode", &ExperimentConfig::reward_mode);
    intl("grpo", "policy_d_model", &ExperimentConfig::policy_d_model);
    intl("grpo", "policy_heads", &ExperimentConfig::policy_heads);
    intl("grpo", "policy_ffn_mult", &ExperimentConfig::policy_ffn_mult);
    intl("grpo", "reason_cap", &ExperimentConfig::reason_cap);
    num("grpo", "temperature", &ExperimentConfig::temperature);
    intl("grpo", "sft_steps", &ExperimentConfig::sft_steps);
    intl("grpo", "sft_batch", &ExperimentConfig::sft_batch);
    num("grpo", "sft_lr", &ExperimentConfig::sft_lr);
    intl("grpo", "grpo_steps", &ExperimentConfig::grpo_steps);
    intl("grpo", "prompts_per_step", &ExperimentConfig::prompts_per_step);
    num("grpo", "grpo_lr", &ExperimentConfig::grpo_lr);
    intl("grpo", "eval_prompts", &ExperimentConfig::eval_prompts);
    return f;
}

}   // namespace detail

inline const std::vector<std::string> kMethods{"baseline",        "baseline_reason",
                                               "crsd_align_only", "crsd_full",
                                               "crsd_no_reason",  "crsd_random_reason"};
inline const std::vector<std::string> kRewardModes{"label_only", "weighted"};

inline void validate_config(const ExperimentConfig& c) {
    auto in = [](const std::vector<std::string>& xs, const std::string& v) {
        return std::find(xs.begin(), xs.end(), v) != xs.end();
    };
    if (!in(kMethods, c.method)) throw ConfigError("unknown method '" + c.method + "'");
    if (!in(kRewardModes, c.reward_mode))
        throw ConfigError("unknown reward_mode '" + c.reward_mode + "'");
    if (c.seeds.empty()) throw ConfigError("seeds: empty list");
    std::set<long> uniq(c.seeds.begin(), c.seeds.end());
    if (uniq.size() != c.seeds.size()) throw ConfigError("seeds: duplicate entries");
    if (c.train_size <= 0 || c.test_size <= 0) throw ConfigError("dataset sizes must be positive");
    if (c.label_mix.size() != static_cast<size_t>(kNumLabels))
        throw ConfigError("label_mix needs exactly " + std::to_string(kNumLabels) + " entries");
    double s = 0.0;
    for (double m : c.label_mix) {
        if (m < 0.0) throw ConfigError("label_mix entries must be non-negative");
        s += m;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("label_mix must sum to 1");
    if (c.d_model <= 0 || c.n_layers <= 0 || c.n_heads <= 0 || c.ffn_mult <= 0 || c.d_reason <= 0)
        throw ConfigError("encoder dimensions must be positive");
    if (c.d_model % c.n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (c.student_len < 2 || c.teacher_len < c.student_len)
        throw ConfigError("sequence caps must satisfy 2 <= student_len <= teacher_len");
    if (c.lr <= 0.0 || c.sft_lr <= 0.0 || c.grpo_lr <= 0.0)
        throw ConfigError("learning rates must be positive");
    if (c.batch <= 0 || c.steps < 0) throw ConfigError("batch and steps must be positive");
    if (c.tau <= 0.0) throw ConfigError("tau must be positive");
    if (c.mu < 0.0 || c.gamma < 0.0 || c.delta < 0.0)
        throw ConfigError("loss weights must be non-negative");
    if (c.group_size < 2) throw ConfigError("group_size must be at least 2");
    if (c.clip_eps <= 0.0) throw ConfigError("clip_eps must be positive");
    if (c.kl_coeff < 0.0) throw ConfigError("kl_coeff must be non-negative");
    if (c.alpha < 0.0 || c.beta < 0.0 || (c.alpha == 0.0 && c.beta == 0.0))
        throw ConfigError("reward weights must be non-negative and not both zero");
    if (c.policy_d_model <= 0 || c.policy_heads <= 0 ||
        c.policy_d_model % c.policy_heads != 0)
        throw ConfigError("policy dimensions must be positive and divisible");
    if (c.reason_cap < 0) throw ConfigError("reason_cap must be non-negative");
    if (c.prompts_per_step <= 0 || c.eval_prompts <= 0)
        throw ConfigError("grpo batch settings must be positive");
}

// Canonical text form: sections and keys in a fixed order.
inline std::string serialize_config(const ExperimentConfig& c) {
    std::string out;
    std::string section;
    for (const auto& fld : detail::config_fields()) {
        if (fld.section != section) {
            if (!section.empty()) out += "\n";
            section = fld.section;
            out += "[" + section + "]\n";
        }
        out += fld.key + " = " + fld.get(c) + "\n";
    }
    return out;
}

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c;
    auto fields = detail::config_fields();
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        bool found = false;
        for (const auto& fld : fields) {
            if (fld.section == section && fld.key == key) {
                fld.set(c, value);
                found = true;
                break;
            }
        }
        if (!found)
            throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + section +
                              "." + key + "'");
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    for (const auto& fld : detail::config_fields()) j[fld.section][fld.key] = fld.to_json(c);
    return j;
}

inline std::string config_digest(const ExperimentConfig& c) {
    return hex64(fnv1a(serialize_config(c)));
}

}   // namespace crsd
