#pragma once

// End-to-end experiment drivers: dataset materialization, the six
// distillation method configurations, the GRPO reward-mode study, multi-seed
// aggregation, and run-directory emission.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "crsd/adamw.hpp"
#include "crsd/config.hpp"
#include "crsd/encoder.hpp"
#include "crsd/grpo.hpp"
#include "crsd/losses.hpp"
#include "crsd/metrics.hpp"
#include "crsd/policy.hpp"
#include "crsd/reward.hpp"
#include "crsd/world.hpp"

namespace crsd {

inline constexpr const char* kVersion = "0.1.0";

// Independent deterministic streams per seed.
enum class Stream : uint64_t {
    train_data = 11,
    test_data = 12,
    model = 13,
    batches = 14,
    embedder = 15,
    sft = 16,
    rollout = 17,
};

inline uint64_t derive_seed(long seed, Stream s) {
    return splitmix64(static_cast<uint64_t>(seed)) ^
           splitmix64(static_cast<uint64_t>(s) * 0x7fb5d329728ea185ull);
}

// ---------------------------------------------------------------------------
// run artifacts
// ---------------------------------------------------------------------------

struct SeedResult {
    long seed = 0;
    EvalReport eval;
    std::vector<nlohmann::json> log;   // one row per logged step
    // grpo extras
    double reward_step0 = 0.0, reward_final = 0.0;
    double r_thinking_final = 0.0, answer_accuracy = 0.0, process_score = 0.0;
};

struct RunReport {
    std::string kind;     // "distill" or "grpo"
    std::string label;    // method name or reward mode
    std::string config_digest;
    std::string provenance;
    std::vector<SeedResult> per_seed;
    double wall_clock_sec = 0.0;   // printed, never serialized

    static double mean_of(const std::vector<double>& xs) {
        return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    }
    static double std_of(const std::vector<double>& xs) {
        double m = mean_of(xs), v = 0.0;
        for (double x : xs) v += (x - m) * (x - m);
        return std::sqrt(v / static_cast<double>(xs.size()));
    }

    std::vector<double> metric(const std::string& name) const {
        std::vector<double> xs;
        for (const SeedResult& r : per_seed) {
            if (name == "accuracy") xs.push_back(r.eval.accuracy);
            else if (name == "macro_f1") xs.push_back(r.eval.macro_f1);
            else if (name == "weighted_f1") xs.push_back(r.eval.weighted_f1);
            else if (name == "r_thinking_final") xs.push_back(r.r_thinking_final);
            else if (name == "answer_accuracy") xs.push_back(r.answer_accuracy);
            else if (name == "reward_step0") xs.push_back(r.reward_step0);
            else if (name == "reward_final") xs.push_back(r.reward_final);
            else throw DataError("unknown metric " + name);
        }
        return xs;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["kind"] = kind;
        j["label"] = label;
        j["config_digest"] = config_digest;
        j["provenance"] = provenance;
        nlohmann::json rows = nlohmann::json::array();
        for (const SeedResult& r : per_seed) {
            nlohmann::json row = r.eval.to_json();
            row["seed"] = r.seed;
            if (kind == "grpo") {
                row["reward_step0"] = r.reward_step0;
                row["reward_final"] = r.reward_final;
                row["r_thinking_final"] = r.r_thinking_final;
                row["answer_accuracy"] = r.answer_accuracy;
                row["process_score"] = r.process_score;
            }
            rows.push_back(std::move(row));
        }
        j["per_seed"] = std::move(rows);
        nlohmann::json agg;
        std::vector<std::string> names{"accuracy", "macro_f1", "weighted_f1"};
        if (kind == "grpo") {
            names.insert(names.end(), {"r_thinking_final", "answer_accuracy", "reward_step0",
                                       "reward_final"});
        }
        for (const std::string& n : names) {
            std::vector<double> xs = metric(n);
            agg[n] = {{"mean", mean_of(xs)}, {"std", std_of(xs)}};
        }
        j["aggregate"] = std::move(agg);
        return j;
    }
};

// ---------------------------------------------------------------------------
// shared training plumbing
// ---------------------------------------------------------------------------

namespace detail {

// Endless shuffled pass over [0, n); reshuffles whenever a full batch no
// longer fits, so batches never contain duplicates.
class BatchStream {
  public:
    BatchStream(long n, long batch, uint64_t seed)
        : n_(n), batch_(std::min(batch, n)), rng_(make_rng(seed, 500)), order_(n) {
        std::iota(order_.begin(), order_.end(), 0L);
        reshuffle();
    }

    std::vector<long> next() {
        if (pos_ + batch_ > n_) reshuffle();
        std::vector<long> ids(order_.begin() + pos_, order_.begin() + pos_ + batch_);
        pos_ += batch_;
        return ids;
    }

  private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }
    long n_, batch_, pos_ = 0;
    std::mt19937_64 rng_;
    std::vector<long> order_;
};

inline void clip_gradients(std::vector<Tensor>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (Tensor& p : params)
        for (double g : p.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    double scale = max_norm / norm;
    for (Tensor& p : params)
        for (double& g : p.grad()) g *= scale;
}

}   // namespace detail

inline EncoderConfig encoder_config(const ExperimentConfig& cfg, const World& world) {
    EncoderConfig ec;
    ec.vocab = world.vocab.size();
    ec.d_model = static_cast<int>(cfg.d_model);
    ec.n_layers = static_cast<int>(cfg.n_layers);
    ec.n_heads = static_cast<int>(cfg.n_heads);
    ec.ffn_mult = static_cast<int>(cfg.ffn_mult);
    ec.max_len = static_cast<int>(cfg.teacher_len);
    ec.d_reason = static_cast<int>(cfg.d_reason);
    ec.init_std = cfg.init_std;
    return ec;
}

inline World make_world(const ExperimentConfig& cfg) {
    return gen_world(static_cast<uint64_t>(cfg.world_seed), cfg.world);
}

inline std::vector<Example> make_split(const ExperimentConfig& cfg, const World& world, long seed,
                                       bool train, ReasonMode mode) {
    std::array<double, 3> mix{cfg.label_mix[0], cfg.label_mix[1], cfg.label_mix[2]};
    return gen_dataset(world, train ? cfg.train_size : cfg.test_size, mix, mode,
                       derive_seed(seed, train ? Stream::train_data : Stream::test_data));
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

// One optimization step for the selected method; returns the scalar loss and
// fills the optional part breakdown.
inline Tensor distill_batch_loss(Encoder& enc, const ReasonEmbedder* embedder,
                                 const std::vector<Example>& data, const std::vector<long>& ids,
                                 const ExperimentConfig& cfg, nlohmann::json* parts = nullptr) {
    const bool teacher_path = cfg.method == "crsd_align_only" || cfg.method == "crsd_full" ||
                              cfg.method == "crsd_no_reason" || cfg.method == "crsd_random_reason";
    const int vocab = enc.cfg.vocab;

    std::vector<Tensor> student_rows, teacher_rows, reason_rows;
    std::vector<int> labels;
    for (long id : ids) {
        const Example& e = data[static_cast<size_t>(id)];
        labels.push_back(e.label);
        std::vector<int> student_in =
            build_student_input(e.query, e.service, static_cast<int>(cfg.student_len), vocab);
        student_rows.push_back(enc.encode(student_in));
        if (teacher_path) {
            std::vector<int> teacher_in =
                cfg.method == "crsd_no_reason"
                    ? student_in
                    : build_teacher_input(e.query, e.service, e.reason,
                                          static_cast<int>(cfg.teacher_len), vocab);
            teacher_rows.push_back(enc.encode(teacher_in));
        }
        if (embedder) reason_rows.push_back(embedder->embed(e.reason));
    }

    Tensor cls = concat_rows(student_rows);
    Tensor sce = classification_ce(enc.classify(cls), labels);

    auto put = [&](const char* k, const Tensor& v) {
        if (parts) (*parts)[k] = v.item();
    };
    put("sce", sce);

    if (cfg.method == "baseline") return sce;

    if (cfg.method == "baseline_reason") {
        Tensor cos = cosine_align_loss(enc.project(cls), concat_rows(reason_rows));
        put("cos", cos);
        return baseline_total(sce, cos, cfg.mu);
    }

    Tensor cls_r = concat_rows(teacher_rows);
    Tensor tce = classification_ce(enc.classify(cls_r), labels);
    Tensor align = info_nce(cls, cls_r, cfg.tau);
    put("tce", tce);
    put("align", align);
    const double gamma = cfg.method == "crsd_align_only" ? 0.0 : cfg.gamma;
    return crsd_total(sce, tce, align, gamma, cfg.delta);
}

inline SeedResult train_distill_seed(const ExperimentConfig& cfg, const World& world, long seed) {
    ReasonMode mode =
        cfg.method == "crsd_random_reason" ? ReasonMode::random_other : ReasonMode::oracle;
    std::vector<Example> train = make_split(cfg, world, seed, true, mode);
    std::vector<Example> test = make_split(cfg, world, seed, false, ReasonMode::oracle);

    Encoder enc = Encoder::init(encoder_config(cfg, world), derive_seed(seed, Stream::model));
    ReasonEmbedder embedder(world.vocab.size(), static_cast<int>(cfg.d_reason),
                            derive_seed(seed, Stream::embedder));
    const ReasonEmbedder* emb = cfg.method == "baseline_reason" ? &embedder : nullptr;

    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.eps = cfg.adam_eps;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(enc.params(), ocfg);

    detail::BatchStream batches(static_cast<long>(train.size()), cfg.batch,
                                derive_seed(seed, Stream::batches));

    SeedResult result;
    result.seed = seed;
    for (long step = 0; step < cfg.steps; ++step) {
        std::vector<long> ids = batches.next();
        opt.zero_grad();
        double loss_val;
        nlohmann::json parts;
        {
            Graph g;
            GraphScope scope(g);
            Tensor loss = distill_batch_loss(enc, emb, train, ids, cfg, &parts);
            loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw DivergenceError("distill loss is not finite at step " +
                                          std::to_string(step),
                                      step);
            g.backward(loss);
        }
        auto params = enc.params();
        detail::clip_gradients(params, cfg.clip_norm);
        opt.step();
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            parts["step"] = step;
            parts["loss"] = loss_val;
            result.log.push_back(std::move(parts));
        }
    }

    result.eval = evaluate(enc, test, static_cast<int>(cfg.student_len));
    return result;
}

// ---------------------------------------------------------------------------
// grpo
// ---------------------------------------------------------------------------

inline PolicyConfig policy_config(const ExperimentConfig& cfg, const World& world) {
    PolicyConfig pc;
    pc.vocab = world.vocab.size();
    pc.d_model = static_cast<int>(cfg.policy_d_model);
    pc.n_heads = static_cast<int>(cfg.policy_heads);
    pc.ffn_mult = static_cast<int>(cfg.policy_ffn_mult);
    pc.reason_cap = static_cast<int>(cfg.reason_cap);
    pc.max_len = static_cast<int>(cfg.student_len + cfg.reason_cap + 4);
    return pc;
}

inline SeedResult train_grpo_seed(const ExperimentConfig& cfg, const World& world, long seed) {
    std::vector<Example> train = make_split(cfg, world, seed, true, ReasonMode::oracle);
    std::vector<Example> test = make_split(cfg, world, seed, false, ReasonMode::oracle);

    Policy policy = Policy::init(policy_config(cfg, world), derive_seed(seed, Stream::model));
    SeedResult result;
    result.seed = seed;

    // supervised warm start on oracle (reason, answer) sequences; identical
    // across reward modes by construction
    {
        AdamWConfig ocfg;
        ocfg.lr = cfg.sft_lr;
        AdamW opt(policy.params(), ocfg);
        detail::BatchStream batches(static_cast<long>(train.size()), cfg.sft_batch,
                                    derive_seed(seed, Stream::sft));
        for (long step = 0; step < cfg.sft_steps; ++step) {
            std::vector<long> ids = batches.next();
            std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
            for (long id : ids) {
                const Example& e = train[static_cast<size_t>(id)];
                batch.emplace_back(build_policy_prompt(e.query, e.service, policy.cfg.vocab),
                                   e.reason);
            }
            opt.zero_grad();
            double loss_val;
            {
                Graph g;
                GraphScope scope(g);
                Tensor loss = sft_loss(policy, batch);
                loss_val = loss.item();
                if (!std::isfinite(loss_val))
                    throw DivergenceError("sft loss is not finite at step " +
                                              std::to_string(step),
                                          step);
                g.backward(loss);
            }
            opt.step();
            if (step % cfg.log_every == 0 || step + 1 == cfg.sft_steps)
                result.log.push_back({{"phase", "sft"}, {"step", step}, {"loss", loss_val}});
        }
    }

    Policy ref = policy.clone();
    const double eff_alpha = cfg.reward_mode == "label_only" ? 0.0 : cfg.alpha;

    GrpoConfig gcfg;
    gcfg.clip_eps = cfg.clip_eps;
    gcfg.kl_coeff = cfg.kl_coeff;

    AdamWConfig ocfg;
    ocfg.lr = cfg.grpo_lr;
    AdamW opt(policy.params(), ocfg);
    detail::BatchStream prompts(static_cast<long>(train.size()), cfg.prompts_per_step,
                                derive_seed(seed, Stream::batches));

    for (long step = 0; step < cfg.grpo_steps; ++step) {
        std::vector<long> ids = prompts.next();
        std::vector<GroupSample> batch;
        double reward_sum = 0.0, think_sum = 0.0, label_sum = 0.0;
        long outputs = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            const Example& e = train[static_cast<size_t>(ids[i])];
            GroupSample gs = sample_group(
                policy, build_policy_prompt(e.query, e.service, policy.cfg.vocab),
                static_cast<int>(cfg.group_size), cfg.temperature,
                derive_seed(seed, Stream::rollout) + static_cast<uint64_t>(step) * 131 + i);
            gs.rewards.clear();
            for (const PolicyOutput& out : gs.outputs) {
                RewardVector rv = score_output(world, e, out.tokens);
                gs.rewards.push_back(aggregate_reward(rv, eff_alpha, cfg.beta));
                think_sum += thinking_score(rv);
                label_sum += rv.answer_correct;
                ++outputs;
            }
            reward_sum += std::accumulate(gs.rewards.begin(), gs.rewards.end(), 0.0);
            gs.advantages = compute_advantages(gs.rewards);
            batch.push_back(std::move(gs));
        }

        opt.zero_grad();
        GrpoStats stats;
        double loss_val;
        {
            Graph g;
            GraphScope scope(g);
            Tensor loss = grpo_loss(policy, ref, batch, gcfg, &stats);
            loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw DivergenceError("grpo loss is not finite at step " + std::to_string(step),
                                      step);
            g.backward(loss);
        }
        opt.step();

        const double denom = static_cast<double>(outputs);
        const double mean_reward = reward_sum / denom;
        if (step == 0) result.reward_step0 = mean_reward;
        result.reward_final = mean_reward;
        result.r_thinking_final = think_sum / denom;
        if (step % cfg.log_every == 0 || step + 1 == cfg.grpo_steps) {
            result.log.push_back({{"phase", "grpo"},
                                  {"step", step},
                                  {"loss", loss_val},
                                  {"mean_reward", mean_reward},
                                  {"mean_r_thinking", think_sum / denom},
                                  {"mean_r_label", label_sum / denom},
                                  {"clip_fraction", stats.clip_fraction},
                                  {"mean_kl", stats.mean_kl}});
        }
    }

    // greedy evaluation on held-out prompts
    const long n_eval = std::min<long>(cfg.eval_prompts, static_cast<long>(test.size()));
    std::vector<int> y_true, y_pred;
    double process = 0.0;
    std::mt19937_64 greedy_rng = make_rng(0, 0);   // unused at zero temperature
    for (long i = 0; i < n_eval; ++i) {
        const Example& e = test[static_cast<size_t>(i)];
        PolicyOutput out = sample_output(
            policy, build_policy_prompt(e.query, e.service, policy.cfg.vocab), 0.0, greedy_rng);
        y_true.push_back(e.label);
        y_pred.push_back(out.tokens.back() - kAnswerBase);
        process += thinking_score(score_output(world, e, out.tokens));
    }
    result.eval = score_predictions(y_true, y_pred);
    result.answer_accuracy = result.eval.accuracy;
    result.process_score = process / static_cast<double>(n_eval);
    return result;
}

// ---------------------------------------------------------------------------
// multi-seed driver
// ---------------------------------------------------------------------------

inline RunReport run_experiment(const ExperimentConfig& cfg, bool grpo, bool single_thread) {
    validate_config(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    World world = make_world(cfg);

    std::vector<SeedResult> results(cfg.seeds.size());
    auto worker = [&](size_t i) {
        results[i] = grpo ? train_grpo_seed(cfg, world, cfg.seeds[i])
                          : train_distill_seed(cfg, world, cfg.seeds[i]);
    };

    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    size_t lanes = single_thread ? 1 : std::min<size_t>(hw, cfg.seeds.size());
    if (lanes <= 1) {
        for (size_t i = 0; i < cfg.seeds.size(); ++i) worker(i);
    } else {
        std::vector<std::future<void>> inflight;
        for (size_t i = 0; i < cfg.seeds.size(); ++i) {
            if (inflight.size() == lanes) {
                inflight.front().get();
                inflight.erase(inflight.begin());
            }
            inflight.push_back(std::async(std::launch::async, worker, i));
        }
        for (auto& f : inflight) f.get();
    }

    RunReport report;
    report.kind = grpo ? "grpo" : "distill";
    report.label = grpo ? cfg.reward_mode : cfg.method;
    report.config_digest = config_digest(cfg);
    report.provenance = std::string("crsd ") + kVersion + " cfg:" + report.config_digest;
    report.per_seed = std::move(results);
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << body;
}

inline std::string metrics_csv(const RunReport& report) {
    std::string csv = "seed,label," + EvalReport::csv_header() + "\n";
    for (const SeedResult& r : report.per_seed)
        csv += std::to_string(r.seed) + "," + report.label + "," + r.eval.csv_row() + "\n";
    return csv;
}

inline void write_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                          const RunReport& report) {
    std::filesystem::create_directories(dir);
    nlohmann::json resolved = config_to_json(cfg);
    resolved["digest"] = config_digest(cfg);
    write_text_file(dir / "config.resolved.json", resolved.dump(2) + "\n");
    write_text_file(dir / "metrics.csv", metrics_csv(report));
    write_text_file(dir / "report.json", report.to_json().dump(2) + "\n");
    std::string log;
    for (const SeedResult& r : report.per_seed) {
        for (const nlohmann::json& row : r.log) {
            nlohmann::json j = row;
            j["seed"] = r.seed;
            log += j.dump() + "\n";
        }
    }
    write_text_file(dir / "training_log.jsonl", log);
}

// Comparison table over several report.json payloads: fixed column order,
// mean and population std per metric.
inline std::string comparison_table(const std::vector<nlohmann::json>& reports, bool csv) {
    if (reports.empty()) throw DataError("no reports given");
    struct Row {
        std::string label;
        double acc_m, acc_s, mac_m, mac_s, wf1_m, wf1_s;
    };
    std::vector<Row> rows;
    for (const nlohmann::json& j : reports) {
        try {
            const nlohmann::json& agg = j.at("aggregate");
            rows.push_back({j.at("label").get<std::string>(),
                            agg.at("accuracy").at("mean").get<double>(),
                            agg.at("accuracy").at("std").get<double>(),
                            agg.at("macro_f1").at("mean").get<double>(),
                            agg.at("macro_f1").at("std").get<double>(),
                            agg.at("weighted_f1").at("mean").get<double>(),
                            agg.at("weighted_f1").at("std").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("incompatible report schema: ") + e.what());
        }
    }

    std::string out;
    if (csv) {
        out = "method,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,weighted_f1_mean,"
              "weighted_f1_std\n";
        for (const Row& r : rows) {
            out += r.label;
            for (double v : {r.acc_m, r.acc_s, r.mac_m, r.mac_s, r.wf1_m, r.wf1_s})
                out += "," + detail::fmt_double(v);
            out += "\n";
        }
        return out;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s %-17s %-17s %-17s\n", "Method", "Accuracy", "Macro F1",
                  "Weight F1");
    out = buf;
    for (const Row& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-20s %.4f +/- %.4f %.4f +/- %.4f %.4f +/- %.4f\n",
                      r.label.c_str(), r.acc_m, r.acc_s, r.mac_m, r.mac_s, r.wf1_m, r.wf1_s);
        out += buf;
    }
    return out;
}

}   // namespace crsd
