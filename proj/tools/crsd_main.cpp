// Command-line front end: dataset generation, distillation and policy
// training, ablation sweeps, report comparison, and the verification suites.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crsd/checks.hpp"
#include "crsd/config.hpp"
#include "crsd/experiment.hpp"
#include "crsd/world.hpp"

namespace fs = std::filesystem;
using namespace crsd;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string method;
    std::string out_dir = "runs/latest";
    long seed = std::numeric_limits<long>::min();
    std::string seeds_range;
    bool single_thread = false;
    bool paper_defaults = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_method = true) {
    cmd->add_option("--config", f.config_path, "config file (key = value sections)");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--seed", f.seed, "single seed, overrides the config list");
    cmd->add_option("--seeds", f.seeds_range, "inclusive seed range N..M");
    cmd->add_flag("--single-thread", f.single_thread, "serialize seed workers");
    cmd->add_flag("--paper-defaults", f.paper_defaults,
                  "force mu=0.1, gamma=delta=0.01, group_size=16");
    if (with_method) cmd->add_option("--method", f.method, "training method");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
    ExperimentConfig cfg =
        f.config_path.empty() ? ExperimentConfig{} : load_config(f.config_path);
    if (f.seed != std::numeric_limits<long>::min()) cfg.seeds = {f.seed};
    if (!f.seeds_range.empty()) {
        size_t dots = f.seeds_range.find("..");
        if (dots == std::string::npos)
            throw ConfigError("--seeds expects N..M, got " + f.seeds_range);
        long lo = detail::parse_long(f.seeds_range.substr(0, dots), "--seeds");
        long hi = detail::parse_long(f.seeds_range.substr(dots + 2), "--seeds");
        if (hi < lo) throw ConfigError("--seeds range is empty");
        cfg.seeds.clear();
        for (long s = lo; s <= hi; ++s) cfg.seeds.push_back(s);
    }
    if (!f.method.empty()) cfg.method = f.method;
    if (f.paper_defaults) {
        cfg.mu = 0.1;
        cfg.gamma = 0.01;
        cfg.delta = 0.01;
        cfg.group_size = 16;
    }
    validate_config(cfg);
    return cfg;
}

void print_run(const RunReport& report) {
    auto acc = report.metric("accuracy");
    auto mac = report.metric("macro_f1");
    auto wf1 = report.metric("weighted_f1");
    std::printf("%s %s: accuracy %.4f +/- %.4f, macro_f1 %.4f +/- %.4f, weighted_f1 %.4f +/- %.4f\n",
                report.kind.c_str(), report.label.c_str(), RunReport::mean_of(acc),
                RunReport::std_of(acc), RunReport::mean_of(mac), RunReport::std_of(mac),
                RunReport::mean_of(wf1), RunReport::std_of(wf1));
    if (report.kind == "grpo") {
        auto rt = report.metric("r_thinking_final");
        auto r0 = report.metric("reward_step0");
        auto rf = report.metric("reward_final");
        std::printf("  r_thinking %.4f +/- %.4f, group reward %.4f -> %.4f\n",
                    RunReport::mean_of(rt), RunReport::std_of(rt), RunReport::mean_of(r0),
                    RunReport::mean_of(rf));
    }
    std::printf("  wall clock %.1fs\n", report.wall_clock_sec);
}

int cmd_gen_data(const CommonFlags& flags, const std::string& reason_mode) {
    ExperimentConfig cfg = resolve_config(flags);
    ReasonMode mode = reason_mode_from(reason_mode);
    World world = make_world(cfg);
    fs::create_directories(flags.out_dir);
    write_world((fs::path(flags.out_dir) / "world.json").string(), world);
    for (long seed : cfg.seeds) {
        std::vector<Example> train = make_split(cfg, world, seed, true, mode);
        std::vector<Example> test = make_split(cfg, world, seed, false, mode);
        write_jsonl((fs::path(flags.out_dir) / ("train_seed" + std::to_string(seed) + ".jsonl"))
                        .string(),
                    train, world.vocab);
        write_jsonl((fs::path(flags.out_dir) / ("test_seed" + std::to_string(seed) + ".jsonl"))
                        .string(),
                    test, world.vocab);
        std::printf("seed %ld: %zu train / %zu test examples\n", seed, train.size(), test.size());
    }
    return 0;
}

int cmd_train(const CommonFlags& flags, bool grpo) {
    ExperimentConfig cfg = resolve_config(flags);
    RunReport report = run_experiment(cfg, grpo, flags.single_thread);
    write_run_dir(flags.out_dir, cfg, report);
    print_run(report);
    return 0;
}

int cmd_ablate(const CommonFlags& flags) {
    ExperimentConfig base = resolve_config(flags);
    std::vector<nlohmann::json> reports;
    for (const char* method : {"crsd_full", "crsd_no_reason", "crsd_random_reason"}) {
        ExperimentConfig cfg = base;
        cfg.method = method;
        RunReport report = run_experiment(cfg, false, flags.single_thread);
        write_run_dir(fs::path(flags.out_dir) / method, cfg, report);
        print_run(report);
        reports.push_back(report.to_json());
    }
    write_text_file(fs::path(flags.out_dir) / "ablation.csv", comparison_table(reports, true));
    std::string table = comparison_table(reports, false);
    write_text_file(fs::path(flags.out_dir) / "ablation.txt", table);
    std::fputs(table.c_str(), stdout);
    return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& out_dir) {
    std::vector<nlohmann::json> reports;
    for (const std::string& p : paths) {
        std::ifstream in(p);
        if (!in) throw DataError("cannot open report " + p);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("cannot parse " + p + ": " + e.what());
        }
        reports.push_back(std::move(j));
    }
    std::string table = comparison_table(reports, false);
    std::fputs(table.c_str(), stdout);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text_file(fs::path(out_dir) / "comparison.csv", comparison_table(reports, true));
        write_text_file(fs::path(out_dir) / "comparison.txt", table);
    }
    return 0;
}

int print_checks(const std::vector<CheckLine>& lines, const char* what) {
    bool all_ok = true;
    double worst = 0.0;
    for (const CheckLine& l : lines) {
        std::printf("%-34s %-4s  %.3e (tol %.0e)\n", l.name.c_str(), l.ok ? "ok" : "FAIL",
                    l.value, l.tol);
        all_ok = all_ok && l.ok;
        worst = std::max(worst, l.value);
    }
    std::printf("%s: %zu checks, worst %.3e, %s\n", what, lines.size(), worst,
                all_ok ? "all ok" : "FAILURES");
    return all_ok ? 0 : 4;
}

}   // namespace

int main(int argc, char** argv) {
    CLI::App app{"rule-grounded reasoning distillation lab"};
    app.require_subcommand(1);

    CommonFlags gen_flags, distill_flags, grpo_flags, ablate_flags;
    std::string reason_mode = "oracle";
    std::vector<std::string> report_paths;
    std::string report_out;

    CLI::App* gen = app.add_subcommand("gen-data", "materialize world and dataset splits");
    add_common(gen, gen_flags, false);
    gen->add_option("--reason-mode", reason_mode, "oracle | random | none");

    CLI::App* distill = app.add_subcommand("train-distill", "train one distillation method");
    add_common(distill, distill_flags);

    CLI::App* grpo = app.add_subcommand("train-grpo", "policy optimization with group rewards");
    add_common(grpo, grpo_flags);

    CLI::App* ablate = app.add_subcommand("ablate", "reason-path ablation over three methods");
    add_common(ablate, ablate_flags, false);

    CLI::App* report = app.add_subcommand("report", "combine report.json files into a table");
    report->add_option("reports", report_paths, "report.json paths")->required();
    report->add_option("--out", report_out, "directory for csv/text output");

    CLI::App* gradcheck =
        app.add_subcommand("grad-check", "finite-difference gradient verification");
    CLI::App* selftest = app.add_subcommand("selftest", "closed-form loss and metric checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_flags, reason_mode);
        if (distill->parsed()) return cmd_train(distill_flags, false);
        if (grpo->parsed()) return cmd_train(grpo_flags, true);
        if (ablate->parsed()) return cmd_ablate(ablate_flags);
        if (report->parsed()) return cmd_report(report_paths, report_out);
        if (gradcheck->parsed()) {
            auto t0 = std::chrono::steady_clock::now();
            int rc = print_checks(run_grad_suite(), "grad-check");
            std::printf("elapsed %.1fs\n",
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count());
            return rc;
        }
        if (selftest->parsed()) return print_checks(run_selftest(), "selftest");
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 4;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
