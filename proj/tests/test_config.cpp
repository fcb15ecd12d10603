#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "crsd/config.hpp"

using namespace crsd;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}   // namespace

TEST_CASE("default config validates and has a stable digest", "[config]") {
    ExperimentConfig c;
    REQUIRE_NOTHROW(validate_config(c));
    REQUIRE(config_digest(c) == config_digest(ExperimentConfig{}));
    REQUIRE(config_digest(c).size() == 16);
}

TEST_CASE("serialize then parse reproduces every field", "[config]") {
    ExperimentConfig c;
    c.seeds = {7, -3, 42};
    c.method = "crsd_random_reason";
    c.world_seed = 99;
    c.data_dir = "some/dir";
    c.world.n_intents = 11;
    c.world.n_attributes = 23;
    c.world.n_rules = 31;
    c.world.n_fillers = 5;
    c.world.attr_pool = 6;
    c.train_size = 1234;
    c.test_size = 321;
    c.label_mix = {0.25, 0.25, 0.5};
    c.d_model = 16;
    c.n_heads = 2;
    c.init_std = 0.0625;
    c.lr = 2.5e-4;
    c.weight_decay = 0.01;
    c.clip_norm = 1.5;
    c.tau = 0.07;
    c.group_size = 4;
    c.clip_eps = 0.3;
    c.reward_mode = "label_only";
    c.temperature = 0.7;

    const std::string text = serialize_config(c);
    ExperimentConfig back = parse_config(text);
    REQUIRE(serialize_config(back) == text);
    REQUIRE(back.seeds == c.seeds);
    REQUIRE(back.method == c.method);
    REQUIRE(back.data_dir == c.data_dir);
    REQUIRE(back.world.attr_pool == c.world.attr_pool);
    REQUIRE(back.label_mix == c.label_mix);
    REQUIRE(back.init_std == c.init_std);
    REQUIRE(back.lr == c.lr);
    REQUIRE(back.temperature == c.temperature);
}

TEST_CASE("doubles round-trip bit-exactly through text", "[config]") {
    ExperimentConfig c;
    c.lr = 0.1 + 0.2;   // not representable tidily
    c.adam_eps = 1e-300;
    c.tau = std::nextafter(0.05, 1.0);
    ExperimentConfig back = parse_config(serialize_config(c));
    REQUIRE(back.lr == c.lr);
    REQUIRE(back.adam_eps == c.adam_eps);
    REQUIRE(back.tau == c.tau);
}

TEST_CASE("infinite clip_eps survives the round trip", "[config]") {
    ExperimentConfig c;
    c.clip_eps = std::numeric_limits<double>::infinity();
    ExperimentConfig back = parse_config(serialize_config(c));
    REQUIRE(std::isinf(back.clip_eps));
    REQUIRE_NOTHROW(validate_config(back));
}

TEST_CASE("partial file keeps defaults for absent keys", "[config]") {
    ExperimentConfig def;
    ExperimentConfig c = parse_config("[optim]\nlr = 0.5\n");
    REQUIRE(c.lr == 0.5);
    REQUIRE(c.batch == def.batch);
    REQUIRE(c.method == def.method);
    REQUIRE(c.seeds == def.seeds);
}

TEST_CASE("comments and blank lines are ignored", "[config]") {
    ExperimentConfig c = parse_config(
        "# leading comment\n"
        "\n"
        "[optim]\n"
        "steps = 42   # trailing comment\n"
        "   \n"
        "[loss]\n"
        "tau = 0.5\n");
    REQUIRE(c.steps == 42);
    REQUIRE(c.tau == 0.5);
}

TEST_CASE("unknown keys are rejected with a line number", "[config]") {
    try {
        parse_config("[optim]\nlr = 0.001\nlearning_rate = 3\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("line 3") != std::string::npos);
        REQUIRE(std::string(e.what()).find("optim.learning_rate") != std::string::npos);
    }
}

TEST_CASE("key in the wrong section is unknown", "[config]") {
    REQUIRE_THROWS_AS(parse_config("[loss]\nlr = 0.001\n"), ConfigError);
}

TEST_CASE("malformed lines are rejected", "[config]") {
    REQUIRE_THROWS_AS(parse_config("[optim\nlr = 1\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_config("[optim]\nno equals sign\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_config("[optim]\nlr = not_a_number\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_config("[optim]\nsteps = 1.5\n"), ConfigError);
}

TEST_CASE("seed lists parse with spaces and reject empties", "[config]") {
    ExperimentConfig c = parse_config("[run]\nseeds = 3, 1 , 2\n");
    REQUIRE(c.seeds == std::vector<long>{3, 1, 2});
    REQUIRE_THROWS_AS(parse_config("[run]\nseeds = \n"), ConfigError);
    REQUIRE_THROWS_AS(parse_config("[run]\nseeds = 1,x\n"), ConfigError);
}

TEST_CASE("validation rejects out-of-range settings", "[config]") {
    auto broken = [](auto mutate) {
        ExperimentConfig c;
        mutate(c);
        return c;
    };
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.method = "magic"; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.reward_mode = "sparse"; })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.seeds = {1, 1}; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.seeds.clear(); })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.train_size = 0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.label_mix = {0.5, 0.5}; })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.label_mix = {0.9, 0.2, -0.1}; })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.label_mix = {0.5, 0.3, 0.3}; })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.d_model = 30; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.student_len = 1; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.teacher_len = 8; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.lr = 0.0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.batch = 0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.tau = 0.0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.mu = -0.1; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.group_size = 1; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.clip_eps = 0.0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.kl_coeff = -1.0; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) {
                          c.alpha = 0.0;
                          c.beta = 0.0;
                      })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.policy_d_model = 30; })),
                      ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.reason_cap = -1; })), ConfigError);
    REQUIRE_THROWS_AS(validate_config(broken([](auto& c) { c.eval_prompts = 0; })), ConfigError);
}

TEST_CASE("json export nests by section", "[config]") {
    ExperimentConfig c;
    c.seeds = {5, 6};
    c.tau = 0.25;
    nlohmann::json j = config_to_json(c);
    REQUIRE(j["run"]["seeds"] == nlohmann::json({5, 6}));
    REQUIRE(j["loss"]["tau"] == 0.25);
    REQUIRE(j["world"]["intents"] == c.world.n_intents);
    REQUIRE(j["grpo"]["reward_mode"] == "weighted");
    REQUIRE(j.size() == 7);   // run, world, data, encoder, optim, loss, grpo
}

TEST_CASE("digest is sensitive to every section", "[config]") {
    ExperimentConfig base;
    const std::string d0 = config_digest(base);
    auto changed = [&](auto mutate) {
        ExperimentConfig c;
        mutate(c);
        return config_digest(c);
    };
    REQUIRE(changed([](auto& c) { c.seeds = {9}; }) != d0);
    REQUIRE(changed([](auto& c) { c.world.n_rules = 121; }) != d0);
    REQUIRE(changed([](auto& c) { c.train_size += 1; }) != d0);
    REQUIRE(changed([](auto& c) { c.init_std = 0.03; }) != d0);
    REQUIRE(changed([](auto& c) { c.lr *= 2; }) != d0);
    REQUIRE(changed([](auto& c) { c.tau = 0.06; }) != d0);
    REQUIRE(changed([](auto& c) { c.group_size = 8; }) != d0);
}

TEST_CASE("load_config reads files and rejects missing ones", "[config]") {
    TempFile tmp("crsd_config_roundtrip.ini");
    ExperimentConfig c;
    c.method = "baseline";
    c.steps = 77;
    {
        std::ofstream out(tmp.path);
        out << serialize_config(c);
    }
    ExperimentConfig back = load_config(tmp.path);
    REQUIRE(back.method == "baseline");
    REQUIRE(back.steps == 77);
    REQUIRE(serialize_config(back) == serialize_config(c));

    REQUIRE_THROWS_AS(load_config("/nonexistent/path/config.ini"), ConfigError);
}
