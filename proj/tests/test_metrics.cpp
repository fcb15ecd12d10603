#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "crsd/metrics.hpp"

using namespace crsd;

namespace {

// Independent reference: direct TP/FP/FN counting per label.
struct RefMetrics {
    double acc, macro, weighted;
};

RefMetrics brute_force(const std::vector<int>& yt, const std::vector<int>& yp) {
    const double n = static_cast<double>(yt.size());
    long correct = 0;
    for (size_t i = 0; i < yt.size(); ++i)
        if (yt[i] == yp[i]) ++correct;
    double macro = 0, weighted = 0;
    for (int c = 0; c < 3; ++c) {
        long tp = 0, fp = 0, fn = 0, support = 0;
        for (size_t i = 0; i < yt.size(); ++i) {
            if (yt[i] == c) ++support;
            if (yt[i] == c && yp[i] == c) ++tp;
            if (yt[i] != c && yp[i] == c) ++fp;
            if (yt[i] == c && yp[i] != c) ++fn;
        }
        const double p = (tp + fp) ? tp / double(tp + fp) : 0.0;
        const double r = (tp + fn) ? tp / double(tp + fn) : 0.0;
        const double f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
        macro += f1 / 3.0;
        weighted += f1 * support / n;
    }
    return {correct / n, macro, weighted};
}

}  // namespace

TEST_CASE("worked metric examples", "[metrics]") {
    CHECK(accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
    CHECK(accuracy({0, 1, 2}, {1, 2, 0}) == 0.0);

    CHECK(accuracy({0, 1, 2}, {0, 1, 1}) == Catch::Approx(2.0 / 3).margin(1e-15));
    CHECK(macro_f1({0, 1, 2}, {0, 1, 1}) == Catch::Approx(5.0 / 9).margin(1e-15));
    CHECK(weighted_f1({0, 1, 2}, {0, 1, 1}) == Catch::Approx(5.0 / 9).margin(1e-15));

    // absent labels still divide the macro mean
    CHECK(macro_f1({0, 0}, {0, 0}) == Catch::Approx(1.0 / 3).margin(1e-15));

    CHECK(weighted_f1({2, 2, 2, 0}, {2, 2, 2, 2}) ==
          Catch::Approx(0.75 * 6.0 / 7).margin(1e-12));

    CHECK(macro_f1({0, 1, 2, 0, 1, 2}, {0, 1, 2, 0, 1, 2}) == 1.0);
    CHECK(weighted_f1({0, 1, 2}, {0, 1, 2}) == 1.0);
}

TEST_CASE("metric input validation", "[metrics]") {
    CHECK_THROWS_AS(accuracy({}, {}), DataError);
    CHECK_THROWS_AS(accuracy({0, 1}, {0}), DataError);
    CHECK_THROWS_AS(accuracy({0, 3}, {0, 0}), DataError);
    CHECK_THROWS_AS(accuracy({0, 0}, {-1, 0}), DataError);
}

TEST_CASE("metrics agree with the counting reference", "[metrics][property]") {
    std::mt19937_64 rng = make_rng(41, 60);
    std::uniform_int_distribution<int> label(0, 2), length(1, 50);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = length(rng);
        std::vector<int> yt(n), yp(n);
        for (int i = 0; i < n; ++i) {
            yt[i] = label(rng);
            yp[i] = label(rng);
        }
        EvalReport r = score_predictions(yt, yp);
        RefMetrics ref = brute_force(yt, yp);
        REQUIRE(std::abs(r.accuracy - ref.acc) < 1e-12);
        REQUIRE(std::abs(r.macro_f1 - ref.macro) < 1e-12);
        REQUIRE(std::abs(r.weighted_f1 - ref.weighted) < 1e-12);
        REQUIRE((r.accuracy >= 0 && r.accuracy <= 1));
        REQUIRE((r.macro_f1 >= 0 && r.macro_f1 <= 1));
        REQUIRE((r.weighted_f1 >= 0 && r.weighted_f1 <= 1));

        // accuracy equals support-weighted recall
        double wrecall = 0;
        for (int c = 0; c < 3; ++c)
            wrecall += r.per_label[c].recall * r.per_label[c].support / double(r.count);
        REQUIRE(std::abs(r.accuracy - wrecall) < 1e-12);

        // confusion totals and report shape
        long total = 0;
        for (int t = 0; t < 3; ++t)
            for (int p = 0; p < 3; ++p) total += r.confusion[t][p];
        REQUIRE(total == r.count);
    }
}

TEST_CASE("metrics ignore pair order", "[metrics][property]") {
    std::mt19937_64 rng = make_rng(43, 61);
    std::uniform_int_distribution<int> label(0, 2);
    std::vector<int> yt(40), yp(40);
    for (int i = 0; i < 40; ++i) {
        yt[i] = label(rng);
        yp[i] = label(rng);
    }
    EvalReport before = score_predictions(yt, yp);
    std::vector<int> idx(40);
    for (int i = 0; i < 40; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<int> yt2(40), yp2(40);
    for (int i = 0; i < 40; ++i) {
        yt2[i] = yt[idx[i]];
        yp2[i] = yp[idx[i]];
    }
    EvalReport after = score_predictions(yt2, yp2);
    CHECK(before.accuracy == after.accuracy);
    CHECK(before.macro_f1 == after.macro_f1);
    CHECK(before.weighted_f1 == after.weighted_f1);
}

TEST_CASE("rule-table predictions score a perfect accuracy", "[metrics]") {
    World w = gen_world(51);
    auto data = gen_dataset(w, 400, {0.162, 0.117, 0.721}, ReasonMode::none, 3);
    std::vector<int> yt, yp;
    for (const Example& e : data) {
        yt.push_back(e.label);
        yp.push_back(w.decide(e.query, e.service).label);
    }
    CHECK(accuracy(yt, yp) == 1.0);
    CHECK(macro_f1(yt, yp) == 1.0);
}

TEST_CASE("evaluate runs the student path and matches standalone metrics", "[metrics]") {
    World w = gen_world(53);
    auto data = gen_dataset(w, 60, {0.162, 0.117, 0.721}, ReasonMode::oracle, 5);

    EncoderConfig cfg;
    cfg.vocab = w.vocab.size();
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.max_len = 64;
    cfg.d_reason = 8;
    Encoder enc = Encoder::init(cfg, 9);

    EvalReport r = evaluate(enc, data);
    std::vector<int> yt, yp;
    for (const Example& e : data) {
        yt.push_back(e.label);
        Tensor logits = enc.classify(enc.encode(build_student_input(e.query, e.service)));
        yp.push_back(argmax_label(logits));
    }
    EvalReport byhand = score_predictions(yt, yp);
    CHECK(r.accuracy == byhand.accuracy);
    CHECK(r.macro_f1 == byhand.macro_f1);
    CHECK(r.weighted_f1 == byhand.weighted_f1);

    CHECK_THROWS_AS(evaluate(enc, {}), DataError);
}

TEST_CASE("a constant label-2 predictor scores the label-2 share", "[metrics]") {
    World w = gen_world(57);
    auto data = gen_dataset(w, 1000, {0.162, 0.117, 0.721}, ReasonMode::none, 7);

    EncoderConfig cfg;
    cfg.vocab = w.vocab.size();
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_len = 64;
    Encoder enc = Encoder::init(cfg, 1);
    std::fill(enc.head_w.values().begin(), enc.head_w.values().end(), 0.0);
    enc.head_b.values() = {0, 0, 5};

    long n2 = 0;
    for (const Example& e : data) n2 += e.label == 2;
    EvalReport r = evaluate(enc, data);
    CHECK(r.accuracy == Catch::Approx(n2 / 1000.0).margin(1e-15));
    const double f1_2 = r.per_label[2].f1;
    CHECK(r.macro_f1 == Catch::Approx(f1_2 / 3).margin(1e-12));
}

TEST_CASE("report serialization is shaped consistently", "[metrics]") {
    EvalReport r = score_predictions({0, 1, 2, 2}, {0, 1, 1, 2});
    nlohmann::json j = r.to_json();
    CHECK(j["count"] == 4);
    CHECK(j["confusion"].size() == 9);
    CHECK(j.contains("label2_f1"));

    const std::string header = EvalReport::csv_header();
    const std::string row = r.csv_row();
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
}
