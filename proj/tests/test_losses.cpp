#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "crsd/encoder.hpp"
#include "crsd/grad_check.hpp"
#include "crsd/losses.hpp"

using namespace crsd;

TEST_CASE("classification cross-entropy", "[losses]") {
    CHECK(classification_ce(Tensor::zeros({2, 3}), {0, 1}).item() ==
          Catch::Approx(std::log(3.0)).margin(1e-12));

    Tensor confident = Tensor::zeros({2, 3});
    confident.values() = {20, 0, 0, 0, 0, 20};
    CHECK(classification_ce(confident, {0, 2}).item() < 1e-8);

    // hand-rolled log-sum-exp on a random batch
    std::mt19937_64 rng = make_rng(3, 50);
    Tensor logits = Tensor::randn({5, 3}, rng, 2.0);
    std::vector<int> labels{0, 2, 1, 1, 0};
    double expect = 0;
    for (int i = 0; i < 5; ++i) {
        double mx = std::max({logits.at(i, 0), logits.at(i, 1), logits.at(i, 2)});
        double s = 0;
        for (int j = 0; j < 3; ++j) s += std::exp(logits.at(i, j) - mx);
        expect += mx + std::log(s) - logits.at(i, labels[i]);
    }
    expect /= 5;
    CHECK(classification_ce(logits, labels).item() == Catch::Approx(expect).margin(1e-12));

    CHECK(classification_ce(logits, labels, false).item() ==
          Catch::Approx(expect * 5).margin(1e-12));
}

TEST_CASE("cosine alignment loss hits the textbook values", "[losses]") {
    Tensor a = Tensor::from({1, 3}, {1, 2, 3});
    CHECK(cosine_align_loss(a, a).item() == Catch::Approx(0.0).margin(1e-12));

    Tensor neg = mul(a, -2.0);
    CHECK(cosine_align_loss(a, neg).item() == Catch::Approx(2.0).margin(1e-12));

    Tensor e1 = Tensor::from({1, 2}, {1, 0});
    Tensor e2 = Tensor::from({1, 2}, {0, 1});
    CHECK(cosine_align_loss(e1, e2).item() == Catch::Approx(1.0).margin(1e-12));

    // zero rows fall back to cosine 0 through the norm guard
    Tensor zero = Tensor::zeros({1, 3});
    CHECK(cosine_align_loss(zero, a).item() == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::isfinite(cosine_align_loss(zero, zero).item()));
}

TEST_CASE("baseline composite is ce plus scaled cosine", "[losses]") {
    Tensor ce = Tensor::scalar(1.0);
    Tensor cos = Tensor::scalar(0.5);
    CHECK(baseline_total(ce, cos, 0.1).item() == Catch::Approx(1.05).margin(1e-15));
    CHECK(baseline_total(ce, cos, 0.0).item() == 1.0);
    CHECK_THROWS_AS(baseline_total(ce, cos, -0.1), ConfigError);
}

TEST_CASE("info_nce closed forms", "[losses]") {
    Tensor single = Tensor::from({1, 4}, {0.3, -1.2, 0.5, 2.0});
    CHECK(info_nce(single, single, 0.05).item() == 0.0);

    Tensor same = Tensor::zeros({4, 3});
    for (int i = 0; i < 4; ++i) same.values()[i * 3] = 1.0;  // all rows e1
    CHECK(info_nce(same, same, 0.05).item() == Catch::Approx(std::log(4.0)).margin(1e-12));

    Tensor ortho = Tensor::from({2, 2}, {1, 0, 0, 1});
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(info_nce(ortho, ortho, 1.0).item() == Catch::Approx(expect).margin(1e-12));

    CHECK_THROWS_AS(info_nce(ortho, ortho, 0.0), ConfigError);
    CHECK_THROWS_AS(info_nce(ortho, Tensor::zeros({3, 2}), 1.0), std::invalid_argument);

    // sum mode is N times the mean here
    CHECK(info_nce(ortho, ortho, 1.0, false).item() ==
          Catch::Approx(2 * expect).margin(1e-12));
}

TEST_CASE("info_nce stays inside its bounds", "[losses][property]") {
    std::mt19937_64 rng = make_rng(7, 51);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 1 + static_cast<int>(trial % 6);
        Tensor cls = Tensor::randn({n, 5}, rng, 1.5);
        Tensor cls_r = Tensor::randn({n, 5}, rng, 1.5);
        const double tau = 0.05 + 0.2 * (trial % 4);
        const double v = info_nce(cls, cls_r, tau).item();
        REQUIRE(v >= 0.0);
        REQUIRE(v <= std::log(static_cast<double>(n)) + 2.0 / tau);
    }
}

TEST_CASE("info_nce ignores positive row rescaling", "[losses][property]") {
    std::mt19937_64 rng = make_rng(11, 52);
    Tensor cls = Tensor::randn({6, 8}, rng, 1.0);
    Tensor cls_r = Tensor::randn({6, 8}, rng, 1.0);
    const double base = info_nce(cls, cls_r, 0.05).item();

    std::uniform_real_distribution<double> scale(0.1, 9.0);
    Tensor cls2 = Tensor::zeros({6, 8});
    Tensor cls_r2 = Tensor::zeros({6, 8});
    for (int i = 0; i < 6; ++i) {
        const double sa = scale(rng), sb = scale(rng);
        for (int j = 0; j < 8; ++j) {
            cls2.values()[i * 8 + j] = cls.at(i, j) * sa;
            cls_r2.values()[i * 8 + j] = cls_r.at(i, j) * sb;
        }
    }
    CHECK(info_nce(cls2, cls_r2, 0.05).item() == Catch::Approx(base).margin(1e-10));
}

TEST_CASE("raising a positive-pair similarity strictly lowers info_nce", "[losses][property]") {
    std::mt19937_64 rng = make_rng(13, 53);
    std::uniform_real_distribution<double> u(-0.9, 0.8);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + trial % 5;
        Tensor sims = Tensor::zeros({n, n});
        for (long i = 0; i < sims.size(); ++i) sims.values()[i] = u(rng);
        const double before = info_nce_from_sims(sims, 0.5).item();
        const int i = trial % n;
        sims.values()[i * n + i] += 0.1;
        const double after = info_nce_from_sims(sims, 0.5).item();
        REQUIRE(after < before);
    }
}

TEST_CASE("crsd composite is exactly linear", "[losses]") {
    Tensor a = Tensor::scalar(1.0), b = Tensor::scalar(2.0), c = Tensor::scalar(3.0);
    CHECK(crsd_total(a, b, c).item() == Catch::Approx(1.05).margin(1e-15));
    CHECK(crsd_total(a, b, c, 0.0, 0.0).item() == 1.0);
    CHECK(crsd_total(a, b, c, 0.0, 0.01).item() == Catch::Approx(1.03).margin(1e-15));

    std::mt19937_64 rng = make_rng(17, 54);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    for (int t = 0; t < 50; ++t) {
        const double x = u(rng), y = u(rng), z = u(rng), g = u(rng) / 4, d = u(rng) / 4;
        CHECK(crsd_total(Tensor::scalar(x), Tensor::scalar(y), Tensor::scalar(z), g, d).item() ==
              Catch::Approx(x + g * y + d * z).margin(1e-12));
        CHECK(baseline_total(Tensor::scalar(x), Tensor::scalar(y), g).item() ==
              Catch::Approx(x + g * y).margin(1e-12));
    }
}

TEST_CASE("loss gradients match central differences", "[losses]") {
    std::mt19937_64 rng = make_rng(19, 55);
    Tensor cls = Tensor::randn({4, 6}, rng, 1.0);
    Tensor cls_r = Tensor::randn({4, 6}, rng, 1.0);
    cls.set_requires_grad();
    cls_r.set_requires_grad();
    std::vector<std::pair<std::string, Tensor>> params{{"cls", cls}, {"cls_r", cls_r}};

    // tau well above the saturation regime keeps the surface's curvature
    // within finite-difference resolution
    auto nce = grad_check(params, [&] { return info_nce(cls, cls_r, 0.5); }, 1e-5);
    CHECK(nce.max_rel_err < 1e-4);

    auto cosine = grad_check(params, [&] { return cosine_align_loss(cls, cls_r); }, 1e-5);
    CHECK(cosine.max_rel_err < 1e-4);
}

TEST_CASE("full composite loss gradients on a 2-example batch", "[losses]") {
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
    const std::vector<int> labels{2, 0};

    auto loss_fn = [&]() {
        std::vector<Tensor> student_rows, teacher_rows;
        for (int i = 0; i < 2; ++i) {
            student_rows.push_back(
                enc.encode(build_student_input(queries[i], services[i], 12, cfg.vocab)));
            teacher_rows.push_back(enc.encode(
                build_teacher_input(queries[i], services[i], reasons[i], 12, cfg.vocab)));
        }
        Tensor cls = concat_rows(student_rows);
        Tensor cls_r = concat_rows(teacher_rows);
        Tensor l_sce = classification_ce(enc.classify(cls), labels);
        Tensor l_tce = classification_ce(enc.classify(cls_r), labels);
        Tensor l_align = info_nce(cls, cls_r, 0.2);
        return crsd_total(l_sce, l_tce, l_align, 0.01, 0.01);
    };

    auto params = enc.named_params();
    auto report = grad_check(params, loss_fn, 1e-5);
    INFO("worst " << report.worst.name << "[" << report.worst.index << "] analytic "
                  << report.worst.analytic << " numeric " << report.worst.numeric);
    CHECK(report.max_rel_err < 1e-4);
}
