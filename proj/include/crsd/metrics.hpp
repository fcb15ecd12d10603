#pragma once

// Accuracy, macro-F1, weighted-F1, and the batch evaluator. Conventions:
// F1 = 0 when P + R = 0, labels absent from both vectors still contribute 0
// to the macro mean, argmax ties break to the lowest label.

#include <string>
#include <vector>

#include <json.hpp>

#include "crsd/common.hpp"
#include "crsd/encoder.hpp"
#include "crsd/world.hpp"

namespace crsd {

struct LabelStats {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;
};

struct EvalReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    std::array<LabelStats, kNumLabels> per_label{};
    std::array<std::array<long, kNumLabels>, kNumLabels> confusion{};  // [true][pred]
    long count = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"accuracy", accuracy},
                         {"macro_f1", macro_f1},
                         {"weighted_f1", weighted_f1},
                         {"count", count}};
        for (int c = 0; c < kNumLabels; ++c) {
            const std::string k = "label" + std::to_string(c);
            j[k + "_precision"] = per_label[c].precision;
            j[k + "_recall"] = per_label[c].recall;
            j[k + "_f1"] = per_label[c].f1;
            j[k + "_support"] = per_label[c].support;
        }
        nlohmann::json cm = nlohmann::json::array();
        for (int t = 0; t < kNumLabels; ++t)
            for (int p = 0; p < kNumLabels; ++p) cm.push_back(confusion[t][p]);
        j["confusion"] = cm;
        return j;
    }

    static std::string csv_header() {
        std::string h = "accuracy,macro_f1,weighted_f1,count";
        for (int c = 0; c < kNumLabels; ++c) {
            const std::string k = ",label" + std::to_string(c);
            h += k + "_precision" + k + "_recall" + k + "_f1" + k + "_support";
        }
        for (int t = 0; t < kNumLabels; ++t)
            for (int p = 0; p < kNumLabels; ++p)
                h += ",cm_" + std::to_string(t) + std::to_string(p);
        return h;
    }

    std::string csv_row() const {
        char buf[64];
        std::string row;
        auto num = [&](double v) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            row += buf;
        };
        num(accuracy);
        row += ',';
        num(macro_f1);
        row += ',';
        num(weighted_f1);
        row += ',' + std::to_string(count);
        for (int c = 0; c < kNumLabels; ++c) {
            row += ',';
            num(per_label[c].precision);
            row += ',';
            num(per_label[c].recall);
            row += ',';
            num(per_label[c].f1);
            row += ',' + std::to_string(per_label[c].support);
        }
        for (int t = 0; t < kNumLabels; ++t)
            for (int p = 0; p < kNumLabels; ++p) row += ',' + std::to_string(confusion[t][p]);
        return row;
    }
};

namespace detail {
inline void check_label_vectors(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.empty()) throw DataError("metrics: empty input");
    if (y_true.size() != y_pred.size())
        throw DataError("metrics: length mismatch, " + std::to_string(y_true.size()) + " vs " +
                        std::to_string(y_pred.size()));
    for (int v : y_true)
        if (v < 0 || v >= kNumLabels) throw DataError("metrics: label " + std::to_string(v));
    for (int v : y_pred)
        if (v < 0 || v >= kNumLabels) throw DataError("metrics: label " + std::to_string(v));
}
}  // namespace detail

inline EvalReport score_predictions(const std::vector<int>& y_true,
                                    const std::vector<int>& y_pred) {
    detail::check_label_vectors(y_true, y_pred);
    EvalReport r;
    r.count = static_cast<long>(y_true.size());
    for (size_t i = 0; i < y_true.size(); ++i) ++r.confusion[y_true[i]][y_pred[i]];

    long correct = 0;
    for (int c = 0; c < kNumLabels; ++c) correct += r.confusion[c][c];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);

    for (int c = 0; c < kNumLabels; ++c) {
        long tp = r.confusion[c][c], fp = 0, fn = 0;
        for (int o = 0; o < kNumLabels; ++o) {
            if (o == c) continue;
            fp += r.confusion[o][c];
            fn += r.confusion[c][o];
        }
        LabelStats& s = r.per_label[c];
        s.support = tp + fn;
        s.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
        s.recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
        s.f1 = (s.precision + s.recall) > 0.0
                   ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                   : 0.0;
        r.macro_f1 += s.f1 / kNumLabels;
        r.weighted_f1 += s.f1 * static_cast<double>(s.support) / static_cast<double>(r.count);
    }
    return r;
}

inline double accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    return score_predictions(y_true, y_pred).accuracy;
}
inline double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    return score_predictions(y_true, y_pred).macro_f1;
}
inline double weighted_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    return score_predictions(y_true, y_pred).weighted_f1;
}

// Student-configuration evaluation: the model never sees reasons here.
inline EvalReport evaluate(const Encoder& enc, const std::vector<Example>& dataset,
                           int student_max_len = 64) {
    if (dataset.empty()) throw DataError("evaluate: empty dataset");
    NoGradScope plain;
    std::vector<int> y_true, y_pred;
    y_true.reserve(dataset.size());
    y_pred.reserve(dataset.size());
    for (const Example& e : dataset) {
        const std::vector<int> seq =
            build_student_input(e.query, e.service, student_max_len, enc.cfg.vocab);
        Tensor logits = enc.classify(enc.encode(seq));
        y_true.push_back(e.label);
        y_pred.push_back(argmax_label(logits));
    }
    return score_predictions(y_true, y_pred);
}

}  // namespace crsd
