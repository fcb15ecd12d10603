#pragma once

// Central-difference verification of tape gradients. The loss closure must
// rebuild the forward pass from the current parameter values on every call;
// it is invoked once under a recording graph and many times plain.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "crsd/tensor.hpp"

namespace crsd {

struct GradCheckRow {
    std::string name;
    long index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;  // worst entry per parameter
    GradCheckRow worst;
    double max_rel_err = 0.0;
    long entries_checked = 0;

    bool ok(double tol) const { return max_rel_err < tol; }
};

inline double grad_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// params are (name, tensor) pairs; every tensor must have requires_grad set.
// sample_cap < 0 checks every entry, otherwise an evenly spaced subset.
inline GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor>>& params,
                                  const std::function<Tensor()>& loss_fn, double h = 1e-5,
                                  long sample_cap = -1) {
    for (auto& [name, p] : params) {
        if (!p.requires_grad())
            throw std::logic_error("grad_check: parameter " + name + " has requires_grad unset");
        p.zero_grad();
    }

    Graph g;
    {
        GraphScope scope(g);
        Tensor loss = loss_fn();
        g.backward(loss);
    }

    GradCheckReport report;
    for (auto& [name, p] : params) {
        GradCheckRow row;
        row.name = name;
        const long n = p.size();
        long stride = 1;
        if (sample_cap > 0 && n > sample_cap) stride = (n + sample_cap - 1) / sample_cap;
        for (long i = 0; i < n; i += stride) {
            const double saved = p.values()[i];
            p.values()[i] = saved + h;
            const double up = loss_fn().item();
            p.values()[i] = saved - h;
            const double down = loss_fn().item();
            p.values()[i] = saved;

            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p.grad()[i];
            const double rel = grad_rel_err(analytic, numeric);
            ++report.entries_checked;
            if (row.index < 0 || rel > row.rel_err)
                row = GradCheckRow{name, i, analytic, numeric, rel};
        }
        if (row.index >= 0) {
            report.rows.push_back(row);
            if (row.rel_err >= report.max_rel_err) {
                report.max_rel_err = row.rel_err;
                report.worst = row;
            }
        }
    }
    return report;
}

}  // namespace crsd
