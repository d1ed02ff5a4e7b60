#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mendkit/autodiff.hpp"

namespace mendkit {

// Central finite differences vs tape gradients, 64-bit only. The builder gets
// a fresh tape plus one staged leaf per parameter (same order as `params`)
// and must return the scalar loss node. It must be deterministic: any
// randomness has to be re-seeded identically on every call.

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::vector<GradCheckEntry> per_param;
};

using GradCheckLossBuilder = std::function<Tape<double>::NodeId(
    Tape<double>&, const std::vector<Tape<double>::NodeId>&)>;

inline double grad_check_rel_err(double a, double b, double floor = 1e-6) {
    double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

inline GradCheckReport grad_check(const GradCheckLossBuilder& build,
                                  std::vector<NamedParam<double>> params, double h = 1e-5,
                                  double rel_floor = 1e-6) {
    auto eval_loss = [&](bool want_grads, std::vector<Tensor<double>>* grads_out) {
        Tape<double> tape;
        std::vector<Tape<double>::NodeId> ids;
        ids.reserve(params.size());
        for (auto& p : params) {
            Tensor<double> v = *p.tensor;
            v.requires_grad = want_grads;
            ids.push_back(tape.leaf(std::move(v)));
        }
        auto loss = build(tape, ids);
        if (tape.value(loss).size() != 1)
            throw DimensionError("grad_check: loss must be scalar");
        double loss_val = tape.value(loss).data[0];
        if (want_grads) {
            tape.backward(loss);
            grads_out->clear();
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor<double> g = tape.grad(ids[i]);
                if (g.size() == 0)
                    g = Tensor<double>::zeros(params[i].tensor->shape);
                grads_out->push_back(std::move(g));
            }
        }
        return loss_val;
    };

    std::vector<Tensor<double>> analytic;
    eval_loss(true, &analytic);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        GradCheckEntry entry;
        entry.name = params[pi].name;
        Tensor<double>& p = *params[pi].tensor;
        for (std::size_t i = 0; i < p.size(); ++i) {
            double saved = p.data[i];
            p.data[i] = saved + h;
            double lp = eval_loss(false, nullptr);
            p.data[i] = saved - h;
            double lm = eval_loss(false, nullptr);
            p.data[i] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double an = analytic[pi].data[i];
            entry.max_rel_err = std::max(entry.max_rel_err, grad_check_rel_err(an, fd, rel_floor));
            entry.max_abs_err = std::max(entry.max_abs_err, std::abs(an - fd));
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.max_abs_err = std::max(report.max_abs_err, entry.max_abs_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

} // namespace mendkit
