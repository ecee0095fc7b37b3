#pragma once

// Central finite-difference gradient oracle. Intentionally independent of the
// tape: the probe evaluations run under NoGradGuard and only compare scalar
// forward values, so it can vouch for every backward implementation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rcp/errors.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// f must rebuild the loss graph from the current parameter values on every
// call and be deterministic (fix all random streams inside f). h is the
// central-difference step; relative error uses denominator
// max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                         std::vector<Tensor> params, double h = 1e-5) {
    if (h <= 0.0) throw NumericError("finite_diff_check: step must be positive");

    Tensor loss = f();
    if (!std::isfinite(loss.item()))
        throw NumericError("finite_diff_check: loss is not finite at the base point");
    for (Tensor& p : params) p.zero_grad();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) analytic.push_back(p.grad());

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<double>& vals = params[pi].values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            double fp, fm;
            {
                NoGradGuard ng;
                vals[i] = saved + h;
                fp = f().item();
                vals[i] = saved - h;
                fm = f().item();
            }
            vals[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_check: non-finite loss during probe of param " +
                                   std::to_string(pi) + " coord " + std::to_string(i));
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_coord = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace rcp
