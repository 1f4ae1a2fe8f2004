#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;  // number of scalar inputs probed
    bool pass = false;
};

// Deviations are measured relative to max(|analytic|, |numeric|, floor) so
// that entries whose true gradient is ~0 are judged on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-3;

// Compares tape gradients of a scalar function against central finite
// differences for every element of every input. Inputs must be grad-requiring
// leaves; their values are restored and their gradients cleared afterwards.
inline GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                  std::vector<Tensor> inputs, double step = 1e-4, double tol = 1e-4) {
    if (!(step > 0.0) || !(tol > 0.0)) throw ContractError("tensor-core", "grad_check: step and tol must be positive");
    for (const auto& x : inputs) {
        if (!x.is_leaf() || !x.requires_grad()) {
            throw ContractError("tensor-core", "grad_check: inputs must be grad-requiring leaves");
        }
    }
    for (auto& x : inputs) x.zero_grad();
    Tensor y = f(inputs);
    if (y.size() != 1) throw ContractError("tensor-core", "grad_check: function output has shape " + shape_str(y.shape()));
    backward(y);

    GradCheckReport report;
    for (auto& x : inputs) {
        std::vector<double> analytic(x.size(), 0.0);
        if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
        auto vals = x.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + step;
            const double up = f(inputs).item();
            vals[i] = saved - step;
            const double down = f(inputs).item();
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradCheckFloor});
            report.max_rel_error = std::max(report.max_rel_error, std::abs(analytic[i] - numeric) / denom);
            ++report.checked;
        }
        x.zero_grad();
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step = 1e-4,
                                  double tol = 1e-4) {
    return grad_check([&f](const std::vector<Tensor>& in) { return f(in[0]); }, std::vector<Tensor>{std::move(x)},
                      step, tol);
}

}  // namespace vfm4sdg
