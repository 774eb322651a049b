#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "refgeo/tensor.hpp"

namespace refgeo {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Compares the tape gradient of a scalar function against central
// differences, coordinate by coordinate:
//   max_i |analytic_i - central_i| / (|central_i| + eps)
// f receives a fresh requires_grad leaf on every call.
inline GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                         const std::vector<double>& x, double h = 1e-5,
                                         double eps = 1e-8) {
    const Shape shape{x.size()};
    GradCheckResult res;
    {
        Tensor leaf(shape, x, true);
        const Tensor y = f(leaf);
        if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: f(x) is not finite");
        res.analytic = backward(y).of(leaf);
    }
    res.numeric.resize(x.size());
    std::vector<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double fp = f(Tensor(shape, probe)).item();
        probe[i] = x[i] - h;
        const double fm = f(Tensor(shape, probe)).item();
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_check: f is not finite around index " + std::to_string(i));
        }
        res.numeric[i] = (fp - fm) / (2.0 * h);
        const double err = std::abs(res.analytic[i] - res.numeric[i]) / (std::abs(res.numeric[i]) + eps);
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst_index = i;
        }
    }
    return res;
}

}  // namespace refgeo
