#pragma once

#include <functional>
#include <vector>

#include "saeforge/autodiff.hpp"

namespace saeforge {

// Builds a scalar on the given tape from parameter handles bound to the
// supplied inputs.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Compares reverse-mode gradients against central differences:
// max over coordinates of |analytic - numeric| / max(|numeric|, floor), with
// floor = max(1e-8, 1e-6 * largest |numeric| entry).
// Throws std::domain_error when f produces a non-finite value and
// std::invalid_argument when step <= 0.
GradCheckResult finite_difference_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double step);

double finite_difference_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                               const Tensor<double>& x, double step);

}  // namespace saeforge
