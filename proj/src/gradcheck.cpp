#include "saeforge/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace saeforge {

namespace {

constexpr double kRelEps = 1e-8;
// Coordinates smaller than this fraction of the largest gradient entry sit
// below the roundoff floor of a central difference.
constexpr double kScaleFloor = 1e-6;

double evaluate(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) {
        vars.push_back(tape.constant(x));
    }
    const double v = f(tape, vars).value().item();
    if (!std::isfinite(v)) {
        throw std::domain_error("finite_difference_check: function value is not finite");
    }
    return v;
}

}  // namespace

GradCheckResult finite_difference_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("finite_difference_check: step must be positive");
    }

    Tape<double> tape;
    std::vector<Var<double>> params;
    for (const auto& x : inputs) {
        params.push_back(tape.parameter(x));
    }
    const Var<double> loss = f(tape, params);
    if (!std::isfinite(loss.value().item())) {
        throw std::domain_error("finite_difference_check: function value is not finite");
    }
    const auto grads = tape.backward(loss);

    std::vector<std::vector<double>> numeric(inputs.size());
    double largest = 0.0;
    std::vector<Tensor<double>> probe = inputs;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        numeric[p].resize(inputs[p].numel());
        for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
            const double orig = inputs[p][i];
            probe[p][i] = orig + step;
            const double up = evaluate(f, probe);
            probe[p][i] = orig - step;
            const double down = evaluate(f, probe);
            probe[p][i] = orig;
            numeric[p][i] = (up - down) / (2.0 * step);
            largest = std::max(largest, std::abs(numeric[p][i]));
        }
    }

    const double floor = std::max(kRelEps, kScaleFloor * largest);
    GradCheckResult result;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        const Tensor<double>& analytic = grads.at(params[p].id());
        for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
            const double n = numeric[p][i];
            const double err = std::abs(analytic[i] - n) / std::max(std::abs(n), floor);
            if (err > result.max_rel_error || (p == 0 && i == 0)) {
                result.max_rel_error = err;
                result.worst_input = p;
                result.worst_index = i;
                result.worst_analytic = analytic[i];
                result.worst_numeric = n;
            }
        }
    }
    return result;
}

double finite_difference_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                               const Tensor<double>& x, double step) {
    const ScalarFn wrapped = [&f](Tape<double>& tape, const std::vector<Var<double>>& vars) {
        return f(tape, vars.front());
    };
    return finite_difference_check(wrapped, {x}, step).max_rel_error;
}

}  // namespace saeforge
