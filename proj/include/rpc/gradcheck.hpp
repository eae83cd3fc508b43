#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rpc/autodiff.hpp"

namespace rpc {

/// Scalar-valued function of several tensors, built on the given tape.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients against central differences for every
/// coordinate of every input. Relative error per coordinate is
/// |analytic - fd| / (|analytic| + |fd| + 1e-12). detach() results are pinned
/// to their base-point values during the perturbed evaluations, which is what
/// a stop-gradient means.
inline GradcheckResult finite_diff_gradcheck(const TapeFunction& f, std::vector<Tensor> inputs,
                                             double h = 1e-5) {
    if (!(h >= 1e-7 && h <= 1e-3)) {
        throw ParameterError("gradcheck step must lie in [1e-7, 1e-3], got " + std::to_string(h));
    }

    std::vector<Tensor> analytic;
    std::vector<Tensor> pinned;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& x : inputs) {
            vars.push_back(tape.variable(x));
        }
        Var y = f(tape, vars);
        if (!std::isfinite(y.item())) {
            throw NumericalError("gradcheck: f(x) is not finite");
        }
        tape.backward(y);
        for (const auto& v : vars) {
            analytic.push_back(tape.grad(v));
        }
        pinned = tape.detached_values();
    }

    auto evaluate = [&](const std::vector<Tensor>& xs) {
        Tape tape = Tape::replaying(pinned);
        std::vector<Var> vars;
        for (const auto& x : xs) {
            vars.push_back(tape.constant(x));
        }
        const double v = f(tape, vars).item();
        if (!std::isfinite(v)) {
            throw NumericalError("gradcheck: perturbed f(x) is not finite");
        }
        return v;
    };

    GradcheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double fp = evaluate(inputs);
            inputs[k][i] = orig - h;
            const double fm = evaluate(inputs);
            inputs[k][i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            const double rel = std::abs(a - fd) / (std::abs(a) + std::abs(fd) + 1e-12);
            ++result.coordinates;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_input = k;
                result.worst_index = i;
            }
        }
    }
    return result;
}

/// Single-input convenience overload.
inline double finite_diff_gradcheck(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x,
                                    double h = 1e-5) {
    TapeFunction g = [&f](Tape& t, std::span<const Var> v) { return f(t, v[0]); };
    return finite_diff_gradcheck(g, std::vector<Tensor>{x}, h).max_rel_error;
}

}  // namespace rpc
