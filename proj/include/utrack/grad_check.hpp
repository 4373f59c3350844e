#pragma once

#include <functional>
#include <vector>

#include "utrack/tape.hpp"

namespace utrack {

// Builds a scalar computation on the given tape from one leaf per entry of
// the evaluation point.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t arg = 0;    // which input array held the worst coordinate
    std::size_t index = 0;  // flat index of that coordinate
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference comparison of reverse-mode gradients, coordinate by
// coordinate over every entry of `point`. Relative error uses the
// denominator max(1, |analytic|, |numeric|). Non-finite evaluations at the
// perturbed points raise NumericError.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array>& point, double eps = 1e-6);

}  // namespace utrack
