#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fsdet/autodiff.hpp"

namespace fsdet::nn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_coordinate;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central finite differences against reverse-mode gradients, in double
// precision. `fn` rebuilds the scalar loss from the current leaf values;
// `leaves` are the differentiable inputs that get perturbed coordinate by
// coordinate. Error metric per coordinate: |a - n| / max(1, |a|, |n|).
// Throws if an analytic gradient coordinate is non-finite.
GradCheckResult gradcheck(const std::function<ad::Var()>& fn, std::vector<ad::Var> leaves,
                          double epsilon = 1e-5,
                          const std::vector<std::string>& leaf_names = {});

}  // namespace fsdet::nn
