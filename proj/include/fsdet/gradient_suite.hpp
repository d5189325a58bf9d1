#pragma once

#include <string>
#include <vector>

namespace fsdet::nn {

struct GradSuiteRow {
    std::string op;
    double max_rel_error = 0.0;
    double threshold = 0.0;
    std::string worst_coordinate;
    bool pass = false;
};

// The registered finite-difference checks: every differentiable operation in
// the stack plus the composed per-image training loss, each on a small
// double-precision instance.
std::vector<GradSuiteRow> run_gradient_suite();

}  // namespace fsdet::nn
