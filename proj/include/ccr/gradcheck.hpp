#pragma once

// Central finite-difference verification of analytic gradients, used by
// the `gradcheck` command and the test suites.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ccr/model.hpp"
#include "ccr/tensor.hpp"

namespace ccr {

struct GradcheckGroup {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
};

struct GradcheckReport {
    std::string suite;
    double tolerance = 1e-4;
    std::vector<GradcheckGroup> groups;

    double max_rel_error() const;
    bool passed() const { return max_rel_error() < tolerance; }
};

// |a − n| / max(|a|, |n|, 1e-6)
double relative_error(double analytic, double numeric);

// Differentiates `objective` (a scalar built from `params`) by reverse mode
// and by central differences with step h, per parameter tensor.
std::vector<GradcheckGroup> finite_difference_check(const std::function<Tensor()>& objective,
                                                    const std::vector<std::pair<std::string, Tensor>>& params,
                                                    double h = 1e-5);

// d=4, M=8, m=3 model with a two-conv stack and one categorical column.
Model reduced_model(std::uint64_t seed);

// Whole-model check on the reduced configuration. In straight-through mode
// the finite differences are taken with the channel ranges pinned at the
// base point, which is the function that mode differentiates.
GradcheckReport check_model_gradients(std::uint64_t seed, RescaleGrad mode, double h = 1e-5);

// Every tensor op on small random inputs.
GradcheckReport check_op_gradients(std::uint64_t seed, double h = 1e-5);

}  // namespace ccr
