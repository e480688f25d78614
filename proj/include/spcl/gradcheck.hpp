#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spcl/autodiff.hpp"

namespace spcl {

/// Largest per-element relative error between tape gradients and central
/// finite differences of `loss_fn` over the given leaf tensors. `loss_fn`
/// must rebuild the scalar loss from the leaves' current values; finite
/// differences perturb the leaf values directly and evaluate without a
/// tape. Error is |a - n| / max(1, |a|, |n|). When `sample_per_leaf` > 0,
/// only that many elements per leaf are probed (deterministically chosen
/// from probe_seed); 0 probes every element.
double gradcheck_max_rel_error(const std::function<Tensor()>& loss_fn,
                               const std::vector<Tensor>& leaves, double step = 1e-5,
                               long sample_per_leaf = 0, std::uint64_t probe_seed = 0);

struct GradCheckReport {
    std::string name;
    int trials = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Runs every differentiable operation plus the composed training
/// objective against central finite differences, `trials` random
/// instances each. Covers the suite behind the gradcheck command.
std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, int trials);

}  // namespace spcl
