#pragma once

#include <doctest.h>

#include <algorithm>
#include <functional>
#include <vector>

#include "oscar/core/autograd.hpp"

namespace oscar::testing {

// Central finite differences against analytic gradients.
//
// `build` reconstructs the scalar loss from the leaves' *current* values, so
// the same closure serves both the analytic backward pass and the perturbed
// re-evaluations. Relative error uses max(|analytic|, |numeric|, floor) as the
// denominator, so near-zero gradient entries compare absolutely.
struct GradCheckResult {
    Real max_rel_err = 0.0;
    std::size_t checked = 0;
};

inline GradCheckResult grad_check(const std::function<Var()>& build,
                                  const std::vector<Var>& leaves, Real h = 1e-4,
                                  Real floor = 1e-6) {
    for (const auto& l : leaves) {
        l->grad = Tensor{};
        l->requires_grad = true;
    }
    Var loss = build();
    backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (const auto& l : leaves) {
        l->ensure_grad();
        analytic.push_back(l->grad);
    }

    GradCheckResult res;
    NoGradGuard ng;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& l = leaves[li];
        for (std::size_t i = 0; i < l->value.numel(); ++i) {
            Real orig = l->value[i];
            l->value[i] = orig + h;
            Real fp = build()->value.item();
            l->value[i] = orig - h;
            Real fm = build()->value.item();
            l->value[i] = orig;
            Real num = (fp - fm) / (2 * h);
            Real ana = analytic[li][i];
            Real denom = std::max({std::abs(num), std::abs(ana), floor});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(num - ana) / denom);
            ++res.checked;
        }
    }
    return res;
}

inline void require_grad_match(const std::function<Var()>& build,
                               const std::vector<Var>& leaves, Real tol = 1e-4,
                               Real h = 1e-4) {
    auto res = grad_check(build, leaves, h);
    INFO("max relative error " << res.max_rel_err << " over " << res.checked
                               << " entries");
    REQUIRE(res.max_rel_err < tol);
}

}  // namespace oscar::testing
