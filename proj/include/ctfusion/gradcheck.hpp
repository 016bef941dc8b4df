#pragma once

// Central finite-difference oracle for reverse-mode gradients. Stays
// independent of any specific op implementation: it only perturbs leaf data
// and re-runs the supplied function.

#include "ctfusion/tensor.hpp"

#include <limits>

namespace ctfusion {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// f: callable(const std::vector<Tensor<double>>&) -> scalar Tensor<double>.
// Must rebuild its graph from the given leaves on every call. `masks`, when
// present, selects which coordinates to probe (e.g. to skip relu kinks).
// Returns the max relative error between autograd and central differences.
template <class F>
double finite_diff_check(F&& f, std::vector<Tensor<double>> inputs, double eps,
                         const std::vector<std::vector<char>>* masks = nullptr) {
    if (eps < 1e-7 || eps > 1e-3) throw ArgError("finite_diff_check: eps must lie in [1e-7, 1e-3]");
    for (auto& in : inputs) in.clear_grad();
    Tensor<double> y = f(inputs);
    if (y.numel() != 1) throw ArgError("finite_diff_check: f must be scalar-valued");
    y.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs)
        analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.data().size(), 0.0));

    double worst = 0.0;
    NoGradGuard ng;
    for (size_t t = 0; t < inputs.size(); ++t) {
        auto& vals = inputs[t].data();
        for (size_t i = 0; i < vals.size(); ++i) {
            if (masks && !(*masks)[t].empty() && !(*masks)[t][i]) continue;
            double keep = vals[i];
            vals[i] = keep + eps;
            double fp = f(inputs).item();
            vals[i] = keep - eps;
            double fm = f(inputs).item();
            vals[i] = keep;
            double fd = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_err(fd, analytic[t][i]));
        }
    }
    return worst;
}

// Same oracle probing at most `per_tensor` randomly chosen coordinates per
// input; the practical form for whole-model checks.
template <class F>
double finite_diff_check_sampled(F&& f, std::vector<Tensor<double>> inputs, double eps,
                                 int per_tensor, Rng& rng) {
    std::vector<std::vector<char>> masks;
    masks.reserve(inputs.size());
    for (const auto& in : inputs) {
        std::vector<char> m(in.data().size(), 0);
        int64_t n = static_cast<int64_t>(m.size());
        if (n <= per_tensor) {
            std::fill(m.begin(), m.end(), 1);
        } else {
            for (int s = 0; s < per_tensor; ++s) m[static_cast<size_t>(rng.randint(n))] = 1;
        }
        masks.push_back(std::move(m));
    }
    return finite_diff_check(std::forward<F>(f), std::move(inputs), eps, &masks);
}

}  // namespace ctfusion
