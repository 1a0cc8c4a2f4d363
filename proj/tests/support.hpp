#pragma once

// Shared test utilities. The central-difference gradient oracle lives here
// and stays independent of the autograd implementation it checks: it only
// ever re-evaluates forward values under NoGradGuard.

#include <cmath>
#include <functional>
#include <vector>

#include "reenact/tensor.hpp"

namespace testsup {

// Central finite differences of a scalar-valued forward evaluation with
// respect to every element of x. f() must re-read x's current contents.
inline std::vector<double> numeric_grad(const std::function<double()>& f,
                                        reenact::Tensor& x, double h = 1e-6) {
    reenact::NoGradGuard ng;
    std::vector<double> g(static_cast<size_t>(x.numel()), 0.0);
    for (int64_t i = 0; i < x.numel(); ++i) {
        double saved = x.data()[i];
        x.data()[i] = saved + h;
        double fp = f();
        x.data()[i] = saved - h;
        double fm = f();
        x.data()[i] = saved;
        g[static_cast<size_t>(i)] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Norm-relative error between two gradient vectors. Structurally zero
// gradients (e.g. parameters the output is invariant to) compare as noise
// on both sides, so below a tiny norm the absolute error is returned.
template <typename VecA, typename VecB>
inline double rel_err(const VecA& a, const VecB& b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        num += d * d;
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) + std::sqrt(nb);
    if (denom < 1e-7) return std::sqrt(num);
    return std::sqrt(num) / denom;
}

// Runs a graph-recording forward once, backprops, and compares the analytic
// gradient of every listed parameter against central differences.
// Returns the worst relative error across parameters.
inline double gradcheck(const std::function<reenact::Tensor()>& forward,
                        std::vector<reenact::Tensor*> params, double h = 1e-6) {
    for (auto* p : params) p->zero_grad();
    reenact::Tensor loss = forward();
    loss.backward();
    auto value = [&]() { return forward().value(); };
    double worst = 0.0;
    for (auto* p : params) {
        std::vector<double> numeric = numeric_grad(value, *p, h);
        worst = std::max(worst, rel_err(p->grad(), numeric));
    }
    return worst;
}

}  // namespace testsup
