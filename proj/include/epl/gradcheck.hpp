#pragma once

#include <cmath>
#include <functional>

#include "epl/autodiff.hpp"

namespace epl::ad {

template <typename T>
using ScalarFunction = std::function<Var<T>(const Var<T>&)>;

// Max over coordinates of |analytic - central| / (|analytic| + |central| + eps).
template <typename T>
double finite_diff_check(const ScalarFunction<T>& f, const Tensor<T>& point, double step,
                         double eps = 1e-6) {
    auto x = Var<T>::leaf(point);
    auto y = f(x);
    if (!y.value().all_finite()) throw NumericError("function is not finite at the check point");
    backward(y);
    const Tensor<T> analytic = x.grad();

    double worst = 0.0;
    Tensor<T> probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + static_cast<T>(step);
        const double up = f(Var<T>::constant(probe)).value()[0];
        probe[i] = orig - static_cast<T>(step);
        const double down = f(Var<T>::constant(probe)).value()[0];
        probe[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("function is not finite near the check point");
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic[i];
        worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + eps));
    }
    return worst;
}

}  // namespace epl::ad
