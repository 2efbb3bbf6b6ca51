#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "stsr/ops.hpp"

namespace stsr {

// Compares reverse-mode gradients of a scalar-valued f against central finite
// differences at x. Returns the max over coordinates of
// |autodiff - central| / max(1, |central|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw DomainError("grad_check: eps must be in (0, 1e-2]");
    Tensor leaf(x.shape(), x.values());
    leaf.set_requires_grad();
    Tensor y = f(leaf);
    if (y.numel() != 1) throw DimensionError("grad_check: f must return a scalar");
    backward(y);
    Tensor g = leaf.grad();

    double max_err = 0.0;
    NoGradGuard ng;
    std::vector<double> vals = x.values();
    for (int i = 0; i < x.numel(); ++i) {
        double orig = vals[i];
        vals[i] = orig + eps;
        double fp = f(Tensor(x.shape(), vals)).value();
        vals[i] = orig - eps;
        double fm = f(Tensor(x.shape(), vals)).value();
        vals[i] = orig;
        double cd = (fp - fm) / (2.0 * eps);
        double err = std::abs(g.at(i) - cd) / std::max(1.0, std::abs(cd));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// Same comparison for one parameter tensor of a larger model: `loss_fn`
// re-evaluates the loss after the parameter payload has been swapped, and
// `autodiff_grad` is the adjoint already obtained from one backward pass.
// `stride` checks every stride-th coordinate (1 = all).
inline double grad_check_param(const std::function<double()>& loss_fn, Tensor& param,
                               const std::vector<double>& autodiff_grad, double eps = 1e-5,
                               int stride = 1) {
    if (!(eps > 0.0 && eps <= 1e-2))
        throw DomainError("grad_check_param: eps must be in (0, 1e-2]");
    if (stride < 1) throw DomainError("grad_check_param: stride must be >= 1");
    NoGradGuard ng;
    std::vector<double> vals = param.values();
    double max_err = 0.0;
    for (int i = 0; i < param.numel(); i += stride) {
        double orig = vals[i];
        vals[i] = orig + eps;
        param.set_values(vals);
        double fp = loss_fn();
        vals[i] = orig - eps;
        param.set_values(vals);
        double fm = loss_fn();
        vals[i] = orig;
        double cd = (fp - fm) / (2.0 * eps);
        double ad = autodiff_grad.empty() ? 0.0 : autodiff_grad[static_cast<std::size_t>(i)];
        double err = std::abs(ad - cd) / std::max(1.0, std::abs(cd));
        max_err = std::max(max_err, err);
    }
    param.set_values(vals);
    return max_err;
}

}  // namespace stsr
