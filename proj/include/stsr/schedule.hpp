#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stsr/ops.hpp"
#include "stsr/rng.hpp"
#include "stsr/types.hpp"

namespace stsr {

// Forward-process variance schedule and the quantities derived from it.
// Timesteps are 1-based: t runs over 1..T.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;           // beta_t
    std::vector<double> alpha;          // 1 - beta_t
    std::vector<double> alpha_bar;      // prod_{u<=t} alpha_u
    std::vector<double> posterior_var;  // beta_t (1 - abar_{t-1}) / (1 - abar_t), 0 at t=1

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw DomainError("NoiseSchedule: t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(T) + "]");
    }
    double beta_at(int t) const { check_t(t); return beta[static_cast<std::size_t>(t - 1)]; }
    double alpha_at(int t) const { check_t(t); return alpha[static_cast<std::size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { check_t(t); return alpha_bar[static_cast<std::size_t>(t - 1)]; }
    double posterior_var_at(int t) const { check_t(t); return posterior_var[static_cast<std::size_t>(t - 1)]; }
};

// Linear beta schedule between beta_start and beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw DomainError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw DomainError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    s.posterior_var.resize(static_cast<std::size_t>(T));
    double abar_prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        double a = 1.0 - b;
        double abar = abar_prev * a;
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        s.alpha[static_cast<std::size_t>(t - 1)] = a;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = abar;
        s.posterior_var[static_cast<std::size_t>(t - 1)] = b * (1.0 - abar_prev) / (1.0 - abar);
        abar_prev = abar;
    }
    return s;
}

// Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& s) {
    s.check_t(t);
    if (noise.shape() != x0.shape())
        throw DimensionError("q_sample: noise shape " + noise.shape_string() +
                             " does not match x0 " + x0.shape_string());
    double abar = s.alpha_bar_at(t);
    return add(mul_scalar(x0, std::sqrt(abar)), mul_scalar(noise, std::sqrt(1.0 - abar)));
}

inline Tensor q_sample(const STStack& x0, int t, const Tensor& noise, const NoiseSchedule& s) {
    return q_sample(x0.data, t, noise, s);
}

// Single forward step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps.
inline Tensor stepwise_q(const Tensor& xprev, int t, const Tensor& noise, const NoiseSchedule& s) {
    s.check_t(t);
    if (noise.shape() != xprev.shape())
        throw DimensionError("stepwise_q: noise shape " + noise.shape_string() +
                             " does not match x " + xprev.shape_string());
    double b = s.beta_at(t);
    return add(mul_scalar(xprev, std::sqrt(1.0 - b)), mul_scalar(noise, std::sqrt(b)));
}

// Reverse-step mean from a predicted noise:
// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
inline Tensor posterior_mean_from_eps(const Tensor& eps_hat, const Tensor& xt, int t,
                                      const NoiseSchedule& s) {
    s.check_t(t);
    if (eps_hat.shape() != xt.shape())
        throw DimensionError("posterior_mean: eps shape " + eps_hat.shape_string() +
                             " does not match x_t " + xt.shape_string());
    double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    return mul_scalar(sub(xt, mul_scalar(eps_hat, coef)), 1.0 / std::sqrt(s.alpha_at(t)));
}

// Same mean with the noise recovered from a predicted clean stack:
// eps_hat = (x_t - sqrt(abar_t) x0hat) / sqrt(1 - abar_t).
inline Tensor posterior_mean(const Tensor& x0hat, const Tensor& xt, int t,
                             const NoiseSchedule& s) {
    s.check_t(t);
    double abar = s.alpha_bar_at(t);
    Tensor eps_hat = mul_scalar(sub(xt, mul_scalar(x0hat, std::sqrt(abar))),
                                1.0 / std::sqrt(1.0 - abar));
    return posterior_mean_from_eps(eps_hat, xt, t, s);
}

// Conditional noise predictor: eps_hat(x_t, t | y, h).
using NoisePredictor =
    std::function<Tensor(const Tensor& xt, int t, const STStack& y, const HistologyImage& h)>;

// Ancestral sampling loop t = T..1. Adds sqrt(posterior_var_t) noise for
// t > 1 and none at t = 1. Deterministic given the seed. Output values are
// clamped to [0, 1] (the normalized expression scale) when clip01 is set.
inline STStack sample(const NoisePredictor& denoiser, const STStack& y, const HistologyImage& h,
                      const NoiseSchedule& s, std::uint64_t seed, const std::vector<int>& hr_shape,
                      bool clip01 = true) {
    if (hr_shape.size() != 3 || hr_shape[0] != y.n_genes())
        throw DimensionError("sample: hr_shape must be (N, H, W) with N matching y");
    NoGradGuard ng;
    Rng rng(seed);
    Tensor x = Tensor::randn(hr_shape, rng);
    for (int t = s.T; t >= 1; --t) {
        Tensor eps = denoiser(x, t, y, h);
        if (eps.shape() != x.shape())
            throw DimensionError("sample: denoiser output " + eps.shape_string() +
                                 " does not match state " + x.shape_string());
        Tensor mu = posterior_mean_from_eps(eps, x, t, s);
        if (t > 1) {
            Tensor xi = Tensor::randn(hr_shape, rng);
            x = add(mu, mul_scalar(xi, std::sqrt(s.posterior_var_at(t))));
        } else {
            x = mu;
        }
    }
    std::vector<double> vals = x.values();
    if (clip01)
        for (double& v : vals) v = std::min(1.0, std::max(0.0, v));
    STStack out;
    out.genes = y.genes;
    out.data = Tensor(hr_shape, std::move(vals));
    int sr = hr_shape[1] / std::max(1, y.height());
    out.scale_um = sr > 0 ? y.scale_um / sr : y.scale_um;
    out.norm_min = y.norm_min;
    out.norm_max = y.norm_max;
    return out;
}

}  // namespace stsr
