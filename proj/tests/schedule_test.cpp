#include <gtest/gtest.h>

#include <cmath>

#include "stsr/schedule.hpp"

using namespace stsr;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return num / std::sqrt(va * vb);
}

// Pooled mean/variance of (x_t - mean_target) over draws x coords, compared
// against the Gaussian prediction within 3 standard errors.
void expect_moments(const std::function<Tensor(const Tensor& noise)>& draw, const Tensor& mean_target,
                    double expected_var, int n_draws, Rng& rng) {
    const int d = mean_target.numel();
    const double n_total = static_cast<double>(n_draws) * d;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n_draws; ++i) {
        Tensor noise = Tensor::randn(mean_target.shape(), rng);
        Tensor xt = draw(noise);
        for (int j = 0; j < d; ++j) {
            double c = xt.at(j) - mean_target.at(j);
            acc += c;
            acc2 += c * c;
        }
    }
    double mean = acc / n_total;
    double var = acc2 / n_total - mean * mean;
    double se_mean = std::sqrt(expected_var / n_total);
    double se_var = expected_var * std::sqrt(2.0 / (n_total - 1));
    EXPECT_NEAR(mean, 0.0, 3.0 * se_mean);
    EXPECT_NEAR(var, expected_var, 3.0 * se_var);
}

}  // namespace

TEST(MakeSchedule, FullScaleAlphaBarVanishes) {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    // independent product in log space
    double log_abar = 0.0;
    for (int t = 1; t <= 1000; ++t)
        log_abar += std::log(1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0));
    EXPECT_NEAR(s.alpha_bar_at(1000), std::exp(log_abar), 1e-12);
    EXPECT_LT(s.alpha_bar_at(1000), 1e-4);
}

TEST(MakeSchedule, SingleAndTwoStep) {
    NoiseSchedule s1 = make_schedule(1, 0.5, 0.5);
    EXPECT_DOUBLE_EQ(s1.alpha_bar_at(1), 0.5);

    NoiseSchedule s2 = make_schedule(2, 0.1, 0.2);
    EXPECT_DOUBLE_EQ(s2.beta_at(1), 0.1);
    EXPECT_DOUBLE_EQ(s2.beta_at(2), 0.2);
    EXPECT_DOUBLE_EQ(s2.alpha_bar_at(1), 0.9);
    EXPECT_NEAR(s2.alpha_bar_at(2), 0.72, 1e-15);
}

TEST(MakeSchedule, RejectsBadBounds) {
    EXPECT_THROW(make_schedule(0, 1e-4, 0.02), DomainError);
    EXPECT_THROW(make_schedule(10, 0.0, 0.02), DomainError);
    EXPECT_THROW(make_schedule(10, 0.02, 1e-4), DomainError);
    EXPECT_THROW(make_schedule(10, 0.5, 1.0), DomainError);
}

TEST(MakeSchedule, AlphaBarStrictlyDecreasingAndPosteriorVarBounds) {
    NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
    for (int t = 2; t <= 50; ++t) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    EXPECT_DOUBLE_EQ(s.posterior_var_at(1), 0.0);
    for (int t = 2; t <= 50; ++t) {
        EXPECT_GT(s.posterior_var_at(t), 0.0);
        EXPECT_LE(s.posterior_var_at(t), s.beta_at(t));
    }
}

TEST(QSample, NoNoiseLimitAndPureNoiseLimit) {
    Tensor x0({1, 2, 2}, {0.1, 0.4, 0.7, 1.0});
    NoiseSchedule tiny = make_schedule(3, 1e-12, 1e-12);
    Tensor zero = Tensor::zeros(x0.shape());
    Tensor xt = q_sample(x0, 3, zero, tiny);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(xt.at(i), x0.at(i), 1e-9);

    NoiseSchedule degenerate;  // alpha_bar exactly 0 at t=1
    degenerate.T = 1;
    degenerate.beta = {0.999};
    degenerate.alpha = {0.001};
    degenerate.alpha_bar = {0.0};
    degenerate.posterior_var = {0.0};
    Tensor noise({1, 2, 2}, {5, -3, 2, 9});
    Tensor pure = q_sample(x0, 1, noise, degenerate);
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(pure.at(i), noise.at(i));
}

TEST(QSample, ErrorsOnBadArguments) {
    NoiseSchedule s = make_schedule(5, 1e-4, 0.02);
    Tensor x0 = Tensor::zeros({1, 2, 2});
    EXPECT_THROW(q_sample(x0, 0, Tensor::zeros({1, 2, 2}), s), DomainError);
    EXPECT_THROW(q_sample(x0, 6, Tensor::zeros({1, 2, 2}), s), DomainError);
    EXPECT_THROW(q_sample(x0, 1, Tensor::zeros({1, 2, 3}), s), DimensionError);
}

TEST(QSample, LinearInSignalAndNoise) {
    NoiseSchedule s = make_schedule(10, 1e-3, 0.1);
    Rng rng(5);
    Tensor a = Tensor::randn({2, 3, 3}, rng), b = Tensor::randn({2, 3, 3}, rng);
    Tensor na = Tensor::randn({2, 3, 3}, rng), nb = Tensor::randn({2, 3, 3}, rng);
    Tensor lhs = q_sample(add(a, b), 7, add(na, nb), s);
    Tensor rhs = add(q_sample(a, 7, na, s), q_sample(b, 7, nb, s));
    for (int i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.at(i), rhs.at(i), 1e-12);
}

TEST(QSample, MomentsMatchMarginal) {
    NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
    Rng rng(99);
    Tensor x0 = Tensor::randn({2, 4, 4}, rng, 0.5);
    for (int t : {1, 25, 50}) {
        double abar = s.alpha_bar_at(t);
        Tensor target = mul_scalar(x0, std::sqrt(abar));
        expect_moments([&](const Tensor& n) { return q_sample(x0, t, n, s); }, target, 1.0 - abar,
                       10000, rng);
    }
}

TEST(StepwiseQ, DegenerateBetas) {
    NoiseSchedule s;
    s.T = 2;
    s.beta = {0.0, 1.0};
    s.alpha = {1.0, 0.0};
    s.alpha_bar = {1.0, 0.0};
    s.posterior_var = {0.0, 0.0};
    Tensor x({1, 2, 1}, {3.0, -1.5});
    Tensor noise({1, 2, 1}, {100.0, 42.0});
    Tensor same = stepwise_q(x, 1, noise, s);
    for (int i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(same.at(i), x.at(i));
    Tensor all_noise = stepwise_q(x, 2, noise, s);
    for (int i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(all_noise.at(i), noise.at(i));
}

TEST(StepwiseQ, ComposesToMarginalInDistribution) {
    // Moments of composing stepwise_q for t = 1..3 match the closed-form
    // marginal at t = 3 within 3 standard errors over 1e4 draws.
    NoiseSchedule s = make_schedule(3, 0.05, 0.3);
    Rng rng(7);
    Tensor x0 = Tensor::randn({1, 3, 3}, rng, 0.7);
    double abar = s.alpha_bar_at(3);
    Tensor target = mul_scalar(x0, std::sqrt(abar));

    const int n_draws = 10000, d = x0.numel();
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n_draws; ++i) {
        Tensor x = x0;
        for (int t = 1; t <= 3; ++t) x = stepwise_q(x, t, Tensor::randn(x0.shape(), rng), s);
        for (int j = 0; j < d; ++j) {
            double c = x.at(j) - target.at(j);
            acc += c;
            acc2 += c * c;
        }
    }
    double n_total = static_cast<double>(n_draws) * d;
    double mean = acc / n_total;
    double var = acc2 / n_total - mean * mean;
    double expected_var = 1.0 - abar;
    EXPECT_NEAR(mean, 0.0, 3.0 * std::sqrt(expected_var / n_total));
    EXPECT_NEAR(var, expected_var, 3.0 * expected_var * std::sqrt(2.0 / (n_total - 1)));
}

TEST(PosteriorMean, ZeroNoisePredictionScalesState) {
    NoiseSchedule s = make_schedule(10, 1e-3, 0.1);
    Rng rng(11);
    Tensor xt = Tensor::randn({2, 2, 2}, rng);
    Tensor mu = posterior_mean_from_eps(Tensor::zeros(xt.shape()), xt, 4, s);
    double scale = 1.0 / std::sqrt(s.alpha_at(4));
    for (int i = 0; i < xt.numel(); ++i) EXPECT_NEAR(mu.at(i), xt.at(i) * scale, 1e-12);
}

TEST(PosteriorMean, ExactNoiseAtT1RecoversX0) {
    NoiseSchedule s = make_schedule(10, 1e-3, 0.1);
    Rng rng(13);
    Tensor x0 = Tensor::randn({2, 3, 3}, rng);
    Tensor eps = Tensor::randn({2, 3, 3}, rng);
    Tensor x1 = q_sample(x0, 1, eps, s);
    Tensor mu = posterior_mean_from_eps(eps, x1, 1, s);
    for (int i = 0; i < x0.numel(); ++i) EXPECT_NEAR(mu.at(i), x0.at(i), 1e-9);
}

TEST(PosteriorMean, MatchesIndependentPosteriorFormula) {
    // Cross-check the eps parameterization against the classical posterior
    // mean mu = (sqrt(abar_{t-1}) b_t x0 + sqrt(a_t)(1-abar_{t-1}) x_t)/(1-abar_t)
    // evaluated through the x0hat route.
    NoiseSchedule s = make_schedule(20, 1e-3, 0.05);
    Rng rng(17);
    for (int t : {2, 7, 20}) {
        Tensor xt = Tensor::randn({1, 4, 4}, rng);
        Tensor eps = Tensor::randn({1, 4, 4}, rng);
        Tensor mu = posterior_mean_from_eps(eps, xt, t, s);

        double abar = s.alpha_bar_at(t);
        double abar_prev = t == 1 ? 1.0 : s.alpha_bar_at(t - 1);
        double bt = s.beta_at(t), at = s.alpha_at(t);
        for (int i = 0; i < xt.numel(); ++i) {
            double x0hat = (xt.at(i) - std::sqrt(1.0 - abar) * eps.at(i)) / std::sqrt(abar);
            double expected = (std::sqrt(abar_prev) * bt * x0hat +
                               std::sqrt(at) * (1.0 - abar_prev) * xt.at(i)) /
                              (1.0 - abar);
            EXPECT_NEAR(mu.at(i), expected, 1e-10);
        }
    }
}

TEST(PosteriorMean, X0HatRouteAgreesWithEpsRoute) {
    NoiseSchedule s = make_schedule(20, 1e-3, 0.05);
    Rng rng(19);
    Tensor x0hat = Tensor::randn({1, 3, 3}, rng);
    Tensor xt = Tensor::randn({1, 3, 3}, rng);
    int t = 9;
    double abar = s.alpha_bar_at(t);
    Tensor eps = mul_scalar(sub(xt, mul_scalar(x0hat, std::sqrt(abar))),
                            1.0 / std::sqrt(1.0 - abar));
    Tensor a = posterior_mean(x0hat, xt, t, s);
    Tensor b = posterior_mean_from_eps(eps, xt, t, s);
    for (int i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

namespace {

STStack tiny_lr_stack() {
    STStack y;
    y.genes = {"g0", "g1"};
    y.data = Tensor::full({2, 2, 2}, 0.25);
    y.scale_um = 40.0;
    return y;
}

HistologyImage tiny_hist() {
    HistologyImage h;
    h.data = Tensor::full({1, 8, 8}, 0.5);
    h.scale_um = 5.0;
    return h;
}

}  // namespace

TEST(Sample, SingleStepWithZeroDenoiser) {
    NoiseSchedule s = make_schedule(1, 0.01, 0.01);
    auto zero_model = [](const Tensor& xt, int, const STStack&, const HistologyImage&) {
        return Tensor::zeros(xt.shape());
    };
    STStack out = sample(zero_model, tiny_lr_stack(), tiny_hist(), s, 42, {2, 8, 8}, false);
    Rng rng(42);
    Tensor xT = Tensor::randn({2, 8, 8}, rng);
    double scale = 1.0 / std::sqrt(s.alpha_at(1));
    for (int i = 0; i < xT.numel(); ++i) EXPECT_NEAR(out.data.at(i), xT.at(i) * scale, 1e-12);
}

TEST(Sample, DeterministicUnderFixedSeed) {
    NoiseSchedule s = make_schedule(5, 1e-3, 0.05);
    auto zero_model = [](const Tensor& xt, int, const STStack&, const HistologyImage&) {
        return Tensor::zeros(xt.shape());
    };
    STStack a = sample(zero_model, tiny_lr_stack(), tiny_hist(), s, 7, {2, 8, 8});
    STStack b = sample(zero_model, tiny_lr_stack(), tiny_hist(), s, 7, {2, 8, 8});
    EXPECT_EQ(a.data.values(), b.data.values());
    STStack c = sample(zero_model, tiny_lr_stack(), tiny_hist(), s, 8, {2, 8, 8});
    EXPECT_NE(a.data.values(), c.data.values());
}

TEST(Sample, OracleDenoiserRecoversPlantedStack) {
    NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
    Rng rng(23);
    std::vector<double> planted(2 * 8 * 8);
    for (auto& v : planted) v = rng.uniform();
    Tensor x0({2, 8, 8}, planted);

    auto oracle = [&](const Tensor& xt, int t, const STStack&, const HistologyImage&) {
        double abar = s.alpha_bar_at(t);
        return mul_scalar(sub(xt, mul_scalar(x0, std::sqrt(abar))), 1.0 / std::sqrt(1.0 - abar));
    };
    STStack out = sample(oracle, tiny_lr_stack(), tiny_hist(), s, 31, {2, 8, 8});
    EXPECT_GT(pearson(out.data.values(), x0.values()), 0.99);
    EXPECT_EQ(out.data.shape(), x0.shape());
}
