#include <catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "muninn/denoisers.hpp"
#include "muninn/sampler.hpp"

using namespace muninn;

TEST_CASE("probe score", "[denoisers]") {
    SECTION("equal features score zero") {
        const ProbeFeature a{{1.0, -2.0, 3.0}, 5};
        REQUIRE(score(a, a).value == 0.0);
    }
    SECTION("zero-denominator guard path") {
        const ProbeFeature f{{1.0, 0.0}, 3};
        const ProbeFeature g{{0.0, 0.0}, 4};
        REQUIRE(score(f, g).value == Catch::Approx(1e6).epsilon(1e-12));
    }
    SECTION("hand l1 arithmetic") {
        const ProbeFeature f{{1.0, 2.0}, 3};
        const ProbeFeature g{{1.0, 1.0}, 4};
        REQUIRE(score(f, g).value == Catch::Approx(1.0 / (2.0 + 1e-6)).epsilon(1e-12));
    }
    SECTION("dimension mismatch rejected") {
        const ProbeFeature f{{1.0}, 1};
        const ProbeFeature g{{1.0, 2.0}, 2};
        REQUIRE_THROWS_AS(score(f, g), std::invalid_argument);
    }
}

TEST_CASE("cfg combination", "[denoisers]") {
    const NoisePrediction c(1, 1, 1.0), u(1, 1, 0.5);
    SECTION("w = 0 returns the conditional prediction") {
        REQUIRE(cfg_combine(c, u, 0.0) == c);
    }
    SECTION("equal predictions are a fixed point for any weight") {
        REQUIRE(cfg_combine(c, c, 3.7) == c);
    }
    SECTION("w = 0.6 hand arithmetic") {
        REQUIRE(cfg_combine(c, u, 0.6).at(0, 0) == Catch::Approx(1.3).epsilon(1e-14));  // 1.6 - 0.3
    }
}

TEST_CASE("analytic gaussian denoiser", "[denoisers]") {
    const NoiseSchedule s = make_linear_schedule(10, 1e-3, 0.1);

    SECTION("prediction is zero at the scaled mean") {
        auto net = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(3, 2, 0.7), 0.5);
        const int t = 6;
        const double abar = s.alpha_bar[t - 1];
        Trajectory tau(3, 2, std::sqrt(abar) * 0.7);
        const NoisePrediction out = net->denoise(tau, t, {0.0, 0.0});
        REQUIRE(out.max_abs() < 1e-14);
    }

    SECTION("Monte-Carlo conditional-expectation oracle, H=1 d=1 mu=0 sigma=1") {
        auto net = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(1, 1, 0.0), 1.0);
        const int t = 5;
        const double abar = s.alpha_bar[t - 1];
        // E[eps | tau_t] estimated by banded conditioning over 10^6 draws of
        // (tau_0, eps) -> tau_t = sqrt(abar) tau_0 + sqrt(1-abar) eps.
        const double tau_probe = 0.8;
        const double band = 0.02;
        double acc = 0.0;
        long n_in = 0;
        for (long i = 0; i < 1000000; ++i) {
            const double tau0 = rng_gauss(123, 1, static_cast<std::uint64_t>(i));
            const double eps = rng_gauss(123, 2, static_cast<std::uint64_t>(i));
            const double tau_t = std::sqrt(abar) * tau0 + std::sqrt(1.0 - abar) * eps;
            if (std::abs(tau_t - tau_probe) < band) {
                acc += eps;
                ++n_in;
            }
        }
        REQUIRE(n_in > 1000);
        const double mc = acc / static_cast<double>(n_in);
        const double analytic = net->denoise(Trajectory(1, 1, tau_probe), t, {0.0}).at(0, 0);
        REQUIRE(analytic == Catch::Approx(mc).margin(1e-2));
        // Closed form for mu=0, sigma=1: prediction = sqrt(1-abar) * tau.
        REQUIRE(analytic == Catch::Approx(std::sqrt(1.0 - abar) * tau_probe).epsilon(1e-12));
    }

    SECTION("epsilon prediction is the MSE-optimal affine predictor (Monte-Carlo regression)") {
        const double mu = 0.4, sigma2 = 0.6;
        auto net = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(1, 1, mu), sigma2);
        const int t = 7;
        const double abar = s.alpha_bar[t - 1];
        double sxx = 0.0, sxy = 0.0, sx = 0.0, sy = 0.0;
        const long N = 400000;
        for (long i = 0; i < N; ++i) {
            const double tau0 = mu + std::sqrt(sigma2) * rng_gauss(321, 1, static_cast<std::uint64_t>(i));
            const double eps = rng_gauss(321, 2, static_cast<std::uint64_t>(i));
            const double x = std::sqrt(abar) * tau0 + std::sqrt(1.0 - abar) * eps;
            sx += x;
            sy += eps;
            sxx += x * x;
            sxy += x * eps;
        }
        const double n = static_cast<double>(N);
        const double slope = (sxy - sx * sy / n) / (sxx - sx * sx / n);
        const double intercept = sy / n - slope * sx / n;
        // The analytic prediction is affine in tau; recover its coefficients.
        const double p0 = net->denoise(Trajectory(1, 1, 0.0), t, {0.0}).at(0, 0);
        const double p1 = net->denoise(Trajectory(1, 1, 1.0), t, {0.0}).at(0, 0);
        REQUIRE(p1 - p0 == Catch::Approx(slope).margin(1e-2));
        REQUIRE(p0 == Catch::Approx(intercept).margin(1e-2));
    }

    SECTION("context shifts the mean") {
        auto net = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(2, 2, 0.0), 0.5);
        const int t = 4;
        const double abar = s.alpha_bar[t - 1];
        const std::vector<double> ctx{0.3, -0.2};
        Trajectory tau(2, 2);
        for (int i = 0; i < 2; ++i) {
            tau.at(i, 0) = std::sqrt(abar) * 0.3;
            tau.at(i, 1) = std::sqrt(abar) * -0.2;
        }
        REQUIRE(net->denoise(tau, t, ctx).max_abs() < 1e-14);
    }

    SECTION("probe is the time-pooled whitened residual with d_F = d") {
        auto net = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(3, 2, 0.1), 0.5);
        Trajectory tau(3, 2);
        for (std::size_t i = 0; i < tau.size(); ++i) tau[i] = 0.1 * static_cast<double>(i);
        const Mat rep = net->stem(tau, 3, {0.0, 0.0});
        const ProbeFeature f = net->probe(tau, 3, {0.0, 0.0});
        REQUIRE(static_cast<int>(f.values.size()) == 2);
        for (int j = 0; j < 2; ++j) {
            double mean = 0.0;
            for (int i = 0; i < 3; ++i) mean += rep.at(i, j);
            REQUIRE(f.values[j] == Catch::Approx(mean / 3.0).epsilon(1e-14));
        }
    }
}

TEST_CASE("tiny mlp denoiser", "[denoisers]") {
    const int H = 4, d = 2, T = 12;
    const NoiseSchedule tsched = make_linear_schedule(T, 1e-3, 0.05);
    auto net = std::make_shared<TinyMlpDenoiser>(tsched, H, d, 2, 4, 64, 2024);
    const std::vector<double> ctx{0.1, -0.3};
    Trajectory tau(H, d);
    for (std::size_t i = 0; i < tau.size(); ++i) tau[i] = rng_gauss(5, 5, i);

    SECTION("deterministic given the seed") {
        auto net2 = std::make_shared<TinyMlpDenoiser>(tsched, H, d, 2, 4, 64, 2024);
        REQUIRE(net->denoise(tau, 3, ctx) == net2->denoise(tau, 3, ctx));
        auto net3 = std::make_shared<TinyMlpDenoiser>(tsched, H, d, 2, 4, 64, 2025);
        REQUIRE(net->denoise(tau, 3, ctx) != net3->denoise(tau, 3, ctx));
    }
    SECTION("probe is the penultimate activation vector") {
        const ProbeFeature f = net->probe(tau, 3, ctx);
        REQUIRE(static_cast<int>(f.values.size()) == 64);
        const Mat rep = net->stem(tau, 3, ctx);
        for (int i = 0; i < 64; ++i) REQUIRE(f.values[i] == rep.at(i, 0));
    }
    SECTION("probe op count is under 0.3x of a full evaluation at the default shape") {
        // The output head dominates once H*d is large against the trunk width.
        auto wide = std::make_shared<TinyMlpDenoiser>(make_linear_schedule(T, 1e-3, 0.05), 16, 2, 2, 4, 64, 2024);
        REQUIRE(static_cast<double>(wide->probe_ops()) <= 0.3 * static_cast<double>(wide->full_ops()));
        REQUIRE(net->probe_ops() < net->full_ops());  // strictly cheaper in any shape
    }
    SECTION("identical inputs give identical probes") {
        REQUIRE(net->probe(tau, 3, ctx).values == net->probe(tau, 3, ctx).values);
    }
}

TEST_CASE("tiny mlp clean-trajectory head is certified 1-Lipschitz", "[denoisers]") {
    // The contraction premise of the pathwise bound requires the implied
    // tau0 predictor to be 1/sqrt(abar_t)-Lipschitz; the head enforces 1.
    const int T = 16;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    auto net = std::make_shared<TinyMlpDenoiser>(sched, 4, 2, 2, 4, 64, 99);
    REQUIRE(net->head_gain() > 0.0);
    REQUIRE(net->head_gain() <= 1.0);
    const std::vector<double> ctx{0.2, -0.1};
    const auto tau0_hat = [&](const Trajectory& tau, int t) {
        const double abar = sched.alpha_bar[t - 1];
        const NoisePrediction eps = net->denoise(tau, t, ctx);
        Mat x0(tau.rows, tau.cols);
        for (std::size_t i = 0; i < tau.size(); ++i)
            x0[i] = (tau[i] - std::sqrt(1.0 - abar) * eps[i]) / std::sqrt(abar);
        return x0;
    };
    for (int trial = 0; trial < 200; ++trial) {
        Trajectory a(4, 2), b(4, 2);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = 2.0 * rng_gauss(7000 + trial, 1, i);
            b[i] = 2.0 * rng_gauss(7000 + trial, 2, i);
        }
        const int t = 1 + trial % T;
        const double num = (tau0_hat(a, t) - tau0_hat(b, t)).frobenius_norm();
        const double den = (a - b).frobenius_norm();
        REQUIRE(num <= den * (1.0 + 1e-9));
    }
}

TEST_CASE("stem/core consistency is bitwise across denoisers", "[denoisers]") {
    const NoiseSchedule s = make_linear_schedule(8, 1e-3, 0.08);
    auto analytic = std::make_shared<AnalyticGaussianDenoiser>(s, Mat(3, 2, 0.2), 0.7);
    auto mlp = std::make_shared<TinyMlpDenoiser>(s, 3, 2, 2, 4, 32, 77);
    const std::vector<const Denoiser*> nets{analytic.get(), mlp.get()};
    for (const Denoiser* net : nets) {
        for (int trial = 0; trial < 1000; ++trial) {
            Trajectory tau(3, 2);
            for (std::size_t i = 0; i < tau.size(); ++i) tau[i] = rng_gauss(1000 + trial, 1, i);
            const int t = 1 + trial % 8;
            const std::vector<double> ctx{rng_gauss(1000 + trial, 2, 0), rng_gauss(1000 + trial, 2, 1)};
            const NoisePrediction one_shot = net->denoise(tau, t, ctx);
            const NoisePrediction split = net->core(net->stem(tau, t, ctx), t, ctx);
            REQUIRE(one_shot == split);
        }
    }
}

TEST_CASE("effective model with classifier-free guidance", "[denoisers]") {
    auto net = std::make_shared<TinyMlpDenoiser>(make_linear_schedule(6, 1e-3, 0.05), 2, 2, 2, 4, 16, 9);
    const CfgGuidance guidance{0.6, {0.0, 0.0}};
    const EffectiveModel model(net, guidance);
    Trajectory tau(2, 2, 0.3);
    const std::vector<double> ctx{0.5, -0.5};
    const NoisePrediction eff = model.effective(tau, 2, ctx);
    const NoisePrediction manual = cfg_combine(net->denoise(tau, 2, ctx), net->denoise(tau, 2, {0.0, 0.0}), 0.6);
    REQUIRE(eff == manual);
    // Zero-weight guidance is the plain conditional evaluation.
    const EffectiveModel plain(net, CfgGuidance{0.0, {0.0, 0.0}});
    REQUIRE(plain.effective(tau, 2, ctx) == net->denoise(tau, 2, ctx));
}
