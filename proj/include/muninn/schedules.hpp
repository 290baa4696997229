#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace muninn {

// Diffusion step indices are 1-based, t in {1..T}; arrays store step t at
// slot t-1. The boundary convention is alpha_bar_0 := 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // variance rates, strictly in (0,1)
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative products, strictly decreasing

    double alpha_bar_prev(int t) const {  // alpha_bar_{t-1} with the t=1 boundary
        check_step(t);
        return t == 1 ? 1.0 : alpha_bar[t - 2];
    }

    void check_step(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("NoiseSchedule: step " + std::to_string(t) + " outside 1.." + std::to_string(T));
    }
};

enum class SamplerVariant { Ddpm, Ddim };
enum class DdpmSigmaRule { Beta, BetaTilde };

struct SamplerKind {
    SamplerVariant variant = SamplerVariant::Ddpm;
    double eta = 0.0;  // DDIM stochasticity; 0 = deterministic; ignored for DDPM
    DdpmSigmaRule ddpm_sigma_rule = DdpmSigmaRule::Beta;

    bool stochastic() const {
        return variant == SamplerVariant::Ddpm || (variant == SamplerVariant::Ddim && eta > 0.0);
    }
};

// Per-step state-contraction (K_t), noise-sensitivity (L_t') and pathwise
// (L_t = L_t' * prod_{j<t} K_j) coefficients for one schedule + sampler.
struct SensitivityProfile {
    std::vector<double> K;
    std::vector<double> L_prime;
    std::vector<double> L;
    std::vector<double> log_K_cumsum;  // exclusive prefix sums of log K_j
};

namespace detail {
inline void finalize_from_beta(NoiseSchedule& s) {
    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(s.beta.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.beta.size(); ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
}
}  // namespace detail

inline NoiseSchedule make_linear_schedule(int T, double beta_min, double beta_max) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
    if (!(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max))
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    for (int t = 1; t <= T; ++t) {
        const double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        s.beta[t - 1] = beta_min + frac * (beta_max - beta_min);
    }
    detail::finalize_from_beta(s);
    return s;
}

// Cosine alpha_bar schedule: abar_t = f(t)/f(0), f(u) = cos^2(((u/T + s)/(1+s)) * pi/2).
// Betas derived via beta_t = 1 - abar_t/abar_{t-1} are clipped to [1e-8, 0.999]
// and alpha_bar is rebuilt from the clipped betas so the cumulative-product
// invariant holds exactly.
inline NoiseSchedule make_cosine_schedule(int T, double offset) {
    if (T < 1) throw std::invalid_argument("make_cosine_schedule: T must be >= 1");
    if (!(offset > 0.0)) throw std::invalid_argument("make_cosine_schedule: offset must be positive");
    const auto f = [&](double u) {
        const double x = ((u / T + offset) / (1.0 + offset)) * std::numbers::pi / 2.0;
        const double c = std::cos(x);
        return c * c;
    };
    const double f0 = f(0.0);
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    double abar_prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double abar = f(static_cast<double>(t)) / f0;
        double beta = 1.0 - abar / abar_prev;
        beta = std::min(std::max(beta, 1e-8), 0.999);
        s.beta[t - 1] = beta;
        abar_prev = abar;
    }
    detail::finalize_from_beta(s);
    return s;
}

// Explicit step-subset selection for DDIM-style evaluation on a coarser grid.
// `steps` are 1-based indices into the source schedule, strictly increasing;
// alpha_bar values carry over and betas are rederived on the subset grid.
inline NoiseSchedule subsample_schedule(const NoiseSchedule& src, const std::vector<int>& steps) {
    if (steps.empty()) throw std::invalid_argument("subsample_schedule: empty step subset");
    NoiseSchedule s;
    s.T = static_cast<int>(steps.size());
    s.beta.resize(steps.size());
    s.alpha.resize(steps.size());
    s.alpha_bar.resize(steps.size());
    double abar_prev = 1.0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        src.check_step(steps[k]);
        if (k > 0 && steps[k] <= steps[k - 1]) throw std::invalid_argument("subsample_schedule: steps must increase");
        const double abar = src.alpha_bar[steps[k] - 1];
        s.alpha_bar[k] = abar;
        s.alpha[k] = abar / abar_prev;
        s.beta[k] = 1.0 - s.alpha[k];
        abar_prev = abar;
    }
    return s;
}

// DDPM reverse update constants: K_t = 1/sqrt(alpha_t),
// L_t' = beta_t / (sqrt(alpha_t) * sqrt(1 - alpha_bar_t)).
inline std::pair<double, double> ddpm_step_constants(const NoiseSchedule& sched, int t) {
    sched.check_step(t);
    const double a = sched.alpha[t - 1];
    const double abar = sched.alpha_bar[t - 1];
    if (abar >= 1.0) throw std::domain_error("ddpm_step_constants: degenerate step, alpha_bar_t = 1");
    const double K = 1.0 / std::sqrt(a);
    const double Lp = sched.beta[t - 1] / (std::sqrt(a) * std::sqrt(1.0 - abar));
    return {K, Lp};
}

// DDIM affine coefficients a_t = sqrt(abar_{t-1}/abar_t),
// b_t = sqrt(1 - abar_{t-1}) - a_t * sqrt(1 - abar_t); K_t = |a_t|, L_t' = |b_t|.
// Identical for stochastic DDIM (eta > 0): the shared noise draw cancels in
// paired comparisons, leaving the same affine part.
inline std::pair<double, double> ddim_coefficients(const NoiseSchedule& sched, int t) {
    sched.check_step(t);
    const double abar = sched.alpha_bar[t - 1];
    const double abar_prev = sched.alpha_bar_prev(t);
    const double a = std::sqrt(abar_prev / abar);
    const double b = std::sqrt(1.0 - abar_prev) - a * std::sqrt(1.0 - abar);
    return {a, b};
}

inline std::pair<double, double> ddim_step_constants(const NoiseSchedule& sched, int t) {
    const auto [a, b] = ddim_coefficients(sched, t);
    return {std::abs(a), std::abs(b)};
}

inline std::pair<double, double> step_constants(const NoiseSchedule& sched, const SamplerKind& kind, int t) {
    return kind.variant == SamplerVariant::Ddpm ? ddpm_step_constants(sched, t) : ddim_step_constants(sched, t);
}

// Pathwise coefficients computed in log-space: log L_t = log L_t' + sum_{j<t} log K_j.
// A zero L_t' short-circuits to L_t = 0; a zero K_j makes the schedule singular.
inline SensitivityProfile pathwise_sensitivities(const NoiseSchedule& sched, const SamplerKind& kind) {
    SensitivityProfile p;
    p.K.resize(sched.T);
    p.L_prime.resize(sched.T);
    p.L.resize(sched.T);
    p.log_K_cumsum.resize(sched.T);
    double log_prefix = 0.0;
    for (int t = 1; t <= sched.T; ++t) {
        const auto [K, Lp] = step_constants(sched, kind, t);
        p.K[t - 1] = K;
        p.L_prime[t - 1] = Lp;
        p.log_K_cumsum[t - 1] = log_prefix;
        p.L[t - 1] = (Lp == 0.0) ? 0.0 : std::exp(std::log(Lp) + log_prefix);
        if (K <= 0.0) throw std::domain_error("pathwise_sensitivities: singular schedule, K_" + std::to_string(t) + " = 0");
        log_prefix += std::log(K);
    }
    return p;
}

}  // namespace muninn
