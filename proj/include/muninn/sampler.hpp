#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muninn/mat.hpp"
#include "muninn/rng.hpp"
#include "muninn/schedules.hpp"

namespace muninn {

// All sampler randomness for one chain: the initial draw tau_T plus the
// per-step noises xi_t. Regenerating from the same seed reproduces the tape
// bit-identically; deterministic samplers carry all-zero xi.
struct NoiseTape {
    Trajectory initial;
    std::vector<Trajectory> xi;  // xi[t-1] is the draw consumed at step t
    std::uint64_t seed = 0;

    static NoiseTape make(std::uint64_t seed, int T, int H, int d, bool stochastic) {
        NoiseTape tape;
        tape.seed = seed;
        tape.initial = Trajectory(H, d);
        for (std::size_t i = 0; i < tape.initial.size(); ++i) tape.initial[i] = rng_gauss(seed, 0, i);
        tape.xi.assign(T, Trajectory(H, d));
        if (stochastic) {
            for (int t = 1; t <= T; ++t)
                for (std::size_t i = 0; i < tape.xi[t - 1].size(); ++i)
                    tape.xi[t - 1][i] = rng_gauss(seed, static_cast<std::uint64_t>(t), i);
        }
        return tape;
    }
};

inline double ddpm_sigma(const NoiseSchedule& sched, int t, DdpmSigmaRule rule) {
    const double beta = sched.beta[t - 1];
    if (rule == DdpmSigmaRule::Beta) return std::sqrt(beta);
    const double abar = sched.alpha_bar[t - 1];
    const double abar_prev = sched.alpha_bar_prev(t);
    return std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta);
}

// Conventional eta-parameterized DDIM variance. The affine (a_t, b_t) part is
// unchanged by this term; it only adds shared noise that cancels in paired runs.
inline double ddim_sigma(const NoiseSchedule& sched, int t, double eta) {
    if (eta == 0.0) return 0.0;
    const double abar = sched.alpha_bar[t - 1];
    const double abar_prev = sched.alpha_bar_prev(t);
    return eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) * std::sqrt(1.0 - abar / abar_prev);
}

// tau_{t-1} = (1/sqrt(alpha_t)) (tau_t - (beta_t/sqrt(1-abar_t)) eps) + sigma_t xi
inline Trajectory ddpm_update(const Trajectory& tau, const NoisePrediction& eps, int t, const NoiseSchedule& sched,
                              DdpmSigmaRule sigma_rule, const Trajectory& xi) {
    require_same_shape(tau, eps, "ddpm_update");
    require_same_shape(tau, xi, "ddpm_update(xi)");
    sched.check_step(t);
    const double a = sched.alpha[t - 1];
    const double abar = sched.alpha_bar[t - 1];
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double eps_coef = sched.beta[t - 1] / std::sqrt(1.0 - abar);
    const double sigma = ddpm_sigma(sched, t, sigma_rule);
    Trajectory out(tau.rows, tau.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = inv_sqrt_a * (tau[i] - eps_coef * eps[i]) + sigma * xi[i];
    return out;
}

// tau_{t-1} = a_t tau_t + b_t eps (+ sigma_tilde_t xi when eta > 0)
inline Trajectory ddim_update(const Trajectory& tau, const NoisePrediction& eps, int t, const NoiseSchedule& sched,
                              double eta, const Trajectory& xi) {
    require_same_shape(tau, eps, "ddim_update");
    require_same_shape(tau, xi, "ddim_update(xi)");
    const auto [a, b] = ddim_coefficients(sched, t);
    const double sigma = ddim_sigma(sched, t, eta);
    Trajectory out(tau.rows, tau.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a * tau[i] + b * eps[i] + sigma * xi[i];
    return out;
}

inline Trajectory sampler_update(const Trajectory& tau, const NoisePrediction& eps, int t, const NoiseSchedule& sched,
                                 const SamplerKind& kind, const Trajectory& xi) {
    return kind.variant == SamplerVariant::Ddpm ? ddpm_update(tau, eps, t, sched, kind.ddpm_sigma_rule, xi)
                                                : ddim_update(tau, eps, t, sched, kind.eta, xi);
}

// Full-compute chain record: states[t] holds tau_t for t = 0..T and
// effective_eps[t-1] holds the post-guidance prediction consumed at step t.
struct FullRunRecord {
    std::vector<Trajectory> states;
    std::vector<NoisePrediction> effective_eps;

    const Trajectory& final_trajectory() const { return states.front(); }
};

struct DenoiserFailure : std::runtime_error {
    int step;
    explicit DenoiserFailure(int t, const std::string& what)
        : std::runtime_error("denoiser failure at step " + std::to_string(t) + ": " + what), step(t) {}
};

// The effective denoiser: (tau, t) -> sampler-ready prediction, guidance included.
using EffectiveDenoiserFn = std::function<NoisePrediction(const Trajectory&, int)>;

inline FullRunRecord run_full_chain(const EffectiveDenoiserFn& denoiser, const NoiseSchedule& sched,
                                    const SamplerKind& kind, const NoiseTape& tape) {
    if (static_cast<int>(tape.xi.size()) != sched.T) throw std::invalid_argument("run_full_chain: tape length mismatch");
    FullRunRecord rec;
    rec.states.assign(sched.T + 1, Trajectory());
    rec.effective_eps.assign(sched.T, NoisePrediction());
    rec.states[sched.T] = tape.initial;
    for (int t = sched.T; t >= 1; --t) {
        NoisePrediction eps;
        try {
            eps = denoiser(rec.states[t], t);
        } catch (const DenoiserFailure&) {
            throw;
        } catch (const std::exception& e) {
            throw DenoiserFailure(t, e.what());
        }
        require_same_shape(rec.states[t], eps, "run_full_chain(eps)");
        if (!eps.all_finite()) throw DenoiserFailure(t, "non-finite prediction");
        rec.effective_eps[t - 1] = eps;
        rec.states[t - 1] = sampler_update(rec.states[t], eps, t, sched, kind, tape.xi[t - 1]);
    }
    return rec;
}

// True iff every stored transition reproduces exactly from the stored inputs.
inline bool replay_check(const FullRunRecord& rec, const NoiseSchedule& sched, const SamplerKind& kind,
                         const NoiseTape& tape) {
    if (static_cast<int>(rec.states.size()) != sched.T + 1) return false;
    if (static_cast<int>(rec.effective_eps.size()) != sched.T) return false;
    if (!(rec.states[sched.T] == tape.initial)) return false;
    for (int t = sched.T; t >= 1; --t) {
        const Trajectory next = sampler_update(rec.states[t], rec.effective_eps[t - 1], t, sched, kind, tape.xi[t - 1]);
        if (!(next == rec.states[t - 1])) return false;
    }
    return true;
}

// Debug-only chain trace: per-step state and prediction norms (not a stable contract).
struct ChainTraceEntry {
    int t;
    double state_norm;
    double eps_norm;
};

inline std::vector<ChainTraceEntry> chain_trace(const FullRunRecord& rec) {
    std::vector<ChainTraceEntry> out;
    const int T = static_cast<int>(rec.effective_eps.size());
    out.reserve(T);
    for (int t = T; t >= 1; --t)
        out.push_back({t, rec.states[t].frobenius_norm(), rec.effective_eps[t - 1].frobenius_norm()});
    return out;
}

}  // namespace muninn
