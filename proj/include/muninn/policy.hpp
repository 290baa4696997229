#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muninn/calibration.hpp"
#include "muninn/denoisers.hpp"
#include "muninn/sampler.hpp"

namespace muninn {

// Upper-bounded per-step cost c_hat_t(s_t) = Gamma * L_t * U_t(s_t).
inline double step_cost(double L_t, double gamma, double bound) { return gamma * L_t * bound; }

struct BudgetLedger {
    double eta_traj = 0.0;
    double B_rem = 0.0;
    std::vector<std::pair<int, double>> spent;  // (t, c_hat) per reuse step
    std::vector<int> reuse_set;
    int n_eval = 0;
};

struct Certificate {
    double D_hat = 0.0;
    double rho = 0.0;
};

inline Certificate certificate_of(const BudgetLedger& ledger) {
    Certificate c;
    double total = 0.0;
    for (const auto& [t, cost] : ledger.spent) total += cost;
    c.D_hat = total;
    c.rho = ledger.eta_traj > 0.0 ? std::min(c.D_hat / ledger.eta_traj, 1.0) : 0.0;
    return c;
}

enum class StepAction { Recompute, Reuse };

struct StepDecision {
    int t = 0;
    StepAction action = StepAction::Recompute;
    std::optional<double> s;      // absent at t = T
    std::optional<double> c_hat;  // absent when not eligible or no envelope
    double B_rem_after = 0.0;
    int cache_origin = 0;  // step whose recompute produced the value consumed here
};

// Test-only instrumentation: the true denoiser mismatch at a reuse step,
// obtained by additionally evaluating the effective model on the cached state.
struct InstrumentedError {
    int t = 0;
    double e_frobenius = 0.0;  // |eps_theta(tau_tilde_t) - eps_used|_F
    double eps_normalized = 0.0;  // same, / sqrt(H d)
};

struct CachedRunRecord {
    Trajectory final_trajectory;
    Certificate certificate;
    BudgetLedger ledger;
    std::vector<StepDecision> decisions;  // in execution order, t = T .. 1
    std::vector<InstrumentedError> instrumented;  // empty unless requested
};

struct MuninnOptions {
    bool instrumented = false;  // double-evaluates at reuse steps; never used in production
};

struct ArtifactMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_artifact_compatible(const CalibrationArtifact& art, const NoiseSchedule& sched,
                                      const SamplerKind& kind) {
    CalibrationArtifact probe = art;
    probe.sched = sched;
    probe.kind = kind;
    if (probe.schedule_hash() != art.schedule_hash())
        throw ArtifactMismatch("artifact does not match the requested schedule/sampler");
}

// One budgeted sampling call. t = T always recomputes and seeds the cache;
// for t < T the probe and score are computed first, the cost immediately
// after the score, and the gate recomputes when t is outside the eligible
// band, the envelope is missing, or the cost exceeds the remaining budget.
// Recomputes reuse the stem already evaluated for the probe.
inline CachedRunRecord muninn_call(const EffectiveModel& model, const NoiseSchedule& sched, const SamplerKind& kind,
                                   const CalibrationArtifact& artifact, double eta_traj, const NoiseTape& tape,
                                   const std::vector<double>& context, const MuninnOptions& opts = {}) {
    if (!(eta_traj >= 0.0)) throw std::invalid_argument("muninn_call: eta_traj must be >= 0");
    check_artifact_compatible(artifact, sched, kind);
    if (static_cast<int>(tape.xi.size()) != sched.T) throw std::invalid_argument("muninn_call: tape length mismatch");

    CachedRunRecord rec;
    rec.ledger.eta_traj = eta_traj;
    rec.ledger.B_rem = eta_traj;

    Trajectory tau = tape.initial;
    NoisePrediction cache;
    int cache_origin = 0;
    ProbeFeature f_prev;

    for (int t = sched.T; t >= 1; --t) {
        Mat rep = model.net().stem(tau, t, context);
        if (!rep.all_finite()) throw DenoiserFailure(t, "non-finite stem output");
        ProbeFeature f_t = model.net().pool(rep, t);

        StepDecision dec;
        dec.t = t;
        std::optional<double> c_hat;
        if (t < sched.T) {
            const ProbeScore s_t = score(f_t, f_prev);
            dec.s = s_t.value;
            if (artifact.eligible.contains(t)) {
                const std::optional<double> bound = evaluate_envelope(artifact, t, s_t.value);
                if (bound.has_value()) c_hat = step_cost(artifact.profile.L[t - 1], artifact.gamma, *bound);
            }
            dec.c_hat = c_hat;
        }

        const bool must_recompute =
            (t == sched.T) || !artifact.eligible.contains(t) || !c_hat.has_value() || (*c_hat > rec.ledger.B_rem);

        NoisePrediction eps_used;
        if (must_recompute) {
            try {
                eps_used = model.effective_from_stem(rep, tau, t, context);
            } catch (const std::exception& e) {
                throw DenoiserFailure(t, e.what());
            }
            if (!eps_used.all_finite()) throw DenoiserFailure(t, "non-finite prediction");
            cache = eps_used;
            cache_origin = t;
            rec.ledger.n_eval += 1;
            dec.action = StepAction::Recompute;
        } else {
            eps_used = cache;
            rec.ledger.B_rem -= *c_hat;
            rec.ledger.spent.emplace_back(t, *c_hat);
            rec.ledger.reuse_set.push_back(t);
            dec.action = StepAction::Reuse;
            if (opts.instrumented) {
                const NoisePrediction fresh = model.effective(tau, t, context);
                const double e = (fresh - eps_used).frobenius_norm();
                const double norm = std::sqrt(static_cast<double>(tau.rows) * tau.cols);
                rec.instrumented.push_back({t, e, e / norm});
            }
        }
        dec.B_rem_after = rec.ledger.B_rem;
        dec.cache_origin = cache_origin;
        rec.decisions.push_back(dec);

        tau = sampler_update(tau, eps_used, t, sched, kind, tape.xi[t - 1]);
        f_prev = std::move(f_t);
    }

    rec.final_trajectory = std::move(tau);
    rec.certificate = certificate_of(rec.ledger);
    return rec;
}

struct BatchElementFailure : std::runtime_error {
    std::size_t index;
    BatchElementFailure(std::size_t i, const std::string& what)
        : std::runtime_error("batch element " + std::to_string(i) + ": " + what), index(i) {}
};

// Independent budgets per trajectory; equivalent to B sequential calls.
inline std::vector<CachedRunRecord> batched_calls(const EffectiveModel& model, const NoiseSchedule& sched,
                                                  const SamplerKind& kind, const CalibrationArtifact& artifact,
                                                  double eta_traj, const std::vector<NoiseTape>& tapes,
                                                  const std::vector<std::vector<double>>& contexts,
                                                  const MuninnOptions& opts = {}) {
    if (tapes.size() != contexts.size()) throw std::invalid_argument("batched_calls: tapes/contexts count mismatch");
    std::vector<CachedRunRecord> out;
    out.reserve(tapes.size());
    for (std::size_t i = 0; i < tapes.size(); ++i) {
        try {
            out.push_back(muninn_call(model, sched, kind, artifact, eta_traj, tapes[i], contexts[i], opts));
        } catch (const std::exception& e) {
            throw BatchElementFailure(i, e.what());
        }
    }
    return out;
}

}  // namespace muninn
