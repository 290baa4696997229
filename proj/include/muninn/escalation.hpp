#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "muninn/mat.hpp"
#include "muninn/policy.hpp"

namespace muninn {

enum class EscalationMode { Nominal, Warn, Resample, FullOverride };

struct EscalationConfig {
    double rho_warn = 0.60;
    double rho_resamp = 0.75;
    double rho_full = 0.90;
    double rho_clear = 0.50;
    double damping_warn = 0.70;
    double damping_resample = 0.50;
    int multi_sample_M = 4;
    int clear_streak_required = 2;

    void validate() const {
        if (!(0.0 <= rho_clear && rho_clear < rho_warn && rho_warn < rho_resamp && rho_resamp < rho_full &&
              rho_full <= 1.0))
            throw std::invalid_argument("EscalationConfig: need 0 <= clear < warn < resamp < full <= 1");
        if (multi_sample_M < 1) throw std::invalid_argument("EscalationConfig: M >= 1");
    }
};

struct EscalationState {
    EscalationMode mode = EscalationMode::Nominal;
    int clear_streak = 0;
};

inline EscalationMode entry_band(double rho, const EscalationConfig& cfg) {
    if (rho > cfg.rho_full) return EscalationMode::FullOverride;
    if (rho > cfg.rho_resamp) return EscalationMode::Resample;
    if (rho > cfg.rho_warn) return EscalationMode::Warn;
    return EscalationMode::Nominal;
}

// Hysteretic update: the mode is raised to the highest band whose entry
// threshold rho exceeds and never lowers except through the two-consecutive-
// clear rule; the streak resets whenever rho > rho_clear.
inline EscalationMode update_state(EscalationState& state, double rho, const EscalationConfig& cfg) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("update_state: rho in [0,1]");
    if (rho <= cfg.rho_clear)
        state.clear_streak += 1;
    else
        state.clear_streak = 0;

    if (state.clear_streak >= cfg.clear_streak_required) {
        state.mode = EscalationMode::Nominal;
        return state.mode;
    }
    const EscalationMode band = entry_band(rho, cfg);
    if (static_cast<int>(band) > static_cast<int>(state.mode)) state.mode = band;
    return state.mode;
}

// Nominal and FullOverride execute at full magnitude; the damping bands
// scale the command down.
inline double damping_factor(EscalationMode mode, const EscalationConfig& cfg) {
    switch (mode) {
        case EscalationMode::Warn:
            return cfg.damping_warn;
        case EscalationMode::Resample:
            return cfg.damping_resample;
        default:
            return 1.0;
    }
}

struct SelectionCandidate {
    Certificate certificate;
    bool feasible = false;
};

// argmin D_hat over feasible candidates, ties broken by lowest index; empty
// optional when nothing is feasible (caller escalates to full override).
inline std::optional<std::size_t> multi_sample_select(const std::vector<SelectionCandidate>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("multi_sample_select: empty candidate list");
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (!candidates[i].feasible) continue;
        if (!best.has_value() || candidates[i].certificate.D_hat < candidates[*best].certificate.D_hat) best = i;
    }
    return best;
}

struct MultiSampleRisk {
    double alpha_per_candidate = 0.0;
    double alpha_step_per_candidate = 0.0;
};

// alpha^(m) = alpha / M; alpha_step^(m) = alpha / (M * |T_cache|).
inline MultiSampleRisk allocate_multi_sample_risk(double alpha, int M, int eligible_count) {
    if (M < 1) throw std::invalid_argument("allocate_multi_sample_risk: M >= 1");
    if (eligible_count < 1) throw std::invalid_argument("allocate_multi_sample_risk: eligible_count >= 1");
    return {alpha / M, alpha / (static_cast<double>(M) * eligible_count)};
}

// Scale-then-saturate execution of a control command. FullOverride
// substitutes the full-compute command when available; a missed deadline
// falls back to the hold/stop command (all zeros).
inline std::vector<double> escalated_control(EscalationMode mode, const std::vector<double>& nominal,
                                             const std::vector<double>& limits, const EscalationConfig& cfg,
                                             const std::optional<std::vector<double>>& full_override_command = std::nullopt,
                                             bool deadline_missed = false) {
    if (nominal.size() != limits.size()) throw std::invalid_argument("escalated_control: limits dimension mismatch");
    if (mode == EscalationMode::FullOverride) {
        if (deadline_missed || !full_override_command.has_value())
            return std::vector<double>(nominal.size(), 0.0);  // safety hold
        std::vector<double> out = *full_override_command;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], -limits[i], limits[i]);
        return out;
    }
    const double lambda = damping_factor(mode, cfg);
    std::vector<double> out(nominal.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(lambda * nominal[i], -limits[i], limits[i]);
    return out;
}

struct EscalationEvent {
    int call_index = 0;
    double rho = 0.0;
    EscalationMode mode = EscalationMode::Nominal;
    std::string action;
    int M = 0;
    int selected = -1;
};

inline const char* escalation_mode_name(EscalationMode m) {
    switch (m) {
        case EscalationMode::Nominal:
            return "nominal";
        case EscalationMode::Warn:
            return "warn";
        case EscalationMode::Resample:
            return "resample";
        default:
            return "full_override";
    }
}

}  // namespace muninn
