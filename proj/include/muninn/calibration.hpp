#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muninn/denoisers.hpp"
#include "muninn/mat.hpp"
#include "muninn/rng.hpp"
#include "muninn/sampler.hpp"
#include "muninn/schedules.hpp"
#include "muninn/serialize.hpp"

namespace muninn {

// Ceiling that tolerates the usual float dust on products like 0.10 * 100.
inline int ceil_exact(double x) { return static_cast<int>(std::ceil(x - 1e-9)); }

// Reuse-eligible middle band: k_suf < t <= T - k_pre, with t = T always
// excluded (the first step is always recomputed).
struct EligibleSet {
    int T = 0;
    int k_pre = 0;
    int k_suf = 0;
    std::vector<int> members;  // ascending

    bool contains(int t) const { return std::binary_search(members.begin(), members.end(), t); }
    std::size_t size() const { return members.size(); }
};

inline EligibleSet eligible_timesteps(int T, double frac_pre, double frac_suf) {
    if (T < 1) throw std::invalid_argument("eligible_timesteps: T must be >= 1");
    if (!(frac_pre >= 0.0 && frac_pre < 0.5 && frac_suf >= 0.0 && frac_suf < 0.5))
        throw std::invalid_argument("eligible_timesteps: fractions must be in [0, 0.5)");
    EligibleSet e;
    e.T = T;
    e.k_pre = ceil_exact(frac_pre * T);
    e.k_suf = ceil_exact(frac_suf * T);
    for (int t = e.k_suf + 1; t <= T - e.k_pre; ++t)
        if (t != T) e.members.push_back(t);
    return e;
}

// Anchor schedule for the ghost chain: every non-eligible step plus every
// stride-th step.
inline std::vector<int> anchor_set(int T, int stride, const EligibleSet& eligible) {
    if (stride < 1) throw std::invalid_argument("anchor_set: stride must be >= 1");
    std::vector<int> anchors;
    for (int t = 1; t <= T; ++t)
        if (t % stride == 0 || !eligible.contains(t)) anchors.push_back(t);
    return anchors;
}

struct CalibrationPair {
    double s = 0.0;    // probe score from the ghost chain
    double eps = 0.0;  // potential reuse error, |eps_full - cache|_F / sqrt(H d)
    int t = 0;
    int episode = 0;
};

struct CalibrationData {
    std::map<int, std::vector<CalibrationPair>> pairs_by_t;
    std::vector<double> ghost_deviations;  // paired d(tau_full_0, tau_ghost_0) per completed episode
    int skipped = 0;
};

struct EpisodeCalibration {
    std::vector<CalibrationPair> pairs;
    double ghost_deviation = 0.0;
};

// One calibration episode: a full chain paired with a ghost chain on the same
// tape. The ghost chain recomputes only on anchors, and an anchor copies the
// full chain's effective prediction into the cache (the cache is never
// refreshed from the ghost state).
inline EpisodeCalibration calibrate_episode(const EffectiveModel& model, const NoiseSchedule& sched,
                                            const SamplerKind& kind, const std::vector<double>& context,
                                            const NoiseTape& tape, const EligibleSet& eligible,
                                            const std::vector<int>& anchors, int episode_id) {
    const FullRunRecord full = run_full_chain(model.bind(context), sched, kind, tape);
    const auto is_anchor = [&](int t) { return std::binary_search(anchors.begin(), anchors.end(), t); };

    EpisodeCalibration out;
    Trajectory tau_g = tape.initial;
    const double norm = std::sqrt(static_cast<double>(tau_g.rows) * tau_g.cols);

    // Step T: always an anchor; seeds the cache and the probe history.
    NoisePrediction cache = full.effective_eps[sched.T - 1];
    ProbeFeature f_prev = model.probe(tau_g, sched.T, context);
    tau_g = sampler_update(tau_g, cache, sched.T, sched, kind, tape.xi[sched.T - 1]);

    for (int t = sched.T - 1; t >= 1; --t) {
        const ProbeFeature f_t = model.probe(tau_g, t, context);
        const ProbeScore s_t = score(f_t, f_prev);
        if (eligible.contains(t)) {
            const double eps_label = (full.effective_eps[t - 1] - cache).frobenius_norm() / norm;
            out.pairs.push_back({s_t.value, eps_label, t, episode_id});
        }
        NoisePrediction eps_used;
        if (is_anchor(t)) {
            eps_used = full.effective_eps[t - 1];
            cache = eps_used;
        } else {
            eps_used = cache;
        }
        tau_g = sampler_update(tau_g, eps_used, t, sched, kind, tape.xi[t - 1]);
        f_prev = f_t;
    }
    out.ghost_deviation = (full.states[0] - tau_g).frobenius_norm() / std::sqrt(static_cast<double>(tau_g.rows));
    return out;
}

inline CalibrationData generate_calibration(const EffectiveModel& model, const NoiseSchedule& sched,
                                            const SamplerKind& kind,
                                            const std::vector<std::vector<double>>& contexts,
                                            const std::vector<NoiseTape>& tapes, const EligibleSet& eligible,
                                            int stride) {
    if (contexts.size() != tapes.size()) throw std::invalid_argument("generate_calibration: contexts/tapes count mismatch");
    const std::vector<int> anchors = anchor_set(sched.T, stride, eligible);
    CalibrationData data;
    for (std::size_t i = 0; i < tapes.size(); ++i) {
        try {
            EpisodeCalibration ep =
                calibrate_episode(model, sched, kind, contexts[i], tapes[i], eligible, anchors, static_cast<int>(i));
            for (auto& p : ep.pairs) data.pairs_by_t[p.t].push_back(p);
            data.ghost_deviations.push_back(ep.ghost_deviation);
        } catch (const std::exception&) {
            ++data.skipped;
        }
    }
    return data;
}

// Least-squares isotonic (nondecreasing) fit via pool-adjacent-violators.
// Ties in s are pre-averaged; evaluation is piecewise-linear through the
// fitted knots and clamps to boundary values outside the fitted range.
struct IsotonicFit {
    std::vector<double> knot_s;
    std::vector<double> knot_m;

    double eval(double s) const {
        if (knot_s.empty()) throw std::logic_error("IsotonicFit: empty fit");
        if (s <= knot_s.front()) return knot_m.front();
        if (s >= knot_s.back()) return knot_m.back();
        const auto it = std::upper_bound(knot_s.begin(), knot_s.end(), s);
        const std::size_t hi = static_cast<std::size_t>(it - knot_s.begin());
        const std::size_t lo = hi - 1;
        const double w = (s - knot_s[lo]) / (knot_s[hi] - knot_s[lo]);
        return knot_m[lo] + w * (knot_m[hi] - knot_m[lo]);
    }
};

inline IsotonicFit fit_isotonic(std::vector<std::pair<double, double>> pts) {
    if (pts.empty()) throw std::invalid_argument("fit_isotonic: empty input");
    std::sort(pts.begin(), pts.end());

    // Collapse duplicate s values to their weighted mean.
    std::vector<double> s, y, w;
    for (const auto& [si, yi] : pts) {
        if (!s.empty() && si == s.back()) {
            y.back() = (y.back() * w.back() + yi) / (w.back() + 1.0);
            w.back() += 1.0;
        } else {
            s.push_back(si);
            y.push_back(yi);
            w.push_back(1.0);
        }
    }

    // PAVA: maintain a stack of blocks with nondecreasing means.
    std::vector<double> bm, bw;    // block mean, block weight
    std::vector<std::size_t> bn;   // block length (in distinct-s points)
    for (std::size_t i = 0; i < s.size(); ++i) {
        bm.push_back(y[i]);
        bw.push_back(w[i]);
        bn.push_back(1);
        while (bm.size() > 1 && bm[bm.size() - 2] >= bm.back()) {
            const double merged_w = bw[bw.size() - 2] + bw.back();
            bm[bm.size() - 2] = (bm[bm.size() - 2] * bw[bw.size() - 2] + bm.back() * bw.back()) / merged_w;
            bw[bw.size() - 2] = merged_w;
            bn[bn.size() - 2] += bn.back();
            bm.pop_back();
            bw.pop_back();
            bn.pop_back();
        }
    }

    IsotonicFit fit;
    fit.knot_s = std::move(s);
    fit.knot_m.reserve(fit.knot_s.size());
    for (std::size_t b = 0; b < bm.size(); ++b)
        for (std::size_t k = 0; k < bn[b]; ++k) fit.knot_m.push_back(bm[b]);
    return fit;
}

// Finite-sample conformal quantile index: k = ceil((n+1)(1-alpha_step)),
// capped at n; q is the k-th order statistic (1-based).
inline std::size_t conformal_quantile_index(std::size_t n, double alpha_step) {
    if (n == 0) throw std::invalid_argument("conformal_quantile_index: empty residuals");
    if (!(alpha_step > 0.0 && alpha_step < 1.0)) throw std::invalid_argument("conformal_quantile_index: alpha_step in (0,1)");
    const double x = static_cast<double>(n + 1) * (1.0 - alpha_step);
    long long k = static_cast<long long>(std::ceil(x - 1e-9));
    k = std::max<long long>(1, std::min<long long>(k, static_cast<long long>(n)));
    return static_cast<std::size_t>(k);
}

inline double conformal_quantile(std::vector<double> residuals, double alpha_step) {
    const std::size_t k = conformal_quantile_index(residuals.size(), alpha_step);
    std::sort(residuals.begin(), residuals.end());
    return residuals[k - 1];
}

// Per-timestep upper envelope U_t(s) = max(m_t(s) + q_t, 0), tabulated on a
// 256-node log-score grid spanning the empirical 0.1%-99.9% score range and
// evaluated by linear interpolation in log-score; clamped outside the grid.
struct ConformalEnvelope {
    int t = 0;
    bool usable = false;
    IsotonicFit fit;
    double q = 0.0;
    std::vector<double> grid_log_s;
    std::vector<double> grid_value;
    std::uint32_t n_train = 0;
    std::uint32_t n_cal = 0;

    double eval(double s) const {
        if (!usable || grid_value.empty()) throw std::logic_error("ConformalEnvelope: not usable");
        if (grid_value.size() == 1) return grid_value[0];
        const double lo = grid_log_s.front(), hi = grid_log_s.back();
        const double ls = std::log(std::max(s, 1e-300));
        if (ls <= lo) return grid_value.front();
        if (ls >= hi) return grid_value.back();
        const auto it = std::upper_bound(grid_log_s.begin(), grid_log_s.end(), ls);
        const std::size_t hi_i = static_cast<std::size_t>(it - grid_log_s.begin());
        const std::size_t lo_i = hi_i - 1;
        const double w = (ls - grid_log_s[lo_i]) / (grid_log_s[hi_i] - grid_log_s[lo_i]);
        return grid_value[lo_i] + w * (grid_value[hi_i] - grid_value[lo_i]);
    }
};

inline constexpr int kEnvelopeGridNodes = 256;

namespace detail {
inline double linear_percentile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw std::invalid_argument("percentile of empty list");
    if (sorted.size() == 1) return sorted[0];
    const double idx = p * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double w = idx - static_cast<double>(lo);
    return sorted[lo] + w * (sorted[hi] - sorted[lo]);
}

inline void tabulate_envelope(ConformalEnvelope& env, const std::vector<double>& scores) {
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    double lo = linear_percentile(sorted, 0.001);
    double hi = linear_percentile(sorted, 0.999);
    if (lo <= 0.0) {
        // log grid needs positive bounds; fall back to the smallest positive score
        const auto it = std::upper_bound(sorted.begin(), sorted.end(), 0.0);
        lo = (it != sorted.end()) ? *it : 0.0;
    }
    if (!(hi > lo) || !(lo > 0.0)) {
        // degenerate score range: single-node table returning m + q constantly
        env.grid_log_s = {0.0};
        env.grid_value = {std::max(env.fit.eval(sorted.back()) + env.q, 0.0)};
        return;
    }
    const double llo = std::log(lo), lhi = std::log(hi);
    env.grid_log_s.resize(kEnvelopeGridNodes);
    env.grid_value.resize(kEnvelopeGridNodes);
    for (int i = 0; i < kEnvelopeGridNodes; ++i) {
        const double ls = llo + (lhi - llo) * static_cast<double>(i) / (kEnvelopeGridNodes - 1);
        env.grid_log_s[i] = ls;
        env.grid_value[i] = std::max(env.fit.eval(std::exp(ls)) + env.q, 0.0);
    }
}
}  // namespace detail

struct ArtifactProvenance {
    std::uint64_t n_episodes = 0;
    std::uint64_t tape_seed_base = 0;
    std::uint64_t context_seed_base = 0;
    std::uint64_t split_seed = 0;
    std::uint32_t anchor_stride = 4;
    std::uint32_t skipped_episodes = 0;
    std::vector<double> ghost_deviations_sorted;
    std::uint64_t config_hash = 0;
};

// Immutable calibration product: schedule, sampler, sensitivities, eligible
// set, per-timestep envelopes and provenance.
struct CalibrationArtifact {
    static constexpr std::uint32_t kFormatVersion = 1;

    NoiseSchedule sched;
    SamplerKind kind;
    SensitivityProfile profile;
    double gamma = 1.0;
    double alpha = 0.05;
    double alpha_step = 0.0;
    EligibleSet eligible;
    std::vector<ConformalEnvelope> envelopes;  // ascending t, one per eligible t
    ArtifactProvenance prov;

    const ConformalEnvelope* envelope_for(int t) const {
        const auto it = std::lower_bound(envelopes.begin(), envelopes.end(), t,
                                         [](const ConformalEnvelope& e, int tt) { return e.t < tt; });
        if (it == envelopes.end() || it->t != t) return nullptr;
        return &*it;
    }

    // Lineage hash of everything the policy must agree on with the runtime config.
    std::uint64_t schedule_hash() const {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(sched.T));
        w.f64_vec(sched.beta);
        w.u8(kind.variant == SamplerVariant::Ddpm ? 0 : 1);
        w.f64(kind.eta);
        w.u8(kind.ddpm_sigma_rule == DdpmSigmaRule::Beta ? 0 : 1);
        w.f64(gamma);
        w.u32(static_cast<std::uint32_t>(eligible.k_pre));
        w.u32(static_cast<std::uint32_t>(eligible.k_suf));
        return fnv1a64(w.bytes());
    }
};

// Build per-timestep envelopes by a fixed-permutation split: the first half
// of the permuted pairs trains the isotonic fit, the second half provides the
// conformal residual quantile. Pairs are canonically ordered by episode id
// first so calibration is invariant to episode arrival order. A timestep with
// fewer than two pairs is marked reuse-forbidden.
inline CalibrationArtifact build_artifact(const std::map<int, std::vector<CalibrationPair>>& pairs_by_t,
                                          const SensitivityProfile& profile, const NoiseSchedule& sched,
                                          const SamplerKind& kind, double gamma, double alpha,
                                          const EligibleSet& eligible, std::uint64_t split_seed,
                                          ArtifactProvenance prov = {}) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("build_artifact: alpha in (0,1)");
    CalibrationArtifact art;
    art.sched = sched;
    art.kind = kind;
    art.profile = profile;
    art.gamma = gamma;
    art.alpha = alpha;
    art.eligible = eligible;
    art.alpha_step = eligible.members.empty() ? alpha : alpha / static_cast<double>(eligible.members.size());
    art.prov = prov;
    art.prov.split_seed = split_seed;

    for (int t : eligible.members) {
        ConformalEnvelope env;
        env.t = t;
        const auto it = pairs_by_t.find(t);
        if (it != pairs_by_t.end() && it->second.size() >= 2) {
            std::vector<CalibrationPair> pairs = it->second;
            std::sort(pairs.begin(), pairs.end(),
                      [](const CalibrationPair& a, const CalibrationPair& b) { return a.episode < b.episode; });
            const std::vector<std::size_t> perm = random_permutation(pairs.size(), split_seed);
            const std::size_t n_train = pairs.size() / 2;

            std::vector<std::pair<double, double>> train;
            std::vector<double> residual_scores, residuals;
            std::vector<double> all_scores;
            all_scores.reserve(pairs.size());
            for (std::size_t i = 0; i < perm.size(); ++i) {
                const CalibrationPair& p = pairs[perm[i]];
                all_scores.push_back(p.s);
                if (i < n_train)
                    train.emplace_back(p.s, p.eps);
                else
                    residual_scores.push_back(p.s), residuals.push_back(p.eps);
            }
            env.fit = fit_isotonic(train);
            for (std::size_t i = 0; i < residuals.size(); ++i) residuals[i] -= env.fit.eval(residual_scores[i]);
            env.q = conformal_quantile(residuals, art.alpha_step);
            env.n_train = static_cast<std::uint32_t>(n_train);
            env.n_cal = static_cast<std::uint32_t>(pairs.size() - n_train);
            env.usable = true;
            detail::tabulate_envelope(env, all_scores);
        }
        art.envelopes.push_back(std::move(env));
    }
    return art;
}

// Envelope lookup; empty optional signals reuse-forbidden at t.
inline std::optional<double> evaluate_envelope(const CalibrationArtifact& art, int t, double s) {
    const ConformalEnvelope* env = art.envelope_for(t);
    if (env == nullptr || !env->usable) return std::nullopt;
    return env->eval(s);
}

// ---- binary artifact format -------------------------------------------------
//
// "MUNN" | u32 version | u64 payload length | payload | u32 crc32(payload)

struct UnsupportedVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ChecksumError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string encode_artifact_payload(const CalibrationArtifact& art) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(art.sched.T));
    w.f64_vec(art.sched.beta);
    w.f64_vec(art.sched.alpha);
    w.f64_vec(art.sched.alpha_bar);
    w.u8(art.kind.variant == SamplerVariant::Ddpm ? 0 : 1);
    w.f64(art.kind.eta);
    w.u8(art.kind.ddpm_sigma_rule == DdpmSigmaRule::Beta ? 0 : 1);
    w.f64_vec(art.profile.K);
    w.f64_vec(art.profile.L_prime);
    w.f64_vec(art.profile.L);
    w.f64_vec(art.profile.log_K_cumsum);
    w.f64(art.gamma);
    w.f64(art.alpha);
    w.f64(art.alpha_step);
    w.u32(static_cast<std::uint32_t>(art.eligible.T));
    w.u32(static_cast<std::uint32_t>(art.eligible.k_pre));
    w.u32(static_cast<std::uint32_t>(art.eligible.k_suf));
    {
        std::vector<std::uint32_t> members(art.eligible.members.begin(), art.eligible.members.end());
        w.u32_vec(members);
    }
    w.u32(static_cast<std::uint32_t>(art.envelopes.size()));
    for (const auto& env : art.envelopes) {
        w.u32(static_cast<std::uint32_t>(env.t));
        w.u8(env.usable ? 1 : 0);
        if (env.usable) {
            w.f64_vec(env.fit.knot_s);
            w.f64_vec(env.fit.knot_m);
            w.f64(env.q);
            w.f64_vec(env.grid_log_s);
            w.f64_vec(env.grid_value);
            w.u32(env.n_train);
            w.u32(env.n_cal);
        }
    }
    w.u64(art.prov.n_episodes);
    w.u64(art.prov.tape_seed_base);
    w.u64(art.prov.context_seed_base);
    w.u64(art.prov.split_seed);
    w.u32(art.prov.anchor_stride);
    w.u32(art.prov.skipped_episodes);
    w.f64_vec(art.prov.ghost_deviations_sorted);
    w.u64(art.prov.config_hash);
    return w.bytes();
}

inline CalibrationArtifact decode_artifact_payload(const std::string& payload) {
    ByteReader r(payload);
    CalibrationArtifact art;
    art.sched.T = static_cast<int>(r.u32());
    art.sched.beta = r.f64_vec();
    art.sched.alpha = r.f64_vec();
    art.sched.alpha_bar = r.f64_vec();
    art.kind.variant = r.u8() == 0 ? SamplerVariant::Ddpm : SamplerVariant::Ddim;
    art.kind.eta = r.f64();
    art.kind.ddpm_sigma_rule = r.u8() == 0 ? DdpmSigmaRule::Beta : DdpmSigmaRule::BetaTilde;
    art.profile.K = r.f64_vec();
    art.profile.L_prime = r.f64_vec();
    art.profile.L = r.f64_vec();
    art.profile.log_K_cumsum = r.f64_vec();
    art.gamma = r.f64();
    art.alpha = r.f64();
    art.alpha_step = r.f64();
    art.eligible.T = static_cast<int>(r.u32());
    art.eligible.k_pre = static_cast<int>(r.u32());
    art.eligible.k_suf = static_cast<int>(r.u32());
    for (std::uint32_t m : r.u32_vec()) art.eligible.members.push_back(static_cast<int>(m));
    const std::uint32_t n_env = r.u32();
    for (std::uint32_t i = 0; i < n_env; ++i) {
        ConformalEnvelope env;
        env.t = static_cast<int>(r.u32());
        env.usable = r.u8() != 0;
        if (env.usable) {
            env.fit.knot_s = r.f64_vec();
            env.fit.knot_m = r.f64_vec();
            env.q = r.f64();
            env.grid_log_s = r.f64_vec();
            env.grid_value = r.f64_vec();
            env.n_train = r.u32();
            env.n_cal = r.u32();
        }
        art.envelopes.push_back(std::move(env));
    }
    art.prov.n_episodes = r.u64();
    art.prov.tape_seed_base = r.u64();
    art.prov.context_seed_base = r.u64();
    art.prov.split_seed = r.u64();
    art.prov.anchor_stride = r.u32();
    art.prov.skipped_episodes = r.u32();
    art.prov.ghost_deviations_sorted = r.f64_vec();
    art.prov.config_hash = r.u64();
    if (!r.exhausted()) throw DeserializeError("trailing bytes in artifact payload");
    return art;
}

inline std::string encode_artifact(const CalibrationArtifact& art) {
    const std::string payload = encode_artifact_payload(art);
    ByteWriter w;
    w.u8('M');
    w.u8('U');
    w.u8('N');
    w.u8('N');
    w.u32(CalibrationArtifact::kFormatVersion);
    w.u64(payload.size());
    std::string out = w.bytes();
    out += payload;
    ByteWriter tail;
    tail.u32(crc32(payload));
    out += tail.bytes();
    return out;
}

inline CalibrationArtifact decode_artifact(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "MUNN") != 0)
        throw DeserializeError("not an artifact file (bad magic)");
    ByteReader head(bytes);
    head.u8(), head.u8(), head.u8(), head.u8();
    const std::uint32_t version = head.u32();
    if (version != CalibrationArtifact::kFormatVersion)
        throw UnsupportedVersionError("unsupported artifact version " + std::to_string(version));
    const std::uint64_t len = head.u64();
    if (bytes.size() != 16 + len + 4) throw DeserializeError("truncated artifact file");
    const std::string payload = bytes.substr(16, len);
    ByteReader tail(bytes.substr(16 + len));
    if (crc32(payload) != tail.u32()) throw ChecksumError("artifact checksum mismatch");
    return decode_artifact_payload(payload);
}

inline void save_artifact(const CalibrationArtifact& art, const std::string& path) {
    write_file_bytes(path, encode_artifact(art));
}

inline CalibrationArtifact load_artifact(const std::string& path) { return decode_artifact(read_file_bytes(path)); }

}  // namespace muninn
