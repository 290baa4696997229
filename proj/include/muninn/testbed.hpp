#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muninn/denoisers.hpp"
#include "muninn/escalation.hpp"
#include "muninn/metrics.hpp"
#include "muninn/policy.hpp"
#include "muninn/sampler.hpp"

namespace muninn {

// Synthetic planning task with an exactly known data distribution: trajectory
// samples are N(mu + context, sigma2 I) per element, the goal offset entering
// through the context. The analytic denoiser is its exact oracle teacher.
struct GaussianTrajectoryTask {
    int H = 1;
    int d = 1;
    Mat mu;
    double sigma2 = 1.0;
    double context_scale = 0.0;  // stddev of the goal-offset context; 0 = context-free

    GaussianTrajectoryTask(int H_, int d_, double mu_fill, double sigma2_, double ctx_scale)
        : H(H_), d(d_), mu(H_, d_, mu_fill), sigma2(sigma2_), context_scale(ctx_scale) {}

    std::vector<double> sample_context(std::uint64_t seed) const {
        std::vector<double> c(d, 0.0);
        if (context_scale > 0.0)
            for (int j = 0; j < d; ++j) c[j] = context_scale * rng_gauss(seed, 0xC047EE7ULL, j);
        return c;
    }

    std::shared_ptr<AnalyticGaussianDenoiser> make_denoiser(const NoiseSchedule& sched) const {
        return std::make_shared<AnalyticGaussianDenoiser>(sched, mu, sigma2);
    }
};

// ---- point-mass navigation world ---------------------------------------------

struct Obstacle {
    double cx = 0.0, cy = 0.0, r = 0.0;
};

struct PointMassWorld {
    double xmin = -1.0, xmax = 1.0, ymin = -1.0, ymax = 1.0;
    std::vector<Obstacle> obstacles;
    std::array<double, 2> start{0.0, 0.0};
    std::array<double, 2> goal{0.0, 0.0};
    double goal_radius = 0.05;
    int step_limit = 200;
    double control_limit = 0.2;  // per-axis command bound

    bool in_bounds(double x, double y) const { return x >= xmin && x <= xmax && y >= ymin && y <= ymax; }

    // Collision iff strictly inside an obstacle (distance < radius).
    bool collides(double x, double y) const {
        for (const auto& o : obstacles) {
            const double dx = x - o.cx, dy = y - o.cy;
            if (std::sqrt(dx * dx + dy * dy) < o.r) return true;
        }
        return false;
    }

    bool point_free(double x, double y) const { return in_bounds(x, y) && !collides(x, y); }

    void validate() const {
        for (const auto& o : obstacles)
            if (!(o.r > 0.0)) throw std::invalid_argument("PointMassWorld: obstacle radius must be positive");
        if (!point_free(start[0], start[1]) || !point_free(goal[0], goal[1]))
            throw std::invalid_argument("PointMassWorld: start and goal must be collision-free");
    }
};

// Geometric screen: every waypoint plus 10 linear interpolants per segment
// must be in bounds and outside all obstacles (strict interior test).
inline bool feasibility_check(const Trajectory& waypoints, const PointMassWorld& world) {
    if (waypoints.cols != 2) throw std::invalid_argument("feasibility_check: expected H x 2 positions");
    for (int i = 0; i < waypoints.rows; ++i)
        if (!world.point_free(waypoints.at(i, 0), waypoints.at(i, 1))) return false;
    for (int i = 0; i + 1 < waypoints.rows; ++i) {
        for (int k = 1; k <= 10; ++k) {
            const double w = static_cast<double>(k) / 11.0;
            const double x = waypoints.at(i, 0) + w * (waypoints.at(i + 1, 0) - waypoints.at(i, 0));
            const double y = waypoints.at(i, 1) + w * (waypoints.at(i + 1, 1) - waypoints.at(i, 1));
            if (!world.point_free(x, y)) return false;
        }
    }
    return true;
}

// ---- closed-loop evaluation ----------------------------------------------------

enum class PlannerType { Full, Muninn };

struct EscalationOptions {
    bool enabled = false;
    bool dampen = false;
    bool resample = false;
    bool full_override = false;
    EscalationConfig cfg;
    bool inject_deadline_fault = false;  // forces the safety fallback on overrides
};

struct EpisodeReport {
    bool success = false;
    bool collision = false;
    bool planner_failure = false;
    int steps_taken = 0;
    std::vector<double> d_per_decision;  // empty when paired comparison is off
    std::vector<int> n_eval_per_decision;
    std::vector<Certificate> certificates;
    std::vector<double> wall_ms_per_decision;
    std::vector<EscalationEvent> escalation_events;
};

struct ClosedLoopSetup {
    const EffectiveModel* model = nullptr;
    const NoiseSchedule* sched = nullptr;
    SamplerKind kind;
    const CalibrationArtifact* artifact = nullptr;  // required for Muninn
    double eta_traj = 0.0;
    PlannerType planner = PlannerType::Full;
    int replan_every = 4;
    bool paired = false;  // also runs the full chain per decision for d
    EscalationOptions escalation;
    // Builds the denoiser context from (position, goal).
    std::function<std::vector<double>(const std::array<double, 2>&, const std::array<double, 2>&)> context_fn;
};

namespace detail {
inline Trajectory absolute_waypoints(const Trajectory& rel, const std::array<double, 2>& p) {
    Trajectory abs = rel;
    for (int i = 0; i < abs.rows; ++i) {
        abs.at(i, 0) += p[0];
        abs.at(i, 1) += p[1];
    }
    return abs;
}
}  // namespace detail

// Receding-horizon rollout: each replan samples a trajectory (planned points
// are relative to the current position), executes replan_every of its
// successive position deltas, and terminates on goal entry, collision, or the
// step limit.
inline EpisodeReport rollout_closed_loop(const PointMassWorld& world, const ClosedLoopSetup& setup,
                                         std::uint64_t tape_seed) {
    world.validate();
    if (setup.model == nullptr || setup.sched == nullptr) throw std::invalid_argument("rollout: model/schedule required");
    if (setup.planner == PlannerType::Muninn && setup.artifact == nullptr)
        throw std::invalid_argument("rollout: artifact required for the caching planner");
    const int H = setup.model->net().horizon();
    if (setup.model->net().dim() != 2) throw std::invalid_argument("rollout: point-mass planner needs d = 2");
    if (setup.replan_every > H) throw std::invalid_argument("rollout: replan_every must not exceed the horizon");

    EpisodeReport rep;
    EscalationState esc_state;
    std::array<double, 2> p = world.start;
    int call_index = 0;

    while (rep.steps_taken < world.step_limit) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<double> context = setup.context_fn(p, world.goal);
        const NoiseTape tape =
            NoiseTape::make(derive_seed(tape_seed, 0x9A11ULL, static_cast<std::uint64_t>(call_index)), setup.sched->T,
                            H, 2, setup.kind.stochastic());

        Trajectory plan;
        Certificate cert;
        int n_eval = setup.sched->T;
        std::optional<double> d_paired;
        try {
            if (setup.planner == PlannerType::Full) {
                plan = run_full_chain(setup.model->bind(context), *setup.sched, setup.kind, tape).final_trajectory();
            } else {
                const CachedRunRecord rec = muninn_call(*setup.model, *setup.sched, setup.kind, *setup.artifact,
                                                        setup.eta_traj, tape, context);
                plan = rec.final_trajectory;
                cert = rec.certificate;
                n_eval = rec.ledger.n_eval;
                if (setup.paired) {
                    const FullRunRecord full = run_full_chain(setup.model->bind(context), *setup.sched, setup.kind, tape);
                    d_paired = deviation(full.final_trajectory(), plan);
                }
            }
        } catch (const std::exception&) {
            rep.planner_failure = true;
            rep.success = false;
            return rep;
        }

        EscalationMode mode = EscalationMode::Nominal;
        EscalationEvent event;
        event.call_index = call_index;
        if (setup.escalation.enabled && setup.planner == PlannerType::Muninn) {
            mode = update_state(esc_state, cert.rho, setup.escalation.cfg);
            event.rho = cert.rho;
            event.mode = mode;
            event.action = "none";

            if (mode == EscalationMode::Resample && setup.escalation.resample) {
                const int M = setup.escalation.cfg.multi_sample_M;
                std::vector<SelectionCandidate> cands;
                std::vector<Trajectory> cand_plans;
                std::vector<Certificate> cand_certs;
                std::vector<int> cand_evals;
                for (int m = 0; m < M; ++m) {
                    const NoiseTape mt = NoiseTape::make(
                        derive_seed(tape_seed, 0x5A3ULL, (static_cast<std::uint64_t>(call_index) << 8) | m),
                        setup.sched->T, H, 2, setup.kind.stochastic());
                    const CachedRunRecord rc = muninn_call(*setup.model, *setup.sched, setup.kind, *setup.artifact,
                                                           setup.eta_traj, mt, context);
                    const bool feasible = feasibility_check(detail::absolute_waypoints(rc.final_trajectory, p), world);
                    cands.push_back({rc.certificate, feasible});
                    cand_plans.push_back(rc.final_trajectory);
                    cand_certs.push_back(rc.certificate);
                    cand_evals.push_back(rc.ledger.n_eval);
                }
                const std::optional<std::size_t> pick = multi_sample_select(cands);
                event.M = M;
                if (pick.has_value()) {
                    plan = cand_plans[*pick];
                    cert = cand_certs[*pick];
                    n_eval += cand_evals[*pick];
                    event.action = "resample";
                    event.selected = static_cast<int>(*pick);
                } else {
                    mode = EscalationMode::FullOverride;  // nothing feasible
                    event.mode = mode;
                }
            }
            if (mode == EscalationMode::FullOverride && setup.escalation.full_override) {
                if (setup.escalation.inject_deadline_fault) {
                    event.action = "safety_fallback";
                    plan = Trajectory(H, 2, 0.0);  // hold: zero deltas
                    cert = Certificate{};
                } else {
                    plan = run_full_chain(setup.model->bind(context), *setup.sched, setup.kind, tape).final_trajectory();
                    n_eval = setup.sched->T;
                    event.action = "full_override";
                    cert = Certificate{};
                }
            } else if (mode == EscalationMode::Warn || mode == EscalationMode::Resample) {
                if (setup.escalation.dampen && event.action == "none") event.action = "dampen";
            }
            rep.escalation_events.push_back(event);
        }

        const auto t1 = std::chrono::steady_clock::now();
        rep.wall_ms_per_decision.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        rep.n_eval_per_decision.push_back(n_eval);
        rep.certificates.push_back(cert);
        if (d_paired.has_value()) rep.d_per_decision.push_back(*d_paired);

        // The planned rows are positions relative to the current p; commands
        // are the successive deltas of the absolute waypoints.
        const double lambda =
            (setup.escalation.enabled && setup.escalation.dampen && mode != EscalationMode::FullOverride)
                ? damping_factor(mode, setup.escalation.cfg)
                : 1.0;
        std::array<double, 2> prev = p;
        bool done = false;
        for (int k = 0; k < setup.replan_every && !done; ++k) {
            const std::array<double, 2> wp{p[0] + plan.at(k, 0), p[1] + plan.at(k, 1)};
            double ux = std::clamp(lambda * (wp[0] - prev[0]), -world.control_limit, world.control_limit);
            double uy = std::clamp(lambda * (wp[1] - prev[1]), -world.control_limit, world.control_limit);
            prev = {prev[0] + ux, prev[1] + uy};
            rep.steps_taken += 1;
            if (!world.in_bounds(prev[0], prev[1]) || world.collides(prev[0], prev[1])) {
                rep.collision = true;
                done = true;
                break;
            }
            const double gx = prev[0] - world.goal[0], gy = prev[1] - world.goal[1];
            if (std::sqrt(gx * gx + gy * gy) <= world.goal_radius) {
                rep.success = true;
                done = true;
                break;
            }
            if (rep.steps_taken >= world.step_limit) {
                done = true;
                break;
            }
        }
        p = prev;
        if (done && (rep.success || rep.collision || rep.steps_taken >= world.step_limit)) break;
        ++call_index;
    }
    return rep;
}

// ---- paired full-vs-cached evaluation -------------------------------------------

struct DecisionRecord {
    int episode = 0;
    double d = 0.0;
    bool violated = false;
    int n_eval = 0;
    Certificate certificate;
    std::vector<InstrumentedError> instrumented;
    std::vector<StepDecision> decisions;
};

struct PairedEvalResult {
    std::vector<DecisionRecord> records;
    bool paired = true;
    double wall_seconds = 0.0;
};

struct EvalSetup {
    int H = 1;
    int d = 1;
    std::function<std::vector<double>(std::uint64_t)> sample_context;  // seed -> context
    bool paired = true;
    bool instrumented = false;
    bool keep_decisions = false;
};

// One decision per episode: full and cached chains share the tape; seeds are
// derived from eval_seed and must be disjoint from the calibration role.
inline PairedEvalResult paired_eval(const EffectiveModel& model, const NoiseSchedule& sched, const SamplerKind& kind,
                                    const CalibrationArtifact& artifact, double eta_traj, double /*alpha*/,
                                    int episodes, std::uint64_t eval_seed, const EvalSetup& setup) {
    if (episodes <= 0) throw std::invalid_argument("paired_eval: need at least one episode");
    const auto t0 = std::chrono::steady_clock::now();
    PairedEvalResult res;
    res.paired = setup.paired;
    MuninnOptions opts;
    opts.instrumented = setup.instrumented;
    for (int i = 0; i < episodes; ++i) {
        const std::vector<double> context = setup.sample_context(derive_seed(eval_seed, 0xC7FULL, i));
        const NoiseTape tape =
            NoiseTape::make(derive_seed(eval_seed, 0x7A9EULL, i), sched.T, setup.H, setup.d, kind.stochastic());
        DecisionRecord rec;
        rec.episode = i;
        const CachedRunRecord cached = muninn_call(model, sched, kind, artifact, eta_traj, tape, context, opts);
        rec.n_eval = cached.ledger.n_eval;
        rec.certificate = cached.certificate;
        rec.instrumented = cached.instrumented;
        if (setup.keep_decisions) rec.decisions = cached.decisions;
        if (setup.paired) {
            const FullRunRecord full = run_full_chain(model.bind(context), sched, kind, tape);
            rec.d = deviation(full.final_trajectory(), cached.final_trajectory);
            rec.violated = rec.d > eta_traj;
        }
        res.records.push_back(std::move(rec));
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace muninn
