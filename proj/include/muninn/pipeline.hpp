#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "muninn/calibration.hpp"
#include "muninn/config.hpp"
#include "muninn/denoisers.hpp"
#include "muninn/metrics.hpp"
#include "muninn/policy.hpp"
#include "muninn/testbed.hpp"

namespace muninn {

using nlohmann::json;

// Seed roles; calibration and evaluation streams must not collide.
inline constexpr std::uint64_t kRoleCalibTape = 0xCA11B;
inline constexpr std::uint64_t kRoleCalibContext = 0xCA11C;

// World file schema: {"bounds": {xmin,xmax,ymin,ymax}, "obstacles":
// [{"center": [x, y], "radius": r}, ...], "start": [x, y], "goal": [x, y],
// "goal_radius": r}. Execution knobs (step limit, control limit) stay in the
// experiment config.
inline PointMassWorld world_from_json(const json& j) {
    PointMassWorld w;
    const json& b = j.at("bounds");
    w.xmin = b.at("xmin").get<double>();
    w.xmax = b.at("xmax").get<double>();
    w.ymin = b.at("ymin").get<double>();
    w.ymax = b.at("ymax").get<double>();
    for (const json& o : j.at("obstacles"))
        w.obstacles.push_back({o.at("center").at(0).get<double>(), o.at("center").at(1).get<double>(),
                               o.at("radius").get<double>()});
    w.start = {j.at("start").at(0).get<double>(), j.at("start").at(1).get<double>()};
    w.goal = {j.at("goal").at(0).get<double>(), j.at("goal").at(1).get<double>()};
    w.goal_radius = j.at("goal_radius").get<double>();
    return w;
}

inline json world_to_json(const PointMassWorld& w) {
    json j;
    j["bounds"] = {{"xmin", w.xmin}, {"xmax", w.xmax}, {"ymin", w.ymin}, {"ymax", w.ymax}};
    json obs = json::array();
    for (const auto& o : w.obstacles) obs.push_back({{"center", {o.cx, o.cy}}, {"radius", o.r}});
    j["obstacles"] = obs;
    j["start"] = {w.start[0], w.start[1]};
    j["goal"] = {w.goal[0], w.goal[1]};
    j["goal_radius"] = w.goal_radius;
    return j;
}

// Per-step norms of a recorded chain, for debugging dumps.
inline json chain_trace_json(const FullRunRecord& rec) {
    json arr = json::array();
    for (const auto& e : chain_trace(rec))
        arr.push_back(json{{"t", e.t}, {"state_norm", e.state_norm}, {"eps_norm", e.eps_norm}});
    return arr;
}

// Fully assembled experiment: every run-defining choice lives here, parsed
// from the sectioned key-value file. Defaults mirror the reference settings
// (omega 1e-6 fixed in the score, fractions 0.10, anchor stride 4, split seed
// 0, escalation thresholds 0.60/0.75/0.90/0.50, bootstrap 10000, 150 episodes).
struct ExperimentConfig {
    ConfigDoc doc;

    // [schedule]
    std::string schedule_kind = "linear";
    int T = 20;
    double beta_min = 1e-4, beta_max = 0.02;
    double cosine_offset = 0.008;
    // [sampler]
    SamplerKind kind;
    // [denoiser]
    std::string denoiser_kind = "analytic";
    std::uint64_t denoiser_seed = 7;
    int hidden1 = 4, hidden2 = 64;
    double w_cfg = 0.0;
    // [task]
    int H = 1, d = 1;
    double mu_fill = 0.0, sigma2 = 1.0, context_scale = 0.0;
    // [eligible]
    double frac_pre = 0.10, frac_suf = 0.10;
    // [calibration]
    int calib_episodes = 256;
    int anchor_stride = 4;
    std::uint64_t split_seed = 0;
    double alpha = 0.05;
    // [policy]
    double eta_traj = 0.1;
    std::optional<double> gamma_override;
    // [eval]
    int eval_episodes = 150;
    int workers = 1;
    int bootstrap_replicates = 10000;
    // [seeds]
    std::uint64_t tape_base = 1000;
    std::uint64_t eval_seed = 2000;
    // [escalation]
    std::string escalation_profile = "off";
    EscalationConfig escalation_cfg;
    bool deadline_fault = false;
    // [world]
    bool world_enabled = false;
    PointMassWorld world;
    int replan_every = 4;
    // [output]
    std::string output_dir = "out";

    double gamma() const { return gamma_override.value_or(1.0 / std::sqrt(static_cast<double>(H))); }
    std::uint64_t hash() const { return doc.hash(); }

    static ExperimentConfig from_doc(ConfigDoc doc_in) {
        ExperimentConfig c;
        c.doc = std::move(doc_in);
        const ConfigView v(c.doc);

        c.schedule_kind = v.str("schedule", "kind", c.schedule_kind);
        c.T = static_cast<int>(v.integer("schedule", "T", c.T));
        c.beta_min = v.num("schedule", "beta_min", c.beta_min);
        c.beta_max = v.num("schedule", "beta_max", c.beta_max);
        c.cosine_offset = v.num("schedule", "offset", c.cosine_offset);
        if (c.schedule_kind != "linear" && c.schedule_kind != "cosine")
            throw ConfigError("[schedule] kind must be linear or cosine");

        const std::string sk = v.str("sampler", "kind", "ddim");
        if (sk == "ddpm")
            c.kind.variant = SamplerVariant::Ddpm;
        else if (sk == "ddim")
            c.kind.variant = SamplerVariant::Ddim;
        else
            throw ConfigError("[sampler] kind must be ddpm or ddim");
        c.kind.eta = v.num("sampler", "eta", 0.0);
        if (c.kind.eta < 0.0) throw ConfigError("[sampler] eta must be nonnegative");
        const std::string sr = v.str("sampler", "sigma_rule", "beta");
        if (sr == "beta")
            c.kind.ddpm_sigma_rule = DdpmSigmaRule::Beta;
        else if (sr == "beta_tilde")
            c.kind.ddpm_sigma_rule = DdpmSigmaRule::BetaTilde;
        else
            throw ConfigError("[sampler] sigma_rule must be beta or beta_tilde");

        c.denoiser_kind = v.str("denoiser", "kind", c.denoiser_kind);
        if (c.denoiser_kind != "analytic" && c.denoiser_kind != "tinymlp")
            throw ConfigError("[denoiser] kind must be analytic or tinymlp");
        c.denoiser_seed = static_cast<std::uint64_t>(v.integer("denoiser", "seed", static_cast<long long>(c.denoiser_seed)));
        c.hidden1 = static_cast<int>(v.integer("denoiser", "hidden1", c.hidden1));
        c.hidden2 = static_cast<int>(v.integer("denoiser", "hidden2", c.hidden2));
        c.w_cfg = v.num("denoiser", "w_cfg", 0.0);

        c.H = static_cast<int>(v.integer("task", "H", c.H));
        c.d = static_cast<int>(v.integer("task", "d", c.d));
        c.mu_fill = v.num("task", "mu", 0.0);
        c.sigma2 = v.num("task", "sigma2", 1.0);
        c.context_scale = v.num("task", "context_scale", 0.0);
        if (c.H < 1 || c.d < 1) throw ConfigError("[task] H and d must be positive");

        c.frac_pre = v.num("eligible", "frac_pre", 0.10);
        c.frac_suf = v.num("eligible", "frac_suf", 0.10);

        c.calib_episodes = static_cast<int>(v.integer("calibration", "episodes", c.calib_episodes));
        c.anchor_stride = static_cast<int>(v.integer("calibration", "anchor_stride", 4));
        c.split_seed = static_cast<std::uint64_t>(v.integer("calibration", "split_seed", 0));
        c.alpha = v.num("calibration", "alpha", 0.05);
        if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("[calibration] alpha must be in (0,1)");
        if (c.calib_episodes < 1) throw ConfigError("[calibration] episodes must be positive");

        c.eta_traj = v.num("policy", "eta_traj", 0.1);
        if (c.doc.get("policy", "gamma")) c.gamma_override = v.num("policy", "gamma", 0.0);

        c.eval_episodes = static_cast<int>(v.integer("eval", "episodes", 150));
        c.workers = static_cast<int>(v.integer("eval", "workers", 1));
        c.bootstrap_replicates = static_cast<int>(v.integer("eval", "bootstrap_replicates", 10000));
        c.tape_base = static_cast<std::uint64_t>(v.integer("seeds", "tape_base", 1000));
        c.eval_seed = static_cast<std::uint64_t>(v.integer("seeds", "eval", 2000));
        if (c.tape_base == c.eval_seed) throw ConfigError("[seeds] tape_base and eval must be distinct roles");

        c.escalation_profile = v.str("escalation", "profile", "off");
        if (c.escalation_profile != "off" && c.escalation_profile != "dampen" && c.escalation_profile != "resample" &&
            c.escalation_profile != "full" && c.escalation_profile != "combined")
            throw ConfigError("[escalation] profile must be off|dampen|resample|full|combined");
        c.escalation_cfg.rho_warn = v.num("escalation", "rho_warn", 0.60);
        c.escalation_cfg.rho_resamp = v.num("escalation", "rho_resamp", 0.75);
        c.escalation_cfg.rho_full = v.num("escalation", "rho_full", 0.90);
        c.escalation_cfg.rho_clear = v.num("escalation", "rho_clear", 0.50);
        c.escalation_cfg.multi_sample_M = static_cast<int>(v.integer("escalation", "M", 4));
        c.escalation_cfg.validate();
        c.deadline_fault = v.flag("escalation", "deadline_fault", false);

        c.world_enabled = v.flag("world", "enabled", false);
        if (c.world_enabled) {
            const std::string world_file = v.str("world", "file", "");
            if (!world_file.empty()) {
                try {
                    c.world = world_from_json(json::parse(read_file_bytes(world_file)));
                } catch (const std::exception& e) {
                    throw ConfigError("[world] file " + world_file + ": " + e.what());
                }
            } else {
                c.world.xmin = v.num("world", "xmin", -1.0);
                c.world.xmax = v.num("world", "xmax", 1.0);
                c.world.ymin = v.num("world", "ymin", -1.0);
                c.world.ymax = v.num("world", "ymax", 1.0);
                c.world.start = {v.num("world", "start_x", -0.8), v.num("world", "start_y", -0.8)};
                c.world.goal = {v.num("world", "goal_x", 0.8), v.num("world", "goal_y", 0.8)};
                c.world.goal_radius = v.num("world", "goal_radius", 0.08);
                const std::string obs = v.str("world", "obstacles", "");
                if (!obs.empty()) {
                    std::istringstream ss(obs);
                    std::string item;
                    while (std::getline(ss, item, ';')) {
                        double cx, cy, r;
                        if (std::sscanf(item.c_str(), "%lf,%lf,%lf", &cx, &cy, &r) != 3)
                            throw ConfigError("[world] obstacles: expected 'cx,cy,r;...' got '" + item + "'");
                        c.world.obstacles.push_back({cx, cy, r});
                    }
                }
            }
            c.world.step_limit = static_cast<int>(v.integer("world", "step_limit", 200));
            c.world.control_limit = v.num("world", "control_limit", 0.2);
            c.replan_every = static_cast<int>(v.integer("world", "replan_every", 4));
            c.world.validate();
        }

        c.output_dir = v.str("output", "dir", "out");
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) {
        return from_doc(ConfigDoc::parse(read_file_bytes(path)));
    }
};

// ---- object assembly --------------------------------------------------------

inline NoiseSchedule make_schedule(const ExperimentConfig& c) {
    return c.schedule_kind == "linear" ? make_linear_schedule(c.T, c.beta_min, c.beta_max)
                                       : make_cosine_schedule(c.T, c.cosine_offset);
}


// ---- calibrate ----------------------------------------------------------------

struct Assembled {
    NoiseSchedule sched;
    SamplerKind kind;
    std::shared_ptr<const Denoiser> net;
    std::shared_ptr<EffectiveModel> model;
    GaussianTrajectoryTask task;
    EligibleSet eligible;
    SensitivityProfile profile;
};

inline Assembled assemble(const ExperimentConfig& c) {
    Assembled a{make_schedule(c),
                c.kind,
                nullptr,
                nullptr,
                GaussianTrajectoryTask(c.H, c.d, c.mu_fill, c.sigma2, c.context_scale),
                eligible_timesteps(c.T, c.frac_pre, c.frac_suf),
                {}};
    a.profile = pathwise_sensitivities(a.sched, a.kind);
    const int ctx_dim = c.world_enabled && c.denoiser_kind == "tinymlp" ? 4 : c.d;
    if (c.denoiser_kind == "analytic") {
        a.net = a.task.make_denoiser(a.sched);
    } else {
        a.net = std::make_shared<TinyMlpDenoiser>(a.sched, c.H, c.d, ctx_dim, c.hidden1, c.hidden2, c.denoiser_seed);
    }
    std::optional<CfgGuidance> guidance;
    if (c.w_cfg != 0.0) guidance = CfgGuidance{c.w_cfg, std::vector<double>(a.net->context_dim(), 0.0)};
    a.model = std::make_shared<EffectiveModel>(a.net, guidance);
    return a;
}

inline std::function<std::vector<double>(std::uint64_t)> context_sampler(const ExperimentConfig& c,
                                                                         const Assembled& a) {
    if (c.denoiser_kind == "analytic") {
        const GaussianTrajectoryTask task = a.task;
        return [task](std::uint64_t seed) { return task.sample_context(seed); };
    }
    const int ctx_dim = a.net->context_dim();
    const double scale = c.context_scale;
    return [ctx_dim, scale](std::uint64_t seed) {
        std::vector<double> ctx(ctx_dim, 0.0);
        if (scale > 0.0)
            for (int j = 0; j < ctx_dim; ++j) ctx[j] = scale * rng_gauss(seed, 0xC047EE7ULL, j);
        return ctx;
    };
}

// Order-independent parallel episode loop: results land in per-index slots.
template <typename R>
std::vector<R> parallel_map(int n, int workers, const std::function<R(int)>& fn) {
    std::vector<R> out(static_cast<std::size_t>(n));
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                int i;
                while ((i = next.fetch_add(1)) < n) out[i] = fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

struct CalibrationRun {
    CalibrationArtifact artifact;
    json summary;
};

inline CalibrationRun run_calibration(const ExperimentConfig& c) {
    const Assembled a = assemble(c);
    const auto ctx_fn = context_sampler(c, a);
    const std::vector<int> anchors = anchor_set(c.T, c.anchor_stride, a.eligible);

    struct EpResult {
        EpisodeCalibration ep;
        bool ok = false;
    };
    const std::vector<EpResult> eps = parallel_map<EpResult>(c.calib_episodes, c.workers, [&](int i) {
        EpResult r;
        try {
            const std::vector<double> ctx = ctx_fn(derive_seed(c.tape_base, kRoleCalibContext, i));
            const NoiseTape tape = NoiseTape::make(derive_seed(c.tape_base, kRoleCalibTape, i), c.T, c.H, c.d,
                                                   c.kind.stochastic());
            r.ep = calibrate_episode(*a.model, a.sched, c.kind, ctx, tape, a.eligible, anchors, i);
            r.ok = true;
        } catch (const std::exception&) {
            r.ok = false;
        }
        return r;
    });

    CalibrationData data;
    for (const auto& r : eps) {
        if (!r.ok) {
            ++data.skipped;
            continue;
        }
        for (const auto& p : r.ep.pairs) data.pairs_by_t[p.t].push_back(p);
        data.ghost_deviations.push_back(r.ep.ghost_deviation);
    }

    ArtifactProvenance prov;
    prov.n_episodes = static_cast<std::uint64_t>(c.calib_episodes);
    prov.tape_seed_base = c.tape_base;
    prov.context_seed_base = c.tape_base;
    prov.anchor_stride = static_cast<std::uint32_t>(c.anchor_stride);
    prov.skipped_episodes = static_cast<std::uint32_t>(data.skipped);
    prov.ghost_deviations_sorted = data.ghost_deviations;
    std::sort(prov.ghost_deviations_sorted.begin(), prov.ghost_deviations_sorted.end());
    prov.config_hash = c.hash();

    CalibrationRun run{build_artifact(data.pairs_by_t, a.profile, a.sched, c.kind, c.gamma(), c.alpha, a.eligible,
                                      c.split_seed, prov),
                       json::object()};

    json per_t = json::array();
    for (const auto& env : run.artifact.envelopes) {
        json e;
        e["t"] = env.t;
        e["usable"] = env.usable;
        if (env.usable) {
            e["n_train"] = env.n_train;
            e["n_cal"] = env.n_cal;
            e["q"] = env.q;
            e["score_min"] = std::exp(env.grid_log_s.front());
            e["score_max"] = std::exp(env.grid_log_s.back());
        }
        per_t.push_back(e);
    }
    run.summary["per_t"] = per_t;
    run.summary["alpha"] = c.alpha;
    run.summary["alpha_step"] = run.artifact.alpha_step;
    run.summary["eligible_count"] = run.artifact.eligible.members.size();
    run.summary["episodes"] = c.calib_episodes;
    run.summary["skipped_episodes"] = data.skipped;
    run.summary["config_hash"] = c.hash();
    run.summary["schedule_hash"] = run.artifact.schedule_hash();
    if (!prov.ghost_deviations_sorted.empty()) {
        const auto& dev = prov.ghost_deviations_sorted;
        const auto pct = [&](double p) { return dev[static_cast<std::size_t>(p * (dev.size() - 1))]; };
        run.summary["ghost_deviation_p10"] = pct(0.10);
        run.summary["ghost_deviation_p50"] = pct(0.50);
        run.summary["ghost_deviation_p60"] = pct(0.60);
        run.summary["ghost_deviation_p90"] = pct(0.90);
    }
    return run;
}

// Percentile of the calibration-time paired ghost deviations stored in the
// artifact; the standard recipe for choosing eta_traj.
inline double ghost_deviation_percentile(const CalibrationArtifact& art, double p) {
    const auto& dev = art.prov.ghost_deviations_sorted;
    if (dev.empty()) throw std::runtime_error("artifact carries no calibration deviations");
    const double idx = p * static_cast<double>(dev.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, dev.size() - 1);
    const double w = idx - static_cast<double>(lo);
    return dev[lo] + w * (dev[hi] - dev[lo]);
}

// ---- evaluate -----------------------------------------------------------------

struct EvaluateOptions {
    std::optional<int> episodes;
    std::optional<double> eta_traj;
    bool paired = true;
    bool instrumented = false;
    std::uint64_t seed_offset = 0;
    std::string escalation_profile;  // empty = from config
};

struct EvaluateRun {
    MetricsBundle bundle;
    PairedEvalResult paired;
    std::vector<EpisodeReport> closed_loop;
    json label_shift;  // deployment-vs-calibration reuse-error diagnostic
    double wall_seconds = 0.0;
};

inline MetricsBundle summarize_metrics(const ExperimentConfig& c, const CalibrationArtifact& art,
                                       const PairedEvalResult& res, const Assembled& a, double eta) {
    MetricsBundle b;
    b.n_episodes = res.records.size();
    b.n_decisions = res.records.size();
    b.eta_traj = eta;
    b.alpha = art.alpha;
    double evals = 0.0;
    for (const auto& r : res.records) evals += r.n_eval;
    b.evals_per_decision = evals / static_cast<double>(res.records.size());
    b.evals_over_t = b.evals_per_decision / static_cast<double>(c.T);
    b.reuse_frac = 1.0 - b.evals_over_t;
    b.probe_cost_ratio = static_cast<double>(a.net->probe_ops()) / static_cast<double>(a.net->core_ops());
    b.speedup_model_value = speedup_model(static_cast<double>(c.T), b.evals_per_decision, b.probe_cost_ratio);
    b.config_hash = c.hash();
    b.artifact_hash = art.schedule_hash();
    if (res.paired) {
        std::vector<double> ds;
        std::vector<std::pair<double, double>> dhat_d;
        std::vector<double> dhats;
        for (const auto& r : res.records) {
            ds.push_back(r.d);
            dhat_d.emplace_back(r.certificate.D_hat, r.d);
            dhats.push_back(r.certificate.D_hat);
        }
        double mean = 0.0;
        for (double x : ds) mean += x;
        b.e_d_mean = mean / static_cast<double>(ds.size());
        b.e_d_ci = bootstrap_ci(ds, c.bootstrap_replicates, 0.95, c.eval_seed);
        const ViolationRate vr = violation_rate(ds, eta);
        b.p_viol = vr.p_hat;
        b.p_viol_wilson = vr.wilson95;
        b.cert_reliability = certificate_reliability(dhat_d);
        b.spearman_dhat_d = spearman(dhats, ds);
    }
    return b;
}

inline EvaluateRun run_evaluate(const ExperimentConfig& c, const CalibrationArtifact& art,
                                const EvaluateOptions& opts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const Assembled a = assemble(c);
    check_artifact_compatible(art, a.sched, c.kind);

    const int episodes = opts.episodes.value_or(c.eval_episodes);
    const double eta = opts.eta_traj.value_or(c.eta_traj);
    const std::uint64_t eval_seed = c.eval_seed + opts.seed_offset;
    const auto ctx_fn = context_sampler(c, a);

    EvalSetup setup;
    setup.H = c.H;
    setup.d = c.d;
    setup.sample_context = ctx_fn;
    setup.paired = opts.paired;
    setup.instrumented = opts.instrumented;
    setup.keep_decisions = true;

    EvaluateRun run;
    // Episode-parallel paired evaluation, merged in episode order.
    const std::vector<DecisionRecord> recs = parallel_map<DecisionRecord>(episodes, c.workers, [&](int i) {
        MuninnOptions mopts;
        mopts.instrumented = setup.instrumented;
        const std::vector<double> context = setup.sample_context(derive_seed(eval_seed, 0xC7FULL, i));
        const NoiseTape tape = NoiseTape::make(derive_seed(eval_seed, 0x7A9EULL, i), c.T, c.H, c.d, c.kind.stochastic());
        DecisionRecord rec;
        rec.episode = i;
        const CachedRunRecord cached = muninn_call(*a.model, a.sched, c.kind, art, eta, tape, context, mopts);
        rec.n_eval = cached.ledger.n_eval;
        rec.certificate = cached.certificate;
        rec.instrumented = cached.instrumented;
        rec.decisions = cached.decisions;
        if (setup.paired) {
            const FullRunRecord full = run_full_chain(a.model->bind(context), a.sched, c.kind, tape);
            rec.d = deviation(full.final_trajectory(), cached.final_trajectory);
            rec.violated = rec.d > eta;
        }
        return rec;
    });
    run.paired.records = recs;
    run.paired.paired = opts.paired;
    run.bundle = summarize_metrics(c, art, run.paired, a, eta);

    // Closed-loop rollouts when a world is configured.
    const std::string esc = opts.escalation_profile.empty() ? c.escalation_profile : opts.escalation_profile;
    if (c.world_enabled) {
        ClosedLoopSetup cl;
        cl.model = a.model.get();
        cl.sched = &a.sched;
        cl.kind = c.kind;
        cl.artifact = &art;
        cl.eta_traj = eta;
        cl.planner = PlannerType::Muninn;
        cl.replan_every = c.replan_every;
        cl.paired = opts.paired;
        cl.escalation.enabled = esc != "off";
        cl.escalation.dampen = esc == "dampen" || esc == "combined";
        cl.escalation.resample = esc == "resample" || esc == "combined";
        cl.escalation.full_override = esc == "full" || esc == "resample" || esc == "combined";
        cl.escalation.cfg = c.escalation_cfg;
        cl.escalation.inject_deadline_fault = c.deadline_fault;
        const bool analytic = c.denoiser_kind == "analytic";
        cl.context_fn = [analytic](const std::array<double, 2>& p, const std::array<double, 2>& goal) {
            if (analytic) return std::vector<double>{goal[0] - p[0], goal[1] - p[1]};
            return std::vector<double>{p[0], p[1], goal[0], goal[1]};
        };
        run.closed_loop = parallel_map<EpisodeReport>(episodes, c.workers, [&](int i) {
            return rollout_closed_loop(c.world, cl, derive_seed(eval_seed, 0x1007ULL, i));
        });
    }

    // Label-shift diagnostic: instrumented deployment reuse errors vs the
    // ghost-chain calibration labels.
    if (opts.instrumented) {
        std::vector<double> deployed;
        for (const auto& r : run.paired.records)
            for (const auto& ie : r.instrumented) deployed.push_back(ie.eps_normalized);
        if (!deployed.empty() && !art.prov.ghost_deviations_sorted.empty()) {
            std::sort(deployed.begin(), deployed.end());
            const auto pct = [](const std::vector<double>& v, double p) {
                return v[static_cast<std::size_t>(p * (v.size() - 1))];
            };
            double mean = 0.0;
            for (double x : deployed) mean += x;
            run.label_shift["deployed_reuse_eps_mean"] = mean / static_cast<double>(deployed.size());
            run.label_shift["deployed_reuse_eps_p50"] = pct(deployed, 0.5);
            run.label_shift["deployed_reuse_eps_p90"] = pct(deployed, 0.9);
            run.label_shift["n_reuse_samples"] = deployed.size();
        }
    }

    run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

// ---- file emission --------------------------------------------------------------

inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline json interval_json(const Interval& iv) { return json{{"lo", iv.lo}, {"hi", iv.hi}}; }

inline json bundle_to_json(const MetricsBundle& b) {
    json j;
    j["schema_version"] = 1;
    j["n_episodes"] = b.n_episodes;
    j["n_decisions"] = b.n_decisions;
    j["eta_traj"] = b.eta_traj;
    j["alpha"] = b.alpha;
    j["evals_per_decision"] = b.evals_per_decision;
    j["evals_over_t"] = b.evals_over_t;
    j["reuse_frac"] = b.reuse_frac;
    j["probe_cost_ratio"] = b.probe_cost_ratio;
    j["speedup_model"] = b.speedup_model_value;
    j["config_hash"] = b.config_hash;
    j["artifact_hash"] = b.artifact_hash;
    if (b.e_d_mean) j["e_d_mean"] = *b.e_d_mean;
    if (b.e_d_ci) j["e_d_ci"] = interval_json(*b.e_d_ci);
    if (b.p_viol) j["p_viol"] = *b.p_viol;
    if (b.p_viol_wilson) j["p_viol_wilson"] = interval_json(*b.p_viol_wilson);
    if (b.cert_reliability) j["cert_reliability"] = *b.cert_reliability;
    if (b.spearman_dhat_d) j["spearman_dhat_d"] = *b.spearman_dhat_d;
    return j;
}

inline const char* kBundleCsvHeader =
    "n_episodes,n_decisions,eta_traj,alpha,evals_per_decision,evals_over_t,reuse_frac,probe_cost_ratio,"
    "speedup_model,e_d_mean,p_viol,p_viol_wilson_lo,p_viol_wilson_hi,cert_reliability,spearman_dhat_d,"
    "config_hash,artifact_hash";

inline std::string bundle_csv_row(const MetricsBundle& b) {
    std::string row;
    row += std::to_string(b.n_episodes) + "," + std::to_string(b.n_decisions) + "," + fmt_double(b.eta_traj) + "," +
           fmt_double(b.alpha) + "," + fmt_double(b.evals_per_decision) + "," + fmt_double(b.evals_over_t) + "," +
           fmt_double(b.reuse_frac) + "," + fmt_double(b.probe_cost_ratio) + "," + fmt_double(b.speedup_model_value) + ",";
    row += (b.e_d_mean ? fmt_double(*b.e_d_mean) : "") + std::string(",");
    row += (b.p_viol ? fmt_double(*b.p_viol) : "") + std::string(",");
    row += (b.p_viol_wilson ? fmt_double(b.p_viol_wilson->lo) : "") + std::string(",");
    row += (b.p_viol_wilson ? fmt_double(b.p_viol_wilson->hi) : "") + std::string(",");
    row += (b.cert_reliability ? fmt_double(*b.cert_reliability) : "") + std::string(",");
    row += (b.spearman_dhat_d ? fmt_double(*b.spearman_dhat_d) : "") + std::string(",");
    row += std::to_string(b.config_hash) + "," + std::to_string(b.artifact_hash);
    return row;
}

inline json decision_record_json(const DecisionRecord& r, bool paired) {
    json j;
    j["episode"] = r.episode;
    j["n_eval"] = r.n_eval;
    j["D_hat"] = r.certificate.D_hat;
    j["rho"] = r.certificate.rho;
    if (paired) {
        j["d"] = r.d;
        j["violated"] = r.violated;
    }
    json steps = json::array();
    for (const auto& dec : r.decisions) {
        json s;
        s["t"] = dec.t;
        s["action"] = dec.action == StepAction::Recompute ? "recompute" : "reuse";
        if (dec.s) s["s"] = *dec.s;
        if (dec.c_hat) s["c_hat"] = *dec.c_hat;
        s["B_rem_after"] = dec.B_rem_after;
        steps.push_back(s);
    }
    j["steps"] = steps;
    return j;
}

inline void write_evaluate_outputs(const std::string& dir, const ExperimentConfig&, const EvaluateRun& run) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_file_bytes(dir + "/metrics.json", bundle_to_json(run.bundle).dump(2) + "\n");
    write_file_bytes(dir + "/metrics.csv", std::string(kBundleCsvHeader) + "\n" + bundle_csv_row(run.bundle) + "\n");
    {
        std::string lines;
        for (const auto& r : run.paired.records) lines += decision_record_json(r, run.paired.paired).dump() + "\n";
        write_file_bytes(dir + "/decisions.jsonl", lines);
    }
    if (!run.closed_loop.empty()) {
        std::string lines;
        std::string esc_lines;
        for (std::size_t i = 0; i < run.closed_loop.size(); ++i) {
            const auto& ep = run.closed_loop[i];
            json j;
            j["episode"] = i;
            j["success"] = ep.success;
            j["collision"] = ep.collision;
            j["planner_failure"] = ep.planner_failure;
            j["steps"] = ep.steps_taken;
            j["n_eval"] = ep.n_eval_per_decision;
            lines += j.dump() + "\n";
            for (const auto& e : ep.escalation_events)
                esc_lines += json{{"episode", i},
                                  {"call", e.call_index},
                                  {"rho", e.rho},
                                  {"mode", escalation_mode_name(e.mode)},
                                  {"action", e.action},
                                  {"M", e.M},
                                  {"selected", e.selected}}
                                 .dump() +
                             "\n";
        }
        write_file_bytes(dir + "/episodes.jsonl", lines);
        if (!esc_lines.empty()) write_file_bytes(dir + "/escalation.jsonl", esc_lines);
    }
    if (!run.label_shift.is_null() && !run.label_shift.empty())
        write_file_bytes(dir + "/label_shift.json", run.label_shift.dump(2) + "\n");
    // Wall-clock is informational only and lives outside the reproducible set.
    write_file_bytes(dir + "/timing.json", json{{"wall_seconds", run.wall_seconds}}.dump(2) + "\n");
}

}  // namespace muninn
