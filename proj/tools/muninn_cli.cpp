// Command-line front end: calibrate, evaluate, sweep, report.
//
// Exit codes: 0 ok, 2 config error, 3 artifact/schedule incompatibility,
// 4 acceptance-threshold failure (CI gating), 1 other errors.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "muninn/pipeline.hpp"
#include "muninn/report.hpp"

using namespace muninn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIncompatible = 3;
constexpr int kExitThreshold = 4;

std::vector<double> parse_list(const std::string& csv) {
    std::vector<double> out;
    std::istringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

int gate_thresholds(const ExperimentConfig& cfg, const MetricsBundle& b) {
    const ConfigView v(cfg.doc);
    bool ok = true;
    if (cfg.doc.get("acceptance", "max_pviol") && b.p_viol) {
        const double cap = v.num("acceptance", "max_pviol", 1.0);
        if (*b.p_viol > cap) {
            std::fprintf(stderr, "threshold failure: p_viol %.4f > %.4f\n", *b.p_viol, cap);
            ok = false;
        }
    }
    if (cfg.doc.get("acceptance", "min_cert_reliability") && b.cert_reliability) {
        const double floor = v.num("acceptance", "min_cert_reliability", 0.0);
        if (*b.cert_reliability < floor) {
            std::fprintf(stderr, "threshold failure: cert_reliability %.4f < %.4f\n", *b.cert_reliability, floor);
            ok = false;
        }
    }
    return ok ? kExitOk : kExitThreshold;
}

int cmd_calibrate(const std::string& config_path, std::optional<int> workers) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    if (workers) cfg.workers = *workers;
    const CalibrationRun run = run_calibration(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    save_artifact(run.artifact, cfg.output_dir + "/artifact.munn");
    write_file_bytes(cfg.output_dir + "/artifact.json", artifact_to_json(run.artifact).dump(2) + "\n");
    write_file_bytes(cfg.output_dir + "/calibration.json", run.summary.dump(2) + "\n");
    std::printf("calibrated %d episodes -> %s/artifact.munn (%zu envelopes)\n", cfg.calib_episodes,
                cfg.output_dir.c_str(), run.artifact.envelopes.size());
    return kExitOk;
}

int cmd_evaluate(const std::string& config_path, const std::string& artifact_path, std::optional<int> episodes,
                 std::optional<int> workers, std::uint64_t seed_offset, const std::string& escalation,
                 bool paired_off, bool instrumented, const std::string& out_name) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    if (workers) cfg.workers = *workers;
    const CalibrationArtifact art = load_artifact(artifact_path);
    EvaluateOptions opts;
    opts.episodes = episodes;
    opts.paired = !paired_off;
    opts.instrumented = instrumented;
    opts.seed_offset = seed_offset;
    opts.escalation_profile = escalation;
    const EvaluateRun run = run_evaluate(cfg, art, opts);
    const std::string dir = cfg.output_dir + "/" + out_name;
    write_evaluate_outputs(dir, cfg, run);
    if (run.bundle.p_viol)
        std::printf("evaluated %zu decisions -> %s (Evals/T %.3f, p_viol %.4f)\n", run.bundle.n_decisions,
                    dir.c_str(), run.bundle.evals_over_t, *run.bundle.p_viol);
    else
        std::printf("evaluated %zu decisions -> %s (Evals/T %.3f, paired off)\n", run.bundle.n_decisions, dir.c_str(),
                    run.bundle.evals_over_t);
    return gate_thresholds(cfg, run.bundle);
}

int cmd_sweep(const std::string& config_path, const std::string& artifact_path, const std::string& eta_list,
              const std::string& alpha_list, std::optional<int> episodes, std::optional<int> workers) {
    ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
    if (workers) cfg.workers = *workers;
    const bool eta_mode = !eta_list.empty();
    const bool alpha_mode = !alpha_list.empty();
    if (eta_mode == alpha_mode) throw ConfigError("sweep: provide exactly one of --eta or --alpha");
    const std::vector<double> points = parse_list(eta_mode ? eta_list : alpha_list);
    if (points.empty()) throw ConfigError("sweep: empty point list");

    const std::string sweep_dir = cfg.output_dir + "/sweep";
    std::filesystem::create_directories(sweep_dir);
    std::string combined = std::string("point,") + kBundleCsvHeader + "\n";
    std::map<double, double> realized;

    std::optional<CalibrationArtifact> shared_art;
    if (eta_mode)  // budget sweeps reuse one artifact; risk sweeps rebuild per point
        shared_art = artifact_path.empty() ? run_calibration(cfg).artifact : load_artifact(artifact_path);

    for (std::size_t i = 0; i < points.size(); ++i) {
        ExperimentConfig point_cfg = cfg;
        CalibrationArtifact art;
        EvaluateOptions opts;
        opts.episodes = episodes;
        if (eta_mode) {
            art = *shared_art;
            opts.eta_traj = points[i];
        } else {
            point_cfg.alpha = points[i];
            point_cfg.doc.set("calibration", "alpha", fmt_double(points[i]));
            art = run_calibration(point_cfg).artifact;
        }
        const EvaluateRun run = run_evaluate(point_cfg, art, opts);
        char name[32];
        std::snprintf(name, sizeof(name), "point_%02zu", i);
        write_evaluate_outputs(sweep_dir + "/" + name, point_cfg, run);
        combined += fmt_double(points[i]) + "," + bundle_csv_row(run.bundle) + "\n";
        if (alpha_mode && run.bundle.p_viol) realized[points[i]] = *run.bundle.p_viol;
        std::printf("%s: %s=%.6g Evals/T %.3f p_viol %.4f\n", name, eta_mode ? "eta" : "alpha", points[i],
                    run.bundle.evals_over_t, run.bundle.p_viol.value_or(-1.0));
    }
    write_file_bytes(sweep_dir + "/combined.csv", combined);
    if (alpha_mode && realized.size() == points.size()) {
        const double m = mace(realized, points);
        write_file_bytes(sweep_dir + "/mace.json", json{{"mace", m}, {"realized", realized}}.dump(2) + "\n");
        std::printf("MACE %.4f\n", m);
    }
    return kExitOk;
}

int cmd_report(const std::string& run_dir) {
    write_report(run_dir);
    std::printf("report -> %s/summary.md\n", run_dir.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-free caching wrapper for reverse-diffusion trajectory samplers"};
    app.require_subcommand(1);

    std::string config_path, artifact_path, run_dir, eta_list, alpha_list, escalation, out_name = "eval";
    std::optional<int> episodes, workers;
    std::uint64_t seed_offset = 0;
    bool paired_off = false, instrumented = false;

    CLI::App* calibrate = app.add_subcommand("calibrate", "build a calibration artifact from a config");
    calibrate->add_option("--config", config_path, "experiment config file")->required();
    calibrate->add_option("--workers", workers, "episode worker threads");

    CLI::App* evaluate = app.add_subcommand("evaluate", "paired and closed-loop evaluation against an artifact");
    evaluate->add_option("--config", config_path, "experiment config file")->required();
    evaluate->add_option("--artifact", artifact_path, "calibration artifact file")->required();
    evaluate->add_option("--episodes", episodes, "evaluation episodes (default 150 or config)");
    evaluate->add_option("--workers", workers, "episode worker threads");
    evaluate->add_option("--seed-offset", seed_offset, "offset added to the evaluation seed role");
    evaluate->add_option("--escalation", escalation, "off|dampen|resample|full|combined")
        ->check(CLI::IsMember({"", "off", "dampen", "resample", "full", "combined"}));
    evaluate->add_flag("--paired-off", paired_off, "skip full-chain reruns (deviation fields reported absent)");
    evaluate->add_flag("--instrumented", instrumented, "record true reuse errors (test-only double evaluation)");
    evaluate->add_option("--out", out_name, "output subdirectory name (default eval)");

    CLI::App* sweep = app.add_subcommand("sweep", "sweep eta_traj (artifact reused) or alpha (artifacts rebuilt)");
    sweep->add_option("--config", config_path, "experiment config file")->required();
    sweep->add_option("--artifact", artifact_path, "artifact for eta sweeps (else calibrates once)");
    sweep->add_option("--eta", eta_list, "comma-separated eta_traj values");
    sweep->add_option("--alpha", alpha_list, "comma-separated alpha values");
    sweep->add_option("--episodes", episodes, "evaluation episodes per point");
    sweep->add_option("--workers", workers, "episode worker threads");

    CLI::App* report = app.add_subcommand("report", "summarize a run directory");
    report->add_option("--run-dir", run_dir, "directory containing evaluation outputs")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (calibrate->parsed()) return cmd_calibrate(config_path, workers);
        if (evaluate->parsed())
            return cmd_evaluate(config_path, artifact_path, episodes, workers, seed_offset, escalation, paired_off,
                                instrumented, out_name);
        if (sweep->parsed()) return cmd_sweep(config_path, artifact_path, eta_list, alpha_list, episodes, workers);
        if (report->parsed()) return cmd_report(run_dir);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const ArtifactMismatch& e) {
        std::fprintf(stderr, "incompatible artifact: %s\n", e.what());
        return kExitIncompatible;
    } catch (const UnsupportedVersionError& e) {
        std::fprintf(stderr, "incompatible artifact: %s\n", e.what());
        return kExitIncompatible;
    } catch (const ReportError& e) {
        std::fprintf(stderr, "report error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kExitOk;
}
