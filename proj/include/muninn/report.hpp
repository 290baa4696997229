#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "muninn/pipeline.hpp"

namespace muninn {

// Artifact JSON export for inspection; the binary format is authoritative.
inline json artifact_to_json(const CalibrationArtifact& art) {
    json j;
    j["format_version"] = CalibrationArtifact::kFormatVersion;
    j["schedule"] = {{"T", art.sched.T}, {"beta", art.sched.beta}, {"alpha_bar", art.sched.alpha_bar}};
    j["sampler"] = {{"kind", art.kind.variant == SamplerVariant::Ddpm ? "ddpm" : "ddim"},
                    {"eta", art.kind.eta},
                    {"sigma_rule", art.kind.ddpm_sigma_rule == DdpmSigmaRule::Beta ? "beta" : "beta_tilde"}};
    j["profile"] = {{"K", art.profile.K}, {"L_prime", art.profile.L_prime}, {"L", art.profile.L}};
    j["gamma"] = art.gamma;
    j["alpha"] = art.alpha;
    j["alpha_step"] = art.alpha_step;
    j["eligible"] = {{"T", art.eligible.T},
                     {"k_pre", art.eligible.k_pre},
                     {"k_suf", art.eligible.k_suf},
                     {"members", art.eligible.members}};
    json envs = json::array();
    for (const auto& e : art.envelopes) {
        json je;
        je["t"] = e.t;
        je["usable"] = e.usable;
        if (e.usable) {
            je["q"] = e.q;
            je["n_train"] = e.n_train;
            je["n_cal"] = e.n_cal;
            je["knot_s"] = e.fit.knot_s;
            je["knot_m"] = e.fit.knot_m;
            je["grid_log_s"] = e.grid_log_s;
            je["grid_value"] = e.grid_value;
        }
        envs.push_back(je);
    }
    j["envelopes"] = envs;
    j["provenance"] = {{"n_episodes", art.prov.n_episodes},
                       {"tape_seed_base", art.prov.tape_seed_base},
                       {"split_seed", art.prov.split_seed},
                       {"anchor_stride", art.prov.anchor_stride},
                       {"skipped_episodes", art.prov.skipped_episodes},
                       {"config_hash", art.prov.config_hash},
                       {"ghost_deviations_sorted", art.prov.ghost_deviations_sorted}};
    return j;
}

struct RunPoint {
    std::string dir;
    json metrics;
};

struct ReportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Collect every metrics.json under the run directory, sorted by path so the
// report is stable.
inline std::vector<RunPoint> collect_run_points(const std::string& run_dir) {
    namespace fs = std::filesystem;
    std::vector<RunPoint> points;
    if (!fs::exists(run_dir)) throw ReportError("run directory does not exist: " + run_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(run_dir))
        if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        RunPoint pt;
        pt.dir = p.parent_path().string();
        try {
            pt.metrics = json::parse(read_file_bytes(p.string()));
        } catch (const std::exception& e) {
            throw ReportError("corrupt bundle " + p.string() + ": " + e.what());
        }
        points.push_back(std::move(pt));
    }
    return points;
}

namespace detail {
inline std::string cell(const json& j, const char* key) {
    if (!j.contains(key)) return "-";
    if (j[key].is_number()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4g", j[key].get<double>());
        return buf;
    }
    return j[key].dump();
}
}  // namespace detail

// Markdown summary (Full-vs-cached column layout), a reliability CSV
// (decision_id, D_hat, d) and a Pareto CSV (eval count vs fidelity proxy).
inline void write_report(const std::string& run_dir) {
    const std::vector<RunPoint> points = collect_run_points(run_dir);
    if (points.empty()) throw ReportError("no runs found under " + run_dir);

    std::string md;
    md += "# Run summary\n\n";
    md += "| run | eta_traj | alpha | Evals/T (Full = 1.0) | ReuseFrac | E[d] | p_viol | cert. reliability | model speedup |\n";
    md += "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& pt : points) {
        const std::string name = std::filesystem::relative(pt.dir, run_dir).string();
        md += "| " + (name.empty() ? "." : name) + " | " + detail::cell(pt.metrics, "eta_traj") + " | " +
              detail::cell(pt.metrics, "alpha") + " | " + detail::cell(pt.metrics, "evals_over_t") + " | " +
              detail::cell(pt.metrics, "reuse_frac") + " | " + detail::cell(pt.metrics, "e_d_mean") + " | " +
              detail::cell(pt.metrics, "p_viol") + " | " + detail::cell(pt.metrics, "cert_reliability") + " | " +
              detail::cell(pt.metrics, "speedup_model") + " |\n";
    }
    write_file_bytes(run_dir + "/summary.md", md);

    std::string reliability = "decision_id,D_hat,d\n";
    std::string pareto = "run,evals_over_t,task_proxy_e_d,p_viol\n";
    long decision_id = 0;
    for (const auto& pt : points) {
        const std::string name = std::filesystem::relative(pt.dir, run_dir).string();
        pareto += (name.empty() ? "." : name) + "," + detail::cell(pt.metrics, "evals_over_t") + "," +
                  detail::cell(pt.metrics, "e_d_mean") + "," + detail::cell(pt.metrics, "p_viol") + "\n";
        const std::string decisions_path = pt.dir + "/decisions.jsonl";
        if (!std::filesystem::exists(decisions_path)) continue;
        std::istringstream in(read_file_bytes(decisions_path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json rec = json::parse(line);
            if (!rec.contains("d")) continue;
            reliability += std::to_string(decision_id++) + "," + fmt_double(rec["D_hat"].get<double>()) + "," +
                           fmt_double(rec["d"].get<double>()) + "\n";
        }
    }
    write_file_bytes(run_dir + "/reliability.csv", reliability);
    write_file_bytes(run_dir + "/pareto.csv", pareto);
}

}  // namespace muninn
