#include <catch_amalgamated.hpp>

#include "muninn/config.hpp"
#include "muninn/pipeline.hpp"

using namespace muninn;

namespace {

const char* kSampleConfig = R"(
# sample experiment
[schedule]
kind = linear
T = 12
beta_min = 0.001
beta_max = 0.05

[sampler]
kind = ddim
eta = 0

[denoiser]
kind = analytic

[task]
H = 2
d = 1
mu = 0.3
sigma2 = 0.8

[calibration]
episodes = 16
alpha = 0.1

[policy]
eta_traj = 0.05

[eval]
episodes = 8

[seeds]
tape_base = 1000
eval = 2000

[output]
dir = out
)";

}  // namespace

TEST_CASE("config parsing", "[config]") {
    SECTION("round trip is a fixed point") {
        const ConfigDoc doc = ConfigDoc::parse(kSampleConfig);
        const std::string once = doc.serialize();
        const std::string twice = ConfigDoc::parse(once).serialize();
        REQUIRE(once == twice);
    }
    SECTION("line context in parse errors") {
        try {
            ConfigDoc::parse("[a]\nkey value\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
        }
        REQUIRE_THROWS_AS(ConfigDoc::parse("key = 1\n"), ConfigError);      // entry outside section
        REQUIRE_THROWS_AS(ConfigDoc::parse("[unterminated\n"), ConfigError);
    }
    SECTION("typed accessors validate values") {
        const ConfigDoc doc = ConfigDoc::parse("[a]\nx = abc\n");
        const ConfigView v(doc);
        REQUIRE_THROWS_AS(v.num("a", "x", 0.0), ConfigError);
        REQUIRE(v.num("a", "missing", 1.5) == 1.5);
    }
    SECTION("hash is stable and content-sensitive") {
        const ConfigDoc a = ConfigDoc::parse(kSampleConfig);
        const ConfigDoc b = ConfigDoc::parse(kSampleConfig);
        REQUIRE(a.hash() == b.hash());
        ConfigDoc c = a;
        c.set("policy", "eta_traj", "0.06");
        REQUIRE(c.hash() != a.hash());
    }
}

TEST_CASE("experiment config validation", "[config]") {
    SECTION("well-formed sample parses with defaults") {
        const ExperimentConfig c = ExperimentConfig::from_doc(ConfigDoc::parse(kSampleConfig));
        REQUIRE(c.T == 12);
        REQUIRE(c.kind.variant == SamplerVariant::Ddim);
        REQUIRE(c.frac_pre == 0.10);
        REQUIRE(c.anchor_stride == 4);
        REQUIRE(c.split_seed == 0);
        REQUIRE(c.eval_episodes == 8);
        REQUIRE(c.bootstrap_replicates == 10000);
        REQUIRE(c.gamma() == Catch::Approx(1.0 / std::sqrt(2.0)));
        REQUIRE(c.escalation_cfg.rho_warn == 0.60);
        REQUIRE(c.escalation_cfg.rho_resamp == 0.75);
        REQUIRE(c.escalation_cfg.rho_full == 0.90);
        REQUIRE(c.escalation_cfg.rho_clear == 0.50);
    }
    SECTION("invalid fields are rejected with section context") {
        ConfigDoc doc = ConfigDoc::parse(kSampleConfig);
        doc.set("schedule", "kind", "quadratic");
        REQUIRE_THROWS_AS(ExperimentConfig::from_doc(doc), ConfigError);
        ConfigDoc doc2 = ConfigDoc::parse(kSampleConfig);
        doc2.set("calibration", "alpha", "1.5");
        REQUIRE_THROWS_AS(ExperimentConfig::from_doc(doc2), ConfigError);
    }
    SECTION("calibration and evaluation seed roles must differ") {
        ConfigDoc doc = ConfigDoc::parse(kSampleConfig);
        doc.set("seeds", "eval", "1000");
        REQUIRE_THROWS_AS(ExperimentConfig::from_doc(doc), ConfigError);
    }
}

TEST_CASE("pipeline reproducibility at unit scale", "[config]") {
    const ExperimentConfig c = ExperimentConfig::from_doc(ConfigDoc::parse(kSampleConfig));
    const CalibrationRun r1 = run_calibration(c);
    const CalibrationRun r2 = run_calibration(c);
    REQUIRE(encode_artifact(r1.artifact) == encode_artifact(r2.artifact));
    const EvaluateRun e1 = run_evaluate(c, r1.artifact);
    const EvaluateRun e2 = run_evaluate(c, r2.artifact);
    REQUIRE(bundle_to_json(e1.bundle).dump() == bundle_to_json(e2.bundle).dump());
}

TEST_CASE("world JSON file format", "[config]") {
    PointMassWorld w;
    w.xmin = -2.0;
    w.xmax = 2.0;
    w.ymin = -1.0;
    w.ymax = 1.0;
    w.obstacles = {{0.1, 0.2, 0.3}, {-0.5, 0.0, 0.1}};
    w.start = {-1.5, -0.5};
    w.goal = {1.5, 0.5};
    w.goal_radius = 0.07;
    const json j = world_to_json(w);
    const PointMassWorld back = world_from_json(json::parse(j.dump()));
    REQUIRE(back.xmin == w.xmin);
    REQUIRE(back.obstacles.size() == 2);
    REQUIRE(back.obstacles[1].cx == -0.5);
    REQUIRE(back.goal_radius == 0.07);

    // Load through the config's [world] file= path.
    const std::string wpath = (std::filesystem::temp_directory_path() / "muninn_world_test.json").string();
    write_file_bytes(wpath, j.dump());
    ConfigDoc doc = ConfigDoc::parse(kSampleConfig);
    doc.set("world", "enabled", "true");
    doc.set("world", "file", wpath);
    doc.set("task", "d", "2");
    const ExperimentConfig cfg = ExperimentConfig::from_doc(doc);
    REQUIRE(cfg.world.goal[0] == 1.5);
    REQUIRE(cfg.world.obstacles.size() == 2);
}

TEST_CASE("chain trace dumps per-step norms as JSON", "[config]") {
    const ExperimentConfig c = ExperimentConfig::from_doc(ConfigDoc::parse(kSampleConfig));
    const Assembled a = assemble(c);
    const NoiseTape tape = NoiseTape::make(5, c.T, c.H, c.d, c.kind.stochastic());
    const FullRunRecord rec = run_full_chain(a.model->bind(std::vector<double>(c.d, 0.0)), a.sched, c.kind, tape);
    const json arr = chain_trace_json(rec);
    REQUIRE(arr.size() == static_cast<std::size_t>(c.T));
    REQUIRE(arr[0]["t"] == c.T);
    REQUIRE(arr[arr.size() - 1]["t"] == 1);
}

TEST_CASE("parallel episode loops match the serial order", "[config]") {
    ConfigDoc doc = ConfigDoc::parse(kSampleConfig);
    doc.set("calibration", "episodes", "24");
    doc.set("eval", "workers", "4");
    const ExperimentConfig par = ExperimentConfig::from_doc(doc);
    doc.set("eval", "workers", "1");
    const ExperimentConfig ser = ExperimentConfig::from_doc(doc);
    // Worker count must not affect any produced artifact or metric bytes.
    // The worker knob itself lands in the config hash, so neutralize it.
    const auto payload_sans_hash = [](CalibrationArtifact art) {
        art.prov.config_hash = 0;
        return encode_artifact_payload(art);
    };
    const CalibrationRun rp = run_calibration(par);
    const CalibrationRun rs = run_calibration(ser);
    REQUIRE(payload_sans_hash(rp.artifact) == payload_sans_hash(rs.artifact));
    const EvaluateRun ep = run_evaluate(par, rp.artifact);
    const EvaluateRun es = run_evaluate(ser, rs.artifact);
    REQUIRE(ep.bundle.evals_per_decision == es.bundle.evals_per_decision);
    REQUIRE(ep.bundle.e_d_mean == es.bundle.e_d_mean);
    REQUIRE(ep.bundle.p_viol == es.bundle.p_viol);
}
