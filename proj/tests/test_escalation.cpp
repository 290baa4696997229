#include <catch_amalgamated.hpp>

#include <vector>

#include "muninn/escalation.hpp"
#include "muninn/metrics.hpp"
#include "muninn/rng.hpp"
#include "test_helpers.hpp"

using namespace muninn;

namespace {

// Independent reference interpreter of the hysteresis rules, written directly
// from the transition table: raise to the highest entered band, de-escalate
// to nominal only after two consecutive clears.
struct RefMachine {
    int mode = 0;  // 0 nominal, 1 warn, 2 resample, 3 full
    int streak = 0;

    int step(double rho, const EscalationConfig& c) {
        if (rho <= c.rho_clear)
            ++streak;
        else
            streak = 0;
        if (streak >= 2) {
            mode = 0;
            return mode;
        }
        int band = 0;
        if (rho > c.rho_full)
            band = 3;
        else if (rho > c.rho_resamp)
            band = 2;
        else if (rho > c.rho_warn)
            band = 1;
        if (band > mode) mode = band;
        return mode;
    }
};

}  // namespace

TEST_CASE("escalation state machine", "[escalation]") {
    const EscalationConfig cfg;
    SECTION("entry thresholds") {
        EscalationState st;
        REQUIRE(update_state(st, 0.65, cfg) == EscalationMode::Warn);
        st = {};
        REQUIRE(update_state(st, 0.80, cfg) == EscalationMode::Resample);
        st = {};
        REQUIRE(update_state(st, 0.95, cfg) == EscalationMode::FullOverride);
        st = {};
        REQUIRE(update_state(st, 0.10, cfg) == EscalationMode::Nominal);
    }
    SECTION("two consecutive clears de-escalate") {
        EscalationState st;
        update_state(st, 0.65, cfg);
        REQUIRE(update_state(st, 0.45, cfg) == EscalationMode::Warn);     // first clear
        REQUIRE(update_state(st, 0.45, cfg) == EscalationMode::Nominal);  // second clear
    }
    SECTION("streak resets above the clear threshold") {
        EscalationState st;
        update_state(st, 0.65, cfg);
        REQUIRE(update_state(st, 0.45, cfg) == EscalationMode::Warn);
        REQUIRE(update_state(st, 0.55, cfg) == EscalationMode::Warn);  // reset, still escalated
        REQUIRE(update_state(st, 0.45, cfg) == EscalationMode::Warn);
        REQUIRE(update_state(st, 0.45, cfg) == EscalationMode::Nominal);
    }
    SECTION("mode never lowers except via the clear rule") {
        EscalationState st;
        update_state(st, 0.95, cfg);
        REQUIRE(update_state(st, 0.65, cfg) == EscalationMode::FullOverride);
        REQUIRE(update_state(st, 0.55, cfg) == EscalationMode::FullOverride);
    }
    SECTION("exhaustive agreement with the reference over all quantized sequences up to length 6") {
        const std::vector<double> levels{0.10, 0.55, 0.65, 0.80, 0.95};
        for (int len = 1; len <= 6; ++len) {
            long total = 1;
            for (int i = 0; i < len; ++i) total *= static_cast<long>(levels.size());
            for (long code = 0; code < total; ++code) {
                EscalationState st;
                RefMachine ref;
                long c = code;
                for (int i = 0; i < len; ++i) {
                    const double rho = levels[c % levels.size()];
                    c /= static_cast<long>(levels.size());
                    const EscalationMode got = update_state(st, rho, cfg);
                    const int want = ref.step(rho, cfg);
                    REQUIRE(static_cast<int>(got) == want);
                }
            }
        }
    }
}

TEST_CASE("damping factor", "[escalation]") {
    const EscalationConfig cfg;
    EscalationState st;
    REQUIRE(damping_factor(update_state(st, 0.65, cfg), cfg) == 0.70);
    st = {};
    REQUIRE(damping_factor(update_state(st, 0.80, cfg), cfg) == 0.50);
    st = {};
    REQUIRE(damping_factor(update_state(st, 0.10, cfg), cfg) == 1.0);
    REQUIRE(damping_factor(EscalationMode::FullOverride, cfg) == 1.0);
}

TEST_CASE("multi-sample selection", "[escalation]") {
    SECTION("single feasible candidate") {
        std::vector<SelectionCandidate> c{{{0.3, 0.3}, true}};
        REQUIRE(multi_sample_select(c).value() == 0);
    }
    SECTION("argmin over certificates") {
        std::vector<SelectionCandidate> c{{{0.3, 0.0}, true}, {{0.1, 0.0}, true}, {{0.2, 0.0}, true}};
        REQUIRE(multi_sample_select(c).value() == 1);
    }
    SECTION("feasibility screen") {
        std::vector<SelectionCandidate> c{{{0.1, 0.0}, false}, {{0.3, 0.0}, true}};
        REQUIRE(multi_sample_select(c).value() == 1);
    }
    SECTION("none feasible signals escalation") {
        std::vector<SelectionCandidate> c{{{0.1, 0.0}, false}, {{0.3, 0.0}, false}};
        REQUIRE_FALSE(multi_sample_select(c).has_value());
    }
    SECTION("empty list rejected") { REQUIRE_THROWS_AS(multi_sample_select({}), std::invalid_argument); }
    SECTION("ties break to the lowest index; brute-force scan agreement on random sets") {
        CounterRng rng(7, 7);
        for (int trial = 0; trial < 1000; ++trial) {
            const std::size_t n = 1 + rng.below(6);
            std::vector<SelectionCandidate> c;
            for (std::size_t i = 0; i < n; ++i)
                c.push_back({{0.1 * static_cast<double>(rng.below(8)), 0.0}, rng.u01() < 0.7});
            const auto got = multi_sample_select(c);
            // brute force
            std::optional<std::size_t> want;
            for (std::size_t i = 0; i < n; ++i) {
                if (!c[i].feasible) continue;
                if (!want || c[i].certificate.D_hat < c[*want].certificate.D_hat) want = i;
            }
            REQUIRE(got == want);
        }
    }
}

TEST_CASE("multi-sample risk allocation", "[escalation]") {
    const MultiSampleRisk r = allocate_multi_sample_risk(0.05, 4, 80);
    REQUIRE(r.alpha_per_candidate == Catch::Approx(0.0125).epsilon(1e-14));
    REQUIRE(r.alpha_step_per_candidate == Catch::Approx(1.5625e-4).epsilon(1e-14));
    REQUIRE(allocate_multi_sample_risk(0.05, 1, 10).alpha_per_candidate == 0.05);
}

TEST_CASE("escalated control", "[escalation]") {
    const EscalationConfig cfg;
    const std::vector<double> limits{0.8, 0.8};
    SECTION("nominal is identity up to saturation") {
        const auto out = escalated_control(EscalationMode::Nominal, {0.5, -0.3}, limits, cfg);
        REQUIRE(out == std::vector<double>{0.5, -0.3});
        const auto clipped = escalated_control(EscalationMode::Nominal, {2.0, -2.0}, limits, cfg);
        REQUIRE(clipped == std::vector<double>{0.8, -0.8});
    }
    SECTION("scale then clip") {
        // u = (2, -2), lambda = 0.5 (resample band), limits 0.8: -> (0.8, -0.8)
        const auto out = escalated_control(EscalationMode::Resample, {2.0, -2.0}, limits, cfg);
        REQUIRE(out == std::vector<double>{0.8, -0.8});
        const auto warn = escalated_control(EscalationMode::Warn, {1.0, 0.5}, limits, cfg);
        REQUIRE(warn[0] == Catch::Approx(0.70));
        REQUIRE(warn[1] == Catch::Approx(0.35));
    }
    SECTION("full override substitutes the full-compute command") {
        const auto out =
            escalated_control(EscalationMode::FullOverride, {2.0, 2.0}, limits, cfg, std::vector<double>{0.1, 0.2});
        REQUIRE(out == std::vector<double>{0.1, 0.2});
    }
    SECTION("deadline miss falls back to the hold command") {
        const auto out =
            escalated_control(EscalationMode::FullOverride, {2.0, 2.0}, limits, cfg, std::vector<double>{0.1, 0.2}, true);
        REQUIRE(out == std::vector<double>{0.0, 0.0});
    }
    SECTION("damping never increases the sup norm") {
        CounterRng rng(3, 3);
        for (int i = 0; i < 200; ++i) {
            const std::vector<double> u{2.0 * rng.u01() - 1.0, 2.0 * rng.u01() - 1.0};
            for (EscalationMode m : {EscalationMode::Nominal, EscalationMode::Warn, EscalationMode::Resample}) {
                const auto out = escalated_control(m, u, limits, cfg);
                REQUIRE(std::max(std::abs(out[0]), std::abs(out[1])) <=
                        std::max(std::abs(u[0]), std::abs(u[1])) + 1e-15);
            }
        }
    }
}

TEST_CASE("risk is preserved under multi-sample selection", "[escalation]") {
    // Candidates calibrated at alpha/M each; the min-certificate selection
    // keeps the selected candidate's violation rate within alpha plus the
    // Wilson allowance.
    const double alpha = 0.20;
    const int M = 4;
    const muninn::testing::Fixture f =
        muninn::testing::make_fixture(20, 1, 1, SamplerVariant::Ddim, 256, 909, alpha / M, nullptr, 24);
    const double eta = muninn::testing::ghost_eta(f);
    const int episodes = 200;
    std::size_t violations = 0;
    for (int i = 0; i < episodes; ++i) {
        std::vector<SelectionCandidate> cands;
        std::vector<double> ds;
        for (int m = 0; m < M; ++m) {
            const NoiseTape tape = f.tape(derive_seed(4040, i, m));
            const CachedRunRecord rec = muninn_call(*f.model, f.sched, f.kind, f.artifact, eta, tape, f.context());
            const FullRunRecord full = run_full_chain(f.model->bind(f.context()), f.sched, f.kind, tape);
            cands.push_back({rec.certificate, true});
            ds.push_back(deviation(full.final_trajectory(), rec.final_trajectory));
        }
        const auto pick = multi_sample_select(cands);
        REQUIRE(pick.has_value());
        if (ds[*pick] > eta) ++violations;
    }
    const double allowance = 1.96 * std::sqrt(alpha * (1.0 - alpha) / episodes);
    REQUIRE(static_cast<double>(violations) / episodes <= alpha + allowance);
}

TEST_CASE("escalation config validation", "[escalation]") {
    EscalationConfig bad;
    bad.rho_clear = 0.7;  // above warn
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
