#pragma once

// Shared fixtures for the unit suites: a small analytic-teacher setup with a
// calibrated artifact, built through the same library calls the CLI uses.

#include <algorithm>
#include <memory>
#include <vector>

#include "muninn/calibration.hpp"
#include "muninn/denoisers.hpp"
#include "muninn/policy.hpp"
#include "muninn/sampler.hpp"
#include "muninn/schedules.hpp"

namespace muninn::testing {

struct Fixture {
    NoiseSchedule sched;
    SamplerKind kind;
    std::shared_ptr<const Denoiser> net;
    std::shared_ptr<EffectiveModel> model;
    EligibleSet eligible;
    SensitivityProfile profile;
    CalibrationArtifact artifact;
    double gamma = 1.0;

    std::vector<double> context() const { return std::vector<double>(net->context_dim(), 0.0); }

    NoiseTape tape(std::uint64_t seed) const {
        return NoiseTape::make(seed, sched.T, net->horizon(), net->dim(), kind.stochastic());
    }
};

inline Fixture make_fixture(int T, int H, int d, SamplerVariant variant, int calib_episodes,
                            std::uint64_t calib_seed, double alpha = 0.1,
                            std::shared_ptr<const Denoiser> custom_net = nullptr, int anchor_stride = 4) {
    Fixture f;
    f.sched = make_linear_schedule(T, 1e-3, 0.05);
    f.kind = SamplerKind{variant, 0.0, DdpmSigmaRule::Beta};
    f.net = custom_net != nullptr
                ? custom_net
                : std::static_pointer_cast<const Denoiser>(
                      std::make_shared<AnalyticGaussianDenoiser>(f.sched, Mat(H, d, 0.3), 0.8));
    f.model = std::make_shared<EffectiveModel>(f.net);
    f.eligible = eligible_timesteps(T, 0.10, 0.10);
    f.profile = pathwise_sensitivities(f.sched, f.kind);
    f.gamma = 1.0 / std::sqrt(static_cast<double>(H));

    std::vector<std::vector<double>> contexts;
    std::vector<NoiseTape> tapes;
    for (int i = 0; i < calib_episodes; ++i) {
        contexts.push_back(std::vector<double>(f.net->context_dim(), 0.0));
        tapes.push_back(f.tape(derive_seed(calib_seed, 0xCA11B, i)));
    }
    const CalibrationData data =
        generate_calibration(*f.model, f.sched, f.kind, contexts, tapes, f.eligible, anchor_stride);
    ArtifactProvenance prov;
    prov.n_episodes = static_cast<std::uint64_t>(calib_episodes);
    prov.tape_seed_base = calib_seed;
    prov.ghost_deviations_sorted = data.ghost_deviations;
    std::sort(prov.ghost_deviations_sorted.begin(), prov.ghost_deviations_sorted.end());
    f.artifact = build_artifact(data.pairs_by_t, f.profile, f.sched, f.kind, f.gamma, alpha, f.eligible, 0, prov);
    return f;
}

// Budget at the 60th percentile of the calibration-time ghost deviations.
inline double ghost_eta(const Fixture& f, double pct = 0.60) {
    const auto& dev = f.artifact.prov.ghost_deviations_sorted;
    return dev[static_cast<std::size_t>(pct * static_cast<double>(dev.size() - 1))];
}

// Denoiser that ignores trajectory and step: exercises the exact zero-error
// reuse path.
class ConstantDenoiser : public Denoiser {
   public:
    ConstantDenoiser(int H, int d, double value) : H_(H), d_(d), value_(value) {}
    int horizon() const override { return H_; }
    int dim() const override { return d_; }
    int feature_dim() const override { return d_; }
    int context_dim() const override { return d_; }
    Mat stem(const Trajectory&, int, const std::vector<double>&) const override { return Mat(H_, d_, value_); }
    NoisePrediction core(const Mat& rep, int, const std::vector<double>&) const override { return rep; }
    ProbeFeature pool(const Mat& rep, int t) const override {
        ProbeFeature f;
        f.step = t;
        f.values.assign(rep.cols, value_);
        return f;
    }
    std::uint64_t stem_ops() const override { return 1; }
    std::uint64_t core_ops() const override { return 1; }

   private:
    int H_, d_;
    double value_;
};

}  // namespace muninn::testing
