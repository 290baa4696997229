#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "muninn/mat.hpp"
#include "muninn/rng.hpp"

namespace muninn {

// RMS per-timestep deviation: d(a, b) = |a - b|_F / sqrt(H).
inline double deviation(const Trajectory& a, const Trajectory& b) {
    require_same_shape(a, b, "deviation");
    return (a - b).frobenius_norm() / std::sqrt(static_cast<double>(a.rows));
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

// Wilson score interval at z = 1.96 (95%).
inline Interval wilson_interval(std::size_t successes, std::size_t n, double z = 1.96) {
    if (n == 0) throw std::invalid_argument("wilson_interval: n must be positive");
    const double p = static_cast<double>(successes) / static_cast<double>(n);
    const double z2n = z * z / static_cast<double>(n);
    const double center = (p + z2n / 2.0) / (1.0 + z2n);
    const double half = z * std::sqrt(p * (1.0 - p) / static_cast<double>(n) + z2n / (4.0 * static_cast<double>(n))) /
                        (1.0 + z2n);
    // Containment of p can be lost to rounding at the endpoints.
    return {std::min(p, std::max(0.0, center - half)), std::max(p, std::min(1.0, center + half))};
}

struct ViolationRate {
    double p_hat = 0.0;
    Interval wilson95;
};

inline ViolationRate violation_rate(const std::vector<double>& ds, double eta) {
    if (ds.empty()) throw std::invalid_argument("violation_rate: empty list");
    std::size_t k = 0;
    for (double d : ds)
        if (d > eta) ++k;
    return {static_cast<double>(k) / static_cast<double>(ds.size()), wilson_interval(k, ds.size())};
}

// Mean absolute calibration error over target risk levels.
inline double mace(const std::map<double, double>& realized, const std::vector<double>& targets) {
    if (targets.empty()) throw std::invalid_argument("mace: empty target set");
    double acc = 0.0;
    for (double a : targets) {
        const auto it = realized.find(a);
        if (it == realized.end()) throw std::invalid_argument("mace: missing target level");
        acc += std::abs(it->second - a);
    }
    return acc / static_cast<double>(targets.size());
}

// Model-predicted wall-clock speedup given the probe/core cost ratio r:
// Speedup = T (r + 1) / (T r + n_eval).
inline double speedup_model(double T, double n_eval_mean, double probe_cost_ratio) {
    if (!(probe_cost_ratio >= 0.0)) throw std::invalid_argument("speedup_model: r >= 0");
    if (!(n_eval_mean > 0.0 && n_eval_mean <= T)) throw std::invalid_argument("speedup_model: 0 < n_eval <= T");
    return T * (probe_cost_ratio + 1.0) / (T * probe_cost_ratio + n_eval_mean);
}

// Percentile bootstrap interval of the resampled mean; deterministic in seed.
inline Interval bootstrap_ci(const std::vector<double>& values, int replicates = 10000, double level = 0.95,
                             std::uint64_t seed = 0) {
    if (values.empty()) throw std::invalid_argument("bootstrap_ci: empty list");
    CounterRng rng(seed, 0xB007ULL);
    std::vector<double> means(replicates);
    for (int r = 0; r < replicates; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) acc += values[rng.below(values.size())];
        means[r] = acc / static_cast<double>(values.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    const auto pick = [&](double p) {
        const double idx = p * static_cast<double>(means.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(idx);
        const std::size_t hi = std::min(lo + 1, means.size() - 1);
        const double w = idx - static_cast<double>(lo);
        return means[lo] + w * (means[hi] - means[lo]);
    };
    return {pick(tail), pick(1.0 - tail)};
}

// Fraction of decisions whose realized deviation stayed within the certificate.
inline double certificate_reliability(const std::vector<std::pair<double, double>>& dhat_d) {
    if (dhat_d.empty()) throw std::invalid_argument("certificate_reliability: empty list");
    std::size_t k = 0;
    for (const auto& [dh, d] : dhat_d)
        if (d <= dh) ++k;
    return static_cast<double>(k) / static_cast<double>(dhat_d.size());
}

namespace detail {
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}
}  // namespace detail

// Spearman rank correlation with average ranks for ties; 0 when either
// argument is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.empty()) throw std::invalid_argument("spearman: bad input");
    const std::vector<double> rx = detail::average_ranks(x);
    const std::vector<double> ry = detail::average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i], my += ry[i];
    mx /= n, my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// Aggregate metrics for one evaluation run. Field names are the stability
// contract for the JSON/CSV emitters (documented in the README).
struct MetricsBundle {
    std::size_t n_episodes = 0;
    std::size_t n_decisions = 0;
    double eta_traj = 0.0;
    double alpha = 0.0;
    double evals_per_decision = 0.0;
    double evals_over_t = 0.0;
    double reuse_frac = 0.0;
    double probe_cost_ratio = 0.0;
    double speedup_model_value = 0.0;
    std::optional<double> e_d_mean;  // absent when paired runs are off
    std::optional<Interval> e_d_ci;
    std::optional<double> p_viol;
    std::optional<Interval> p_viol_wilson;
    std::optional<double> cert_reliability;
    std::optional<double> spearman_dhat_d;
    std::uint64_t config_hash = 0;
    std::uint64_t artifact_hash = 0;
};

}  // namespace muninn
