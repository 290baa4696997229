#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "muninn/mat.hpp"
#include "muninn/rng.hpp"
#include "muninn/sampler.hpp"
#include "muninn/schedules.hpp"

namespace muninn {

struct ProbeFeature {
    std::vector<double> values;
    int step = 0;
};

struct ProbeScore {
    double value = 0.0;
    int step = 0;
};

// Relative l1 probe change: |F_t - F_{t+1}|_1 / (|F_{t+1}|_1 + omega).
inline constexpr double kScoreOmega = 1e-6;

inline ProbeScore score(const ProbeFeature& f_t, const ProbeFeature& f_next, double omega = kScoreOmega) {
    if (f_t.values.size() != f_next.values.size())
        throw std::invalid_argument("score: probe feature dimension mismatch");
    if (!(omega > 0.0)) throw std::invalid_argument("score: omega must be positive");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < f_t.values.size(); ++i) {
        num += std::abs(f_t.values[i] - f_next.values[i]);
        den += std::abs(f_next.values[i]);
    }
    return {num / (den + omega), f_t.step};
}

// Classifier-free guidance combination: (1 + w) eps_cond - w eps_uncond.
inline NoisePrediction cfg_combine(const NoisePrediction& eps_cond, const NoisePrediction& eps_uncond, double w_cfg) {
    require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    NoisePrediction out(eps_cond.rows, eps_cond.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 + w_cfg) * eps_cond[i] - w_cfg * eps_uncond[i];
    return out;
}

// A denoiser with an explicit stem/core split. The one-shot evaluation is
// core(stem(..)) by construction, the probe is computable from the stem
// alone, and op counts let callers verify the probe is cheap.
class Denoiser {
   public:
    virtual ~Denoiser() = default;

    virtual int horizon() const = 0;
    virtual int dim() const = 0;
    virtual int feature_dim() const = 0;
    virtual int context_dim() const = 0;

    virtual Mat stem(const Trajectory& tau, int t, const std::vector<double>& context) const = 0;
    virtual NoisePrediction core(const Mat& rep, int t, const std::vector<double>& context) const = 0;
    virtual ProbeFeature pool(const Mat& rep, int t) const = 0;

    // Counted scalar multiply-adds per call.
    virtual std::uint64_t stem_ops() const = 0;
    virtual std::uint64_t core_ops() const = 0;

    NoisePrediction denoise(const Trajectory& tau, int t, const std::vector<double>& context) const {
        Mat rep = stem(tau, t, context);
        if (!rep.all_finite()) throw std::runtime_error("denoiser stem produced non-finite values");
        NoisePrediction out = core(rep, t, context);
        if (!out.all_finite()) throw std::runtime_error("denoiser core produced non-finite values");
        return out;
    }

    ProbeFeature probe(const Trajectory& tau, int t, const std::vector<double>& context) const {
        return pool(stem(tau, t, context), t);
    }

    std::uint64_t probe_ops() const { return stem_ops(); }
    std::uint64_t full_ops() const { return stem_ops() + core_ops(); }

    void check_context(const std::vector<double>& context) const {
        if (static_cast<int>(context.size()) != context_dim())
            throw std::invalid_argument("denoiser: context dimension mismatch");
    }
};

// Oracle teacher over Gaussian data tau_0 ~ N(mu_c, sigma2 * I) per element,
// where mu_c = mu + context broadcast over rows. With tau_t = sqrt(abar) tau_0
// + sqrt(1-abar) eps the posterior mean is closed-form, so the epsilon
// prediction (tau_t - sqrt(abar) E[tau_0|tau_t]) / sqrt(1-abar) reduces to
// scale_t * (tau_t - sqrt(abar) mu_c).
//
// Stem: whitened residual W = (tau_t - sqrt(abar) mu_c) / sqrt(abar sigma2 + 1 - abar).
// Core: eps_hat = sqrt(1-abar)/sqrt(abar sigma2 + 1 - abar) * W.
// Probe: mean of W over time rows (d_F = d).
class AnalyticGaussianDenoiser : public Denoiser {
   public:
    AnalyticGaussianDenoiser(NoiseSchedule sched, Mat mu, double sigma2)
        : sched_(std::move(sched)), mu_(std::move(mu)), sigma2_(sigma2) {
        if (!(sigma2 > 0.0)) throw std::invalid_argument("AnalyticGaussianDenoiser: sigma2 must be positive");
    }

    int horizon() const override { return mu_.rows; }
    int dim() const override { return mu_.cols; }
    int feature_dim() const override { return mu_.cols; }
    int context_dim() const override { return mu_.cols; }

    const NoiseSchedule& schedule() const { return sched_; }
    const Mat& mu() const { return mu_; }
    double sigma2() const { return sigma2_; }

    double posterior_shrinkage(int t) const {  // coefficient on (tau_t - sqrt(abar) mu) inside E[tau_0|tau_t]
        const double abar = sched_.alpha_bar[t - 1];
        return sigma2_ * std::sqrt(abar) / (abar * sigma2_ + 1.0 - abar);
    }

    Mat posterior_mean(const Trajectory& tau, int t, const std::vector<double>& context) const {
        check_context(context);
        sched_.check_step(t);
        const double abar = sched_.alpha_bar[t - 1];
        const double shrink = posterior_shrinkage(t);
        Mat out(tau.rows, tau.cols);
        for (int i = 0; i < tau.rows; ++i)
            for (int j = 0; j < tau.cols; ++j) {
                const double m = mu_.at(i, j) + context[j];
                out.at(i, j) = m + shrink * (tau.at(i, j) - std::sqrt(abar) * m);
            }
        return out;
    }

    Mat stem(const Trajectory& tau, int t, const std::vector<double>& context) const override {
        check_context(context);
        sched_.check_step(t);
        if (tau.rows != mu_.rows || tau.cols != mu_.cols)
            throw std::invalid_argument("AnalyticGaussianDenoiser: trajectory shape mismatch");
        const double abar = sched_.alpha_bar[t - 1];
        const double denom = std::sqrt(abar * sigma2_ + 1.0 - abar);
        Mat rep(tau.rows, tau.cols);
        for (int i = 0; i < tau.rows; ++i)
            for (int j = 0; j < tau.cols; ++j) {
                const double m = mu_.at(i, j) + context[j];
                rep.at(i, j) = (tau.at(i, j) - std::sqrt(abar) * m) / denom;
            }
        return rep;
    }

    NoisePrediction core(const Mat& rep, int t, const std::vector<double>&) const override {
        const double abar = sched_.alpha_bar[t - 1];
        const double scale = std::sqrt(1.0 - abar) / std::sqrt(abar * sigma2_ + 1.0 - abar);
        return scale * rep;
    }

    ProbeFeature pool(const Mat& rep, int t) const override {
        ProbeFeature f;
        f.step = t;
        f.values.assign(rep.cols, 0.0);
        for (int i = 0; i < rep.rows; ++i)
            for (int j = 0; j < rep.cols; ++j) f.values[j] += rep.at(i, j);
        for (double& x : f.values) x /= rep.rows;
        return f;
    }

    std::uint64_t stem_ops() const override { return static_cast<std::uint64_t>(mu_.rows) * mu_.cols * 3; }
    std::uint64_t core_ops() const override { return static_cast<std::uint64_t>(mu_.rows) * mu_.cols; }

   private:
    NoiseSchedule sched_;
    Mat mu_;
    double sigma2_;
};

// Fixed random two-hidden-layer MLP teacher: input = flat(tau) ++
// t-embedding ++ context, tanh activations, linear output head. Stem = both
// hidden layers, core = output head, probe = penultimate activations
// (d_F = hidden2). Weights are unit Gaussians scaled by 1/sqrt(fan_in),
// drawn from the seed.
//
// The head predicts the clean trajectory and the core re-expresses it as an
// epsilon prediction, (tau - sqrt(abar_t) tau0_hat) / sqrt(1 - abar_t), the
// way trained denoisers are parameterized. The tau0 head is normalized to be
// 1-Lipschitz in tau (certified by the layer operator-norm product), which
// keeps the denoised one-step update map within the sampler's K_t for both
// DDPM and DDIM: the contraction holds whenever the clean-trajectory
// predictor is 1/sqrt(abar_t)-Lipschitz.
class TinyMlpDenoiser : public Denoiser {
   public:
    static constexpr int kTimeEmbedDim = 8;

    TinyMlpDenoiser(NoiseSchedule sched, int H, int d, int context_dim, int hidden1, int hidden2, std::uint64_t seed)
        : sched_(std::move(sched)), H_(H), d_(d), ctx_dim_(context_dim), h1_(hidden1), h2_(hidden2), seed_(seed) {
        if (H < 1 || d < 1 || hidden1 < 1 || hidden2 < 1 || context_dim < 0)
            throw std::invalid_argument("TinyMlpDenoiser: bad dimensions");
        in_dim_ = H * d + kTimeEmbedDim + context_dim;
        out_dim_ = H * d;
        init_layer(W1_, b1_, h1_, in_dim_, 101);
        init_layer(W2_, b2_, h2_, h1_, 102);
        init_layer(W3_, b3_, out_dim_, h2_, 103);
        const double lip = op_norm(W1_, h1_, in_dim_) * op_norm(W2_, h2_, h1_) * op_norm(W3_, out_dim_, h2_);
        head_gain_ = 1.0 / std::max(1.0, lip);
    }

    int horizon() const override { return H_; }
    int dim() const override { return d_; }
    int feature_dim() const override { return h2_; }
    int context_dim() const override { return ctx_dim_; }
    std::uint64_t seed() const { return seed_; }
    double head_gain() const { return head_gain_; }

    // rep carries the penultimate activations followed by the flattened
    // trajectory the core needs for the epsilon re-expression.
    Mat stem(const Trajectory& tau, int t, const std::vector<double>& context) const override {
        check_context(context);
        sched_.check_step(t);
        if (tau.rows != H_ || tau.cols != d_) throw std::invalid_argument("TinyMlpDenoiser: trajectory shape mismatch");
        std::vector<double> x;
        x.reserve(in_dim_);
        x.insert(x.end(), tau.v.begin(), tau.v.end());
        append_time_embedding(x, t);
        x.insert(x.end(), context.begin(), context.end());
        std::vector<double> a1 = affine_tanh(W1_, b1_, x, h1_, in_dim_);
        std::vector<double> a2 = affine_tanh(W2_, b2_, a1, h2_, h1_);
        Mat rep(h2_ + out_dim_, 1);
        for (int i = 0; i < h2_; ++i) rep.at(i, 0) = a2[i];
        for (int i = 0; i < out_dim_; ++i) rep.at(h2_ + i, 0) = tau[i];
        return rep;
    }

    NoisePrediction core(const Mat& rep, int t, const std::vector<double>&) const override {
        const double abar = sched_.alpha_bar[t - 1];
        const double sqrt_abar = std::sqrt(abar);
        const double inv_sqrt_one_minus = 1.0 / std::sqrt(1.0 - abar);
        NoisePrediction out(H_, d_);
        for (int i = 0; i < out_dim_; ++i) {
            double acc = b3_[i];
            for (int j = 0; j < h2_; ++j) acc += W3_[static_cast<std::size_t>(i) * h2_ + j] * rep.at(j, 0);
            const double tau0_hat = head_gain_ * acc;
            out[i] = (rep.at(h2_ + i, 0) - sqrt_abar * tau0_hat) * inv_sqrt_one_minus;
        }
        return out;
    }

    ProbeFeature pool(const Mat& rep, int t) const override {
        ProbeFeature f;
        f.step = t;
        f.values.assign(rep.v.begin(), rep.v.begin() + h2_);
        return f;
    }

    std::uint64_t stem_ops() const override {
        return static_cast<std::uint64_t>(h1_) * (in_dim_ + 1) + static_cast<std::uint64_t>(h2_) * (h1_ + 1);
    }
    std::uint64_t core_ops() const override { return static_cast<std::uint64_t>(out_dim_) * (h2_ + 1 + 3); }

   private:
    void init_layer(std::vector<double>& W, std::vector<double>& b, int out, int in, std::uint64_t tag) const {
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        W.resize(static_cast<std::size_t>(out) * in);
        b.assign(out, 0.0);
        for (std::size_t i = 0; i < W.size(); ++i) W[i] = scale * rng_gauss(seed_, tag, i);
        for (int i = 0; i < out; ++i) b[i] = 0.1 * scale * rng_gauss(seed_, tag + 50, i);
    }

    // Deterministic power iteration; an upper-bound-quality estimate is all
    // the Lipschitz normalization needs.
    double op_norm(const std::vector<double>& W, int rows, int cols) const {
        std::vector<double> v(cols, 1.0 / std::sqrt(static_cast<double>(cols)));
        std::vector<double> u(rows, 0.0);
        double sigma = 0.0;
        for (int iter = 0; iter < 50; ++iter) {
            for (int i = 0; i < rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < cols; ++j) acc += W[static_cast<std::size_t>(i) * cols + j] * v[j];
                u[i] = acc;
            }
            double nu = 0.0;
            for (double x : u) nu += x * x;
            nu = std::sqrt(nu);
            if (nu == 0.0) return 0.0;
            for (double& x : u) x /= nu;
            for (int j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (int i = 0; i < rows; ++i) acc += W[static_cast<std::size_t>(i) * cols + j] * u[i];
                v[j] = acc;
            }
            double nv = 0.0;
            for (double x : v) nv += x * x;
            sigma = std::sqrt(nv);
            if (sigma == 0.0) return 0.0;
            for (double& x : v) x /= sigma;
        }
        return sigma * 1.02;  // small safety factor over the iterate
    }

    void append_time_embedding(std::vector<double>& x, int t) const {
        const double u = static_cast<double>(t) / sched_.T;
        const double two_pi_u = 2.0 * std::numbers::pi * u;
        x.push_back(u);
        x.push_back(1.0 - u);
        x.push_back(std::sin(two_pi_u));
        x.push_back(std::cos(two_pi_u));
        x.push_back(std::sin(2.0 * two_pi_u));
        x.push_back(std::cos(2.0 * two_pi_u));
        x.push_back(u * u);
        x.push_back(std::sqrt(u));
    }

    std::vector<double> affine_tanh(const std::vector<double>& W, const std::vector<double>& b,
                                    const std::vector<double>& x, int out, int in) const {
        std::vector<double> y(out);
        for (int i = 0; i < out; ++i) {
            double acc = b[i];
            const double* row = W.data() + static_cast<std::size_t>(i) * in;
            for (int j = 0; j < in; ++j) acc += row[j] * x[j];
            y[i] = std::tanh(acc);
        }
        return y;
    }

    NoiseSchedule sched_;
    int H_, d_, ctx_dim_, h1_, h2_;
    std::uint64_t seed_;
    int in_dim_ = 0, out_dim_ = 0;
    std::vector<double> W1_, b1_, W2_, b2_, W3_, b3_;
    double head_gain_ = 1.0;
};

struct CfgGuidance {
    double w_cfg = 0.0;
    std::vector<double> null_context;
};

// Binds a denoiser to its guidance configuration and exposes the effective
// (sampler-consumed) prediction. On recompute the stem already evaluated for
// the probe is fed straight into the core.
class EffectiveModel {
   public:
    EffectiveModel(std::shared_ptr<const Denoiser> net, std::optional<CfgGuidance> guidance = std::nullopt)
        : net_(std::move(net)), guidance_(std::move(guidance)) {
        if (guidance_ && static_cast<int>(guidance_->null_context.size()) != net_->context_dim())
            throw std::invalid_argument("EffectiveModel: null-context dimension mismatch");
    }

    const Denoiser& net() const { return *net_; }
    const std::optional<CfgGuidance>& guidance() const { return guidance_; }

    ProbeFeature probe(const Trajectory& tau, int t, const std::vector<double>& context) const {
        return net_->probe(tau, t, context);
    }

    NoisePrediction effective(const Trajectory& tau, int t, const std::vector<double>& context) const {
        return effective_from_stem(net_->stem(tau, t, context), tau, t, context);
    }

    NoisePrediction effective_from_stem(const Mat& rep, const Trajectory& tau, int t,
                                        const std::vector<double>& context) const {
        NoisePrediction eps_cond = net_->core(rep, t, context);
        if (!eps_cond.all_finite()) throw std::runtime_error("denoiser core produced non-finite values");
        if (!guidance_ || guidance_->w_cfg == 0.0) return eps_cond;
        NoisePrediction eps_uncond = net_->denoise(tau, t, guidance_->null_context);
        return cfg_combine(eps_cond, eps_uncond, guidance_->w_cfg);
    }

    EffectiveDenoiserFn bind(const std::vector<double>& context) const {
        return [this, context](const Trajectory& tau, int t) { return effective(tau, t, context); };
    }

   private:
    std::shared_ptr<const Denoiser> net_;
    std::optional<CfgGuidance> guidance_;
};

}  // namespace muninn
