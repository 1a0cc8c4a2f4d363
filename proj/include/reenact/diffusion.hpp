#pragma once

// Forward noising, the noise-prediction training objective, condition
// dropout, the four-configuration guidance fusion and the deterministic
// sampler.
//
// The schedule is the cosine cumulative-alpha schedule with the usual
// per-step beta clip, T_train steps, abar[0] = 1. Pixels live in [0, 1] on
// the outside; the token space used by the diffusion is the patchified
// image mapped to [-1, 1].
//
// Guidance fusion computes
//     u + ls*(c_s - u) + ld*(c_d - c_s) + la*(c - c_d)
// in the algebraically identical coefficient form
//     (1-ls)*u + (ls-ld)*c_s + (ld-la)*c_d + la*c
// so the telescoping identities (ls,ld,la) = (1,1,1) -> c, (1,1,0) -> c_d,
// (1,0,0) -> c_s, (0,0,0) -> u hold bitwise.

#include <algorithm>
#include <cmath>
#include <vector>

#include "reenact/image.hpp"
#include "reenact/model.hpp"
#include "reenact/rng.hpp"
#include "reenact/tensor.hpp"
#include "reenact/tokens.hpp"

namespace reenact {

// --------------------------------------------------------------------------
// token space <-> pixel space

inline Tensor image_to_tokens(const Image& img, const PatchSpec& spec) {
    Image scaled = img;
    for (double& v : scaled.px) v = 2.0 * v - 1.0;
    return patchify(scaled, spec);
}

inline Image tokens_to_image(const Tensor& tokens, const PatchSpec& spec,
                             int* clamp_count = nullptr) {
    Image img = unpatchify(tokens, spec);
    int clamped = 0;
    for (double& v : img.px) {
        double x = 0.5 * (v + 1.0);
        if (x < 0.0 || x > 1.0) ++clamped;
        v = std::clamp(x, 0.0, 1.0);
    }
    if (clamp_count != nullptr) *clamp_count += clamped;
    return img;
}

// --------------------------------------------------------------------------
// noise schedule

struct NoiseSchedule {
    int t_train = 1000;
    std::vector<double> abar;  // cumulative alphas, index 0..t_train

    static NoiseSchedule cosine(int t_train = 1000) {
        if (t_train < 1) throw ContractError("noise schedule: t_train must be >= 1");
        NoiseSchedule s;
        s.t_train = t_train;
        s.abar.resize(static_cast<size_t>(t_train) + 1);
        constexpr double kShift = 0.008;
        auto f = [&](double t) {
            double x = (t / t_train + kShift) / (1.0 + kShift) * (M_PI / 2.0);
            double c = std::cos(x);
            return c * c;
        };
        double f0 = f(0.0);
        s.abar[0] = 1.0;
        double prev_raw = 1.0;
        for (int t = 1; t <= t_train; ++t) {
            double raw = f(static_cast<double>(t)) / f0;
            double beta = std::min(1.0 - raw / prev_raw, 0.999);
            s.abar[static_cast<size_t>(t)] = s.abar[static_cast<size_t>(t) - 1] * (1.0 - beta);
            prev_raw = raw;
        }
        return s;
    }

    double alpha_bar(int t) const {
        if (t < 0 || t > t_train)
            throw ContractError("noise schedule: t=" + std::to_string(t) + " outside [0, " +
                                std::to_string(t_train) + "]");
        return abar[static_cast<size_t>(t)];
    }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape())
        throw DimError("q_sample: noise shape " + shape_str(eps.shape()) +
                       " does not match data shape " + shape_str(z0.shape()));
    double ab = sched.alpha_bar(t);
    return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// --------------------------------------------------------------------------
// guidance

struct GuidanceWeights {
    double lambda_s = 2.0;
    double lambda_d = 2.5;
    double lambda_a = 1.0;
};

inline Tensor fuse_guidance(const Tensor& u, const Tensor& c_s, const Tensor& c_d,
                            const Tensor& c, const GuidanceWeights& w) {
    for (const Tensor* t : {&c_s, &c_d, &c})
        if (t->shape() != u.shape())
            throw DimError("fuse_guidance: shape mismatch " + shape_str(u.shape()) + " vs " +
                           shape_str(t->shape()));
    double cu = 1.0 - w.lambda_s;
    double cs = w.lambda_s - w.lambda_d;
    double cd = w.lambda_d - w.lambda_a;
    double ca = w.lambda_a;
    Tensor out(u.shape());
    for (int64_t i = 0; i < u.numel(); ++i)
        out.data()[i] = cu * u.data()[i] + cs * c_s.data()[i] + cd * c_d.data()[i] +
                        ca * c.data()[i];
    return out;
}

// Condition dropout tables. Stage 1 never exposes history; stage 2 is biased
// toward the fully conditioned configuration.
inline ConditionConfig sample_condition_config(int stage, Rng& rng) {
    if (stage != 1 && stage != 2)
        throw ContractError("sample_condition_config: stage must be 1 or 2");
    double u = rng.uniform();
    if (stage == 1) {
        if (u < 0.1) return ConditionConfig::none();
        if (u < 0.2) return ConditionConfig::s();
        return ConditionConfig::sd();
    }
    if (u < 0.05) return ConditionConfig::none();
    if (u < 0.15) return ConditionConfig::s();
    if (u < 0.40) return ConditionConfig::sd();
    return ConditionConfig::sdp();
}

// --------------------------------------------------------------------------
// training objective

// One chunk of training data in token space.
struct TrainingSample {
    std::vector<Tensor> target_tokens;   // F frames (clean data)
    Tensor source_tokens;
    std::vector<Tensor> driving_tokens;  // F frames
    std::vector<Tensor> history_tokens;  // R frames
};

// L = E || eps - eps_hat(q_sample(z0, t, eps), t) ||^2, one (t, eps) draw.
inline Tensor training_loss(const DiTModel& model, const NoiseSchedule& sched,
                            const TrainingSample& sample, const ConditionConfig& cond,
                            Rng& rng) {
    cond.validate();
    const int F = model.config().frames_per_chunk;
    if (static_cast<int>(sample.target_tokens.size()) != F)
        throw DimError("training_loss: expected " + std::to_string(F) + " target frames, got " +
                       std::to_string(sample.target_tokens.size()));
    int t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.t_train)));
    std::vector<Tensor> z(static_cast<size_t>(F)), eps(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f) {
        auto fi = static_cast<size_t>(f);
        eps[fi] = Tensor::randn(sample.target_tokens[fi].shape(), rng);
        z[fi] = q_sample(sample.target_tokens[fi], t, eps[fi], sched);
    }
    std::vector<Tensor> eps_hat = model.forward(z, t, sample.source_tokens,
                                                sample.driving_tokens, sample.history_tokens,
                                                cond);
    Tensor loss = mse(eps_hat[0], eps[0]);
    for (int f = 1; f < F; ++f)
        loss = add(loss, mse(eps_hat[static_cast<size_t>(f)], eps[static_cast<size_t>(f)]));
    return scale(loss, 1.0 / static_cast<double>(F));
}

// --------------------------------------------------------------------------
// sampler

// Conditioning inputs for one chunk, already in token space.
struct ChunkConditions {
    Tensor source_tokens;
    std::vector<Tensor> driving_tokens;  // F frames
    std::vector<Tensor> history_tokens;  // R frames (zero images for chunk 1)
};

enum class SampleMode { fused, fully_conditioned_only };

// Deterministic DDIM-style sampling (eta = 0) over `steps` evenly spaced
// timesteps; at each step the model runs under the four configurations and
// the outputs are fused. Predicted clean tokens are clipped to the data
// range before the update. Returns pixel-space frames in [0, 1].
inline Video sample_chunk(const DiTModel& model, const NoiseSchedule& sched,
                          const ChunkConditions& cond, const GuidanceWeights& w, int steps,
                          Rng& rng, SampleMode mode = SampleMode::fused,
                          int* clamp_count = nullptr) {
    if (steps < 1) throw ContractError("sample_chunk: steps must be >= 1");
    NoGradGuard ng;
    const ModelConfig& cfg = model.config();
    const int F = cfg.frames_per_chunk;
    const Shape tok_shape{cfg.patch.tokens_per_frame(), cfg.patch.token_dim()};

    std::vector<Tensor> z(static_cast<size_t>(F));
    for (auto& zf : z) zf = Tensor::randn(tok_shape, rng);

    HistoryCache cache = model.encode_history(cond.history_tokens);

    std::vector<Tensor> empty_frames;
    Tensor empty;
    for (int i = steps; i >= 1; --i) {
        int t = static_cast<int>(std::lround(static_cast<double>(sched.t_train) * i / steps));
        int t_prev = static_cast<int>(
            std::lround(static_cast<double>(sched.t_train) * (i - 1) / steps));
        if (t < 1) t = 1;

        std::vector<Tensor> fused(static_cast<size_t>(F));
        if (mode == SampleMode::fused) {
            auto u = model.forward(z, t, empty, empty_frames, empty_frames,
                                   ConditionConfig::none());
            auto cs = model.forward(z, t, cond.source_tokens, empty_frames, empty_frames,
                                    ConditionConfig::s());
            auto cd = model.forward(z, t, cond.source_tokens, cond.driving_tokens,
                                    empty_frames, ConditionConfig::sd());
            auto c = model.forward(z, t, cond.source_tokens, cond.driving_tokens,
                                   cond.history_tokens, ConditionConfig::sdp(), &cache);
            for (int f = 0; f < F; ++f) {
                auto fi = static_cast<size_t>(f);
                fused[fi] = fuse_guidance(u[fi], cs[fi], cd[fi], c[fi], w);
            }
        } else {
            fused = model.forward(z, t, cond.source_tokens, cond.driving_tokens,
                                  cond.history_tokens, ConditionConfig::sdp(), &cache);
        }

        double ab = sched.alpha_bar(t);
        double ab_prev = sched.alpha_bar(t_prev);
        double sa = std::sqrt(ab), s1a = std::sqrt(1.0 - ab);
        double sap = std::sqrt(ab_prev), s1ap = std::sqrt(1.0 - ab_prev);
        for (int f = 0; f < F; ++f) {
            auto fi = static_cast<size_t>(f);
            Tensor& zf = z[fi];
            const Tensor& ef = fused[fi];
            for (int64_t k = 0; k < zf.numel(); ++k) {
                double x0 = (zf.data()[k] - s1a * ef.data()[k]) / sa;
                x0 = std::clamp(x0, -1.0, 1.0);
                zf.data()[k] = sap * x0 + s1ap * ef.data()[k];
            }
        }
    }

    Video out;
    out.reserve(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f)
        out.push_back(tokens_to_image(z[static_cast<size_t>(f)], cfg.patch, clamp_count));
    return out;
}

}  // namespace reenact
