#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "motionforge/fieldcore.hpp"
#include "motionforge/rng.hpp"
#include "motionforge/video.hpp"

namespace motionforge::diff {

/// beta_t and alpha_bar_t for t = 1..T (stored 0-based).
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> betas);

    int steps() const noexcept { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_.at(t - 1); }
    double alpha(int t) const { return 1.0 - beta(t); }
    /// alpha_bar_0 is 1 by convention.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(t - 1); }
    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// Linear beta ramp; alpha_bar by running product.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// The same ramp with both endpoints multiplied by 1000 / steps, so a short chain still ends
/// near pure noise. Used by the toy model defaults.
NoiseSchedule make_rescaled_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);

/// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.
VideoTensor forward_noise(const VideoTensor& z0, int t, const VideoTensor& eps, const NoiseSchedule& s);

/// Everything the denoiser is conditioned on.
struct Conditioning {
    field::FlowField motion_field;         // refined field, pixels per frame
    std::vector<double> object_strengths;  // M_o per arrow (already folded into the field)
    double global_strength = 0.0;          // M_s
    field::Frame reference_frame;          // I_0, single channel, [0, 1]

    void validate() const;
};

/// eps_theta(z_t, t, c). Implementations must be deterministic and safe to call concurrently.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual VideoTensor predict(const VideoTensor& z_t, int t, const Conditioning& cond) const = 0;
    /// False when weights are not usable for sampling (e.g. an untrained checkpoint).
    virtual bool ready() const { return true; }
};

/// Wraps a predictor and counts evaluations; thread-safe.
class CountingPredictor final : public NoisePredictor {
public:
    explicit CountingPredictor(const NoisePredictor& inner) : inner_(inner) {}

    VideoTensor predict(const VideoTensor& z_t, int t, const Conditioning& cond) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        return inner_.predict(z_t, t, cond);
    }
    bool ready() const override { return inner_.ready(); }

    std::uint64_t calls() const noexcept { return calls_.load(); }
    void reset() noexcept { calls_ = 0; }

private:
    const NoisePredictor& inner_;
    mutable std::atomic<std::uint64_t> calls_{0};
};

struct TrainingSample {
    VideoTensor z0;
    int t = 1;
    VideoTensor eps;
    Conditioning cond;
};

/// Mean over the batch of ||eps - eps_theta(forward_noise(z0, t, eps), t, c)||^2.
double training_loss(const NoisePredictor& model, std::span<const TrainingSample> batch, const NoiseSchedule& s);

/// Sinusoidal embedding: first dim/2 entries sin(x * f_i), last dim/2 cos(x * f_i),
/// f_i = 10000^(-i / (dim/2)).
std::vector<double> sinusoidal_embedding(double x, int dim);
std::vector<double> strength_embedding(double strength, int dim);
std::vector<double> timestep_embedding(int t, int dim);

/// Row-major feature grid [channels][height][width].
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Two stride-2 3x3 convolutions (SiLU between) mapping a flow field to a grid of
/// (H/4) x (W/4) motion tokens.
struct MotionEncoder {
    std::vector<double> w0, b0;  // [hidden, 2, 3, 3], [hidden]
    std::vector<double> w1, b1;  // [channels, hidden, 3, 3], [channels]
    int hidden = 8;
    int channels = 16;
    double flow_scale = 1.0;

    static MotionEncoder random(std::uint64_t seed, int hidden = 8, int channels = 16);
    FeatureMap encode(const field::FlowField& f) const;
};

/// Motion feature map of `f` (fails when the field is smaller than the encoder footprint
/// or its sides are not multiples of 4).
FeatureMap encode_motion(const field::FlowField& f, const MotionEncoder& encoder);

struct AttentionWeights {
    std::vector<double> wq;  // [d, c]
    std::vector<double> wk;  // [d, c]
    std::vector<double> wv;  // [dv, cm]
    int d = 0;
    int dv = 0;
};

struct AttentionResult {
    std::vector<double> output;   // [n, dv]
    std::vector<double> weights;  // [n, n], rows sum to 1
};

/// softmax(Q K^T / sqrt(d)) V_m with Q = W^Q z, K = W^K z, V_m = W^V z_m.
/// z is [n, c] tokens, zm is [n, cm]; both row-major.
AttentionResult motion_cross_attention(std::span<const double> z, int c, std::span<const double> zm, int cm,
                                       const AttentionWeights& w);

struct StepOptions {
    bool clip_x0 = false;  // clamp the implied x0 to [-1, 1] before forming the posterior mean
};

/// Ancestral DDPM update from an eps prediction:
/// z_{t-1} = mu_t(z_t, x0_hat) + sigma_t * noise with sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t).
/// At t = 1 no noise is added.
VideoTensor posterior_step(const VideoTensor& z_t, const VideoTensor& eps_hat, int t, const NoiseSchedule& s,
                           const VideoTensor* noise, const StepOptions& opts = {});

VideoTensor denoise_step(const VideoTensor& z_t, int t, const Conditioning& cond, const NoisePredictor& model,
                         const NoiseSchedule& s, const VideoTensor* injected_noise, const StepOptions& opts = {});

/// Supplies the noise injected at step t (t >= 2) of a chain.
using NoiseSource = std::function<VideoTensor(int t)>;

/// Runs steps t = t_from down to t_to (inclusive) starting from `z` at level t_from.
VideoTensor run_chain(const NoisePredictor& model, const Conditioning& cond, VideoTensor z, int t_from, int t_to,
                      const NoiseSchedule& s, const NoiseSource& noise, const StepOptions& opts = {},
                      const std::function<void(int t, const VideoTensor& z_prev)>& on_step = {});

/// Standard normal video drawn from `rng`.
VideoTensor normal_video(int frames, int channels, int height, int width, CounterRng& rng);

/// Noise streams of a seeded clip: the initial latent and the per-step injections.
struct ClipNoise {
    std::uint64_t seed;
    VideoTensor initial(int frames, int channels, int height, int width) const;
    VideoTensor step(int t, int frames, int channels, int height, int width) const;
};

/// Pixel [0, 1] <-> diffusion [-1, 1].
VideoTensor to_model_space(const VideoTensor& pixels);
VideoTensor to_pixel_space(const VideoTensor& model_space);

struct SampleOptions {
    StepOptions step{.clip_x0 = true};
};

/// Full T-step ancestral sampling of an L-frame clip, returned in pixel space.
VideoTensor sample_clip(const NoisePredictor& model, const Conditioning& cond, int frames, std::uint64_t seed,
                        const NoiseSchedule& s, const SampleOptions& opts = {});

}  // namespace motionforge::diff
