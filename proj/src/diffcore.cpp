#include "motionforge/diffcore.hpp"

#include <algorithm>
#include <cmath>

#include "motionforge/error.hpp"
#include "motionforge/nn.hpp"

namespace motionforge::diff {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    require(!betas_.empty(), ErrorKind::invalid_input, "noise schedule needs at least one step");
    double prod = 1.0;
    alpha_bars_.reserve(betas_.size());
    for (double b : betas_) {
        require(std::isfinite(b) && b > 0.0 && b < 1.0, ErrorKind::invalid_input, "betas must lie in (0, 1)");
        prod *= 1.0 - b;
        alpha_bars_.push_back(prod);
    }
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
    require(steps >= 1, ErrorKind::invalid_input, "schedule needs T >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::invalid_input,
            "schedule needs 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(steps);
    for (int i = 0; i < steps; ++i) {
        betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    }
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule make_rescaled_schedule(int steps, double beta_start, double beta_end) {
    require(steps >= 1, ErrorKind::invalid_input, "schedule needs T >= 1");
    const double k = 1000.0 / steps;
    return make_schedule(steps, beta_start * k, beta_end * k);
}

VideoTensor forward_noise(const VideoTensor& z0, int t, const VideoTensor& eps, const NoiseSchedule& s) {
    require(z0.same_shape(eps), ErrorKind::shape, "forward_noise: z0 and eps shapes differ");
    require(t >= 1 && t <= s.steps(), ErrorKind::bounds, "forward_noise: timestep out of range");
    const double a = std::sqrt(s.alpha_bar(t));
    const double b = std::sqrt(1.0 - s.alpha_bar(t));
    VideoTensor out = z0;
    auto o = out.data();
    auto e = eps.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * o[i] + b * e[i];
    return out;
}

void Conditioning::validate() const {
    motion_field.validate();
    reference_frame.validate();
    require(motion_field.width() == reference_frame.width() && motion_field.height() == reference_frame.height(),
            ErrorKind::shape, "conditioning: motion field and reference frame dimensions differ");
    require(std::isfinite(global_strength) && global_strength >= 0.0, ErrorKind::invalid_input,
            "conditioning: global strength must be >= 0");
    for (double m : object_strengths) {
        require(std::isfinite(m) && m >= 0.0, ErrorKind::invalid_input, "conditioning: object strengths must be >= 0");
    }
}

double training_loss(const NoisePredictor& model, std::span<const TrainingSample> batch, const NoiseSchedule& s) {
    require(!batch.empty(), ErrorKind::invalid_input, "training_loss: empty batch");
    double total = 0.0;
    for (const TrainingSample& item : batch) {
        const VideoTensor z_t = forward_noise(item.z0, item.t, item.eps, s);
        const VideoTensor pred = model.predict(z_t, item.t, item.cond);
        require(pred.same_shape(item.eps), ErrorKind::shape, "training_loss: prediction shape mismatch");
        double sq = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = item.eps.data()[i] - pred.data()[i];
            sq += d * d;
        }
        total += sq;
    }
    return total / static_cast<double>(batch.size());
}

std::vector<double> sinusoidal_embedding(double x, int dim) {
    require(dim > 0 && dim % 2 == 0, ErrorKind::invalid_input, "embedding dimension must be even");
    const int half = dim / 2;
    std::vector<double> out(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = std::sin(x * freq);
        out[half + i] = std::cos(x * freq);
    }
    return out;
}

std::vector<double> strength_embedding(double strength, int dim) {
    require(std::isfinite(strength) && strength >= 0.0, ErrorKind::invalid_input, "strength must be >= 0");
    return sinusoidal_embedding(strength, dim);
}

std::vector<double> timestep_embedding(int t, int dim) { return sinusoidal_embedding(static_cast<double>(t), dim); }

MotionEncoder MotionEncoder::random(std::uint64_t seed, int hidden, int channels) {
    MotionEncoder e;
    e.hidden = hidden;
    e.channels = channels;
    CounterRng rng(seed);
    auto fill = [&](std::vector<double>& w, std::size_t n, int fan_in) {
        w.resize(n);
        const double scale = std::sqrt(1.0 / fan_in);
        for (double& v : w) v = static_cast<float>(rng.normal() * scale);
    };
    fill(e.w0, static_cast<std::size_t>(hidden) * 2 * 9, 2 * 9);
    fill(e.b0, hidden, 2 * 9);
    fill(e.w1, static_cast<std::size_t>(channels) * hidden * 9, hidden * 9);
    fill(e.b1, channels, hidden * 9);
    return e;
}

FeatureMap MotionEncoder::encode(const field::FlowField& f) const {
    f.validate();
    require(f.width() >= 4 && f.height() >= 4, ErrorKind::shape, "encode_motion: field smaller than encoder footprint");
    require(f.width() % 4 == 0 && f.height() % 4 == 0, ErrorKind::shape,
            "encode_motion: field sides must be multiples of 4");
    nn::Tape tape(false);
    nn::Tensor x({1, 2, f.height(), f.width()});
    const std::size_t plane = f.size();
    for (std::size_t i = 0; i < plane; ++i) {
        x.data[i] = f.data()[i].u / flow_scale;
        x.data[plane + i] = f.data()[i].v / flow_scale;
    }
    const nn::Var in = tape.constant(std::move(x));
    const nn::Var h = nn::silu(tape, nn::conv2d(tape, in, tape.constant(nn::Tensor({hidden, 2, 3, 3}, w0)),
                                                tape.constant(nn::Tensor({hidden}, b0)), 2, 1));
    const nn::Var o = nn::conv2d(tape, h, tape.constant(nn::Tensor({channels, hidden, 3, 3}, w1)),
                                 tape.constant(nn::Tensor({channels}, b1)), 2, 1);
    const nn::Tensor& v = tape.value(o);
    return FeatureMap{channels, v.dim(2), v.dim(3), v.data};
}

FeatureMap encode_motion(const field::FlowField& f, const MotionEncoder& encoder) { return encoder.encode(f); }

AttentionResult motion_cross_attention(std::span<const double> z, int c, std::span<const double> zm, int cm,
                                       const AttentionWeights& w) {
    require(c > 0 && cm > 0 && w.d > 0 && w.dv > 0, ErrorKind::invalid_input, "attention: dimensions must be > 0");
    require(z.size() % c == 0 && zm.size() % cm == 0, ErrorKind::shape, "attention: token arrays are ragged");
    const int n = static_cast<int>(z.size() / c);
    require(static_cast<int>(zm.size() / cm) == n, ErrorKind::shape, "attention: latent and motion token counts differ");
    require(w.wq.size() == static_cast<std::size_t>(w.d) * c && w.wk.size() == static_cast<std::size_t>(w.d) * c &&
                w.wv.size() == static_cast<std::size_t>(w.dv) * cm,
            ErrorKind::shape, "attention: projection dimensions disagree");
    AttentionResult r;
    r.output.assign(static_cast<std::size_t>(n) * w.dv, 0.0);
    r.weights.assign(static_cast<std::size_t>(n) * n, 0.0);
    nn::attention_forward(z, zm, n, c, cm, w.wq, w.wk, w.wv, w.d, w.dv, r.output, r.weights);
    return r;
}

VideoTensor posterior_step(const VideoTensor& z_t, const VideoTensor& eps_hat, int t, const NoiseSchedule& s,
                           const VideoTensor* noise, const StepOptions& opts) {
    require(t >= 1 && t <= s.steps(), ErrorKind::bounds, "denoise step: timestep out of range");
    require(z_t.same_shape(eps_hat), ErrorKind::shape, "denoise step: prediction shape mismatch");
    const double abar = s.alpha_bar(t);
    const double abar_prev = s.alpha_bar(t - 1);
    const double beta = s.beta(t);
    const double c_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
    const double c_zt = std::sqrt(s.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar);
    const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
    const bool add_noise = t > 1 && noise != nullptr;
    if (add_noise) {
        require(noise->same_shape(z_t), ErrorKind::shape, "denoise step: noise shape mismatch");
    }
    const double sa = std::sqrt(abar);
    const double sb = std::sqrt(1.0 - abar);
    VideoTensor out(z_t.frames(), z_t.channels(), z_t.height(), z_t.width());
    auto o = out.data();
    auto z = z_t.data();
    auto e = eps_hat.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        double x0 = (z[i] - sb * e[i]) / sa;
        if (opts.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
        o[i] = c_x0 * x0 + c_zt * z[i];
        if (add_noise) o[i] += sigma * noise->data()[i];
    }
    return out;
}

VideoTensor denoise_step(const VideoTensor& z_t, int t, const Conditioning& cond, const NoisePredictor& model,
                         const NoiseSchedule& s, const VideoTensor* injected_noise, const StepOptions& opts) {
    require(t >= 1 && t <= s.steps(), ErrorKind::bounds, "denoise step: timestep out of range");
    const VideoTensor eps = model.predict(z_t, t, cond);
    return posterior_step(z_t, eps, t, s, injected_noise, opts);
}

VideoTensor run_chain(const NoisePredictor& model, const Conditioning& cond, VideoTensor z, int t_from, int t_to,
                      const NoiseSchedule& s, const NoiseSource& noise, const StepOptions& opts,
                      const std::function<void(int, const VideoTensor&)>& on_step) {
    require(t_to >= 1 && t_from <= s.steps(), ErrorKind::bounds, "run_chain: step range outside the schedule");
    for (int t = t_from; t >= t_to; --t) {
        VideoTensor n;
        const VideoTensor* np = nullptr;
        if (t > 1 && noise) {
            n = noise(t);
            np = &n;
        }
        z = denoise_step(z, t, cond, model, s, np, opts);
        if (on_step) on_step(t, z);
    }
    return z;
}

VideoTensor normal_video(int frames, int channels, int height, int width, CounterRng& rng) {
    VideoTensor v(frames, channels, height, width);
    rng.fill_normal(v.data());
    return v;
}

VideoTensor ClipNoise::initial(int frames, int channels, int height, int width) const {
    CounterRng rng = CounterRng(seed).fork(0);
    return normal_video(frames, channels, height, width, rng);
}

VideoTensor ClipNoise::step(int t, int frames, int channels, int height, int width) const {
    CounterRng rng = CounterRng(seed).fork(static_cast<std::uint64_t>(t));
    return normal_video(frames, channels, height, width, rng);
}

VideoTensor to_model_space(const VideoTensor& pixels) {
    VideoTensor out = pixels;
    for (double& v : out.data()) v = 2.0 * v - 1.0;
    return out;
}

VideoTensor to_pixel_space(const VideoTensor& model_space) {
    VideoTensor out = model_space;
    for (double& v : out.data()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    return out;
}

VideoTensor sample_clip(const NoisePredictor& model, const Conditioning& cond, int frames, std::uint64_t seed,
                        const NoiseSchedule& s, const SampleOptions& opts) {
    require(model.ready(), ErrorKind::state, "sample_clip: weights are not trained");
    require(frames >= 1, ErrorKind::invalid_input, "sample_clip: need at least one frame");
    cond.validate();
    const int c = cond.reference_frame.channels();
    const int h = cond.reference_frame.height();
    const int w = cond.reference_frame.width();
    const ClipNoise noise{seed};
    VideoTensor z = noise.initial(frames, c, h, w);
    z = run_chain(model, cond, std::move(z), s.steps(), 1, s,
                  [&](int t) { return noise.step(t, frames, c, h, w); }, opts.step);
    return to_pixel_space(z);
}

}  // namespace motionforge::diff
