#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "motionforge/diffcore.hpp"
#include "motionforge/nn.hpp"
#include "motionforge/sparsectl.hpp"

namespace motionforge::diff {

/// Per-frame conditioning inputs derived once from a Conditioning and a clip length.
/// Frame k sees the reference transported k steps along the motion field, together with
/// the transported field itself.
struct PreparedCondition {
    int frames = 0;
    int height = 0;
    int width = 0;
    std::vector<double> reference;    // [H*W], 2*I_0 - 1
    std::vector<double> transported;  // [L][H*W], 2*w_k - 1
    std::vector<double> flow_u;       // [L][H*W]
    std::vector<double> flow_v;       // [L][H*W]
    double global_strength = 0.0;
};

PreparedCondition prepare_condition(const Conditioning& cond, int frames);

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
    int fan_in = 1;
    bool zero_init = false;
};

/// One training/inference example as the network sees it.
struct ModelInput {
    const VideoTensor* z_t = nullptr;  // [L,1,H,W], model space
    int t = 1;
    double alpha_bar = 0.0;
    const PreparedCondition* cond = nullptr;
};

/// A differentiable eps-predictor with a flat parameter vector.
class TrainableModel {
public:
    virtual ~TrainableModel() = default;
    virtual const std::vector<ParamSpec>& layout() const = 0;
    virtual std::uint64_t arch_hash() const = 0;
    /// Returns eps_hat for the whole batch, shaped [sum(L), 1, H, W]. All inputs share L, H, W.
    virtual nn::Var forward(nn::Tape& tape, std::span<const nn::Var> params, std::span<const ModelInput> batch) const = 0;

    std::size_t parameter_count() const;
    std::vector<double> initial_parameters(std::uint64_t seed) const;
};

/// Small U-shaped convolutional network over the frame stack. The motion cross-attention
/// sits at the 4x4 level; timestep and strength embeddings are concatenated and turned into
/// per-block channel biases. The network output is added to (1 - abar_t) times the eps that
/// the transported reference would imply as x0, so early steps lean on the warped reference
/// and late steps on the network.
struct ToyConfig {
    int width = 16;
    int height = 16;
    int base_channels = 8;
    int deep_channels = 16;
    int embedding_dim = 16;
    int embedding_hidden = 32;
    int attention_dim = 8;
    double strength_scale = 100.0;
    double flow_scale = 2.0;
};

class ToyDenoiser final : public TrainableModel {
public:
    explicit ToyDenoiser(ToyConfig config = {});

    const ToyConfig& config() const noexcept { return config_; }
    const std::vector<ParamSpec>& layout() const override { return layout_; }
    std::uint64_t arch_hash() const override { return hash_; }
    nn::Var forward(nn::Tape& tape, std::span<const nn::Var> params, std::span<const ModelInput> batch) const override;

private:
    ToyConfig config_;
    std::vector<ParamSpec> layout_;
    std::uint64_t hash_;
};

/// Five-parameter model: eps_hat = a*z_t + b*(2w_k - 1) + c*u_k + d*v_k + e. Used for
/// gradient checks.
class MicroDenoiser final : public TrainableModel {
public:
    MicroDenoiser();
    const std::vector<ParamSpec>& layout() const override { return layout_; }
    std::uint64_t arch_hash() const override;
    nn::Var forward(nn::Tape& tape, std::span<const nn::Var> params, std::span<const ModelInput> batch) const override;

private:
    std::vector<ParamSpec> layout_;
};

struct DenoiserWeights {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::uint64_t seed = 0;
    std::uint64_t arch_hash = 0;
    bool trained = false;
    std::vector<float> params;

    friend bool operator==(const DenoiserWeights&, const DenoiserWeights&) = default;
};

DenoiserWeights initial_weights(const TrainableModel& model, std::uint64_t seed);

/// Checkpoint layout: "MFCK", u32 version, u64 seed, u64 arch hash, u32 flags (bit 0 = trained),
/// u64 parameter count, then little-endian float32 parameters.
std::vector<std::uint8_t> encode_checkpoint(const DenoiserWeights& w);
DenoiserWeights decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const DenoiserWeights& w, const std::string& path);
/// Fails with a state error when `expected_arch_hash` is given and differs from the file.
DenoiserWeights load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_arch_hash = {});
/// FNV-1a digest of the encoded checkpoint.
std::uint64_t checkpoint_digest(const DenoiserWeights& w);

/// A TrainableModel bound to a weight bundle and a schedule.
class ModelPredictor final : public NoisePredictor {
public:
    ModelPredictor(const TrainableModel& model, DenoiserWeights weights, NoiseSchedule schedule);

    VideoTensor predict(const VideoTensor& z_t, int t, const Conditioning& cond) const override;
    bool ready() const override { return weights_.trained; }

    const DenoiserWeights& weights() const noexcept { return weights_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }

private:
    const TrainableModel& model_;
    DenoiserWeights weights_;
    std::vector<double> params_;
    NoiseSchedule schedule_;
};

/// One batch element for the differentiable loss.
struct LossSample {
    VideoTensor z0;   // model space
    int t = 1;
    VideoTensor eps;
    const PreparedCondition* cond = nullptr;
};

struct LossGradient {
    double loss = 0.0;
    std::vector<double> gradient;
};

/// The training loss (mean over the batch of ||eps - eps_hat||^2) and its gradient with
/// respect to every parameter.
LossGradient loss_and_gradient(const TrainableModel& model, std::span<const double> params,
                               std::span<const LossSample> batch, const NoiseSchedule& s);

/// A synthetic training clip with its ground-truth motion.
struct TrainingClip {
    VideoTensor video;             // [L,1,H,W], pixel space
    field::FlowField flow;         // F_{0->1}
    double strength = 0.0;         // M_s of the clip
    std::optional<field::FlowField> sparse_hint;  // single-pixel sparse field on the moving object
};

struct TrainConfig {
    int steps = 3000;
    int batch_clips = 2;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double grad_clip = 10.0;
    std::uint64_t seed = 1;
    double arrow_probability = 0.4;    // condition on the arrow pipeline instead of ground truth
    double dropout_probability = 0.2;  // condition on a zero field
    // sigma follows DensifyParams::for_frame at 16x16; the threshold is in pixels because the
    // frame-fraction cutoff is larger than the motion itself at this size.
    sparse::DensifyParams densify{.sigma = 5.3125, .threshold = 0.05, .units = sparse::ThresholdUnits::pixels};
    sparse::RefineParams refine{};
    int eval_samples = 48;
    // Deal training timesteps from shuffled passes over 1..T instead of independent draws.
    bool stratified_timesteps = true;
    std::function<void(int step, double loss)> progress;
};

struct TrainResult {
    DenoiserWeights weights;
    std::vector<std::pair<int, double>> loss_curve;
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
};

TrainResult train(const TrainableModel& model, std::span<const TrainingClip> dataset, const NoiseSchedule& s,
                  const TrainConfig& config);

/// "step,loss" rows.
std::string loss_curve_csv(const std::vector<std::pair<int, double>>& curve);

}  // namespace motionforge::diff
