#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "motionforge/diffcore.hpp"
#include "motionforge/video.hpp"

namespace motionforge::longgen {

enum class BoundaryRounding { floor, ceil };

/// Phase split of a long-video run. Denoising runs t = T..1; the first M steps (levels
/// T..T-M+1) shape the contours and are shared, the remaining T - M steps refine details
/// per segment.
struct SamplerPlan {
    int T = 50;
    double gamma = 0.8;
    int M = 40;
    int K = 5;
    int L = 8;
    double omega = 0.2;
    std::uint64_t shuffle_seed = 0;

    int detail_steps() const noexcept { return T - M; }
    /// Noise level of the latent handed from segment 1 to the later segments.
    int boundary_level() const noexcept { return T - M; }
    void validate() const;
};

/// M = floor(gamma * T) (ceil on request).
SamplerPlan plan_phases(int T, double gamma, int K, int L, double omega, std::uint64_t shuffle_seed,
                        BoundaryRounding rounding = BoundaryRounding::floor);

/// {"T", "gamma", "K", "L", "omega", "shuffle_seed"}; M is recomputed with floor on parse.
std::string plan_to_json(const SamplerPlan& plan);
SamplerPlan plan_from_json(const std::string& text);

/// T + (K - 1)(T - M): the denoiser evaluations of the sampling chains of sample_long.
std::uint64_t denoiser_eval_count(const SamplerPlan& plan);

/// n(t): the prediction for the reference frame replicated over `frames` and noised to level t
/// with standard normal noise drawn from `prior_seed`.
VideoTensor predicted_noise(const diff::NoisePredictor& model, const diff::Conditioning& cond, int t, int frames,
                            std::uint64_t prior_seed, const diff::NoiseSchedule& s);

/// n + omega * eps with eps standard normal from `eps_seed`.
VideoTensor perturb_noise(const VideoTensor& n, double omega, std::uint64_t eps_seed);

/// Shared noise for detail-phase level t of `plan`. Levels above the phase boundary
/// (t > T - M) belong to the shared contour phase and are rejected.
VideoTensor shared_noise(const diff::NoisePredictor& model, const diff::Conditioning& cond, int t,
                         const SamplerPlan& plan, std::uint64_t prior_seed, std::uint64_t eps_seed,
                         const diff::NoiseSchedule& s);

/// Per-frame noise entries for segments 2..K after a seeded Fisher-Yates shuffle.
struct NoiseBank {
    int K = 0;
    int L = 0;
    std::vector<VideoTensor> entries;     // single-frame tensors, post-shuffle order
    std::vector<std::size_t> provenance;  // provenance[i] = pre-shuffle index of entries[i]

    /// Stacked noise for segment k (2..K).
    VideoTensor segment_noise(int k) const;
};

/// Produces the entry for (segment k in 2..K, frame j in 0..L-1).
using NoiseFactory = std::function<VideoTensor(int segment, int frame)>;

NoiseBank build_noise_bank(const SamplerPlan& plan, const NoiseFactory& factory);

/// Seeded Fisher-Yates permutation of 0..n-1 using the project generator.
std::vector<std::size_t> shuffle_indices(std::size_t n, std::uint64_t seed);

struct LongOptions {
    std::uint64_t seed = 0;
    bool concurrent_segments = false;
    diff::SampleOptions sampling{};
    /// Replaces the shared-noise entries (the prior evaluation is then skipped).
    NoiseFactory noise_factory;
};

struct RunReport {
    std::uint64_t eval_count = 0;   // sampler-chain evaluations
    std::uint64_t prior_evals = 0;  // evaluations spent on the shared-noise prior
    std::vector<double> wall_ms_per_segment;
    std::vector<double> boundary_psnr;  // last frame of segment k vs first frame of k+1
    std::vector<double> segment_psnr;   // whole segment k vs segment k+1
    double temporal_consistency = 0.0;

    std::string to_json() const;
};

struct LongResult {
    VideoTensor video;  // K * L frames, pixel space
    RunReport report;
};

LongResult sample_long(const diff::NoisePredictor& model, const diff::Conditioning& cond, const SamplerPlan& plan,
                       const diff::NoiseSchedule& s, const LongOptions& options = {});

/// Baseline: K independent clips, each conditioned on the previous clip's last frame.
LongResult sample_long_naive(const diff::NoisePredictor& model, const diff::Conditioning& cond, int K, int L,
                             std::uint64_t seed, const diff::NoiseSchedule& s,
                             const diff::SampleOptions& options = {});

/// Adjacent-frame and whole-segment PSNRs plus clip temporal consistency.
void fill_consistency(RunReport& report, const VideoTensor& video, int K, int L);

/// Writes frame_NNNN.ppm for every frame plus index.json into `dir`.
void export_video(const VideoTensor& video, const std::string& dir, int segments = 1);

}  // namespace motionforge::longgen
