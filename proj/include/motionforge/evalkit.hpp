#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "motionforge/denoiser.hpp"
#include "motionforge/fieldcore.hpp"
#include "motionforge/video.hpp"

namespace motionforge::eval {

struct SyntheticSpec {
    int width = 16;
    int height = 16;
    int frames = 8;
    int blobs = 1;
    double speed_min = 0.3;  // pixels per frame
    double speed_max = 1.2;
    double blob_sigma = 1.5;
    std::optional<double> direction;  // radians; drawn uniformly when unset
    std::uint64_t seed = 0;

    void validate() const;
};

/// A clip of translating Gaussian blobs with its analytic motion.
struct SyntheticClip {
    VideoTensor video;                               // [L,1,H,W], [0, 1]
    field::MotionFields flows;                       // L - 1 fields
    double strength = 0.0;                           // motion_strength(flows)
    std::vector<field::Point> velocities;            // per blob
    std::vector<std::vector<field::Point>> centers;  // [frame][blob]
};

/// Blob b sits at c_b + k * v_b in frame k. Flow F_{k->k+1} carries v_b on the discs of radius
/// 3 sigma around the blob's positions in frames k and k+1, zero elsewhere. Starting points and
/// velocities are drawn so every centre stays at least 2 sigma inside the frame; a spec that
/// cannot satisfy this fails with invalid_input.
SyntheticClip gen_synthetic(const SyntheticSpec& spec);

/// The spec's seed is used as the base; clip i gets seed splitmix64(seed + i).
std::vector<SyntheticClip> gen_dataset(const SyntheticSpec& spec, int count);

/// Ground-truth conditioning for training: F_{0->1}, the clip strength, and a one-pixel sparse
/// hint carrying each blob's velocity at its rounded starting centre.
diff::TrainingClip to_training_clip(const SyntheticClip& clip);

/// 10 log10(1 / MSE), capped at kPsnrCap for identical inputs.
inline constexpr double kPsnrCap = 100.0;
double psnr(const field::Frame& a, const field::Frame& b);
double psnr(const VideoTensor& a, const VideoTensor& b);

/// Mean SSIM over all 8x8 windows at stride 1 (uniform weights, C1 = 0.01^2, C2 = 0.03^2);
/// channels are averaged.
double ssim(const field::Frame& a, const field::Frame& b);

/// Mean cosine similarity of adjacent-frame embeddings: frames are average-pooled onto an 8x8
/// grid, mean-subtracted and L2-normalised. Two flat frames count as identical (1); a flat frame
/// against a textured one scores 0.
double temporal_consistency(const VideoTensor& v);

/// Intensity-weighted centroid of channel 0 after removing `floor` (values below it are ignored).
field::Point centroid(const field::Frame& f, double floor = 0.05);
std::vector<field::Point> centroid_track(const VideoTensor& v, double floor = 0.05);
/// Mean per-step centroid displacement (last - first) / (L - 1).
field::Point mean_centroid_velocity(const VideoTensor& v, double floor = 0.05);

/// Mean over adjacent frame pairs of the mean squared pixel difference.
double frame_difference_energy(const VideoTensor& v);

/// Linear-interpolated quantile of `values` at q in [0, 1].
double quantile(std::vector<double> values, double q);

struct MetricRow {
    std::string clip_id;
    double psnr = 0.0;
    double ssim = 0.0;
    double temcons = 0.0;
};

/// "clip_id,psnr,ssim,temcons" rows.
std::string metrics_csv(std::span<const MetricRow> rows);

/// Writes clip_NNNN/frame_KK.ppm, clip_NNNN/flow_KK.flo and manifest.json under `dir`.
void export_dataset(std::span<const SyntheticClip> clips, const SyntheticSpec& spec, const std::string& dir);

// Reads a directory written by export_dataset. Frames come back 8-bit quantized.
std::vector<SyntheticClip> load_dataset(const std::string& dir);

}  // namespace motionforge::eval
