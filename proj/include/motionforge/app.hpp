#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "motionforge/denoiser.hpp"
#include "motionforge/evalkit.hpp"
#include "motionforge/longgen.hpp"
#include "motionforge/sparsectl.hpp"

// Plumbing shared by the command-line tool and the HTTP service. Both call these functions so
// that identical inputs produce identical bytes.
namespace motionforge::app {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

// Level comes from MOTIONFORGE_LOG (error, warn, info, debug); warn when unset.
LogLevel log_level();
void log(LogLevel level, const std::string& message);

struct RunConfig {
    std::string dataset;  // directory written by gen-data; empty means generate in memory
    std::string weights;  // checkpoint path
    std::string out;      // output directory
    std::optional<sparse::ArrowDocument> arrows;
    std::string image;  // reference frame (PPM); a blob under the first arrow when empty
    std::uint64_t seed = 1;
    int clips = 200;    // dataset size for gen-data and in-memory training
    int T = 50;
    double gamma = 0.8;
    int K = 5;
    int L = 8;
    double omega = 0.2;
    std::uint64_t shuffle_seed = 0;
    std::optional<sparse::DensifyParams> densify;  // per-command default when unset
    sparse::RefineParams refine{};
    diff::TrainConfig train{};
    std::vector<double> gammas{0.0, 0.25, 0.5, 0.8, 1.0};
    int repeats = 3;
    std::string host = "127.0.0.1";
    int port = 8080;

    longgen::SamplerPlan plan() const;
};

diff::TrainConfig default_train_config();
RunConfig default_run_config();

// Keys mirror RunConfig field names; unknown keys are rejected. "arrows" is either an inline
// arrow document or a path to one, resolved relative to base_dir.
RunConfig parse_run_config(const std::string& json_text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

// Applies the keys present in an already-parsed JSON object text on top of base.
RunConfig merge_run_config(RunConfig base, const std::string& json_text, const std::string& base_dir = ".");

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

sparse::DensifyParams flow_densify(const RunConfig& cfg, int width, int height);
sparse::DensifyParams sample_densify(const RunConfig& cfg);

sparse::FlowStages flow_stages(const sparse::ArrowDocument& doc, const sparse::DensifyParams& densify,
                               const sparse::RefineParams& refine);

struct FlowProduct {
    std::vector<std::uint8_t> flo;
    std::vector<std::uint8_t> preview;  // PPM color rendering
};
FlowProduct encode_flow_product(const field::FlowField& f);

// Writes sparse/dense/refined .flo files and their color PPMs into dir.
void write_flow_products(const sparse::FlowStages& stages, const std::string& dir);

// Gaussian blob matching the synthetic training clips, centred on the first arrow start.
field::Frame default_reference(const sparse::ArrowDocument& doc);

diff::Conditioning make_conditioning(const sparse::ArrowDocument& doc, const field::Frame& reference,
                                     const sparse::DensifyParams& densify, const sparse::RefineParams& refine);

diff::NoiseSchedule toy_schedule(int T);

std::vector<eval::SyntheticClip> load_or_generate(const RunConfig& cfg);
eval::SyntheticSpec dataset_spec(const RunConfig& cfg);

// Loads a toy checkpoint. A missing checkpoint or a foreign architecture is a state error.
diff::DenoiserWeights load_toy_weights(const std::string& path);

struct SampleOutput {
    VideoTensor video;
    longgen::RunReport report;
    field::Point centroid_velocity;
    std::string report_json;
    std::vector<std::vector<std::uint8_t>> frames;  // PPM bytes, one per frame
};

SampleOutput run_sample(const diff::NoisePredictor& model, const diff::Conditioning& cond, const RunConfig& cfg,
                        const diff::NoiseSchedule& s);
void write_sample(const SampleOutput& out, const std::string& dir);

struct AblationRow {
    double gamma = 0.0;
    std::uint64_t eval_count = 0;
    double wall_ms = 0.0;        // median over repeats
    double boundary_psnr = 0.0;  // mean segment-to-segment PSNR
    double temcons = 0.0;
};
std::vector<AblationRow> ablate_gamma(const diff::NoisePredictor& model, const diff::Conditioning& cond,
                                      const RunConfig& cfg, const diff::NoiseSchedule& s);
std::string ablation_csv(std::span<const AblationRow> rows);

}  // namespace motionforge::app
