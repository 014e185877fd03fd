#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "motionforge/fieldcore.hpp"

namespace motionforge::sparse {

using field::FlowField;
using field::Pixel;

/// One user arrow A^s with its object strength M_o^s.
struct ArrowSpec {
    Pixel start;
    Pixel end;
    double strength = 1.0;
};

/// The arrow-spec JSON document shared with the flow-studio UI.
struct ArrowDocument {
    int width = 0;
    int height = 0;
    double global_strength = 0.0;
    std::vector<ArrowSpec> arrows;
};

/// Parses the arrow-spec JSON. Unknown keys, non-integral coordinates, and invalid arrows
/// are rejected with ErrorKind::invalid_input.
ArrowDocument parse_arrow_document(const std::string& json_text);
std::string serialize_arrow_document(const ArrowDocument& doc);

void validate_arrows(std::span<const ArrowSpec> arrows, int width, int height);

enum class ThresholdUnits {
    pixels,
    frame_fraction,  // magnitudes divided by the frame diagonal before comparison
};

struct DensifyParams {
    double sigma = 170.0;
    double threshold = 0.05;
    ThresholdUnits units = ThresholdUnits::frame_fraction;

    /// sigma = 170 at 512x512, scaled by frame diagonal.
    static DensifyParams for_frame(int width, int height);
};

struct RefineParams {
    int iterations = 8;
    double smoothing_weight = 0.5;
    bool preserve_sources = true;
};

/// Arrow start pixels carry (end - start) * strength; every other pixel is zero.
FlowField sparse_field_from_arrows(std::span<const ArrowSpec> arrows, int width, int height);

/// Gaussian-weighted spread of the nonzero sparse entries followed by the magnitude cutoff.
/// Sources are summed in row-major order for every query, so the result does not depend on
/// `threads`.
FlowField densify(const FlowField& sparse, const DensifyParams& params, int threads = 1);

/// Pluggable stand-in for the learned pixel-to-pixel refinement model.
class FlowRefiner {
public:
    virtual ~FlowRefiner() = default;
    virtual FlowField refine(const FlowField& dense, std::span<const Pixel> sources) const = 0;
};

/// Weighted 4-neighbour Laplacian smoothing with clamp-to-edge neighbours:
/// f <- (1 - w) f + w * mean4(f), repeated `iterations` times.
class LaplacianRefiner final : public FlowRefiner {
public:
    explicit LaplacianRefiner(RefineParams params);
    FlowField refine(const FlowField& dense, std::span<const Pixel> sources) const override;

private:
    RefineParams params_;
};

FlowField refine(const FlowField& dense, const RefineParams& params, std::span<const Pixel> sources = {});

struct FlowStages {
    FlowField sparse;
    FlowField dense;
    FlowField refined;
};

FlowStages arrows_to_stages(std::span<const ArrowSpec> arrows, int width, int height, const DensifyParams& densify,
                            const FlowRefiner& refiner);

FlowField arrows_to_refined(std::span<const ArrowSpec> arrows, int width, int height, const DensifyParams& densify,
                            const RefineParams& refine);

}  // namespace motionforge::sparse
