#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace motionforge::field {

/// Per-pixel displacement in pixels per frame step.
struct Vec2 {
    float u = 0.0f;
    float v = 0.0f;

    friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct Pixel {
    int x = 0;
    int y = 0;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Dense displacement field F_{k->k+1} on a width x height grid, row-major.
class FlowField {
public:
    FlowField() = default;
    FlowField(int width, int height);
    FlowField(int width, int height, std::vector<Vec2> data);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool contains(int x, int y) const noexcept { return x >= 0 && y >= 0 && x < width_ && y < height_; }

    const Vec2& at(int x, int y) const { return data_[index(x, y)]; }
    Vec2& at(int x, int y) { return data_[index(x, y)]; }

    std::span<const Vec2> data() const noexcept { return data_; }
    std::span<Vec2> data() noexcept { return data_; }

    /// Throws if any component is NaN/Inf or the storage does not match the grid.
    void validate() const;
    float max_magnitude() const;

    friend bool operator==(const FlowField&, const FlowField&) = default;

private:
    std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

    int width_ = 0;
    int height_ = 0;
    std::vector<Vec2> data_;
};

/// Ordered flows {F_{0->1}, ..., F_{N-1->N}} of identical dimensions.
class MotionFields {
public:
    MotionFields() = default;
    explicit MotionFields(std::vector<FlowField> frames);

    std::size_t count() const noexcept { return frames_.size(); }
    const FlowField& operator[](std::size_t k) const { return frames_[k]; }
    const std::vector<FlowField>& frames() const noexcept { return frames_; }

private:
    std::vector<FlowField> frames_;
};

/// Planar image with samples nominally in [0, 1]; values[c][y][x].
class Frame {
public:
    Frame() = default;
    Frame(int channels, int width, int height, float fill = 0.0f);
    Frame(int channels, int width, int height, std::vector<float> values);

    int channels() const noexcept { return channels_; }
    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }

    float& at(int c, int x, int y) { return values_[index(c, x, y)]; }
    float at(int c, int x, int y) const { return values_[index(c, x, y)]; }

    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values() noexcept { return values_; }

    void validate() const;

    friend bool operator==(const Frame&, const Frame&) = default;

private:
    std::size_t index(int c, int x, int y) const {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int channels_ = 0;
    int width_ = 0;
    int height_ = 0;
    std::vector<float> values_;
};

/// p + F(p). The result may leave the grid; callers clamp if they need to.
Point warp_coords(Pixel p, const FlowField& f);

/// Bilinear sample with clamp-to-edge addressing.
float sample_bilinear(const Frame& frame, int channel, double x, double y);
Vec2 sample_bilinear(const FlowField& f, double x, double y);

/// Backward warp: out(x, y) = in((x, y) - f(x, y)), bilinear, clamp-to-edge.
Frame advect_frame(const Frame& frame, const FlowField& f);
/// Same backward warp applied to both flow components of `field`.
FlowField advect_field(const FlowField& field, const FlowField& f);

FlowField scaled(const FlowField& f, float factor);

/// Mean per-pixel Euclidean magnitude over all frames and pixels.
double motion_strength(const MotionFields& m);

// Middlebury .flo: float 202021.25, int32 width, int32 height, then (u, v) float32 pairs,
// all little-endian.
inline constexpr float kFloMagic = 202021.25f;

std::vector<std::uint8_t> encode_flo(const FlowField& f);
FlowField decode_flo(std::span<const std::uint8_t> bytes);
void write_flo(const FlowField& f, std::ostream& sink);
FlowField read_flo(std::istream& source);
void save_flo(const FlowField& f, const std::string& path);
FlowField load_flo(const std::string& path);

/// Middlebury color-wheel rendering. Saturation is |f| / max_magnitude clamped to 1,
/// zero flow renders white. With no max given the field's own maximum is used.
Frame flow_to_color(const FlowField& f, std::optional<double> max_magnitude = std::nullopt);

// Binary PPM (P6, maxval 255). Single-channel frames are written as gray RGB.
std::vector<std::uint8_t> encode_ppm(const Frame& frame);
Frame decode_ppm(std::span<const std::uint8_t> bytes);
void save_ppm(const Frame& frame, const std::string& path);
Frame load_ppm(const std::string& path);

// Channel mean. A single-channel frame is returned unchanged.
Frame to_gray(const Frame& frame);

}  // namespace motionforge::field
