#pragma once

#include <span>
#include <vector>

#include "motionforge/fieldcore.hpp"

namespace motionforge {

/// L x C x H x W sample array. Pixel-space clips hold values in [0, 1]; the diffusion
/// sampler works on the same layout rescaled to [-1, 1].
class VideoTensor {
public:
    VideoTensor() = default;
    VideoTensor(int frames, int channels, int height, int width, double fill = 0.0);
    VideoTensor(int frames, int channels, int height, int width, std::vector<double> data);

    static VideoTensor from_frames(std::span<const field::Frame> frames);

    int frames() const noexcept { return frames_; }
    int channels() const noexcept { return channels_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t frame_size() const noexcept { return static_cast<std::size_t>(channels_) * height_ * width_; }

    double& at(int l, int c, int y, int x) { return data_[index(l, c, y, x)]; }
    double at(int l, int c, int y, int x) const { return data_[index(l, c, y, x)]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<const double> frame_data(int l) const { return {data_.data() + l * frame_size(), frame_size()}; }

    bool same_shape(const VideoTensor& o) const noexcept {
        return frames_ == o.frames_ && channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
    }

    field::Frame frame(int l) const;
    VideoTensor slice(int first, int count) const;

    /// Concatenates along the frame axis.
    static VideoTensor concat(std::span<const VideoTensor> parts);

    friend bool operator==(const VideoTensor&, const VideoTensor&) = default;

private:
    std::size_t index(int l, int c, int y, int x) const {
        return ((static_cast<std::size_t>(l) * channels_ + c) * height_ + y) * width_ + x;
    }

    int frames_ = 0;
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

}  // namespace motionforge
