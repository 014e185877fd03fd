#include "motionforge/video.hpp"

#include <algorithm>

#include "motionforge/error.hpp"

namespace motionforge {

VideoTensor::VideoTensor(int frames, int channels, int height, int width, double fill)
    : frames_(frames), channels_(channels), height_(height), width_(width) {
    require(frames > 0 && channels > 0 && height > 0 && width > 0, ErrorKind::invalid_input,
            "video dimensions must be positive");
    data_.assign(static_cast<std::size_t>(frames) * channels * height * width, fill);
}

VideoTensor::VideoTensor(int frames, int channels, int height, int width, std::vector<double> data)
    : frames_(frames), channels_(channels), height_(height), width_(width), data_(std::move(data)) {
    require(frames > 0 && channels > 0 && height > 0 && width > 0, ErrorKind::invalid_input,
            "video dimensions must be positive");
    require(data_.size() == static_cast<std::size_t>(frames) * channels * height * width, ErrorKind::shape,
            "video storage does not match its shape");
}

VideoTensor VideoTensor::from_frames(std::span<const field::Frame> frames) {
    require(!frames.empty(), ErrorKind::invalid_input, "video needs at least one frame");
    const auto& f0 = frames.front();
    VideoTensor v(static_cast<int>(frames.size()), f0.channels(), f0.height(), f0.width());
    for (std::size_t l = 0; l < frames.size(); ++l) {
        const auto& f = frames[l];
        require(f.channels() == f0.channels() && f.width() == f0.width() && f.height() == f0.height(),
                ErrorKind::shape, "video frames must share a shape");
        std::copy(f.values().begin(), f.values().end(), v.data_.begin() + l * v.frame_size());
    }
    return v;
}

field::Frame VideoTensor::frame(int l) const {
    require(l >= 0 && l < frames_, ErrorKind::bounds, "frame index out of range");
    std::vector<float> values(frame_size());
    const auto src = frame_data(l);
    std::transform(src.begin(), src.end(), values.begin(), [](double v) { return static_cast<float>(v); });
    return field::Frame(channels_, width_, height_, std::move(values));
}

VideoTensor VideoTensor::slice(int first, int count) const {
    require(first >= 0 && count > 0 && first + count <= frames_, ErrorKind::bounds, "video slice out of range");
    std::vector<double> d(data_.begin() + first * frame_size(), data_.begin() + (first + count) * frame_size());
    return VideoTensor(count, channels_, height_, width_, std::move(d));
}

VideoTensor VideoTensor::concat(std::span<const VideoTensor> parts) {
    require(!parts.empty(), ErrorKind::invalid_input, "concat of zero videos");
    int total = 0;
    for (const auto& p : parts) {
        require(p.channels_ == parts[0].channels_ && p.height_ == parts[0].height_ && p.width_ == parts[0].width_,
                ErrorKind::shape, "concat: frame shapes differ");
        total += p.frames_;
    }
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(total) * parts[0].frame_size());
    for (const auto& p : parts) d.insert(d.end(), p.data_.begin(), p.data_.end());
    return VideoTensor(total, parts[0].channels_, parts[0].height_, parts[0].width_, std::move(d));
}

}  // namespace motionforge
