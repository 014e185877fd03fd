#include "motionforge/fieldcore.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <numbers>
#include <ostream>

#include "motionforge/error.hpp"

namespace motionforge::field {

FlowField::FlowField(int width, int height) : width_(width), height_(height) {
    require(width > 0 && height > 0, ErrorKind::invalid_input, "flow field dimensions must be positive");
    data_.assign(static_cast<std::size_t>(width) * height, Vec2{});
}

FlowField::FlowField(int width, int height, std::vector<Vec2> data)
    : width_(width), height_(height), data_(std::move(data)) {
    validate();
}

void FlowField::validate() const {
    require(width_ > 0 && height_ > 0, ErrorKind::invalid_input, "flow field dimensions must be positive");
    require(data_.size() == static_cast<std::size_t>(width_) * height_, ErrorKind::shape,
            "flow field storage does not match width*height");
    for (const Vec2& d : data_) {
        require(std::isfinite(d.u) && std::isfinite(d.v), ErrorKind::invalid_input,
                "flow field contains non-finite values");
    }
}

float FlowField::max_magnitude() const {
    float m = 0.0f;
    for (const Vec2& d : data_) {
        m = std::max(m, std::hypot(d.u, d.v));
    }
    return m;
}

MotionFields::MotionFields(std::vector<FlowField> frames) : frames_(std::move(frames)) {
    require(!frames_.empty(), ErrorKind::invalid_input, "motion fields need at least one flow");
    for (const FlowField& f : frames_) {
        require(f.width() == frames_.front().width() && f.height() == frames_.front().height(), ErrorKind::shape,
                "motion fields must share dimensions");
    }
}

Frame::Frame(int channels, int width, int height, float fill)
    : channels_(channels), width_(width), height_(height) {
    require(channels > 0 && width > 0 && height > 0, ErrorKind::invalid_input, "frame dimensions must be positive");
    values_.assign(static_cast<std::size_t>(channels) * width * height, fill);
}

Frame::Frame(int channels, int width, int height, std::vector<float> values)
    : channels_(channels), width_(width), height_(height), values_(std::move(values)) {
    validate();
}

void Frame::validate() const {
    require(channels_ > 0 && width_ > 0 && height_ > 0, ErrorKind::invalid_input, "frame dimensions must be positive");
    require(values_.size() == static_cast<std::size_t>(channels_) * width_ * height_, ErrorKind::shape,
            "frame storage does not match its declared shape");
    for (float v : values_) {
        require(std::isfinite(v), ErrorKind::invalid_input, "frame contains non-finite values");
    }
}

Point warp_coords(Pixel p, const FlowField& f) {
    require(f.contains(p.x, p.y), ErrorKind::bounds, "warp_coords: point outside the flow field");
    const Vec2& d = f.at(p.x, p.y);
    return {p.x + static_cast<double>(d.u), p.y + static_cast<double>(d.v)};
}

namespace {

struct Taps {
    int x0, x1, y0, y1;
    double fx, fy;
};

Taps bilinear_taps(double x, double y, int width, int height) {
    x = std::clamp(x, 0.0, static_cast<double>(width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(height - 1));
    Taps t{};
    t.x0 = static_cast<int>(std::floor(x));
    t.y0 = static_cast<int>(std::floor(y));
    t.x1 = std::min(t.x0 + 1, width - 1);
    t.y1 = std::min(t.y0 + 1, height - 1);
    t.fx = x - t.x0;
    t.fy = y - t.y0;
    return t;
}

double blend(double a, double b, double c, double d, const Taps& t) {
    const double top = a * (1.0 - t.fx) + b * t.fx;
    const double bottom = c * (1.0 - t.fx) + d * t.fx;
    return top * (1.0 - t.fy) + bottom * t.fy;
}

}  // namespace

float sample_bilinear(const Frame& frame, int channel, double x, double y) {
    const Taps t = bilinear_taps(x, y, frame.width(), frame.height());
    return static_cast<float>(blend(frame.at(channel, t.x0, t.y0), frame.at(channel, t.x1, t.y0),
                                    frame.at(channel, t.x0, t.y1), frame.at(channel, t.x1, t.y1), t));
}

Vec2 sample_bilinear(const FlowField& f, double x, double y) {
    const Taps t = bilinear_taps(x, y, f.width(), f.height());
    const Vec2& a = f.at(t.x0, t.y0);
    const Vec2& b = f.at(t.x1, t.y0);
    const Vec2& c = f.at(t.x0, t.y1);
    const Vec2& d = f.at(t.x1, t.y1);
    return {static_cast<float>(blend(a.u, b.u, c.u, d.u, t)), static_cast<float>(blend(a.v, b.v, c.v, d.v, t))};
}

Frame advect_frame(const Frame& frame, const FlowField& f) {
    require(frame.width() == f.width() && frame.height() == f.height(), ErrorKind::shape,
            "advect_frame: frame and flow dimensions differ");
    Frame out(frame.channels(), frame.width(), frame.height());
    for (int y = 0; y < frame.height(); ++y) {
        for (int x = 0; x < frame.width(); ++x) {
            const Vec2& d = f.at(x, y);
            const double sx = x - static_cast<double>(d.u);
            const double sy = y - static_cast<double>(d.v);
            for (int c = 0; c < frame.channels(); ++c) {
                out.at(c, x, y) = sample_bilinear(frame, c, sx, sy);
            }
        }
    }
    return out;
}

FlowField advect_field(const FlowField& field, const FlowField& f) {
    require(field.width() == f.width() && field.height() == f.height(), ErrorKind::shape,
            "advect_field: flow dimensions differ");
    FlowField out(field.width(), field.height());
    for (int y = 0; y < field.height(); ++y) {
        for (int x = 0; x < field.width(); ++x) {
            const Vec2& d = f.at(x, y);
            out.at(x, y) = sample_bilinear(field, x - static_cast<double>(d.u), y - static_cast<double>(d.v));
        }
    }
    return out;
}

FlowField scaled(const FlowField& f, float factor) {
    FlowField out = f;
    for (Vec2& d : out.data()) {
        d.u *= factor;
        d.v *= factor;
    }
    return out;
}

double motion_strength(const MotionFields& m) {
    require(m.count() > 0, ErrorKind::invalid_input, "motion_strength: empty motion field sequence");
    double total = 0.0;
    std::size_t n = 0;
    for (const FlowField& f : m.frames()) {
        for (const Vec2& d : f.data()) {
            total += std::sqrt(static_cast<double>(d.u) * d.u + static_cast<double>(d.v) * d.v);
        }
        n += f.size();
    }
    return total / static_cast<double>(n);
}

// --- .flo ---------------------------------------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
    }
    return v;
}

std::vector<std::uint8_t> read_all(std::istream& in) {
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
    return read_all(in);
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path);
}

}  // namespace

std::vector<std::uint8_t> encode_flo(const FlowField& f) {
    f.validate();
    std::vector<std::uint8_t> out;
    out.reserve(12 + f.size() * 8);
    put_u32(out, std::bit_cast<std::uint32_t>(kFloMagic));
    put_u32(out, static_cast<std::uint32_t>(f.width()));
    put_u32(out, static_cast<std::uint32_t>(f.height()));
    for (const Vec2& d : f.data()) {
        put_u32(out, std::bit_cast<std::uint32_t>(d.u));
        put_u32(out, std::bit_cast<std::uint32_t>(d.v));
    }
    return out;
}

FlowField decode_flo(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= 12, ErrorKind::format, "flo: truncated header");
    const float magic = std::bit_cast<float>(get_u32(bytes, 0));
    require(magic == kFloMagic, ErrorKind::format, "flo: bad magic");
    const auto width = static_cast<std::int32_t>(get_u32(bytes, 4));
    const auto height = static_cast<std::int32_t>(get_u32(bytes, 8));
    require(width > 0 && height > 0, ErrorKind::format, "flo: nonpositive dimensions");
    const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    require(bytes.size() >= 12 + count * 8, ErrorKind::format, "flo: truncated payload");
    std::vector<Vec2> data(count);
    std::size_t offset = 12;
    for (Vec2& d : data) {
        d.u = std::bit_cast<float>(get_u32(bytes, offset));
        d.v = std::bit_cast<float>(get_u32(bytes, offset + 4));
        offset += 8;
    }
    return FlowField(width, height, std::move(data));
}

void write_flo(const FlowField& f, std::ostream& sink) {
    const auto bytes = encode_flo(f);
    sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(sink), ErrorKind::io, "flo: write failed");
}

FlowField read_flo(std::istream& source) { return decode_flo(read_all(source)); }

void save_flo(const FlowField& f, const std::string& path) { write_file(path, encode_flo(f)); }

FlowField load_flo(const std::string& path) { return decode_flo(read_file(path)); }

// --- color wheel ---------------------------------------------------------------------------

namespace {

using Rgb = std::array<double, 3>;

std::vector<Rgb> make_color_wheel() {
    constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<Rgb> wheel;
    wheel.reserve(RY + YG + GC + CB + BM + MR);
    for (int i = 0; i < RY; ++i) wheel.push_back({255, std::floor(255.0 * i / RY), 0});
    for (int i = 0; i < YG; ++i) wheel.push_back({255 - std::floor(255.0 * i / YG), 255, 0});
    for (int i = 0; i < GC; ++i) wheel.push_back({0, 255, std::floor(255.0 * i / GC)});
    for (int i = 0; i < CB; ++i) wheel.push_back({0, 255 - std::floor(255.0 * i / CB), 255});
    for (int i = 0; i < BM; ++i) wheel.push_back({std::floor(255.0 * i / BM), 0, 255});
    for (int i = 0; i < MR; ++i) wheel.push_back({255, 0, 255 - std::floor(255.0 * i / MR)});
    return wheel;
}

}  // namespace

Frame flow_to_color(const FlowField& f, std::optional<double> max_magnitude) {
    f.validate();
    static const std::vector<Rgb> wheel = make_color_wheel();
    const int ncols = static_cast<int>(wheel.size());
    double scale = max_magnitude.value_or(f.max_magnitude());
    require(std::isfinite(scale) && scale >= 0.0, ErrorKind::invalid_input, "flow_to_color: bad max magnitude");

    Frame out(3, f.width(), f.height(), 1.0f);
    if (scale == 0.0) {
        return out;
    }
    for (int y = 0; y < f.height(); ++y) {
        for (int x = 0; x < f.width(); ++x) {
            const double u = f.at(x, y).u / scale;
            const double v = f.at(x, y).v / scale;
            const double rad = std::min(1.0, std::sqrt(u * u + v * v));
            const double a = std::atan2(-v, -u) / std::numbers::pi;
            const double fk = (a + 1.0) / 2.0 * (ncols - 1);
            const int k0 = static_cast<int>(std::floor(fk)) % ncols;
            const int k1 = (k0 + 1) % ncols;
            const double w = fk - std::floor(fk);
            for (int c = 0; c < 3; ++c) {
                const double col = ((1.0 - w) * wheel[k0][c] + w * wheel[k1][c]) / 255.0;
                out.at(c, x, y) = static_cast<float>(1.0 - rad * (1.0 - col));
            }
        }
    }
    return out;
}

// --- PPM -----------------------------------------------------------------------------------

std::vector<std::uint8_t> encode_ppm(const Frame& frame) {
    require(frame.channels() == 1 || frame.channels() == 3, ErrorKind::invalid_input,
            "ppm export needs 1 or 3 channels");
    const std::string header =
        "P6\n" + std::to_string(frame.width()) + " " + std::to_string(frame.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + static_cast<std::size_t>(frame.width()) * frame.height() * 3);
    for (int y = 0; y < frame.height(); ++y) {
        for (int x = 0; x < frame.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                const float v = frame.at(frame.channels() == 1 ? 0 : c, x, y);
                const double q = std::round(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
                out.push_back(static_cast<std::uint8_t>(q));
            }
        }
    }
    return out;
}

Frame decode_ppm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&] {
        skip_space();
        long v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            require(v < (1L << 24), ErrorKind::format, "ppm: header value too large");
            ++pos;
            any = true;
        }
        require(any, ErrorKind::format, "ppm: malformed header");
        return static_cast<int>(v);
    };
    require(bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6', ErrorKind::format, "ppm: expected P6");
    pos = 2;
    const int width = read_int();
    const int height = read_int();
    const int maxval = read_int();
    require(width > 0 && height > 0, ErrorKind::format, "ppm: nonpositive dimensions");
    require(maxval == 255, ErrorKind::format, "ppm: only maxval 255 is supported");
    require(pos < bytes.size() && std::isspace(bytes[pos]), ErrorKind::format, "ppm: malformed header");
    ++pos;
    const std::size_t n = static_cast<std::size_t>(width) * height;
    require(bytes.size() - pos >= n * 3, ErrorKind::format, "ppm: truncated payload");
    Frame out(3, width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(c, x, y) = static_cast<float>(bytes[pos++] / 255.0);
            }
        }
    }
    return out;
}

void save_ppm(const Frame& frame, const std::string& path) { write_file(path, encode_ppm(frame)); }

Frame load_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

Frame to_gray(const Frame& frame) {
    if (frame.channels() == 1) return frame;
    Frame out(1, frame.width(), frame.height());
    for (int y = 0; y < frame.height(); ++y) {
        for (int x = 0; x < frame.width(); ++x) {
            float sum = 0.0f;
            for (int c = 0; c < frame.channels(); ++c) sum += frame.at(c, x, y);
            out.at(0, x, y) = sum / static_cast<float>(frame.channels());
        }
    }
    return out;
}

}  // namespace motionforge::field
