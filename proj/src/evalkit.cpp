#include "motionforge/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "motionforge/error.hpp"
#include "motionforge/rng.hpp"

namespace motionforge::eval {

using field::Frame;
using field::Point;

void SyntheticSpec::validate() const {
    require(width > 0 && height > 0, ErrorKind::invalid_input, "synthetic spec: dimensions must be positive");
    require(frames >= 2, ErrorKind::invalid_input, "synthetic spec: need at least two frames");
    require(blobs >= 1, ErrorKind::invalid_input, "synthetic spec: need at least one blob");
    require(blob_sigma > 0.0, ErrorKind::invalid_input, "synthetic spec: blob sigma must be > 0");
    require(speed_min >= 0.0 && speed_min <= speed_max, ErrorKind::invalid_input,
            "synthetic spec: need 0 <= speed_min <= speed_max");
}

namespace {

// Admissible starting interval for one axis, or lo > hi when none exists.
void start_range(double lo_bound, double hi_bound, double travel, double& lo, double& hi) {
    lo = lo_bound - std::min(0.0, travel);
    hi = hi_bound - std::max(0.0, travel);
}

}  // namespace

SyntheticClip gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    CounterRng rng(spec.seed);
    const double margin = 2.0 * spec.blob_sigma;
    const int L = spec.frames;
    SyntheticClip clip;
    std::vector<Point> starts;
    for (int b = 0; b < spec.blobs; ++b) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const double speed = spec.speed_min + (spec.speed_max - spec.speed_min) * rng.uniform();
            const double drawn = 2.0 * std::numbers::pi * rng.uniform();
            const double angle = spec.direction.value_or(drawn);
            const Point v{speed * std::cos(angle), speed * std::sin(angle)};
            double xlo, xhi, ylo, yhi;
            start_range(margin, spec.width - 1 - margin, (L - 1) * v.x, xlo, xhi);
            start_range(margin, spec.height - 1 - margin, (L - 1) * v.y, ylo, yhi);
            if (xlo > xhi || ylo > yhi) continue;
            starts.push_back({xlo + (xhi - xlo) * rng.uniform(), ylo + (yhi - ylo) * rng.uniform()});
            clip.velocities.push_back(v);
            placed = true;
        }
        require(placed, ErrorKind::invalid_input,
                "synthetic spec is infeasible: blobs cannot stay inside the frame for the whole clip");
    }

    clip.centers.resize(L);
    for (int k = 0; k < L; ++k) {
        for (int b = 0; b < spec.blobs; ++b) {
            clip.centers[k].push_back({starts[b].x + k * clip.velocities[b].x, starts[b].y + k * clip.velocities[b].y});
        }
    }

    clip.video = VideoTensor(L, 1, spec.height, spec.width);
    const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    for (int k = 0; k < L; ++k) {
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                double v = 0.0;
                for (const Point& c : clip.centers[k]) {
                    const double dx = x - c.x, dy = y - c.y;
                    v += std::exp(-(dx * dx + dy * dy) * inv2s2);
                }
                clip.video.at(k, 0, y, x) = std::min(v, 1.0);
            }
        }
    }

    const double support2 = 9.0 * spec.blob_sigma * spec.blob_sigma;
    std::vector<field::FlowField> flows;
    for (int k = 0; k + 1 < L; ++k) {
        field::FlowField f(spec.width, spec.height);
        for (int b = 0; b < spec.blobs; ++b) {
            const Point c0 = clip.centers[k][b];
            const Point c1 = clip.centers[k + 1][b];
            const field::Vec2 v{static_cast<float>(clip.velocities[b].x), static_cast<float>(clip.velocities[b].y)};
            for (int y = 0; y < spec.height; ++y) {
                for (int x = 0; x < spec.width; ++x) {
                    const double d0 = (x - c0.x) * (x - c0.x) + (y - c0.y) * (y - c0.y);
                    const double d1 = (x - c1.x) * (x - c1.x) + (y - c1.y) * (y - c1.y);
                    if (d0 <= support2 || d1 <= support2) f.at(x, y) = v;
                }
            }
        }
        flows.push_back(std::move(f));
    }
    clip.flows = field::MotionFields(std::move(flows));
    clip.strength = field::motion_strength(clip.flows);
    return clip;
}

std::vector<SyntheticClip> gen_dataset(const SyntheticSpec& spec, int count) {
    require(count >= 1, ErrorKind::invalid_input, "dataset needs at least one clip");
    std::vector<SyntheticClip> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        SyntheticSpec s = spec;
        s.seed = splitmix64(spec.seed + static_cast<std::uint64_t>(i));
        out.push_back(gen_synthetic(s));
    }
    return out;
}

diff::TrainingClip to_training_clip(const SyntheticClip& clip) {
    diff::TrainingClip t;
    t.video = clip.video;
    t.flow = clip.flows[0];
    t.strength = clip.strength;
    field::FlowField hint(t.flow.width(), t.flow.height());
    for (std::size_t b = 0; b < clip.velocities.size(); ++b) {
        const int x = std::clamp(static_cast<int>(std::lround(clip.centers[0][b].x)), 0, hint.width() - 1);
        const int y = std::clamp(static_cast<int>(std::lround(clip.centers[0][b].y)), 0, hint.height() - 1);
        hint.at(x, y) = {static_cast<float>(clip.velocities[b].x), static_cast<float>(clip.velocities[b].y)};
    }
    t.sparse_hint = std::move(hint);
    return t;
}

namespace {

double psnr_from_mse(double mse) {
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

void same_frame_shape(const Frame& a, const Frame& b, const char* op) {
    require(a.channels() == b.channels() && a.width() == b.width() && a.height() == b.height(), ErrorKind::shape,
            std::string(op) + ": frame shapes differ");
}

}  // namespace

double psnr(const Frame& a, const Frame& b) {
    same_frame_shape(a, b, "psnr");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const double d = static_cast<double>(a.values()[i]) - b.values()[i];
        s += d * d;
    }
    return psnr_from_mse(s / a.values().size());
}

double psnr(const VideoTensor& a, const VideoTensor& b) {
    require(a.same_shape(b), ErrorKind::shape, "psnr: video shapes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return psnr_from_mse(s / a.size());
}

double ssim(const Frame& a, const Frame& b) {
    same_frame_shape(a, b, "ssim");
    constexpr int win = 8;
    require(a.width() >= win && a.height() >= win, ErrorKind::shape, "ssim: frame smaller than the 8x8 window");
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    constexpr double n = win * win;
    double total = 0.0;
    int windows = 0;
    for (int c = 0; c < a.channels(); ++c) {
        for (int y0 = 0; y0 + win <= a.height(); ++y0) {
            for (int x0 = 0; x0 + win <= a.width(); ++x0) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = y0; y < y0 + win; ++y) {
                    for (int x = x0; x < x0 + win; ++x) {
                        const double va = a.at(c, x, y), vb = b.at(c, x, y);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                const double ma = sa / n, mb = sb / n;
                const double va = std::max(0.0, saa / n - ma * ma);
                const double vb = std::max(0.0, sbb / n - mb * mb);
                const double cov = sab / n - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++windows;
            }
        }
    }
    return total / windows;
}

namespace {

std::vector<double> proxy_embedding(const VideoTensor& v, int l) {
    constexpr int grid = 8;
    const int H = v.height(), W = v.width();
    std::vector<double> e;
    e.reserve(static_cast<std::size_t>(v.channels()) * grid * grid);
    for (int c = 0; c < v.channels(); ++c) {
        for (int gy = 0; gy < grid; ++gy) {
            const int y0 = gy * H / grid, y1 = (gy + 1) * H / grid;
            for (int gx = 0; gx < grid; ++gx) {
                const int x0 = gx * W / grid, x1 = (gx + 1) * W / grid;
                double s = 0.0;
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) s += v.at(l, c, y, x);
                }
                e.push_back(s / ((y1 - y0) * (x1 - x0)));
            }
        }
    }
    double mean = 0.0;
    for (double x : e) mean += x;
    mean /= e.size();
    double norm = 0.0;
    for (double& x : e) {
        x -= mean;
        norm += x * x;
    }
    norm = std::sqrt(norm);
    // Below this the frame is flat up to rounding noise.
    if (norm < 1e-12) {
        std::fill(e.begin(), e.end(), 0.0);
    } else {
        for (double& x : e) x /= norm;
    }
    return e;
}

}  // namespace

double temporal_consistency(const VideoTensor& v) {
    require(v.frames() >= 2, ErrorKind::invalid_input, "temporal_consistency: need at least two frames");
    require(v.width() >= 8 && v.height() >= 8, ErrorKind::shape, "temporal_consistency: frames smaller than 8x8");
    double total = 0.0;
    std::vector<double> prev = proxy_embedding(v, 0);
    for (int l = 1; l < v.frames(); ++l) {
        std::vector<double> cur = proxy_embedding(v, l);
        const bool pz = std::all_of(prev.begin(), prev.end(), [](double x) { return x == 0.0; });
        const bool cz = std::all_of(cur.begin(), cur.end(), [](double x) { return x == 0.0; });
        double cos = 0.0;
        if (pz && cz) {
            cos = 1.0;
        } else if (!pz && !cz) {
            for (std::size_t i = 0; i < cur.size(); ++i) cos += prev[i] * cur[i];
        }
        total += std::clamp(cos, -1.0, 1.0);
        prev = std::move(cur);
    }
    return total / (v.frames() - 1);
}

Point centroid(const Frame& f, double floor) {
    double sw = 0, sx = 0, sy = 0;
    for (int y = 0; y < f.height(); ++y) {
        for (int x = 0; x < f.width(); ++x) {
            const double w = std::max(0.0, f.at(0, x, y) - floor);
            sw += w;
            sx += w * x;
            sy += w * y;
        }
    }
    if (sw <= 0.0) return {(f.width() - 1) / 2.0, (f.height() - 1) / 2.0};
    return {sx / sw, sy / sw};
}

std::vector<Point> centroid_track(const VideoTensor& v, double floor) {
    std::vector<Point> out;
    for (int l = 0; l < v.frames(); ++l) out.push_back(centroid(v.frame(l), floor));
    return out;
}

Point mean_centroid_velocity(const VideoTensor& v, double floor) {
    require(v.frames() >= 2, ErrorKind::invalid_input, "centroid velocity needs at least two frames");
    const auto track = centroid_track(v, floor);
    const double n = v.frames() - 1;
    return {(track.back().x - track.front().x) / n, (track.back().y - track.front().y) / n};
}

double frame_difference_energy(const VideoTensor& v) {
    require(v.frames() >= 2, ErrorKind::invalid_input, "frame difference energy needs at least two frames");
    double total = 0.0;
    for (int l = 1; l < v.frames(); ++l) {
        const auto a = v.frame_data(l - 1);
        const auto b = v.frame_data(l);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (b[i] - a[i]) * (b[i] - a[i]);
        total += s / a.size();
    }
    return total / (v.frames() - 1);
}

double quantile(std::vector<double> values, double q) {
    require(!values.empty(), ErrorKind::invalid_input, "quantile of an empty set");
    require(q >= 0.0 && q <= 1.0, ErrorKind::invalid_input, "quantile level must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = q * (values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

std::string metrics_csv(std::span<const MetricRow> rows) {
    std::ostringstream out;
    out << std::setprecision(10) << "clip_id,psnr,ssim,temcons\n";
    for (const MetricRow& r : rows) out << r.clip_id << ',' << r.psnr << ',' << r.ssim << ',' << r.temcons << '\n';
    return out.str();
}

void export_dataset(std::span<const SyntheticClip> clips, const SyntheticSpec& spec, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir + ": " + ec.message());
    nlohmann::json manifest;
    manifest["spec"] = {{"width", spec.width},         {"height", spec.height},       {"frames", spec.frames},
                        {"blobs", spec.blobs},         {"speed_min", spec.speed_min}, {"speed_max", spec.speed_max},
                        {"blob_sigma", spec.blob_sigma}, {"seed", spec.seed}};
    manifest["clips"] = nlohmann::json::array();
    for (std::size_t i = 0; i < clips.size(); ++i) {
        std::ostringstream name;
        name << "clip_" << std::setw(4) << std::setfill('0') << i;
        const fs::path cdir = fs::path(dir) / name.str();
        fs::create_directories(cdir, ec);
        require(!ec, ErrorKind::io, "cannot create " + cdir.string() + ": " + ec.message());
        nlohmann::json entry{{"id", name.str()}, {"strength", clips[i].strength}};
        entry["frames"] = nlohmann::json::array();
        entry["flows"] = nlohmann::json::array();
        for (int k = 0; k < clips[i].video.frames(); ++k) {
            std::ostringstream fn;
            fn << "frame_" << std::setw(2) << std::setfill('0') << k << ".ppm";
            field::save_ppm(clips[i].video.frame(k), (cdir / fn.str()).string());
            entry["frames"].push_back(name.str() + "/" + fn.str());
        }
        for (std::size_t k = 0; k < clips[i].flows.count(); ++k) {
            std::ostringstream fn;
            fn << "flow_" << std::setw(2) << std::setfill('0') << k << ".flo";
            field::save_flo(clips[i].flows[k], (cdir / fn.str()).string());
            entry["flows"].push_back(name.str() + "/" + fn.str());
        }
        entry["velocities"] = nlohmann::json::array();
        for (const Point& v : clips[i].velocities) entry["velocities"].push_back({v.x, v.y});
        entry["centers"] = nlohmann::json::array();
        for (const auto& frame_centers : clips[i].centers) {
            nlohmann::json row = nlohmann::json::array();
            for (const Point& c : frame_centers) row.push_back({c.x, c.y});
            entry["centers"].push_back(std::move(row));
        }
        manifest["clips"].push_back(std::move(entry));
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    require(static_cast<bool>(out), ErrorKind::io, "cannot write manifest in " + dir);
    out << manifest.dump(2) << '\n';
}

std::vector<SyntheticClip> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    std::ifstream in(root / "manifest.json");
    require(static_cast<bool>(in), ErrorKind::io, "cannot read " + (root / "manifest.json").string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("dataset manifest: ") + e.what());
    }
    auto point = [](const nlohmann::json& j) { return Point{j.at(0).get<double>(), j.at(1).get<double>()}; };
    std::vector<SyntheticClip> out;
    try {
        for (const auto& entry : manifest.at("clips")) {
            SyntheticClip clip;
            std::vector<Frame> frames;
            for (const auto& f : entry.at("frames")) {
                frames.push_back(field::to_gray(field::load_ppm((root / f.get<std::string>()).string())));
            }
            clip.video = VideoTensor::from_frames(frames);
            std::vector<field::FlowField> flows;
            for (const auto& f : entry.at("flows")) flows.push_back(field::load_flo((root / f.get<std::string>()).string()));
            clip.flows = field::MotionFields(std::move(flows));
            clip.strength = entry.at("strength").get<double>();
            for (const auto& v : entry.at("velocities")) clip.velocities.push_back(point(v));
            for (const auto& row : entry.at("centers")) {
                std::vector<Point> centers;
                for (const auto& c : row) centers.push_back(point(c));
                clip.centers.push_back(std::move(centers));
            }
            require(!clip.centers.empty() && clip.centers[0].size() == clip.velocities.size(), ErrorKind::format,
                    "dataset manifest: centers do not match velocities");
            out.push_back(std::move(clip));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("dataset manifest: ") + e.what());
    }
    require(!out.empty(), ErrorKind::invalid_input, "dataset " + dir + " has no clips");
    return out;
}

}  // namespace motionforge::eval
