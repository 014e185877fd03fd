#include "motionforge/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "motionforge/error.hpp"

namespace motionforge::app {

using nlohmann::json;

LogLevel log_level() {
    const char* env = std::getenv("MOTIONFORGE_LOG");
    if (env == nullptr) return LogLevel::warn;
    const std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::warn;
}

void log(LogLevel level, const std::string& message) {
    static const LogLevel threshold = log_level();
    static std::mutex mu;
    if (level > threshold) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::lock_guard lock(mu);
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << message << '\n';
}

longgen::SamplerPlan RunConfig::plan() const { return longgen::plan_phases(T, gamma, K, L, omega, shuffle_seed); }

diff::TrainConfig default_train_config() {
    diff::TrainConfig c;
    c.steps = 4000;
    c.batch_clips = 4;
    c.dropout_probability = 0.3;
    c.arrow_probability = 0.3;
    return c;
}

RunConfig default_run_config() {
    RunConfig c;
    c.train = default_train_config();
    return c;
}

namespace {

template <typename T>
T get_as(const json& j, const std::string& key) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::invalid_input, "config: '" + key + "' has the wrong type");
    }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    require(j.is_object(), ErrorKind::invalid_input, where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        require(ok, ErrorKind::invalid_input, where + ": unknown key '" + key + "'");
    }
}

sparse::DensifyParams parse_densify(const json& j, sparse::DensifyParams p) {
    check_keys(j, {"sigma", "threshold", "units"}, "densify");
    if (j.contains("sigma")) p.sigma = get_as<double>(j["sigma"], "densify.sigma");
    if (j.contains("threshold")) p.threshold = get_as<double>(j["threshold"], "densify.threshold");
    if (j.contains("units")) {
        const auto units = get_as<std::string>(j["units"], "densify.units");
        if (units == "pixels") {
            p.units = sparse::ThresholdUnits::pixels;
        } else if (units == "frame_fraction") {
            p.units = sparse::ThresholdUnits::frame_fraction;
        } else {
            fail(ErrorKind::invalid_input, "densify.units must be 'pixels' or 'frame_fraction'");
        }
    }
    require(p.sigma > 0.0 && std::isfinite(p.sigma), ErrorKind::invalid_input, "densify.sigma must be positive");
    require(p.threshold >= 0.0 && std::isfinite(p.threshold), ErrorKind::invalid_input,
            "densify.threshold must be nonnegative");
    return p;
}

sparse::RefineParams parse_refine(const json& j, sparse::RefineParams p) {
    check_keys(j, {"iterations", "smoothing_weight", "preserve_sources"}, "refine");
    if (j.contains("iterations")) p.iterations = get_as<int>(j["iterations"], "refine.iterations");
    if (j.contains("smoothing_weight")) p.smoothing_weight = get_as<double>(j["smoothing_weight"], "refine.smoothing_weight");
    if (j.contains("preserve_sources")) p.preserve_sources = get_as<bool>(j["preserve_sources"], "refine.preserve_sources");
    require(p.iterations >= 0, ErrorKind::invalid_input, "refine.iterations must be nonnegative");
    require(p.smoothing_weight > 0.0 && p.smoothing_weight <= 1.0, ErrorKind::invalid_input,
            "refine.smoothing_weight must lie in (0, 1]");
    return p;
}

diff::TrainConfig parse_train(const json& j, diff::TrainConfig c) {
    check_keys(j,
               {"steps", "batch_clips", "learning_rate", "grad_clip", "seed", "arrow_probability",
                "dropout_probability", "eval_samples", "stratified_timesteps"},
               "train");
    if (j.contains("steps")) c.steps = get_as<int>(j["steps"], "train.steps");
    if (j.contains("batch_clips")) c.batch_clips = get_as<int>(j["batch_clips"], "train.batch_clips");
    if (j.contains("learning_rate")) c.learning_rate = get_as<double>(j["learning_rate"], "train.learning_rate");
    if (j.contains("grad_clip")) c.grad_clip = get_as<double>(j["grad_clip"], "train.grad_clip");
    if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j["seed"], "train.seed");
    if (j.contains("arrow_probability")) c.arrow_probability = get_as<double>(j["arrow_probability"], "train.arrow_probability");
    if (j.contains("dropout_probability"))
        c.dropout_probability = get_as<double>(j["dropout_probability"], "train.dropout_probability");
    if (j.contains("eval_samples")) c.eval_samples = get_as<int>(j["eval_samples"], "train.eval_samples");
    if (j.contains("stratified_timesteps"))
        c.stratified_timesteps = get_as<bool>(j["stratified_timesteps"], "train.stratified_timesteps");
    return c;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string resolve(const std::string& path, const std::string& base_dir) {
    const std::filesystem::path p(path);
    if (p.is_absolute() || base_dir.empty()) return path;
    return (std::filesystem::path(base_dir) / p).string();
}

}  // namespace

RunConfig merge_run_config(RunConfig c, const std::string& json_text, const std::string& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::invalid_input, std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j,
               {"dataset", "weights", "out", "arrows", "image", "seed", "clips", "T", "gamma", "K", "L", "omega",
                "shuffle_seed", "densify", "refine", "train", "gammas", "repeats", "host", "port"},
               "config");
    if (j.contains("dataset")) c.dataset = resolve(get_as<std::string>(j["dataset"], "dataset"), base_dir);
    if (j.contains("weights")) c.weights = resolve(get_as<std::string>(j["weights"], "weights"), base_dir);
    if (j.contains("out")) c.out = resolve(get_as<std::string>(j["out"], "out"), base_dir);
    if (j.contains("image")) c.image = resolve(get_as<std::string>(j["image"], "image"), base_dir);
    if (j.contains("arrows")) {
        if (j["arrows"].is_string()) {
            c.arrows = sparse::parse_arrow_document(read_text(resolve(j["arrows"].get<std::string>(), base_dir)));
        } else {
            c.arrows = sparse::parse_arrow_document(j["arrows"].dump());
        }
    }
    if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j["seed"], "seed");
    if (j.contains("clips")) c.clips = get_as<int>(j["clips"], "clips");
    if (j.contains("T")) c.T = get_as<int>(j["T"], "T");
    if (j.contains("gamma")) c.gamma = get_as<double>(j["gamma"], "gamma");
    if (j.contains("K")) c.K = get_as<int>(j["K"], "K");
    if (j.contains("L")) c.L = get_as<int>(j["L"], "L");
    if (j.contains("omega")) c.omega = get_as<double>(j["omega"], "omega");
    if (j.contains("shuffle_seed")) c.shuffle_seed = get_as<std::uint64_t>(j["shuffle_seed"], "shuffle_seed");
    if (j.contains("densify")) c.densify = parse_densify(j["densify"], c.densify.value_or(sparse::DensifyParams{}));
    if (j.contains("refine")) c.refine = parse_refine(j["refine"], c.refine);
    if (j.contains("train")) c.train = parse_train(j["train"], c.train);
    if (j.contains("gammas")) c.gammas = get_as<std::vector<double>>(j["gammas"], "gammas");
    if (j.contains("repeats")) c.repeats = get_as<int>(j["repeats"], "repeats");
    if (j.contains("host")) c.host = get_as<std::string>(j["host"], "host");
    if (j.contains("port")) c.port = get_as<int>(j["port"], "port");

    require(c.clips >= 1, ErrorKind::invalid_input, "clips must be at least 1");
    require(c.repeats >= 1, ErrorKind::invalid_input, "repeats must be at least 1");
    require(c.port >= 0 && c.port <= 65535, ErrorKind::invalid_input, "port out of range");
    (void)c.plan();  // validates the sampler fields
    return c;
}

RunConfig parse_run_config(const std::string& json_text, const std::string& base_dir) {
    return merge_run_config(default_run_config(), json_text, base_dir);
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_text(path), std::filesystem::path(path).parent_path().string());
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        for (int s = 18; s >= 0; s -= 6) out.push_back(kAlphabet[(v >> s) & 63]);
    }
    const std::size_t rest = bytes.size() - i;
    if (rest > 0) {
        std::uint32_t v = bytes[i] << 16;
        if (rest == 2) v |= bytes[i + 1] << 8;
        out.push_back(kAlphabet[(v >> 18) & 63]);
        out.push_back(kAlphabet[(v >> 12) & 63]);
        out.push_back(rest == 2 ? kAlphabet[(v >> 6) & 63] : '=');
        out.push_back('=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    require(text.size() % 4 == 0, ErrorKind::invalid_input, "base64: length is not a multiple of 4");
    auto value = [](char ch) -> int {
        if (ch >= 'A' && ch <= 'Z') return ch - 'A';
        if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
        if (ch >= '0' && ch <= '9') return ch - '0' + 52;
        if (ch == '+') return 62;
        if (ch == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        std::uint32_t v = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char ch = text[i + k];
            if (ch == '=' && i + 4 == text.size() && k >= 2) {
                ++pad;
                v <<= 6;
                continue;
            }
            const int d = value(ch);
            require(d >= 0 && pad == 0, ErrorKind::invalid_input, "base64: invalid character");
            v = (v << 6) | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>(v >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
    }
    return out;
}

sparse::DensifyParams flow_densify(const RunConfig& cfg, int width, int height) {
    return cfg.densify ? *cfg.densify : sparse::DensifyParams::for_frame(width, height);
}

// Sampling conditions the model the way it was trained.
sparse::DensifyParams sample_densify(const RunConfig& cfg) { return cfg.densify ? *cfg.densify : cfg.train.densify; }

sparse::FlowStages flow_stages(const sparse::ArrowDocument& doc, const sparse::DensifyParams& densify,
                               const sparse::RefineParams& refine) {
    const sparse::LaplacianRefiner refiner(refine);
    return sparse::arrows_to_stages(doc.arrows, doc.width, doc.height, densify, refiner);
}

FlowProduct encode_flow_product(const field::FlowField& f) {
    return {field::encode_flo(f), field::encode_ppm(field::flow_to_color(f))};
}

void write_flow_products(const sparse::FlowStages& stages, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir + ": " + ec.message());
    const std::pair<const char*, const field::FlowField*> items[] = {
        {"sparse", &stages.sparse}, {"dense", &stages.dense}, {"refined", &stages.refined}};
    for (const auto& [name, f] : items) {
        const std::filesystem::path base = std::filesystem::path(dir) / name;
        field::save_flo(*f, base.string() + ".flo");
        field::save_ppm(field::flow_to_color(*f), base.string() + "_color.ppm");
    }
}

field::Frame default_reference(const sparse::ArrowDocument& doc) {
    require(doc.width > 0 && doc.height > 0, ErrorKind::invalid_input, "frame dimensions must be positive");
    double cx = (doc.width - 1) / 2.0, cy = (doc.height - 1) / 2.0;
    if (!doc.arrows.empty()) {
        cx = doc.arrows.front().start.x;
        cy = doc.arrows.front().start.y;
    }
    const double sigma = eval::SyntheticSpec{}.blob_sigma;
    field::Frame f(1, doc.width, doc.height);
    for (int y = 0; y < doc.height; ++y) {
        for (int x = 0; x < doc.width; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            f.at(0, x, y) = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
        }
    }
    return f;
}

diff::Conditioning make_conditioning(const sparse::ArrowDocument& doc, const field::Frame& reference,
                                     const sparse::DensifyParams& densify, const sparse::RefineParams& refine) {
    const field::Frame gray = field::to_gray(reference);
    require(gray.width() == doc.width && gray.height() == doc.height, ErrorKind::shape,
            "reference image is " + std::to_string(gray.width()) + "x" + std::to_string(gray.height()) +
                " but the arrow spec is " + std::to_string(doc.width) + "x" + std::to_string(doc.height));
    diff::Conditioning c;
    c.motion_field = sparse::arrows_to_refined(doc.arrows, doc.width, doc.height, densify, refine);
    for (const auto& a : doc.arrows) c.object_strengths.push_back(a.strength);
    c.global_strength = doc.global_strength;
    c.reference_frame = gray;
    c.validate();
    return c;
}

diff::NoiseSchedule toy_schedule(int T) { return diff::make_rescaled_schedule(T); }

eval::SyntheticSpec dataset_spec(const RunConfig& cfg) {
    eval::SyntheticSpec spec;
    spec.seed = cfg.seed;
    spec.frames = cfg.L;
    return spec;
}

std::vector<eval::SyntheticClip> load_or_generate(const RunConfig& cfg) {
    if (cfg.dataset.empty()) return eval::gen_dataset(dataset_spec(cfg), cfg.clips);
    require(std::filesystem::is_directory(cfg.dataset), ErrorKind::invalid_input,
            "dataset directory not found: " + cfg.dataset);
    return eval::load_dataset(cfg.dataset);
}

diff::DenoiserWeights load_toy_weights(const std::string& path) {
    require(!path.empty(), ErrorKind::state, "no checkpoint configured");
    require(std::filesystem::exists(path), ErrorKind::state, "checkpoint not found: " + path);
    return diff::load_checkpoint(path, diff::ToyDenoiser().arch_hash());
}

SampleOutput run_sample(const diff::NoisePredictor& model, const diff::Conditioning& cond, const RunConfig& cfg,
                        const diff::NoiseSchedule& s) {
    const longgen::SamplerPlan plan = cfg.plan();
    longgen::LongOptions opts;
    opts.seed = cfg.seed;
    longgen::LongResult r = longgen::sample_long(model, cond, plan, s, opts);

    SampleOutput out;
    out.centroid_velocity = eval::mean_centroid_velocity(r.video);
    json report = json::parse(r.report.to_json());
    report["centroid_velocity"] = {{"u", out.centroid_velocity.x}, {"v", out.centroid_velocity.y}};
    report["plan"] = json::parse(longgen::plan_to_json(plan));
    report["frames"] = r.video.frames();
    report["seed"] = cfg.seed;
    out.report_json = report.dump(2);
    for (int k = 0; k < r.video.frames(); ++k) out.frames.push_back(field::encode_ppm(r.video.frame(k)));
    out.video = std::move(r.video);
    out.report = std::move(r.report);
    return out;
}

void write_sample(const SampleOutput& out, const std::string& dir) {
    longgen::export_video(out.video, dir, out.report.wall_ms_per_segment.empty()
                                              ? 1
                                              : static_cast<int>(out.report.wall_ms_per_segment.size()));
    std::ofstream f(std::filesystem::path(dir) / "report.json");
    require(static_cast<bool>(f), ErrorKind::io, "cannot write report in " + dir);
    f << out.report_json << '\n';
}

std::vector<AblationRow> ablate_gamma(const diff::NoisePredictor& model, const diff::Conditioning& cond,
                                      const RunConfig& cfg, const diff::NoiseSchedule& s) {
    require(!cfg.gammas.empty(), ErrorKind::invalid_input, "ablation needs at least one gamma");
    std::vector<AblationRow> rows;
    for (double g : cfg.gammas) {
        const longgen::SamplerPlan plan = longgen::plan_phases(cfg.T, g, cfg.K, cfg.L, cfg.omega, cfg.shuffle_seed);
        longgen::LongOptions opts;
        opts.seed = cfg.seed;
        std::vector<double> times;
        longgen::LongResult last;
        for (int r = 0; r < cfg.repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            last = longgen::sample_long(model, cond, plan, s, opts);
            times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        AblationRow row;
        row.gamma = g;
        row.eval_count = last.report.eval_count;
        row.wall_ms = eval::quantile(times, 0.5);
        // Adjacent segments compared whole, so replicated segments read as the PSNR cap.
        const auto& seg = last.report.segment_psnr;
        for (double p : seg) row.boundary_psnr += p;
        row.boundary_psnr = seg.empty() ? eval::kPsnrCap : row.boundary_psnr / static_cast<double>(seg.size());
        row.temcons = last.report.temporal_consistency;
        rows.push_back(row);
        log(LogLevel::info, "gamma " + std::to_string(g) + ": " + std::to_string(row.eval_count) + " evals, " +
                                std::to_string(row.wall_ms) + " ms");
    }
    return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
    std::ostringstream out;
    out << "gamma,eval_count,wall_ms,boundary_psnr,temcons\n";
    out << std::setprecision(10);
    for (const AblationRow& r : rows) {
        out << r.gamma << ',' << r.eval_count << ',' << r.wall_ms << ',' << r.boundary_psnr << ',' << r.temcons << '\n';
    }
    return out.str();
}

}  // namespace motionforge::app
