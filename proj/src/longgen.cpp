#include "motionforge/longgen.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "motionforge/error.hpp"
#include "motionforge/evalkit.hpp"
#include "motionforge/rng.hpp"

namespace motionforge::longgen {

using diff::Conditioning;
using diff::NoisePredictor;
using diff::NoiseSchedule;

void SamplerPlan::validate() const {
    require(T >= 1, ErrorKind::invalid_input, "plan: T must be >= 1");
    require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::invalid_input, "plan: gamma must lie in [0, 1]");
    require(M >= 0 && M <= T, ErrorKind::invalid_input, "plan: M must lie in [0, T]");
    require(K >= 1 && L >= 1, ErrorKind::invalid_input, "plan: K and L must be >= 1");
    require(omega >= 0.0 && std::isfinite(omega), ErrorKind::invalid_input, "plan: omega must be >= 0");
}

SamplerPlan plan_phases(int T, double gamma, int K, int L, double omega, std::uint64_t shuffle_seed,
                        BoundaryRounding rounding) {
    require(T >= 1, ErrorKind::invalid_input, "plan: T must be >= 1");
    require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::invalid_input, "plan: gamma must lie in [0, 1]");
    SamplerPlan p;
    p.T = T;
    p.gamma = gamma;
    // A small tolerance so 0.8 * 50 is 40 and not 39 after rounding error.
    const double raw = gamma * T;
    p.M = rounding == BoundaryRounding::floor ? static_cast<int>(std::floor(raw + 1e-9))
                                              : static_cast<int>(std::ceil(raw - 1e-9));
    p.M = std::clamp(p.M, 0, T);
    p.K = K;
    p.L = L;
    p.omega = omega;
    p.shuffle_seed = shuffle_seed;
    p.validate();
    return p;
}

std::string plan_to_json(const SamplerPlan& plan) {
    nlohmann::json j{{"T", plan.T},         {"gamma", plan.gamma}, {"K", plan.K},
                     {"L", plan.L},         {"omega", plan.omega}, {"shuffle_seed", plan.shuffle_seed}};
    return j.dump();
}

SamplerPlan plan_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("plan: malformed JSON: ") + e.what());
    }
    require(j.is_object(), ErrorKind::invalid_input, "plan: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        require(key == "T" || key == "gamma" || key == "K" || key == "L" || key == "omega" || key == "shuffle_seed",
                ErrorKind::invalid_input, "plan: unknown key '" + key + "'");
    }
    try {
        return plan_phases(j.at("T").get<int>(), j.at("gamma").get<double>(), j.at("K").get<int>(),
                           j.at("L").get<int>(), j.at("omega").get<double>(), j.at("shuffle_seed").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, std::string("plan: ") + e.what());
    }
}

std::uint64_t denoiser_eval_count(const SamplerPlan& plan) {
    plan.validate();
    return static_cast<std::uint64_t>(plan.T) +
           static_cast<std::uint64_t>(plan.K - 1) * static_cast<std::uint64_t>(plan.T - plan.M);
}

VideoTensor predicted_noise(const NoisePredictor& model, const Conditioning& cond, int t, int frames,
                            std::uint64_t prior_seed, const NoiseSchedule& s) {
    cond.validate();
    const field::Frame& ref = cond.reference_frame;
    std::vector<field::Frame> stack(frames, ref);
    const VideoTensor z0 = diff::to_model_space(VideoTensor::from_frames(stack));
    CounterRng rng(prior_seed);
    const VideoTensor eps = diff::normal_video(frames, ref.channels(), ref.height(), ref.width(), rng);
    return model.predict(diff::forward_noise(z0, t, eps, s), t, cond);
}

VideoTensor perturb_noise(const VideoTensor& n, double omega, std::uint64_t eps_seed) {
    require(omega >= 0.0, ErrorKind::invalid_input, "omega must be >= 0");
    VideoTensor out = n;
    if (omega == 0.0) return out;
    CounterRng rng(eps_seed);
    for (double& v : out.data()) v += omega * rng.normal();
    return out;
}

VideoTensor shared_noise(const NoisePredictor& model, const Conditioning& cond, int t, const SamplerPlan& plan,
                         std::uint64_t prior_seed, std::uint64_t eps_seed, const NoiseSchedule& s) {
    plan.validate();
    require(t >= 1 && t <= s.steps(), ErrorKind::bounds, "shared_noise: timestep out of range");
    require(t <= plan.boundary_level(), ErrorKind::invalid_input,
            "shared_noise: level " + std::to_string(t) + " lies in the shared contour phase (boundary level " +
                std::to_string(plan.boundary_level()) + ")");
    return perturb_noise(predicted_noise(model, cond, t, plan.L, prior_seed, s), plan.omega, eps_seed);
}

VideoTensor NoiseBank::segment_noise(int k) const {
    require(k >= 2 && k <= K, ErrorKind::bounds, "noise bank exhausted: no entries for segment " + std::to_string(k));
    const std::size_t first = static_cast<std::size_t>(k - 2) * L;
    require(first + L <= entries.size(), ErrorKind::bounds, "noise bank exhausted");
    return VideoTensor::concat(std::span<const VideoTensor>(entries).subspan(first, L));
}

std::vector<std::size_t> shuffle_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    CounterRng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

NoiseBank build_noise_bank(const SamplerPlan& plan, const NoiseFactory& factory) {
    plan.validate();
    require(plan.K >= 2, ErrorKind::invalid_input, "noise bank needs K >= 2");
    std::vector<VideoTensor> raw;
    raw.reserve(static_cast<std::size_t>(plan.K - 1) * plan.L);
    for (int k = 2; k <= plan.K; ++k) {
        for (int j = 0; j < plan.L; ++j) {
            VideoTensor e = factory(k, j);
            require(e.frames() == 1, ErrorKind::shape, "noise bank entries must be single frames");
            require(raw.empty() || e.same_shape(raw.front()), ErrorKind::shape, "noise bank entries differ in shape");
            raw.push_back(std::move(e));
        }
    }
    NoiseBank bank;
    bank.K = plan.K;
    bank.L = plan.L;
    bank.provenance = shuffle_indices(raw.size(), plan.shuffle_seed);
    bank.entries.reserve(raw.size());
    for (std::size_t i : bank.provenance) bank.entries.push_back(raw[i]);
    return bank;
}

std::string RunReport::to_json() const {
    nlohmann::json j{{"eval_count", eval_count},
                     {"prior_evals", prior_evals},
                     {"wall_ms_per_segment", wall_ms_per_segment},
                     {"boundary_psnr", boundary_psnr},
                     {"segment_psnr", segment_psnr},
                     {"temporal_consistency", temporal_consistency}};
    return j.dump(2);
}

void fill_consistency(RunReport& report, const VideoTensor& video, int K, int L) {
    require(video.frames() == K * L, ErrorKind::shape, "report: video length is not K * L");
    report.boundary_psnr.clear();
    report.segment_psnr.clear();
    for (int k = 0; k + 1 < K; ++k) {
        report.boundary_psnr.push_back(eval::psnr(video.frame((k + 1) * L - 1), video.frame((k + 1) * L)));
        report.segment_psnr.push_back(eval::psnr(video.slice(k * L, L), video.slice((k + 1) * L, L)));
    }
    report.temporal_consistency = video.frames() >= 2 ? eval::temporal_consistency(video) : 1.0;
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

// Seeds for the shared-noise prior and the per-entry perturbations of a run.
std::uint64_t prior_seed_of(std::uint64_t seed) { return splitmix64(seed ^ 0x5ba7ed0153ULL); }
std::uint64_t entry_seed_of(std::uint64_t seed, int segment, int frame) {
    return splitmix64(splitmix64(seed ^ 0xe7712eULL) + static_cast<std::uint64_t>(segment) * 1000003ULL +
                      static_cast<std::uint64_t>(frame));
}

}  // namespace

LongResult sample_long(const NoisePredictor& model, const Conditioning& cond, const SamplerPlan& plan,
                       const NoiseSchedule& s, const LongOptions& options) {
    plan.validate();
    require(model.ready(), ErrorKind::state, "sample_long: weights are not trained");
    require(plan.T == s.steps(), ErrorKind::state, "sample_long: plan T does not match the model's schedule");
    cond.validate();
    const int C = cond.reference_frame.channels();
    const int H = cond.reference_frame.height();
    const int W = cond.reference_frame.width();
    const int L = plan.L;

    LongResult result;
    diff::CountingPredictor counter(model);
    std::vector<VideoTensor> segments(plan.K);
    result.report.wall_ms_per_segment.assign(plan.K, 0.0);

    // Segment 1: the full chain with the same noise as sample_clip, keeping the latent at the
    // phase boundary.
    const auto t1 = std::chrono::steady_clock::now();
    const diff::ClipNoise noise{options.seed};
    const int boundary = plan.boundary_level();
    VideoTensor z = noise.initial(L, C, H, W);
    VideoTensor boundary_latent = z;
    auto step_noise = [&](int t) { return noise.step(t, L, C, H, W); };
    z = diff::run_chain(counter, cond, std::move(z), plan.T, 1, s, step_noise, options.sampling.step,
                        [&](int t, const VideoTensor& z_prev) {
                            if (t - 1 == boundary) boundary_latent = z_prev;
                        });
    segments[0] = diff::to_pixel_space(z);
    result.report.wall_ms_per_segment[0] = elapsed_ms(t1);

    if (plan.K >= 2) {
        NoiseBank bank;
        if (plan.detail_steps() > 0 && options.noise_factory) {
            bank = build_noise_bank(plan, options.noise_factory);
        } else if (plan.detail_steps() > 0) {
            const int level = std::max(boundary, 1);
            const VideoTensor n = predicted_noise(model, cond, level, L, prior_seed_of(options.seed), s);
            result.report.prior_evals = 1;
            bank = build_noise_bank(plan, [&](int k, int j) {
                return perturb_noise(n.slice(j, 1), plan.omega, entry_seed_of(options.seed, k, j));
            });
        }
        auto run_segment = [&](int k) {
            const auto start = std::chrono::steady_clock::now();
            if (plan.detail_steps() == 0) {
                segments[k - 1] = segments[0];
            } else {
                const VideoTensor injected = bank.segment_noise(k);
                const VideoTensor out =
                    diff::run_chain(counter, cond, boundary_latent, boundary, 1, s,
                                    [&](int) { return injected; }, options.sampling.step);
                segments[k - 1] = diff::to_pixel_space(out);
            }
            result.report.wall_ms_per_segment[k - 1] = elapsed_ms(start);
        };
        if (options.concurrent_segments) {
            std::vector<std::jthread> workers;
            std::vector<std::exception_ptr> errors(plan.K + 1);
            for (int k = 2; k <= plan.K; ++k) {
                workers.emplace_back([&, k] {
                    try {
                        run_segment(k);
                    } catch (...) {
                        errors[k] = std::current_exception();
                    }
                });
            }
            workers.clear();
            for (const auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
        } else {
            for (int k = 2; k <= plan.K; ++k) run_segment(k);
        }
    }

    result.video = VideoTensor::concat(segments);
    result.report.eval_count = counter.calls();
    fill_consistency(result.report, result.video, plan.K, L);
    return result;
}

LongResult sample_long_naive(const NoisePredictor& model, const Conditioning& cond, int K, int L, std::uint64_t seed,
                             const NoiseSchedule& s, const diff::SampleOptions& options) {
    require(K >= 1 && L >= 1, ErrorKind::invalid_input, "naive long sampling needs K, L >= 1");
    diff::CountingPredictor counter(model);
    LongResult result;
    std::vector<VideoTensor> segments;
    Conditioning c = cond;
    for (int k = 0; k < K; ++k) {
        const auto start = std::chrono::steady_clock::now();
        const std::uint64_t clip_seed = k == 0 ? seed : splitmix64(seed + static_cast<std::uint64_t>(k));
        segments.push_back(diff::sample_clip(counter, c, L, clip_seed, s, options));
        c.reference_frame = segments.back().frame(L - 1);
        result.report.wall_ms_per_segment.push_back(elapsed_ms(start));
    }
    result.video = VideoTensor::concat(segments);
    result.report.eval_count = counter.calls();
    fill_consistency(result.report, result.video, K, L);
    return result;
}

void export_video(const VideoTensor& video, const std::string& dir, int segments) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir + ": " + ec.message());
    nlohmann::json index{{"count", video.frames()},
                         {"width", video.width()},
                         {"height", video.height()},
                         {"channels", video.channels()},
                         {"segments", segments}};
    index["frames"] = nlohmann::json::array();
    for (int l = 0; l < video.frames(); ++l) {
        std::ostringstream name;
        name << "frame_" << std::setw(4) << std::setfill('0') << l << ".ppm";
        field::save_ppm(video.frame(l), (fs::path(dir) / name.str()).string());
        index["frames"].push_back(name.str());
    }
    std::ofstream out(fs::path(dir) / "index.json");
    require(static_cast<bool>(out), ErrorKind::io, "cannot write index.json in " + dir);
    out << index.dump(2) << '\n';
}

}  // namespace motionforge::longgen
