// Acceptance run: one PASS/FAIL line per criterion. Exits nonzero only with --strict.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "motionforge/app.hpp"
#include "motionforge/denoiser.hpp"
#include "motionforge/error.hpp"
#include "motionforge/evalkit.hpp"
#include "motionforge/longgen.hpp"
#include "motionforge/rng.hpp"
#include "motionforge/sparsectl.hpp"

using namespace motionforge;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Line {
    std::string name;
    Outcome outcome;
};
std::map<int, Line> g_results;

void report(int id, const std::string& name, const Outcome& o) {
    std::cerr << "criterion " << id << " done: " << (o.pass ? "PASS" : "FAIL") << '\n';
    g_results[id] = {name, o};
}

int print_results() {
    int failures = 0;
    for (const auto& [id, line] : g_results) {
        std::cout << "criterion " << id << " " << (line.outcome.pass ? "PASS" : "FAIL") << "  " << line.name << ": "
                  << line.outcome.detail << '\n';
        failures += !line.outcome.pass;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// --- 1: densify against a brute-force double loop ------------------------------------------

// Worst deviation relative to the field's peak magnitude. Pixels whose oracle magnitude sits
// within rounding of the threshold may land on either side and are skipped.
double densify_deviation(const field::FlowField& sparse_field, const field::FlowField& got, double sigma,
                         double threshold_px) {
    const int W = sparse_field.width(), H = sparse_field.height();
    std::vector<long double> ou(static_cast<std::size_t>(W) * H), ov(ou.size());
    long double peak = 0;
    for (int qy = 0; qy < H; ++qy) {
        for (int qx = 0; qx < W; ++qx) {
            long double u = 0, v = 0;
            for (int py = 0; py < H; ++py) {
                for (int px = 0; px < W; ++px) {
                    const auto d = sparse_field.at(px, py);
                    if (d.u == 0.0f && d.v == 0.0f) continue;
                    const long double dist2 = static_cast<long double>(px - qx) * (px - qx) +
                                              static_cast<long double>(py - qy) * (py - qy);
                    const long double w = std::exp(-dist2 / (static_cast<long double>(sigma) * sigma));
                    u += w * d.u;
                    v += w * d.v;
                }
            }
            ou[qy * W + qx] = u;
            ov[qy * W + qx] = v;
            peak = std::max(peak, std::sqrt(u * u + v * v));
        }
    }
    if (peak == 0) peak = 1;
    double worst = 0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            long double u = ou[y * W + x], v = ov[y * W + x];
            const long double mag = std::sqrt(u * u + v * v);
            const bool near_threshold = std::abs(mag - threshold_px) <= 1e-9L * std::max<long double>(1, mag);
            if (!(mag > threshold_px)) {
                if (near_threshold) continue;
                u = v = 0;
            }
            const auto g = got.at(x, y);
            const double e = static_cast<double>(std::max(std::abs(g.u - u), std::abs(g.v - v)) / peak);
            if (near_threshold && e > 1e-6) continue;
            worst = std::max(worst, e);
        }
    }
    return worst;
}

Outcome criterion_densify() {
    CounterRng rng(0xd1);
    double worst = 0, slowest = 0;
    int cases = 0;
    for (int c = 0; c < 50; ++c) {
        std::vector<sparse::ArrowSpec> arrows;
        const int n = 1 + static_cast<int>(rng.below(8));
        while (static_cast<int>(arrows.size()) < n) {
            sparse::ArrowSpec a;
            a.start = {static_cast<int>(rng.below(64)), static_cast<int>(rng.below(64))};
            a.end = {static_cast<int>(rng.below(64)), static_cast<int>(rng.below(64))};
            a.strength = 0.2 + 1.8 * rng.uniform();
            if (a.start.x == a.end.x && a.start.y == a.end.y) continue;
            bool dup = false;
            for (const auto& b : arrows) dup = dup || (b.start.x == a.start.x && b.start.y == a.start.y);
            if (!dup) arrows.push_back(a);
        }
        const field::FlowField sparse_field = sparse::sparse_field_from_arrows(arrows, 64, 64);
        for (double R : {0.0, 0.05}) {
            const sparse::DensifyParams p{20.0, R, sparse::ThresholdUnits::frame_fraction};
            const auto t0 = Clock::now();
            const field::FlowField got = sparse::densify(sparse_field, p);
            slowest = std::max(slowest, seconds_since(t0));
            worst = std::max(worst, densify_deviation(sparse_field, got, 20.0, R * std::hypot(64.0, 64.0)));
            ++cases;
        }
    }
    return {worst <= 1e-6 && slowest < 1.0, std::to_string(cases) + " cases, worst relative deviation " +
                                                 fmt("%.3g", worst) + ", slowest " + fmt("%.4f", slowest) + " s"};
}

// --- shared toy setup ---------------------------------------------------------------------

struct Toy {
    diff::ToyDenoiser model;
    diff::NoiseSchedule schedule = app::toy_schedule(50);
    std::optional<diff::ModelPredictor> predictor;
    std::vector<double> strengths;  // dataset clip strengths
    double train_seconds = 0;
    double loss_ratio = 0;
    bool trained_here = false;
};

void prepare_toy(Toy& toy, const std::string& weights_path, const std::string& save_path) {
    app::RunConfig cfg = app::default_run_config();
    const auto clips = app::load_or_generate(cfg);
    for (const auto& c : clips) toy.strengths.push_back(c.strength);
    if (!weights_path.empty()) {
        toy.predictor.emplace(toy.model, app::load_toy_weights(weights_path), toy.schedule);
        return;
    }
    std::vector<diff::TrainingClip> data;
    for (const auto& c : clips) data.push_back(eval::to_training_clip(c));
    diff::TrainConfig tc = cfg.train;
    const auto t0 = Clock::now();
    tc.progress = [&](int step, double) {
        if (step % 500 == 0) std::cerr << "  training step " << step << " (" << fmt("%.0f", seconds_since(t0)) << " s)\n";
    };
    const diff::TrainResult r = diff::train(toy.model, data, toy.schedule, tc);
    toy.train_seconds = seconds_since(t0);
    toy.loss_ratio = r.final_eval_loss / r.initial_eval_loss;
    toy.trained_here = true;
    if (!save_path.empty()) diff::save_checkpoint(r.weights, save_path);
    toy.predictor.emplace(toy.model, r.weights, toy.schedule);
}

// Static blob at a seed-dependent position, as in the training clips.
eval::SyntheticClip static_blob(int seed) {
    eval::SyntheticSpec sp;
    sp.seed = 5000 + static_cast<std::uint64_t>(seed);
    sp.speed_min = sp.speed_max = 0.0;
    return eval::gen_synthetic(sp);
}

// A blob placed like the first frame of a training clip moving along the x axis, so the arrow
// points into the room the blob needs to travel.
eval::SyntheticClip moving_start(int seed, int dx) {
    eval::SyntheticSpec sp;
    sp.seed = 5000 + static_cast<std::uint64_t>(seed);
    sp.speed_min = sp.speed_max = 0.8;
    sp.direction = dx > 0 ? 0.0 : std::numbers::pi;
    return eval::gen_synthetic(sp);
}

diff::Conditioning arrow_condition(const eval::SyntheticClip& blob, int dx, double global_strength) {
    const field::Point c = blob.centers[0][0];
    const int cx = static_cast<int>(std::lround(c.x)), cy = static_cast<int>(std::lround(c.y));
    sparse::ArrowDocument doc;
    doc.width = doc.height = 16;
    doc.global_strength = global_strength;
    doc.arrows.push_back({{cx, cy}, {cx + dx, cy}, 0.8});
    return app::make_conditioning(doc, blob.video.frame(0), app::default_train_config().densify, {});
}

// --- 2: step counts and the gamma trend --------------------------------------------------

longgen::LongOptions seeded(std::uint64_t seed) {
    longgen::LongOptions o;
    o.seed = seed;
    return o;
}

Outcome criterion_steps(const Toy& toy) {
    const eval::SyntheticClip blob = static_blob(0);
    const diff::Conditioning cond = arrow_condition(blob, 1, eval::quantile(toy.strengths, 0.5));
    bool counts_ok = true, replication = false;
    std::vector<double> medians;
    std::ostringstream detail;
    detail << "evals";
    for (double g : {0.0, 0.25, 0.5, 0.8, 1.0}) {
        const longgen::SamplerPlan plan = longgen::plan_phases(50, g, 5, 8, 0.2, 0);
        const std::uint64_t expected = 50 + 4 * static_cast<std::uint64_t>(50 - plan.M);
        diff::CountingPredictor counter(*toy.predictor);
        std::vector<double> times;
        longgen::LongResult r;
        for (int rep = 0; rep < 3; ++rep) {
            counter.reset();
            const auto t0 = Clock::now();
            r = longgen::sample_long(counter, cond, plan, toy.schedule, seeded(7));
            times.push_back(seconds_since(t0) * 1000.0);
            counts_ok = counts_ok && r.report.eval_count == expected && r.report.eval_count == longgen::denoiser_eval_count(plan) &&
                        counter.calls() == r.report.eval_count + r.report.prior_evals;
        }
        medians.push_back(eval::quantile(times, 0.5));
        detail << " " << r.report.eval_count;
        if (g == 1.0) {
            replication = true;
            for (int k = 1; k < 5; ++k) replication = replication && r.video.slice(k * 8, 8) == r.video.slice(0, 8);
        }
    }
    bool decreasing = true;
    detail << "; median ms";
    for (std::size_t i = 0; i < medians.size(); ++i) {
        detail << " " << fmt("%.0f", medians[i]);
        if (i > 0) decreasing = decreasing && medians[i] < medians[i - 1];
    }
    detail << "; gamma=1 replication " << (replication ? "bitwise" : "broken");
    return {counts_ok && decreasing && replication, detail.str()};
}

// --- 3: direction control ------------------------------------------------------------------

Outcome criterion_direction(const Toy& toy) {
    const double strength = eval::quantile(toy.strengths, 0.5);
    int right = 0, left = 0;
    for (int seed = 0; seed < 20; ++seed) {
        const auto vr = eval::mean_centroid_velocity(diff::sample_clip(
            *toy.predictor, arrow_condition(moving_start(seed, 1), 1, strength), 8, seed, toy.schedule));
        const auto vl = eval::mean_centroid_velocity(diff::sample_clip(
            *toy.predictor, arrow_condition(moving_start(seed, -1), -1, strength), 8, seed, toy.schedule));
        right += vr.x > 0;
        left += vl.x < 0;
    }
    const bool time_ok = !toy.trained_here || toy.train_seconds <= 900.0;
    std::string detail = "rightward positive on " + std::to_string(right) + "/20, leftward negative on " +
                         std::to_string(left) + "/20";
    if (toy.trained_here) {
        detail += "; trained in " + fmt("%.0f", toy.train_seconds) + " s, loss ratio " + fmt("%.3f", toy.loss_ratio);
    } else {
        detail += "; supplied checkpoint";
    }
    return {right >= 18 && left >= 18 && time_ok, detail};
}

// --- 4: strength monotonicity --------------------------------------------------------------

Outcome criterion_strength(const Toy& toy) {
    const double levels[3] = {eval::quantile(toy.strengths, 0.1), eval::quantile(toy.strengths, 0.5),
                              eval::quantile(toy.strengths, 0.9)};
    int increasing = 0;
    double mean_energy[3] = {0, 0, 0};
    for (int seed = 0; seed < 20; ++seed) {
        const eval::SyntheticClip blob = static_blob(seed);
        double e[3];
        for (int k = 0; k < 3; ++k) {
            diff::Conditioning cond;
            cond.motion_field = field::FlowField(16, 16);
            cond.global_strength = levels[k];
            cond.reference_frame = blob.video.frame(0);
            e[k] = eval::frame_difference_energy(diff::sample_clip(*toy.predictor, cond, 8, seed, toy.schedule));
            mean_energy[k] += e[k] / 20;
        }
        increasing += e[0] < e[1] && e[1] < e[2];
    }
    return {increasing >= 16, "strictly increasing on " + std::to_string(increasing) + "/20 (levels " +
                                  fmt("%.3f", levels[0]) + "/" + fmt("%.3f", levels[1]) + "/" + fmt("%.3f", levels[2]) +
                                  ", mean energy " + fmt("%.5f", mean_energy[0]) + "/" + fmt("%.5f", mean_energy[1]) +
                                  "/" + fmt("%.5f", mean_energy[2]) + ")"};
}

// --- 5: long-video consistency against the naive chain ------------------------------------

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

Outcome criterion_long(const Toy& toy) {
    const double strength = eval::quantile(toy.strengths, 0.5);
    const longgen::SamplerPlan plan = longgen::plan_phases(50, 0.8, 5, 8, 0.2, 0);
    int both = 0, psnr_wins = 0, temcons_wins = 0;
    for (int seed = 0; seed < 20; ++seed) {
        const diff::Conditioning cond = arrow_condition(static_blob(seed), 1, strength);
        const auto ours = longgen::sample_long(*toy.predictor, cond, plan, toy.schedule, seeded(seed));
        const auto naive = longgen::sample_long_naive(*toy.predictor, cond, 5, 8, seed, toy.schedule);
        const bool p = mean_of(ours.report.boundary_psnr) > mean_of(naive.report.boundary_psnr);
        const bool t = ours.report.temporal_consistency > naive.report.temporal_consistency;
        psnr_wins += p;
        temcons_wins += t;
        both += p && t;
    }
    return {both >= 16, "both metrics better on " + std::to_string(both) + "/20 (boundary PSNR " +
                            std::to_string(psnr_wins) + "/20, temcons " + std::to_string(temcons_wins) + "/20)"};
}

// --- 6: forward-process moments ------------------------------------------------------------

Outcome criterion_forward() {
    // The linear schedule with the standard endpoints; see the README for why the toy schedule
    // is not used here.
    const diff::NoiseSchedule s = diff::make_schedule(50, 1e-4, 0.02);
    eval::SyntheticSpec spec;
    spec.seed = 61;
    const VideoTensor z0 = diff::to_model_space(eval::gen_synthetic(spec).video);
    const int draws = 10000;
    bool ok = true;
    std::ostringstream detail;
    for (int t : {10, 25, 49}) {
        const double a = std::sqrt(s.alpha_bar(t)), var_expected = 1.0 - s.alpha_bar(t);
        std::vector<double> sum(z0.size(), 0.0);
        double sq = 0;
        CounterRng rng(1000 + static_cast<std::uint64_t>(t));
        for (int d = 0; d < draws; ++d) {
            const VideoTensor eps = diff::normal_video(z0.frames(), 1, z0.height(), z0.width(), rng);
            const VideoTensor zt = diff::forward_noise(z0, t, eps, s);
            for (std::size_t i = 0; i < zt.size(); ++i) {
                sum[i] += zt.data()[i];
                const double r = zt.data()[i] - a * z0.data()[i];
                sq += r * r;
            }
        }
        // Mean: fitted slope of the per-element sample means on z0.
        double num = 0, den = 0;
        for (std::size_t i = 0; i < z0.size(); ++i) {
            num += (sum[i] / draws) * z0.data()[i];
            den += z0.data()[i] * z0.data()[i];
        }
        const double mean_err = std::abs(num / den / a - 1.0);
        const double var = sq / (static_cast<double>(draws) * static_cast<double>(z0.size()));
        const double var_err = std::abs(var / var_expected - 1.0);
        ok = ok && mean_err <= 0.01 && var_err <= 0.02;
        detail << "t=" << t << " mean err " << fmt("%.2e", mean_err) << " var err " << fmt("%.2e", var_err) << "; ";
    }
    return {ok, detail.str() + std::to_string(draws) + " draws of " + std::to_string(z0.size()) + " values each"};
}

// --- 7: shared-noise moments ---------------------------------------------------------------

Outcome criterion_shared_noise() {
    const double omega = 0.2;
    const int draws = 10000;
    CounterRng rng(77);
    double sq = 0;
    std::size_t count = 0;
    bool zero_exact = true;
    for (int d = 0; d < draws; ++d) {
        const VideoTensor n = diff::normal_video(1, 1, 16, 16, rng);
        const VideoTensor p = longgen::perturb_noise(n, omega, 5000000 + static_cast<std::uint64_t>(d));
        for (std::size_t i = 0; i < n.size(); ++i) {
            const double r = p.data()[i] - n.data()[i];
            sq += r * r;
            ++count;
        }
        if (d < 100) zero_exact = zero_exact && longgen::perturb_noise(n, 0.0, d) == n;
    }
    const double var = sq / static_cast<double>(count);
    const double err = std::abs(var / (omega * omega) - 1.0);
    return {err <= 0.02 && zero_exact, "Var(n~ - n) = " + fmt("%.6f", var) + " vs " + fmt("%.4f", omega * omega) +
                                           " (rel err " + fmt("%.2e", err) + "); omega=0 " +
                                           (zero_exact ? "exact" : "differs")};
}

// --- 8: inversion and gradient -------------------------------------------------------------

class OracleEps final : public diff::NoisePredictor {
public:
    OracleEps(VideoTensor z0, diff::NoiseSchedule s) : z0_(std::move(z0)), s_(std::move(s)) {}
    VideoTensor predict(const VideoTensor& z_t, int t, const diff::Conditioning&) const override {
        VideoTensor eps = z_t;
        const double a = std::sqrt(s_.alpha_bar(t)), b = std::sqrt(1.0 - s_.alpha_bar(t));
        for (std::size_t i = 0; i < eps.size(); ++i) eps.data()[i] = (z_t.data()[i] - a * z0_.data()[i]) / b;
        return eps;
    }

private:
    VideoTensor z0_;
    diff::NoiseSchedule s_;
};

diff::Conditioning random_condition(int w, int h, std::uint64_t seed) {
    CounterRng r(seed);
    diff::Conditioning c;
    c.motion_field = field::FlowField(w, h);
    for (auto& d : c.motion_field.data()) d = {float(0.5 * r.normal()), float(0.5 * r.normal())};
    c.reference_frame = field::Frame(1, w, h);
    for (float& v : c.reference_frame.values()) v = static_cast<float>(r.uniform());
    c.global_strength = 0.3;
    return c;
}

Outcome criterion_inversion_gradient() {
    const diff::NoiseSchedule s = app::toy_schedule(50);
    CounterRng r(31);
    const VideoTensor z0 = diff::normal_video(3, 1, 8, 8, r);
    const VideoTensor eps = diff::normal_video(3, 1, 8, 8, r);
    const diff::Conditioning cond = random_condition(8, 8, 1);
    const VideoTensor out =
        diff::run_chain(OracleEps(z0, s), cond, diff::forward_noise(z0, 50, eps, s), 50, 1, s, {});
    double inv = 0;
    for (std::size_t i = 0; i < z0.size(); ++i) inv = std::max(inv, std::abs(out.data()[i] - z0.data()[i]));

    // Micro-model gradient against central differences of the training loss. Parameters on a
    // 2^-10 grid and steps of 2^-13 keep the float32 weights exact.
    const diff::MicroDenoiser model;
    const diff::NoiseSchedule ms = diff::make_schedule(20, 0.01, 0.3);
    diff::DenoiserWeights w = diff::initial_weights(model, 1);
    for (float& p : w.params) p = static_cast<float>(std::round(r.normal() * 256.0) / 1024.0);
    std::vector<diff::TrainingSample> batch;
    std::vector<diff::PreparedCondition> prepared;
    for (int i = 0; i < 3; ++i) {
        diff::TrainingSample x;
        x.cond = random_condition(6, 5, 10 + i);
        x.z0 = diff::normal_video(3, 1, 5, 6, r);
        x.eps = diff::normal_video(3, 1, 5, 6, r);
        x.t = 3 + 5 * i;
        batch.push_back(x);
        prepared.push_back(diff::prepare_condition(x.cond, 3));
    }
    std::vector<diff::LossSample> lb;
    for (int i = 0; i < 3; ++i) lb.push_back({batch[i].z0, batch[i].t, batch[i].eps, &prepared[i]});
    const std::vector<double> params(w.params.begin(), w.params.end());
    const diff::LossGradient lg = diff::loss_and_gradient(model, params, lb, ms);
    const double h = std::ldexp(1.0, -13);
    double worst = 0;
    for (std::size_t i = 0; i < w.params.size(); ++i) {
        diff::DenoiserWeights plus = w, minus = w;
        plus.params[i] += static_cast<float>(h);
        minus.params[i] -= static_cast<float>(h);
        const double numeric = (diff::training_loss(diff::ModelPredictor(model, plus, ms), batch, ms) -
                                diff::training_loss(diff::ModelPredictor(model, minus, ms), batch, ms)) /
                               (2 * h);
        worst = std::max(worst, std::abs(numeric - lg.gradient[i]) / std::max(1e-8, std::abs(numeric)));
    }
    return {inv <= 1e-4 && worst <= 1e-3,
            "chain max abs error " + fmt("%.2e", inv) + ", gradient worst relative error " + fmt("%.2e", worst)};
}

// --- 9: format round trips -----------------------------------------------------------------

Outcome criterion_formats() {
    CounterRng r(99);
    int flo_ok = 0;
    for (int i = 0; i < 100; ++i) {
        field::FlowField f(1 + static_cast<int>(r.below(40)), 1 + static_cast<int>(r.below(40)));
        for (auto& d : f.data()) d = {static_cast<float>(r.normal() * 10), static_cast<float>(r.normal() * 10)};
        const auto bytes = field::encode_flo(f);
        const field::FlowField back = field::decode_flo(bytes);
        flo_ok += back == f && field::encode_flo(back) == bytes;
    }
    int json_ok = 0;
    for (int i = 0; i < 100; ++i) {
        sparse::ArrowDocument doc;
        doc.width = 8 + static_cast<int>(r.below(60));
        doc.height = 8 + static_cast<int>(r.below(60));
        doc.global_strength = r.uniform() * 3;
        const int n = static_cast<int>(r.below(5));
        for (int k = 0; k < n; ++k) {
            const int x = k, y = static_cast<int>(r.below(doc.height));
            doc.arrows.push_back({{x, y}, {x + 1 + static_cast<int>(r.below(5)), y}, r.uniform() * 2});
        }
        const std::string text = sparse::serialize_arrow_document(doc);
        const sparse::ArrowDocument back = sparse::parse_arrow_document(text);
        bool same = back.width == doc.width && back.height == doc.height && back.global_strength == doc.global_strength &&
                    back.arrows.size() == doc.arrows.size();
        for (std::size_t k = 0; same && k < doc.arrows.size(); ++k) {
            same = back.arrows[k].start.x == doc.arrows[k].start.x && back.arrows[k].start.y == doc.arrows[k].start.y &&
                   back.arrows[k].end.x == doc.arrows[k].end.x && back.arrows[k].end.y == doc.arrows[k].end.y &&
                   back.arrows[k].strength == doc.arrows[k].strength;
        }
        json_ok += same && sparse::serialize_arrow_document(back) == text;
    }
    const fs::path path = fs::temp_directory_path() / "mf_acceptance_ckpt.bin";
    diff::DenoiserWeights w = diff::initial_weights(diff::ToyDenoiser(), 4);
    w.trained = true;
    diff::save_checkpoint(w, path.string());
    const diff::DenoiserWeights back = diff::load_checkpoint(path.string(), diff::ToyDenoiser().arch_hash());
    const bool ckpt_ok = back == w && diff::checkpoint_digest(back) == diff::checkpoint_digest(w);
    fs::remove(path);
    return {flo_ok == 100 && json_ok == 100 && ckpt_ok, ".flo " + std::to_string(flo_ok) + "/100 bit-exact, arrow JSON " +
                                                            std::to_string(json_ok) + "/100 lossless, checkpoint " +
                                                            (ckpt_ok ? "hash-stable" : "changed")};
}

template <typename Fn>
void run(int id, const std::string& name, Fn&& fn) {
    try {
        report(id, name, fn());
    } catch (const std::exception& e) {
        report(id, name, {false, std::string("threw: ") + e.what()});
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"acceptance checks"};
    bool strict = false;
    std::string weights, save;
    cli.add_flag("--strict", strict, "Exit nonzero when any criterion fails");
    cli.add_option("--weights", weights, "Use this toy checkpoint instead of training one");
    cli.add_option("--save-weights", save, "Write the checkpoint trained for this run");
    CLI11_PARSE(cli, argc, argv);

    run(1, "densify oracle equivalence", criterion_densify);
    run(6, "forward-process statistics", criterion_forward);
    run(7, "shared-noise statistics", criterion_shared_noise);
    run(8, "inversion and gradient checks", criterion_inversion_gradient);
    run(9, "format round trips", criterion_formats);

    Toy toy;
    try {
        std::cerr << (weights.empty() ? "training the toy denoiser\n" : "loading " + weights + "\n");
        prepare_toy(toy, weights, save);
    } catch (const std::exception& e) {
        for (int id : {2, 3, 4, 5}) report(id, "toy model", {false, std::string("setup failed: ") + e.what()});
    }
    if (!toy.predictor) return print_results() > 0 && strict ? 1 : 0;
    run(2, "step counts and gamma trend", [&] { return criterion_steps(toy); });
    run(3, "direction control", [&] { return criterion_direction(toy); });
    run(4, "strength monotonicity", [&] { return criterion_strength(toy); });
    run(5, "long-video consistency", [&] { return criterion_long(toy); });

    return print_results() > 0 && strict ? 1 : 0;
}
