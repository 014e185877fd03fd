#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "motionforge/error.hpp"
#include "motionforge/longgen.hpp"
#include "motionforge/rng.hpp"

using namespace motionforge;
using namespace motionforge::longgen;
using diff::Conditioning;

namespace {

// Cheap deterministic predictor that still depends on z_t and the reference frame.
class LinearStub final : public diff::NoisePredictor {
public:
    VideoTensor predict(const VideoTensor& z_t, int t, const Conditioning& cond) const override {
        VideoTensor out = z_t;
        for (int l = 0; l < z_t.frames(); ++l)
            for (int y = 0; y < z_t.height(); ++y)
                for (int x = 0; x < z_t.width(); ++x) {
                    const double ref = 2.0 * cond.reference_frame.at(0, x, y) - 1.0;
                    out.at(l, 0, y, x) = 0.3 * z_t.at(l, 0, y, x) + 0.1 * ref + 0.001 * t;
                }
        return out;
    }
};

Conditioning make_condition() {
    Conditioning c;
    c.motion_field = field::FlowField(8, 8);
    c.reference_frame = field::Frame(1, 8, 8);
    CounterRng r(2);
    for (float& v : c.reference_frame.values()) v = static_cast<float>(r.uniform());
    return c;
}

std::uint64_t tensor_checksum(const VideoTensor& v) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double d : v.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        h = splitmix64(h ^ bits);
    }
    return h;
}

}  // namespace

TEST_CASE("plan_phases examples") {
    const SamplerPlan p = plan_phases(50, 0.8, 5, 8, 0.2, 0);
    CHECK(p.M == 40);
    CHECK(p.detail_steps() == 10);
    CHECK(plan_phases(50, 1.0, 5, 8, 0.2, 0).M == 50);
    CHECK(plan_phases(50, 1.0, 5, 8, 0.2, 0).detail_steps() == 0);
    CHECK(plan_phases(50, 0.0, 5, 8, 0.2, 0).M == 0);
    CHECK(plan_phases(10, 0.25, 2, 4, 0.2, 0).M == 2);
    CHECK(plan_phases(10, 0.25, 2, 4, 0.2, 0, BoundaryRounding::ceil).M == 3);
    // 0.7 * 10 is 6.999... in binary floating point; the boundary must still be 7.
    CHECK(plan_phases(10, 0.7, 2, 4, 0.2, 0).M == 7);
    CHECK_THROWS_AS(plan_phases(50, 1.5, 5, 8, 0.2, 0), Error);
    CHECK_THROWS_AS(plan_phases(0, 0.5, 5, 8, 0.2, 0), Error);
    CHECK_THROWS_AS(plan_phases(50, 0.5, 0, 8, 0.2, 0), Error);
}

TEST_CASE("denoiser_eval_count") {
    CHECK(denoiser_eval_count(plan_phases(50, 0.8, 5, 8, 0.2, 0)) == 90);
    CHECK(denoiser_eval_count(plan_phases(50, 1.0, 7, 8, 0.2, 0)) == 50);
    CHECK(denoiser_eval_count(plan_phases(50, 0.0, 5, 8, 0.2, 0)) == 250);
    std::uint64_t prev = ~0ULL;
    for (int i = 0; i <= 10; ++i) {
        const auto n = denoiser_eval_count(plan_phases(50, i / 10.0, 4, 8, 0.2, 0));
        CHECK(n < prev);
        prev = n;
    }
}

TEST_CASE("plan JSON") {
    const SamplerPlan p = plan_phases(30, 0.6, 3, 4, 0.1, 99);
    const SamplerPlan q = plan_from_json(plan_to_json(p));
    CHECK(q.T == 30);
    CHECK(q.M == 18);
    CHECK(q.K == 3);
    CHECK(q.L == 4);
    CHECK(q.omega == 0.1);
    CHECK(q.shuffle_seed == 99);
    CHECK_THROWS_WITH_AS(plan_from_json(R"({"T":30,"gamma":0.6,"K":3,"L":4,"omega":0.1,"shuffle_seed":1,"M":2})"),
                         doctest::Contains("unknown"), Error);
    CHECK_THROWS_AS(plan_from_json("[1,2"), Error);
}

TEST_CASE("shared noise") {
    const LinearStub model;
    const auto s = diff::make_schedule(20, 0.01, 0.3);
    const Conditioning cond = make_condition();
    const SamplerPlan plan = plan_phases(20, 0.5, 3, 4, 0.0, 0);
    const VideoTensor n = predicted_noise(model, cond, 10, 4, 5, s);
    CHECK(shared_noise(model, cond, 10, plan, 5, 77, s) == n);
    CHECK(shared_noise(model, cond, 3, plan, 5, 77, s) == predicted_noise(model, cond, 3, 4, 5, s));
    CHECK_THROWS_AS(shared_noise(model, cond, 11, plan, 5, 77, s), Error);

    SUBCASE("perturbation variance matches omega squared") {
        const VideoTensor base(1, 1, 1, 1, 0.7);
        const double omega = 0.2;
        double m = 0, m2 = 0;
        const int trials = 10000;
        for (int i = 0; i < trials; ++i) {
            const double d = perturb_noise(base, omega, 1000 + i).data()[0] - 0.7;
            m += d;
            m2 += d * d;
        }
        m /= trials;
        const double var = m2 / trials - m * m;
        CHECK(std::abs(var - omega * omega) < 0.02 * omega * omega);
    }
}

TEST_CASE("noise bank") {
    const SamplerPlan plan = plan_phases(20, 0.5, 4, 3, 0.2, 42);
    auto factory = [](int k, int j) { return VideoTensor(1, 1, 2, 2, 10.0 * k + j); };
    const NoiseBank a = build_noise_bank(plan, factory);
    const NoiseBank b = build_noise_bank(plan, factory);
    REQUIRE(a.entries.size() == 9);
    CHECK(a.provenance == b.provenance);

    std::multiset<std::uint64_t> before, after;
    for (int k = 2; k <= 4; ++k)
        for (int j = 0; j < 3; ++j) before.insert(tensor_checksum(factory(k, j)));
    for (const auto& e : a.entries) after.insert(tensor_checksum(e));
    CHECK(before == after);

    std::vector<std::size_t> sorted = a.provenance;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);

    CHECK(a.segment_noise(3).frames() == 3);
    CHECK_THROWS_WITH_AS(a.segment_noise(5), doctest::Contains("exhausted"), Error);
    CHECK_THROWS_AS(a.segment_noise(1), Error);
    CHECK_THROWS_AS(build_noise_bank(plan_phases(20, 0.5, 1, 3, 0.2, 0), factory), Error);
}

TEST_CASE("shuffle uniformity over three items") {
    std::map<std::vector<std::size_t>, int> counts;
    for (std::uint64_t seed = 0; seed < 6000; ++seed) ++counts[shuffle_indices(3, splitmix64(seed))];
    REQUIRE(counts.size() == 6);
    // Binomial(6000, 1/6): sigma = sqrt(6000 * 1/6 * 5/6).
    const double sigma = std::sqrt(6000.0 / 6.0 * 5.0 / 6.0);
    for (const auto& [order, n] : counts) CHECK(std::abs(n - 1000) <= 3 * sigma);
}

TEST_CASE("sample_long structure") {
    const LinearStub model;
    const auto s = diff::make_schedule(20, 0.01, 0.3);
    const Conditioning cond = make_condition();

    SUBCASE("segment one equals sample_clip") {
        const SamplerPlan plan = plan_phases(20, 0.8, 3, 4, 0.2, 1);
        const LongResult r = sample_long(model, cond, plan, s, {.seed = 9});
        CHECK(r.video.frames() == 12);
        CHECK(r.video.slice(0, 4) == diff::sample_clip(model, cond, 4, 9, s));
        CHECK(r.report.eval_count == denoiser_eval_count(plan));
        CHECK(r.report.prior_evals == 1);
        CHECK(r.report.boundary_psnr.size() == 2);
        CHECK_FALSE(r.video.slice(4, 4) == r.video.slice(8, 4));
    }
    SUBCASE("eval count is exact across plans") {
        for (int T : {5, 12}) {
            const auto sched = diff::make_schedule(T, 0.01, 0.3);
            for (double g : {0.0, 0.3, 0.5, 0.8, 1.0})
                for (int K : {1, 2, 4}) {
                    const SamplerPlan plan = plan_phases(T, g, K, 2, 0.2, 3);
                    CHECK(sample_long(model, cond, plan, sched, {.seed = 1}).report.eval_count ==
                          denoiser_eval_count(plan));
                }
        }
    }
    SUBCASE("gamma one replicates segment one") {
        const SamplerPlan plan = plan_phases(20, 1.0, 4, 3, 0.2, 1);
        const LongResult r = sample_long(model, cond, plan, s, {.seed = 2});
        for (int k = 1; k < 4; ++k) CHECK(r.video.slice(3 * k, 3) == r.video.slice(0, 3));
        CHECK(r.report.eval_count == 20);
        CHECK(r.report.prior_evals == 0);
    }
    SUBCASE("zero omega with identical per-segment draws gives identical segments") {
        const SamplerPlan plan = plan_phases(20, 0.6, 4, 3, 0.0, 5);
        LongOptions opts{.seed = 3};
        const VideoTensor n = predicted_noise(model, cond, plan.boundary_level(), 3, 11, s);
        opts.noise_factory = [&](int, int) { return n.slice(0, 1); };
        const LongResult r = sample_long(model, cond, plan, s, opts);
        CHECK(r.video.slice(3, 3) == r.video.slice(6, 3));
        CHECK(r.video.slice(6, 3) == r.video.slice(9, 3));
        CHECK(r.report.prior_evals == 0);
    }
    SUBCASE("concurrent segments match the sequential run") {
        const SamplerPlan plan = plan_phases(20, 0.5, 5, 3, 0.2, 8);
        const LongResult a = sample_long(model, cond, plan, s, {.seed = 4});
        const LongResult b = sample_long(model, cond, plan, s, {.seed = 4, .concurrent_segments = true});
        CHECK(a.video == b.video);
        CHECK(a.report.eval_count == b.report.eval_count);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(sample_long(model, cond, plan_phases(10, 0.5, 2, 2, 0.2, 0), s), Error);
        class Untrained final : public diff::NoisePredictor {
        public:
            VideoTensor predict(const VideoTensor& z, int, const Conditioning&) const override { return z; }
            bool ready() const override { return false; }
        };
        try {
            sample_long(Untrained{}, cond, plan_phases(20, 0.5, 2, 2, 0.2, 0), s);
            FAIL("expected a state error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::state);
        }
    }
}

TEST_CASE("naive baseline") {
    const LinearStub model;
    const auto s = diff::make_schedule(15, 0.01, 0.3);
    const Conditioning cond = make_condition();
    const LongResult one = sample_long_naive(model, cond, 1, 4, 6, s);
    CHECK(one.video == diff::sample_clip(model, cond, 4, 6, s));
    const LongResult r = sample_long_naive(model, cond, 3, 4, 6, s);
    CHECK(r.video == sample_long_naive(model, cond, 3, 4, 6, s).video);
    CHECK(r.report.eval_count == 3 * 15);
    CHECK(r.video.frames() == 12);
}

TEST_CASE("report and export") {
    const LinearStub model;
    const auto s = diff::make_schedule(10, 0.01, 0.3);
    const LongResult r = sample_long(model, make_condition(), plan_phases(10, 0.5, 2, 2, 0.2, 0), s, {.seed = 1});
    const std::string json = r.report.to_json();
    CHECK(json.find("\"eval_count\"") != std::string::npos);
    CHECK(json.find("\"boundary_psnr\"") != std::string::npos);
    CHECK(json.find("\"wall_ms_per_segment\"") != std::string::npos);

    const auto dir = std::filesystem::temp_directory_path() / "mf_test_long_export";
    std::filesystem::remove_all(dir);
    export_video(r.video, dir.string(), 2);
    CHECK(std::filesystem::exists(dir / "frame_0003.ppm"));
    CHECK(std::filesystem::exists(dir / "index.json"));
    std::filesystem::remove_all(dir);
}
