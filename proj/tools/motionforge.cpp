#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "motionforge/app.hpp"
#include "motionforge/error.hpp"
#include "motionforge/service.hpp"

using namespace motionforge;
namespace fs = std::filesystem;

namespace {

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io:
            return 3;
        case ErrorKind::state:
            return 4;
        default:
            return 2;
    }
}

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> port;
    std::string weights;
};

app::RunConfig resolve_config(const GlobalFlags& g) {
    app::RunConfig cfg = g.config.empty() ? app::default_run_config() : app::load_run_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out = g.out;
    if (g.port) cfg.port = *g.port;
    if (!g.weights.empty()) cfg.weights = g.weights;
    return cfg;
}

std::string out_dir(const app::RunConfig& cfg) {
    require(!cfg.out.empty(), ErrorKind::invalid_input, "no output directory: pass --out or set 'out' in the config");
    return cfg.out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
    f << text;
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + path.string());
}

sparse::ArrowDocument arrows_for(const app::RunConfig& cfg, const std::string& spec_path) {
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        require(static_cast<bool>(in), ErrorKind::io, "cannot read " + spec_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return sparse::parse_arrow_document(ss.str());
    }
    require(cfg.arrows.has_value(), ErrorKind::invalid_input, "no arrow spec: pass --spec or set 'arrows' in the config");
    return *cfg.arrows;
}

diff::Conditioning conditioning_for(const app::RunConfig& cfg, const sparse::ArrowDocument& doc) {
    const field::Frame reference = cfg.image.empty() ? app::default_reference(doc) : field::load_ppm(cfg.image);
    return app::make_conditioning(doc, reference, app::sample_densify(cfg), cfg.refine);
}

int cmd_flow(const app::RunConfig& cfg, const std::string& spec_path) {
    const sparse::ArrowDocument doc = arrows_for(cfg, spec_path);
    const auto stages = app::flow_stages(doc, app::flow_densify(cfg, doc.width, doc.height), cfg.refine);
    const std::string dir = out_dir(cfg);
    app::write_flow_products(stages, dir);
    std::cout << "wrote sparse, dense and refined fields to " << dir << '\n';
    return 0;
}

int cmd_gen_data(const app::RunConfig& cfg) {
    const eval::SyntheticSpec spec = app::dataset_spec(cfg);
    const auto clips = eval::gen_dataset(spec, cfg.clips);
    const std::string dir = out_dir(cfg);
    eval::export_dataset(clips, spec, dir);
    std::cout << "wrote " << clips.size() << " clips to " << dir << '\n';
    return 0;
}

int cmd_train(const app::RunConfig& cfg) {
    const std::string dir = out_dir(cfg);
    std::vector<diff::TrainingClip> data;
    for (const auto& c : app::load_or_generate(cfg)) data.push_back(eval::to_training_clip(c));
    const diff::ToyDenoiser model;
    diff::TrainConfig tc = cfg.train;
    tc.progress = [&](int step, double loss) {
        if (step % 100 == 0) app::log(app::LogLevel::info, "step " + std::to_string(step) + " loss " + std::to_string(loss));
    };
    const diff::TrainResult r = diff::train(model, data, app::toy_schedule(cfg.T), tc);
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + dir);
    diff::save_checkpoint(r.weights, (fs::path(dir) / "checkpoint.bin").string());
    write_text(fs::path(dir) / "loss.csv", diff::loss_curve_csv(r.loss_curve));
    const double ratio = r.initial_eval_loss > 0 ? r.final_eval_loss / r.initial_eval_loss : 0.0;
    std::cout << "final loss " << r.final_eval_loss << " (initial " << r.initial_eval_loss << ", ratio " << ratio
              << ")\n";
    std::cout << "checkpoint digest " << std::hex << diff::checkpoint_digest(r.weights) << std::dec << '\n';
    return 0;
}

int cmd_sample(app::RunConfig cfg, bool long_video) {
    if (!long_video) cfg.K = 1;
    const sparse::ArrowDocument doc = arrows_for(cfg, "");
    const diff::Conditioning cond = conditioning_for(cfg, doc);
    const diff::ToyDenoiser model;
    const diff::ModelPredictor pred(model, app::load_toy_weights(cfg.weights), app::toy_schedule(cfg.T));
    const app::SampleOutput out = app::run_sample(pred, cond, cfg, pred.schedule());
    const std::string dir = out_dir(cfg);
    app::write_sample(out, dir);
    std::cout << out.report_json << '\n';
    return 0;
}

int cmd_ablate(app::RunConfig cfg) {
    const sparse::ArrowDocument doc = arrows_for(cfg, "");
    const diff::Conditioning cond = conditioning_for(cfg, doc);
    const diff::ToyDenoiser model;
    const diff::ModelPredictor pred(model, app::load_toy_weights(cfg.weights), app::toy_schedule(cfg.T));
    const auto rows = app::ablate_gamma(pred, cond, cfg, pred.schedule());
    const std::string csv = app::ablation_csv(rows);
    write_text(fs::path(out_dir(cfg)) / "ablation.csv", csv);
    std::cout << csv;
    return 0;
}

app::Service* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

int cmd_serve(const app::RunConfig& cfg) {
    app::Service service(cfg);
    const int port = service.bind(cfg.host, cfg.port);
    std::cout << "listening on " << cfg.host << ":" << port << std::endl;
    g_service = &service;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    service.run();
    g_service = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"motionforge: arrow-driven motion fields and long-clip sampling on a toy denoiser"};
    cli.require_subcommand(1);
    GlobalFlags g;
    cli.add_option("--config", g.config, "JSON run configuration");
    cli.add_option("--seed", g.seed, "Seed for every random draw");
    cli.add_option("--out", g.out, "Output directory");
    cli.add_option("--port", g.port, "Service port");
    cli.add_option("--weights", g.weights, "Checkpoint path");

    std::string spec_path;
    auto* flow = cli.add_subcommand("flow", "Turn an arrow spec into sparse, dense and refined motion fields");
    flow->add_option("--spec", spec_path, "Arrow spec JSON (defaults to the config's arrows)");
    auto* gen = cli.add_subcommand("gen-data", "Write a synthetic blob dataset");
    auto* train = cli.add_subcommand("train", "Train the toy denoiser");
    auto* sample = cli.add_subcommand("sample", "Sample one clip");
    auto* sample_long = cli.add_subcommand("sample-long", "Sample a long video with the phased sampler");
    std::vector<double> gammas;
    auto* ablate = cli.add_subcommand("ablate-gamma", "Sweep gamma and report cost and consistency");
    ablate->add_option("--gammas", gammas, "Gamma values")->delimiter(',');
    auto* serve = cli.add_subcommand("serve", "Run the HTTP service");
    for (auto* sub : {flow, gen, train, sample, sample_long, ablate, serve}) sub->fallthrough();

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = cli.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        app::RunConfig cfg = resolve_config(g);
        if (*flow) return cmd_flow(cfg, spec_path);
        if (*gen) return cmd_gen_data(cfg);
        if (*train) return cmd_train(cfg);
        if (*sample) return cmd_sample(cfg, false);
        if (*sample_long) return cmd_sample(cfg, true);
        if (*ablate) {
            if (!gammas.empty()) cfg.gammas = gammas;
            return cmd_ablate(cfg);
        }
        if (*serve) return cmd_serve(cfg);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
