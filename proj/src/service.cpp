#include "motionforge/service.hpp"

#include <filesystem>
#include <map>
#include <shared_mutex>

#include <httplib.h>
#include <json.hpp>

#include "motionforge/error.hpp"

namespace motionforge::app {

using nlohmann::json;

namespace {

HttpReply error_reply(int status, const std::string& message) { return {status, json{{"error", message}}.dump()}; }

int status_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::state:
            return 409;
        case ErrorKind::io:
            return 500;
        default:
            return 400;
    }
}

json parse_body(const std::string& body) {
    try {
        json j = json::parse(body);
        require(j.is_object(), ErrorKind::invalid_input, "request body must be a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        fail(ErrorKind::invalid_input, std::string("request body is not valid JSON: ") + e.what());
    }
}

template <typename Fn>
HttpReply guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        log(LogLevel::info, std::string("request failed: ") + e.what());
        return error_reply(status_for(e), e.what());
    } catch (const std::exception& e) {
        log(LogLevel::error, std::string("internal error: ") + e.what());
        return error_reply(500, e.what());
    }
}

}  // namespace

HttpReply handle_health() { return {200, json{{"status", "ok"}}.dump()}; }

HttpReply handle_flow(const std::string& body, bool refined, const RunConfig& defaults) {
    return guarded([&] {
        json j = parse_body(body);
        // Optional tuning rides alongside the arrow spec under "params".
        RunConfig cfg = defaults;
        if (j.contains("params")) {
            const json params = j["params"];
            j.erase("params");
            require(params.is_object(), ErrorKind::invalid_input, "params must be a JSON object");
            for (const auto& [key, value] : params.items()) {
                require(key == "densify" || key == "refine", ErrorKind::invalid_input,
                        "params: unknown key '" + key + "'");
            }
            cfg = merge_run_config(cfg, params.dump());
        }
        const sparse::ArrowDocument doc = sparse::parse_arrow_document(j.dump());
        const sparse::FlowStages stages = flow_stages(doc, flow_densify(cfg, doc.width, doc.height), cfg.refine);
        const FlowProduct p = encode_flow_product(refined ? stages.refined : stages.dense);
        json out{{"width", doc.width},
                 {"height", doc.height},
                 {"flow", base64_encode(p.flo)},
                 {"preview", base64_encode(p.preview)}};
        return HttpReply{200, out.dump()};
    });
}

struct WeightsCache::Impl {
    std::string path;
    diff::ToyDenoiser model;
    std::shared_mutex mu;
    std::filesystem::file_time_type stamp{};
    std::optional<diff::DenoiserWeights> weights;
    std::map<int, std::shared_ptr<const diff::NoisePredictor>> predictors;
};

WeightsCache::WeightsCache(std::string path) : impl_(std::make_unique<Impl>()) { impl_->path = std::move(path); }

WeightsCache::~WeightsCache() = default;

std::shared_ptr<const diff::NoisePredictor> WeightsCache::acquire(int T) {
    Impl& s = *impl_;
    require(!s.path.empty(), ErrorKind::state, "service has no checkpoint configured");
    std::error_code ec;
    const auto stamp = std::filesystem::last_write_time(s.path, ec);
    require(!ec, ErrorKind::state, "checkpoint not found: " + s.path);
    {
        std::shared_lock lock(s.mu);
        if (s.weights && s.stamp == stamp) {
            auto it = s.predictors.find(T);
            if (it != s.predictors.end()) return it->second;
        }
    }
    std::unique_lock lock(s.mu);
    if (!s.weights || s.stamp != stamp) {
        s.weights = load_toy_weights(s.path);
        s.stamp = stamp;
        s.predictors.clear();
        log(LogLevel::info, "loaded checkpoint " + s.path);
    }
    require(s.weights->trained, ErrorKind::state, "checkpoint holds untrained weights");
    auto& slot = s.predictors[T];
    if (!slot) slot = std::make_shared<diff::ModelPredictor>(s.model, *s.weights, toy_schedule(T));
    return slot;
}

HttpReply handle_sample(const std::string& body, const RunConfig& defaults, WeightsCache& cache) {
    return guarded([&] {
        json j = parse_body(body);
        for (const auto& [key, value] : j.items()) {
            const bool allowed = key == "arrows" || key == "image" || key == "seed" || key == "T" || key == "gamma" ||
                                 key == "K" || key == "L" || key == "omega" || key == "shuffle_seed" ||
                                 key == "densify" || key == "refine";
            require(allowed, ErrorKind::invalid_input, "sample request: unknown key '" + key + "'");
        }
        require(j.contains("arrows") && j["arrows"].is_object(), ErrorKind::invalid_input,
                "sample request: 'arrows' must be an arrow spec object");
        std::optional<field::Frame> image;
        if (j.contains("image")) {
            require(j["image"].is_string(), ErrorKind::invalid_input, "sample request: 'image' must be base64 PPM");
            image = field::decode_ppm(base64_decode(j["image"].get<std::string>()));
            j.erase("image");
        }
        const RunConfig cfg = merge_run_config(defaults, j.dump());
        const sparse::ArrowDocument& doc = *cfg.arrows;
        const diff::Conditioning cond =
            make_conditioning(doc, image ? *image : default_reference(doc), sample_densify(cfg), cfg.refine);
        const SampleOutput out = cache.with_predictor(cfg.T, [&](const diff::NoisePredictor& model) {
            return run_sample(model, cond, cfg, toy_schedule(cfg.T));
        });
        json frames = json::array();
        for (const auto& f : out.frames) frames.push_back(base64_encode(f));
        json reply{{"frames", std::move(frames)}, {"report", json::parse(out.report_json)}};
        return HttpReply{200, reply.dump()};
    });
}

struct Service::Impl {
    RunConfig defaults;
    WeightsCache cache;
    httplib::Server server;

    explicit Impl(RunConfig d) : defaults(std::move(d)), cache(defaults.weights) {}
};

Service::Service(RunConfig defaults) : impl_(std::make_unique<Impl>(std::move(defaults))) {
    Impl& s = *impl_;
    auto send = [](httplib::Response& res, const HttpReply& r) {
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    s.server.Get("/health", [send](const httplib::Request&, httplib::Response& res) { send(res, handle_health()); });
    s.server.Post("/flow/dense", [send, &s](const httplib::Request& req, httplib::Response& res) {
        send(res, handle_flow(req.body, false, s.defaults));
    });
    s.server.Post("/flow/refine", [send, &s](const httplib::Request& req, httplib::Response& res) {
        send(res, handle_flow(req.body, true, s.defaults));
    });
    s.server.Post("/sample", [send, &s](const httplib::Request& req, httplib::Response& res) {
        send(res, handle_sample(req.body, s.defaults, s.cache));
    });
    s.server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) res.set_content(json{{"error", "not found"}}.dump(), "application/json");
    });
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        require(bound > 0, ErrorKind::io, "cannot bind " + host);
        return bound;
    }
    require(impl_->server.bind_to_port(host, port), ErrorKind::io,
            "cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void Service::run() {
    log(LogLevel::info, "service listening");
    impl_->server.listen_after_bind();
}

void Service::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace motionforge::app
