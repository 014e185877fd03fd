#pragma once

#include <memory>
#include <string>

#include "motionforge/app.hpp"

namespace motionforge::app {

struct HttpReply {
    int status = 200;
    std::string body;  // JSON
};

// Request handlers, independent of the transport.
HttpReply handle_health();
HttpReply handle_flow(const std::string& body, bool refined, const RunConfig& defaults);

// Caches the toy weights in memory. Readers share the cache; a changed checkpoint file on
// disk is reloaded under an exclusive lock.
class WeightsCache {
public:
    explicit WeightsCache(std::string path);
    ~WeightsCache();

    // Runs fn with a predictor for the given schedule length. Throws a state error when the
    // checkpoint is missing or untrained.
    template <typename Fn>
    auto with_predictor(int T, Fn&& fn) {
        return fn(*acquire(T));
    }

private:
    struct Impl;
    std::shared_ptr<const diff::NoisePredictor> acquire(int T);
    std::unique_ptr<Impl> impl_;
};

HttpReply handle_sample(const std::string& body, const RunConfig& defaults, WeightsCache& cache);

// JSON-over-HTTP front end for the handlers above.
class Service {
public:
    explicit Service(RunConfig defaults);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds host:port (port 0 picks a free one) and returns the bound port.
    int bind(const std::string& host, int port);
    // Blocks until stop() is called.
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace motionforge::app
