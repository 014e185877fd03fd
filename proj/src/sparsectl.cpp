#include "motionforge/sparsectl.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <thread>
#include <utility>

#include <json.hpp>

#include "motionforge/error.hpp"

namespace motionforge::sparse {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
        require(known, ErrorKind::invalid_input, "unknown key '" + key + "' in " + where);
    }
}

int integral_coordinate(const json& v, const std::string& where) {
    require(v.is_number(), ErrorKind::invalid_input, where + ": coordinate must be a number");
    if (v.is_number_integer()) {
        return v.get<int>();
    }
    const double d = v.get<double>();
    require(std::isfinite(d) && d == std::floor(d), ErrorKind::invalid_input,
            where + ": coordinates must be integral pixels");
    return static_cast<int>(d);
}

Pixel parse_point(const json& v, const std::string& where) {
    require(v.is_array() && v.size() == 2, ErrorKind::invalid_input, where + " must be [x, y]");
    return {integral_coordinate(v[0], where), integral_coordinate(v[1], where)};
}

double parse_number(const json& obj, const char* key, const std::string& where) {
    require(obj.contains(key), ErrorKind::invalid_input, where + ": missing '" + key + "'");
    require(obj[key].is_number(), ErrorKind::invalid_input, where + ": '" + key + "' must be a number");
    return obj[key].get<double>();
}

}  // namespace

void validate_arrows(std::span<const ArrowSpec> arrows, int width, int height) {
    require(width > 0 && height > 0, ErrorKind::invalid_input, "arrow frame dimensions must be positive");
    std::set<std::pair<int, int>> starts;
    for (std::size_t i = 0; i < arrows.size(); ++i) {
        const ArrowSpec& a = arrows[i];
        const std::string tag = "arrow " + std::to_string(i);
        auto inside = [&](Pixel p) { return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height; };
        require(inside(a.start) && inside(a.end), ErrorKind::invalid_input, tag + ": endpoint outside the frame");
        require(a.start.x != a.end.x || a.start.y != a.end.y, ErrorKind::invalid_input,
                tag + ": start and end coincide");
        require(std::isfinite(a.strength) && a.strength >= 0.0, ErrorKind::invalid_input,
                tag + ": strength must be finite and nonnegative");
        require(starts.emplace(a.start.x, a.start.y).second, ErrorKind::invalid_input,
                tag + ": duplicate start pixel");
    }
}

ArrowDocument parse_arrow_document(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::invalid_input, std::string("arrow spec is not valid JSON: ") + e.what());
    }
    require(root.is_object(), ErrorKind::invalid_input, "arrow spec must be a JSON object");
    reject_unknown_keys(root, {"width", "height", "global_strength", "arrows"}, "arrow spec");

    ArrowDocument doc;
    require(root.contains("width") && root["width"].is_number_integer(), ErrorKind::invalid_input,
            "arrow spec: 'width' must be an integer");
    require(root.contains("height") && root["height"].is_number_integer(), ErrorKind::invalid_input,
            "arrow spec: 'height' must be an integer");
    doc.width = root["width"].get<int>();
    doc.height = root["height"].get<int>();
    doc.global_strength = parse_number(root, "global_strength", "arrow spec");
    require(std::isfinite(doc.global_strength) && doc.global_strength >= 0.0, ErrorKind::invalid_input,
            "arrow spec: global_strength must be nonnegative");
    require(root.contains("arrows") && root["arrows"].is_array(), ErrorKind::invalid_input,
            "arrow spec: 'arrows' must be an array");

    for (std::size_t i = 0; i < root["arrows"].size(); ++i) {
        const json& a = root["arrows"][i];
        const std::string where = "arrows[" + std::to_string(i) + "]";
        require(a.is_object(), ErrorKind::invalid_input, where + " must be an object");
        reject_unknown_keys(a, {"start", "end", "strength"}, where);
        require(a.contains("start") && a.contains("end"), ErrorKind::invalid_input, where + ": missing start/end");
        doc.arrows.push_back({parse_point(a["start"], where + ".start"), parse_point(a["end"], where + ".end"),
                              parse_number(a, "strength", where)});
    }
    validate_arrows(doc.arrows, doc.width, doc.height);
    return doc;
}

std::string serialize_arrow_document(const ArrowDocument& doc) {
    json arrows = json::array();
    for (const ArrowSpec& a : doc.arrows) {
        arrows.push_back({{"start", {a.start.x, a.start.y}}, {"end", {a.end.x, a.end.y}}, {"strength", a.strength}});
    }
    json root = {{"width", doc.width}, {"height", doc.height}, {"global_strength", doc.global_strength},
                 {"arrows", std::move(arrows)}};
    return root.dump();
}

DensifyParams DensifyParams::for_frame(int width, int height) {
    require(width > 0 && height > 0, ErrorKind::invalid_input, "frame dimensions must be positive");
    DensifyParams p;
    p.sigma = 170.0 * std::hypot(width, height) / std::hypot(512.0, 512.0);
    return p;
}

FlowField sparse_field_from_arrows(std::span<const ArrowSpec> arrows, int width, int height) {
    validate_arrows(arrows, width, height);
    FlowField f(width, height);
    for (const ArrowSpec& a : arrows) {
        f.at(a.start.x, a.start.y) = {static_cast<float>((a.end.x - a.start.x) * a.strength),
                                      static_cast<float>((a.end.y - a.start.y) * a.strength)};
    }
    f.validate();
    return f;
}

FlowField densify(const FlowField& sparse, const DensifyParams& params, int threads) {
    sparse.validate();
    require(std::isfinite(params.sigma) && params.sigma > 0.0, ErrorKind::invalid_input, "densify: sigma must be > 0");
    require(std::isfinite(params.threshold) && params.threshold >= 0.0, ErrorKind::invalid_input,
            "densify: threshold must be >= 0");

    struct Source {
        double x, y, u, v;
    };
    std::vector<Source> sources;
    for (int y = 0; y < sparse.height(); ++y) {
        for (int x = 0; x < sparse.width(); ++x) {
            const auto& d = sparse.at(x, y);
            if (d.u != 0.0f || d.v != 0.0f) {
                sources.push_back({static_cast<double>(x), static_cast<double>(y), d.u, d.v});
            }
        }
    }

    const double unit = params.units == ThresholdUnits::frame_fraction
                            ? std::hypot(static_cast<double>(sparse.width()), static_cast<double>(sparse.height()))
                            : 1.0;
    const double inv_sigma2 = 1.0 / (params.sigma * params.sigma);
    FlowField out(sparse.width(), sparse.height());

    auto rows = [&](int y_begin, int y_end) {
        for (int y = y_begin; y < y_end; ++y) {
            for (int x = 0; x < sparse.width(); ++x) {
                double su = 0.0;
                double sv = 0.0;
                for (const Source& s : sources) {
                    const double dx = x - s.x;
                    const double dy = y - s.y;
                    const double w = std::exp(-(dx * dx + dy * dy) * inv_sigma2);
                    su += w * s.u;
                    sv += w * s.v;
                }
                if (std::hypot(su, sv) / unit > params.threshold) {
                    out.at(x, y) = {static_cast<float>(su), static_cast<float>(sv)};
                }
            }
        }
    };

    threads = std::clamp(threads, 1, sparse.height());
    if (threads == 1) {
        rows(0, sparse.height());
    } else {
        std::vector<std::jthread> pool;
        const int chunk = (sparse.height() + threads - 1) / threads;
        for (int y0 = 0; y0 < sparse.height(); y0 += chunk) {
            pool.emplace_back(rows, y0, std::min(sparse.height(), y0 + chunk));
        }
    }
    return out;
}

LaplacianRefiner::LaplacianRefiner(RefineParams params) : params_(params) {
    require(params.iterations >= 0, ErrorKind::invalid_input, "refine: iterations must be >= 0");
    require(params.smoothing_weight > 0.0 && params.smoothing_weight <= 1.0, ErrorKind::invalid_input,
            "refine: smoothing weight must be in (0, 1]");
}

FlowField LaplacianRefiner::refine(const FlowField& dense, std::span<const Pixel> sources) const {
    dense.validate();
    const int w = dense.width();
    const int h = dense.height();
    const double a = params_.smoothing_weight;
    FlowField cur = dense;
    FlowField next(w, h);
    for (int it = 0; it < params_.iterations; ++it) {
        for (int y = 0; y < h; ++y) {
            const int yu = std::max(y - 1, 0);
            const int yd = std::min(y + 1, h - 1);
            for (int x = 0; x < w; ++x) {
                const int xl = std::max(x - 1, 0);
                const int xr = std::min(x + 1, w - 1);
                const auto& c = cur.at(x, y);
                const auto& l = cur.at(xl, y);
                const auto& r = cur.at(xr, y);
                const auto& u = cur.at(x, yu);
                const auto& d = cur.at(x, yd);
                const double mu = 0.25 * (static_cast<double>(l.u) + r.u + u.u + d.u);
                const double mv = 0.25 * (static_cast<double>(l.v) + r.v + u.v + d.v);
                next.at(x, y) = {static_cast<float>((1.0 - a) * c.u + a * mu),
                                 static_cast<float>((1.0 - a) * c.v + a * mv)};
            }
        }
        if (params_.preserve_sources) {
            for (const Pixel& p : sources) {
                if (dense.contains(p.x, p.y)) {
                    next.at(p.x, p.y) = dense.at(p.x, p.y);
                }
            }
        }
        std::swap(cur, next);
    }
    return cur;
}

FlowField refine(const FlowField& dense, const RefineParams& params, std::span<const Pixel> sources) {
    return LaplacianRefiner(params).refine(dense, sources);
}

FlowStages arrows_to_stages(std::span<const ArrowSpec> arrows, int width, int height, const DensifyParams& params,
                            const FlowRefiner& refiner) {
    FlowStages stages;
    stages.sparse = sparse_field_from_arrows(arrows, width, height);
    stages.dense = densify(stages.sparse, params);
    std::vector<Pixel> starts;
    starts.reserve(arrows.size());
    for (const ArrowSpec& a : arrows) {
        starts.push_back(a.start);
    }
    stages.refined = refiner.refine(stages.dense, starts);
    return stages;
}

FlowField arrows_to_refined(std::span<const ArrowSpec> arrows, int width, int height, const DensifyParams& densify,
                            const RefineParams& refine) {
    return arrows_to_stages(arrows, width, height, densify, LaplacianRefiner(refine)).refined;
}

}  // namespace motionforge::sparse
