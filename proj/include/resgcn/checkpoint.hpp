#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "resgcn/model.hpp"

namespace resgcn {

// RGCN1 parameter file: the magic line, one JSON manifest line listing
// (name, shape) in order, then the raw little-endian doubles in manifest
// order. Parameters come first, then persistent buffers (running statistics).

namespace detail {

inline nlohmann::json checkpoint_manifest(ResGCNModel& model) {
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    model.collect(params, buffers);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& p : params)
        entries.push_back({{"name", p.name}, {"shape", p.param->value.shape()}});
    for (const auto& b : buffers)
        entries.push_back({{"name", b.name}, {"shape", b.tensor->shape()}, {"buffer", true}});
    return entries;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

// Hash of the ordered (name, shape) manifest; identifies the architecture
// independently of weight values.
inline std::string structural_hash(ResGCNModel& model) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a(detail::checkpoint_manifest(model).dump())));
    return buf;
}

inline void save_checkpoint(ResGCNModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("checkpoint: cannot write " + path);
    out << "RGCN1\n" << detail::checkpoint_manifest(model).dump() << "\n";
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    model.collect(params, buffers);
    for (const auto& p : params)
        for (std::int64_t i = 0; i < p.param->value.numel(); ++i) detail::put_f64(out, p.param->value[i]);
    for (const auto& b : buffers)
        for (std::int64_t i = 0; i < b.tensor->numel(); ++i) detail::put_f64(out, (*b.tensor)[i]);
    if (!out) throw io_error("checkpoint: write failed for " + path);
}

// Binds the weights in `path` into an already built model. The file manifest
// must match the model's own manifest exactly (names, shapes, order).
inline void load_checkpoint(ResGCNModel& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("checkpoint: cannot open " + path);
    std::string magic;
    if (!std::getline(in, magic) || magic != "RGCN1")
        throw parse_error("checkpoint: " + path + " is not an RGCN1 file");
    std::string manifest_line;
    if (!std::getline(in, manifest_line)) throw parse_error("checkpoint: missing manifest in " + path);
    const std::string expected = detail::checkpoint_manifest(model).dump();
    if (manifest_line != expected)
        throw state_error("checkpoint: manifest mismatch; the file was written for a different architecture");
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    model.collect(params, buffers);
    for (const auto& p : params)
        for (std::int64_t i = 0; i < p.param->value.numel(); ++i)
            p.param->value[i] = detail::take_f64(in, p.name);
    for (const auto& b : buffers) {
        for (std::int64_t i = 0; i < b.tensor->numel(); ++i) (*b.tensor)[i] = detail::take_f64(in, b.name);
        if (b.state) b.state->initialized = true;  // loaded statistics are authoritative
    }
}

// Model checkpoint = RGCN1 weights + a JSON sidecar (path + ".json") holding
// the model spec, the graph, and the structural hash checked before binding.
inline void save_model(ResGCNModel& model, const std::string& path,
                       const std::string& graph_source = "") {
    save_checkpoint(model, path);
    nlohmann::json side{{"format", "resgcn-model"},
                        {"model_spec", model.spec().to_json()},
                        {"graph", model.graph().to_json()},
                        {"structural_hash", structural_hash(model)}};
    if (!graph_source.empty()) side["graph_source"] = graph_source;
    std::ofstream out(path + ".json");
    if (!out) throw io_error("checkpoint: cannot write sidecar " + path + ".json");
    out << side.dump(2) << "\n";
}

inline std::unique_ptr<ResGCNModel> load_model(const std::string& path) {
    std::ifstream side_in(path + ".json");
    if (!side_in) throw io_error("checkpoint: missing sidecar " + path + ".json");
    nlohmann::json side;
    try {
        side_in >> side;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("checkpoint sidecar: " + std::string(e.what()));
    }
    ModelSpec spec = ModelSpec::from_json(side.at("model_spec"));
    SkeletonGraph graph = SkeletonGraph::from_json(side.at("graph"));
    auto model = std::make_unique<ResGCNModel>(std::move(spec), std::move(graph), 1);
    const std::string expect = side.at("structural_hash").get<std::string>();
    const std::string got = structural_hash(*model);
    if (expect != got)
        throw state_error("checkpoint: structural hash mismatch (" + expect + " vs " + got + ")");
    load_checkpoint(*model, path);
    return model;
}

}  // namespace resgcn
