#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "resgcn/jsonschema.hpp"
#include "resgcn/model.hpp"
#include "resgcn/train.hpp"

namespace resgcn {

// Per-(frame, joint) class-evidence scores from the last feature map and the
// classifier row, averaged over the sequence's non-empty bodies. Because the
// classifier sits on a global mean pool, the map's mean equals the class
// logit minus its bias.
struct ActivationMap {
    Tensor values;  // [T', V]
    int class_id = 0;
    double frame_scale = 1.0;  // T' / input T
};

struct CamResult {
    ActivationMap map;
    std::vector<double> logits;  // fused per-class logits of the sequence
    int predicted = 0;
};

inline CamResult class_activation_map(ResGCNModel& model, const std::array<BranchInput, 3>& branches,
                                      int class_id) {
    const int K = model.spec().num_classes;
    if (class_id < -1 || class_id >= K)
        throw usage_error("cam: class id " + std::to_string(class_id) + " outside [0," +
                          std::to_string(K) + ")");
    Sample sample;
    sample.branches = branches;
    std::vector<const Sample*> one = {&sample};
    auto folded = fold_samples(one);

    Tape t(false);
    std::array<Var, 3> rows = {t.constant(folded.inputs[0]), t.constant(folded.inputs[1]),
                               t.constant(folded.inputs[2])};
    auto fw = model.forward(t, rows, false);
    Var fused = matmul(t, t.constant(folded.fold), fw.logits);
    const Tensor& logits = t.value(fused);

    CamResult out;
    for (int k = 0; k < K; ++k) out.logits.push_back(logits.at(0, k));
    out.predicted = static_cast<int>(std::max_element(out.logits.begin(), out.logits.end()) -
                                     out.logits.begin());
    const int cls = class_id < 0 ? out.predicted : class_id;

    const Tensor& feat = t.value(fw.features);  // [R, C, T', V]
    const int R = feat.dim(0), C = feat.dim(1), To = feat.dim(2), V = feat.dim(3);
    const Tensor& w = model.classifier().weight.value;  // [C, K]
    Tensor cam({To, V});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
            const double wc = w.at(c, cls) / R;
            for (int tt = 0; tt < To; ++tt)
                for (int v = 0; v < V; ++v) cam.at(tt, v) += wc * feat.at(r, c, tt, v);
        }
    out.map.values = std::move(cam);
    out.map.class_id = cls;
    out.map.frame_scale = static_cast<double>(To) / branches[0].features.dim(1);
    return out;
}

// Joints whose score strictly exceeds the per-sequence quantile threshold,
// per requested frame. The threshold is the nearest-rank quantile of all
// (frame, joint) scores; ties never activate.
inline std::vector<std::vector<int>> activated_joints(const ActivationMap& map,
                                                      const std::vector<int>& frames,
                                                      double threshold_quantile) {
    if (threshold_quantile <= 0.0 || threshold_quantile >= 1.0)
        throw usage_error("activated_joints: quantile must lie in (0,1)");
    const int To = map.values.dim(0), V = map.values.dim(1);
    std::vector<double> sorted(map.values.vec());
    std::sort(sorted.begin(), sorted.end());
    const auto rank = std::min<std::size_t>(sorted.size() - 1,
                                            static_cast<std::size_t>(threshold_quantile * sorted.size()));
    const double threshold = sorted[rank];

    std::vector<std::vector<int>> out;
    for (int f : frames) {
        if (f < 0 || f >= To)
            throw usage_error("activated_joints: frame " + std::to_string(f) + " outside [0," +
                              std::to_string(To) + ")");
        std::vector<int> joints;
        for (int v = 0; v < V; ++v)
            if (map.values.at(f, v) > threshold) joints.push_back(v);
        out.push_back(std::move(joints));
    }
    return out;
}

// JSON export: every frame's scores, the activated joint sets of the sampled
// frames (1-based joints, as everywhere in the file formats), the class id
// and the skeleton edges for plotting.
inline nlohmann::json cam_to_json(const ActivationMap& map, const std::vector<int>& frames,
                                  const std::vector<std::vector<int>>& joint_sets,
                                  const SkeletonGraph& graph) {
    const int To = map.values.dim(0), V = map.values.dim(1);
    nlohmann::json j;
    j["class_id"] = map.class_id;
    j["frame_scale"] = map.frame_scale;
    j["num_frames"] = To;
    j["num_joints"] = V;
    auto& jf = j["frames"] = nlohmann::json::array();
    for (int t = 0; t < To; ++t) {
        nlohmann::json row;
        row["frame"] = t;
        auto& scores = row["scores"] = nlohmann::json::array();
        for (int v = 0; v < V; ++v) scores.push_back(map.values.at(t, v));
        jf.push_back(std::move(row));
    }
    auto& ja = j["activated"] = nlohmann::json::array();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        nlohmann::json row;
        row["frame"] = frames[i];
        auto& joints = row["joints"] = nlohmann::json::array();
        for (int v : joint_sets[i]) joints.push_back(v + 1);
        ja.push_back(std::move(row));
    }
    auto& je = j["edges"] = nlohmann::json::array();
    for (auto [p, c] : graph.edges) je.push_back({p + 1, c + 1});
    return j;
}

inline void export_cam(const ActivationMap& map, const std::vector<int>& frames,
                       const std::vector<std::vector<int>>& joint_sets, const SkeletonGraph& graph,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cam: cannot write " + path);
    out << cam_to_json(map, frames, joint_sets, graph).dump(2) << "\n";
    if (!out) throw io_error("cam: write failed for " + path);
}

inline ActivationMap import_cam(const std::string& path) {
    nlohmann::json j = load_json_file(path);
    ActivationMap map;
    try {
        map.class_id = j.at("class_id").get<int>();
        map.frame_scale = j.at("frame_scale").get<double>();
        const int To = j.at("num_frames").get<int>();
        const int V = j.at("num_joints").get<int>();
        map.values = Tensor({To, V});
        for (const auto& row : j.at("frames")) {
            const int t = row.at("frame").get<int>();
            const auto& scores = row.at("scores");
            for (int v = 0; v < V; ++v) map.values.at(t, v) = scores.at(static_cast<std::size_t>(v)).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("cam " + path + ": " + e.what());
    }
    return map;
}

}  // namespace resgcn
