#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "resgcn/common.hpp"
#include "resgcn/preprocess.hpp"
#include "resgcn/rng.hpp"
#include "resgcn/skeleton.hpp"

#ifndef M_PI
#define M_PI 3.14159265358979323846
#endif

namespace resgcn {

struct ManifestEntry {
    std::string path;  // relative to the manifest directory
    int label = 0;
    int subject = 0;
    int camera = 1;
    int setup = 1;
};

// Lists the sequences of a dataset and how they split into train/eval.
// split_rule selects the id field the split keys on; train_ids enumerates the
// ids whose sequences belong to the training partition, everything else is
// evaluation. Partitions are disjoint and cover all entries by construction.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::string split_rule = "cross-subject";  // cross-subject | cross-view | cross-setup
    std::vector<int> train_ids;
    int num_classes = 0;

    int split_key(const ManifestEntry& e) const {
        if (split_rule == "cross-subject") return e.subject;
        if (split_rule == "cross-view") return e.camera;
        if (split_rule == "cross-setup") return e.setup;
        throw usage_error("manifest: unknown split rule '" + split_rule + "'");
    }

    bool in_train(const ManifestEntry& e) const {
        const int key = split_key(e);
        return std::find(train_ids.begin(), train_ids.end(), key) != train_ids.end();
    }

    std::vector<int> train_indices() const {
        std::vector<int> ix;
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (in_train(entries[i])) ix.push_back(static_cast<int>(i));
        return ix;
    }

    std::vector<int> eval_indices() const {
        std::vector<int> ix;
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (!in_train(entries[i])) ix.push_back(static_cast<int>(i));
        return ix;
    }

    void validate() const {
        for (const auto& e : entries) {
            if (e.label < 0 || e.label >= num_classes)
                throw spec_error("manifest: label " + std::to_string(e.label) + " outside [0," +
                                 std::to_string(num_classes) + ") for " + e.path);
            split_key(e);
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["num_classes"] = num_classes;
        j["split_rule"] = split_rule;
        j["train_ids"] = train_ids;
        auto& je = j["entries"] = nlohmann::json::array();
        for (const auto& e : entries) {
            je.push_back({{"path", e.path},
                          {"label", e.label},
                          {"subject", e.subject},
                          {"camera", e.camera},
                          {"setup", e.setup}});
        }
        return j;
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        try {
            m.num_classes = j.at("num_classes").get<int>();
            m.split_rule = j.at("split_rule").get<std::string>();
            m.train_ids = j.at("train_ids").get<std::vector<int>>();
            for (const auto& e : j.at("entries")) {
                ManifestEntry me;
                me.path = e.at("path").get<std::string>();
                me.label = e.at("label").get<int>();
                me.subject = e.at("subject").get<int>();
                me.camera = e.at("camera").get<int>();
                me.setup = e.at("setup").get<int>();
                m.entries.push_back(std::move(me));
            }
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(std::string("manifest json: ") + e.what());
        }
        m.validate();
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw io_error("manifest: cannot write " + path);
        out << to_json().dump(2) << "\n";
    }

    static DatasetManifest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw io_error("manifest: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("manifest " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

// One sample name per line, '#' starts a comment. Used to drop known-bad
// recordings before training; names match the file stem of an entry's path.
inline std::vector<std::string> load_exclusion_list(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("exclusion list: cannot open " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string tok;
        std::istringstream ss(line);
        if (ss >> tok) names.push_back(tok);
    }
    return names;
}

inline int apply_exclusions(DatasetManifest& manifest, const std::vector<std::string>& names) {
    const std::set<std::string> drop(names.begin(), names.end());
    const auto before = manifest.entries.size();
    std::erase_if(manifest.entries, [&](const ManifestEntry& e) {
        return drop.count(std::filesystem::path(e.path).stem().string()) > 0;
    });
    return static_cast<int>(before - manifest.entries.size());
}

namespace detail {

// Canonical 25-joint rest pose (meters, y up), 0-based NTU joint order.
inline const double* rest_pose() {
    static const double pose[25][3] = {
        {0.00, 0.90, 0.00},   // 1  base of spine
        {0.00, 1.15, 0.00},   // 2  middle of spine
        {0.00, 1.50, 0.00},   // 3  neck
        {0.00, 1.65, 0.00},   // 4  head
        {-0.20, 1.40, 0.00},  // 5  left shoulder
        {-0.25, 1.12, 0.00},  // 6  left elbow
        {-0.27, 0.88, 0.00},  // 7  left wrist
        {-0.28, 0.80, 0.00},  // 8  left hand
        {0.20, 1.40, 0.00},   // 9  right shoulder
        {0.25, 1.12, 0.00},   // 10 right elbow
        {0.27, 0.88, 0.00},   // 11 right wrist
        {0.28, 0.80, 0.00},   // 12 right hand
        {-0.10, 0.85, 0.00},  // 13 left hip
        {-0.12, 0.45, 0.00},  // 14 left knee
        {-0.13, 0.08, 0.00},  // 15 left ankle
        {-0.14, 0.02, 0.08},  // 16 left foot
        {0.10, 0.85, 0.00},   // 17 right hip
        {0.12, 0.45, 0.00},   // 18 right knee
        {0.13, 0.08, 0.00},   // 19 right ankle
        {0.14, 0.02, 0.08},   // 20 right foot
        {0.00, 1.40, 0.00},   // 21 spine at shoulder height
        {-0.28, 0.72, 0.00},  // 22 left hand tip
        {-0.24, 0.76, 0.03},  // 23 left thumb
        {0.28, 0.72, 0.00},   // 24 right hand tip
        {0.24, 0.76, 0.03},   // 25 right thumb
    };
    return &pose[0][0];
}

// Swing weight: how strongly a joint follows the limb oscillation. Distal
// joints move more, the torso barely moves.
inline double swing_weight(int joint) {  // 0-based
    static const double w[25] = {
        0.00, 0.02, 0.05, 0.08, 0.15, 0.45, 0.80, 1.00, 0.15, 0.45, 0.80, 1.00, 0.05,
        0.35, 0.70, 0.85, 0.05, 0.35, 0.70, 0.85, 0.03, 1.05, 0.95, 1.05, 0.95};
    return w[joint];
}

}  // namespace detail

struct SynthParams {
    // Per-class motion law: amplitude (meters) and whole-sequence cycle count.
    double amplitude(int label) const { return 0.16 + 0.05 * label; }
    double cycles(int label) const { return 1.0 + label; }
    double noise_stddev = 0.008;
};

// Deterministic labeled dataset of parametric limb oscillations. All classes
// share the rest pose and which limbs move; they differ in oscillation
// frequency and amplitude, so class evidence lives in the temporal dynamics.
inline DatasetManifest synth_dataset(int num_classes, int per_class, int frames, std::uint64_t seed,
                                     const std::string& out_dir, SynthParams params = {}) {
    if (num_classes < 2) throw usage_error("synth_dataset: need at least 2 classes");
    if (per_class < 1 || frames < 4) throw usage_error("synth_dataset: bad per_class or frame count");
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.num_classes = num_classes;
    manifest.split_rule = "cross-subject";
    manifest.train_ids = {0, 1, 2, 3, 4, 5, 6, 7};

    Rng rng(seed);
    const double* pose = detail::rest_pose();
    int index = 0;
    for (int label = 0; label < num_classes; ++label) {
        const double amp = params.amplitude(label);
        const double cyc = params.cycles(label);
        for (int k = 0; k < per_class; ++k, ++index) {
            SkeletonSequence seq;
            seq.coords = Tensor({3, frames, kNumJoints, 1});
            seq.valid_frames = frames;
            seq.label = label;

            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            const double amp_jitter = rng.uniform(0.92, 1.08);
            double shift[3];
            for (double& s : shift) s = rng.uniform(-0.05, 0.05);

            for (int t = 0; t < frames; ++t) {
                const double theta = 2.0 * M_PI * cyc * t / frames + phase;
                const double sx = amp * amp_jitter * std::sin(theta);
                const double sz = amp * amp_jitter * std::cos(theta);
                for (int v = 0; v < kNumJoints; ++v) {
                    const double w = detail::swing_weight(v);
                    // Left side leads, right side counter-swings.
                    const double side = (v >= 4 && v <= 7) || (v >= 12 && v <= 15) || v == 21 || v == 22
                                            ? 1.0
                                            : ((v >= 8 && v <= 11) || (v >= 16 && v <= 19) || v == 23 || v == 24
                                                   ? -1.0
                                                   : 0.3);
                    const double base_x = pose[v * 3 + 0] + side * w * sx + shift[0];
                    const double base_y = pose[v * 3 + 1] + shift[1];
                    const double base_z = pose[v * 3 + 2] + side * w * sz + shift[2];
                    seq.coords.at(0, t, v, 0) = base_x + rng.gauss(0.0, params.noise_stddev);
                    seq.coords.at(1, t, v, 0) = base_y + rng.gauss(0.0, params.noise_stddev);
                    seq.coords.at(2, t, v, 0) = base_z + rng.gauss(0.0, params.noise_stddev);
                }
            }

            char name[32];
            std::snprintf(name, sizeof name, "seq_%05d.skl", index);
            save_skl(seq, (std::filesystem::path(out_dir) / name).string());

            ManifestEntry e;
            e.path = name;
            e.label = label;
            e.subject = index % 10;
            e.camera = 1 + index % 3;
            e.setup = 1 + index % 4;
            manifest.entries.push_back(std::move(e));
        }
    }
    manifest.save((std::filesystem::path(out_dir) / "manifest.json").string());
    return manifest;
}

}  // namespace resgcn
