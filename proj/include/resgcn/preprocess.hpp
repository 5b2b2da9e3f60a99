#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "resgcn/graph.hpp"
#include "resgcn/skeleton.hpp"
#include "resgcn/tensor.hpp"

namespace resgcn {

enum class BranchKind : int { joint = 0, velocity = 1, bone = 2 };

inline const char* branch_kind_name(BranchKind k) {
    switch (k) {
        case BranchKind::joint: return "joint";
        case BranchKind::velocity: return "velocity";
        case BranchKind::bone: return "bone";
    }
    return "?";
}

// One of the three 6-channel network inputs: two concatenated 3-channel
// feature sets over the same (T, V, M) grid as the source sequence.
struct BranchInput {
    BranchKind kind = BranchKind::joint;
    Tensor features;  // [6, T, V, M]
    int valid_frames = 0;
    int label = -1;
};

// Channels 0-2: absolute coordinates. Channels 3-5: coordinates relative to
// the center joint, per body.
inline BranchInput joint_branch(const SkeletonSequence& seq, const SkeletonGraph& g) {
    const int T = seq.frames(), V = seq.joints(), M = seq.bodies();
    if (g.num_joints != V)
        throw dimension_error("joint_branch: graph has " + std::to_string(g.num_joints) +
                              " joints, sequence has " + std::to_string(V));
    const int ctr = g.center_joint;
    BranchInput out{BranchKind::joint, Tensor({6, T, V, M}), seq.valid_frames, seq.label};
    for (int c = 0; c < 3; ++c)
        for (int t = 0; t < T; ++t)
            for (int v = 0; v < V; ++v)
                for (int m = 0; m < M; ++m) {
                    const double x = seq.coords.at(c, t, v, m);
                    out.features.at(c, t, v, m) = x;
                    out.features.at(c + 3, t, v, m) = x - seq.coords.at(c, t, ctr, m);
                }
    return out;
}

// Channels 0-2: two-step temporal differences. Channels 3-5: one-step
// differences. Differences that would read past the last frame are zero.
inline BranchInput velocity_branch(const SkeletonSequence& seq) {
    const int T = seq.frames(), V = seq.joints(), M = seq.bodies();
    BranchInput out{BranchKind::velocity, Tensor({6, T, V, M}), seq.valid_frames, seq.label};
    for (int c = 0; c < 3; ++c)
        for (int t = 0; t < T; ++t)
            for (int v = 0; v < V; ++v)
                for (int m = 0; m < M; ++m) {
                    if (t + 2 < T)
                        out.features.at(c, t, v, m) =
                            seq.coords.at(c, t + 2, v, m) - seq.coords.at(c, t, v, m);
                    if (t + 1 < T)
                        out.features.at(c + 3, t, v, m) =
                            seq.coords.at(c, t + 1, v, m) - seq.coords.at(c, t, v, m);
                }
    return out;
}

// Channels 0-2: bone displacement toward the parent joint (zero at the root).
// Channels 3-5: the bone's direction angles arccos(l_w / |l|); zero-length
// bones keep all three angles at 0 so padded frames stay zero.
inline BranchInput bone_branch(const SkeletonSequence& seq, const SkeletonGraph& g) {
    const int T = seq.frames(), V = seq.joints(), M = seq.bodies();
    if (g.num_joints != V)
        throw dimension_error("bone_branch: graph has " + std::to_string(g.num_joints) +
                              " joints, sequence has " + std::to_string(V));
    BranchInput out{BranchKind::bone, Tensor({6, T, V, M}), seq.valid_frames, seq.label};
    for (int t = 0; t < T; ++t)
        for (int v = 0; v < V; ++v) {
            const int p = g.parent[static_cast<std::size_t>(v)];
            if (p < 0) continue;
            for (int m = 0; m < M; ++m) {
                double l[3];
                for (int c = 0; c < 3; ++c)
                    l[c] = seq.coords.at(c, t, v, m) - seq.coords.at(c, t, p, m);
                const double len = std::sqrt(l[0] * l[0] + l[1] * l[1] + l[2] * l[2]);
                for (int c = 0; c < 3; ++c) {
                    out.features.at(c, t, v, m) = l[c];
                    if (len > 0.0)
                        out.features.at(c + 3, t, v, m) =
                            std::acos(std::clamp(l[c] / len, -1.0, 1.0));
                }
            }
        }
    return out;
}

inline std::array<BranchInput, 3> build_branches(const SkeletonSequence& seq, const SkeletonGraph& g) {
    return {joint_branch(seq, g), velocity_branch(seq), bone_branch(seq, g)};
}

// SKB1: preprocessed branch container, same layout as SKL1 plus a kind tag
// and six channels.
inline void save_branch(const BranchInput& b, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("branch: cannot write " + path);
    out.write("SKB1", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(static_cast<int>(b.kind)));
    detail::put_u32(out, static_cast<std::uint32_t>(b.features.dim(1)));
    detail::put_u32(out, static_cast<std::uint32_t>(b.features.dim(2)));
    detail::put_u32(out, static_cast<std::uint32_t>(b.features.dim(3)));
    detail::put_u32(out, static_cast<std::uint32_t>(b.valid_frames));
    detail::put_u32(out, static_cast<std::uint32_t>(b.label));
    for (std::int64_t i = 0; i < b.features.numel(); ++i) detail::put_f64(out, b.features[i]);
    if (!out) throw io_error("branch: write failed for " + path);
}

inline BranchInput load_branch(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("branch: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SKB1", 4) != 0)
        throw parse_error("branch: " + path + " is not an SKB1 file");
    BranchInput b;
    const int kind = static_cast<int>(detail::take_u32(in, "header"));
    if (kind < 0 || kind > 2) throw parse_error("branch: bad kind tag in " + path);
    b.kind = static_cast<BranchKind>(kind);
    const int T = static_cast<int>(detail::take_u32(in, "header"));
    const int V = static_cast<int>(detail::take_u32(in, "header"));
    const int M = static_cast<int>(detail::take_u32(in, "header"));
    b.valid_frames = static_cast<int>(detail::take_u32(in, "header"));
    b.label = static_cast<std::int32_t>(detail::take_u32(in, "header"));
    b.features = Tensor({6, T, V, M});
    for (std::int64_t i = 0; i < b.features.numel(); ++i) b.features[i] = detail::take_f64(in, "payload");
    return b;
}

}  // namespace resgcn
