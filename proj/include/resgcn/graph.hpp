#pragma once

#include <fstream>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "resgcn/autograd.hpp"
#include "resgcn/tensor.hpp"

namespace resgcn {

// Skeleton tree plus the manually designed body-part grouping. Joints are
// 0-based in memory; file formats and log output use the 1-based NTU
// convention.
struct SkeletonGraph {
    int num_joints = 0;
    std::vector<std::pair<int, int>> edges;  // (parent, child)
    int center_joint = 0;
    std::vector<std::string> part_names;
    std::vector<std::vector<int>> parts;

    // Derived on validate().
    std::vector<int> parent;   // -1 at the root
    std::vector<int> part_of;  // joint -> part index

    void validate() {
        const int V = num_joints;
        if (V < 2) throw topology_error("graph: need at least 2 joints");
        if (static_cast<int>(edges.size()) != V - 1)
            throw topology_error("graph: a tree on " + std::to_string(V) + " joints needs " +
                                 std::to_string(V - 1) + " edges, got " + std::to_string(edges.size()));
        parent.assign(static_cast<std::size_t>(V), -1);
        std::vector<int> indeg(static_cast<std::size_t>(V), 0);
        for (auto [p, c] : edges) {
            if (p < 0 || p >= V || c < 0 || c >= V || p == c)
                throw topology_error("graph: bad edge (" + std::to_string(p + 1) + "," +
                                     std::to_string(c + 1) + ")");
            if (parent[static_cast<std::size_t>(c)] != -1)
                throw topology_error("graph: joint " + std::to_string(c + 1) + " has two parents");
            parent[static_cast<std::size_t>(c)] = p;
            ++indeg[static_cast<std::size_t>(c)];
        }
        int roots = 0;
        for (int v = 0; v < V; ++v)
            if (parent[static_cast<std::size_t>(v)] == -1) ++roots;
        if (roots != 1) throw topology_error("graph: expected exactly one root, found " + std::to_string(roots));
        // Connectivity is checked by the BFS in graph_distances.
        if (center_joint < 0 || center_joint >= V)
            throw topology_error("graph: center joint out of range");
        part_of.assign(static_cast<std::size_t>(V), -1);
        for (std::size_t pi = 0; pi < parts.size(); ++pi)
            for (int j : parts[pi]) {
                if (j < 0 || j >= V) throw topology_error("graph: part joint out of range");
                if (part_of[static_cast<std::size_t>(j)] != -1)
                    throw topology_error("graph: joint " + std::to_string(j + 1) + " in two parts");
                part_of[static_cast<std::size_t>(j)] = static_cast<int>(pi);
            }
        for (int v = 0; v < V; ++v)
            if (part_of[static_cast<std::size_t>(v)] == -1)
                throw topology_error("graph: joint " + std::to_string(v + 1) + " not covered by any part");
    }

    int root() const {
        for (int v = 0; v < num_joints; ++v)
            if (parent[static_cast<std::size_t>(v)] == -1) return v;
        return -1;
    }

    // The 25-joint Kinect v2 skeleton, rooted at the base of the spine.
    static SkeletonGraph ntu25() {
        SkeletonGraph g;
        g.num_joints = 25;
        const int raw[24][2] = {  // 1-based (parent, child)
            {1, 2},   {2, 21},  {21, 3},  {3, 4},   {21, 5},  {5, 6},   {6, 7},  {7, 8},
            {21, 9},  {9, 10},  {10, 11}, {11, 12}, {1, 13},  {13, 14}, {14, 15}, {15, 16},
            {1, 17},  {17, 18}, {18, 19}, {19, 20}, {23, 22}, {8, 23},  {25, 24}, {12, 25}};
        for (auto& e : raw) g.edges.emplace_back(e[0] - 1, e[1] - 1);
        g.center_joint = 1;  // middle of the spine, joint 2
        g.part_names = {"torso", "left_arm", "right_arm", "left_leg", "right_leg"};
        const std::vector<std::vector<int>> parts1 = {
            {1, 2, 3, 4, 21}, {5, 6, 7, 8, 22, 23}, {9, 10, 11, 12, 24, 25},
            {13, 14, 15, 16}, {17, 18, 19, 20}};
        for (auto& p : parts1) {
            std::vector<int> q;
            for (int j : p) q.push_back(j - 1);
            g.parts.push_back(std::move(q));
        }
        g.validate();
        return g;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["num_joints"] = num_joints;
        auto& je = j["edges"] = nlohmann::json::array();
        for (auto [p, c] : edges) je.push_back({p + 1, c + 1});
        j["center_joint"] = center_joint + 1;
        auto& jp = j["parts"] = nlohmann::json::array();
        for (std::size_t i = 0; i < parts.size(); ++i) {
            nlohmann::json part;
            part["name"] = i < part_names.size() ? part_names[i] : ("part" + std::to_string(i));
            auto& joints = part["joints"] = nlohmann::json::array();
            for (int v : parts[i]) joints.push_back(v + 1);
            jp.push_back(part);
        }
        return j;
    }

    static SkeletonGraph from_json(const nlohmann::json& j) {
        SkeletonGraph g;
        try {
            g.num_joints = j.at("num_joints").get<int>();
            for (const auto& e : j.at("edges"))
                g.edges.emplace_back(e.at(0).get<int>() - 1, e.at(1).get<int>() - 1);
            g.center_joint = j.at("center_joint").get<int>() - 1;
            for (const auto& p : j.at("parts")) {
                g.part_names.push_back(p.at("name").get<std::string>());
                std::vector<int> joints;
                for (const auto& v : p.at("joints")) joints.push_back(v.get<int>() - 1);
                g.parts.push_back(std::move(joints));
            }
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(std::string("graph json: ") + e.what());
        }
        g.validate();
        return g;
    }

    static SkeletonGraph from_json_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw io_error("graph: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("graph json " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

// All-pairs shortest-path hop counts, one breadth-first search per joint.
inline std::vector<int> graph_distances(const std::vector<std::pair<int, int>>& edges, int V) {
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(V));
    for (auto [a, b] : edges) {
        if (a < 0 || a >= V || b < 0 || b >= V)
            throw topology_error("graph_distances: edge endpoint out of range");
        adj[static_cast<std::size_t>(a)].push_back(b);
        adj[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<int> dist(static_cast<std::size_t>(V) * V, -1);
    for (int s = 0; s < V; ++s) {
        int* row = dist.data() + static_cast<std::size_t>(s) * V;
        row[s] = 0;
        std::queue<int> q;
        q.push(s);
        while (!q.empty()) {
            const int u = q.front();
            q.pop();
            for (int w : adj[static_cast<std::size_t>(u)])
                if (row[w] == -1) {
                    row[w] = row[u] + 1;
                    q.push(w);
                }
        }
        for (int v = 0; v < V; ++v)
            if (row[v] == -1)
                throw topology_error("graph_distances: joints " + std::to_string(s + 1) + " and " +
                                     std::to_string(v + 1) + " are disconnected");
    }
    return dist;
}

// Hop-distance adjacency stack: A_d marks joint pairs at exact graph distance
// d, and norm holds the symmetric degree normalization of each A_d. Rows with
// zero degree stay zero.
struct AdjacencySet {
    int max_distance = 0;
    int num_joints = 0;
    std::vector<Tensor> hop;   // A_0..A_D, binary
    std::vector<Tensor> norm;  // normalized
};

inline AdjacencySet build_adjacency(const std::vector<std::pair<int, int>>& edges, int V, int D = 2) {
    if (D < 0) throw usage_error("build_adjacency: negative max distance");
    const auto dist = graph_distances(edges, V);
    AdjacencySet set;
    set.max_distance = D;
    set.num_joints = V;
    for (int d = 0; d <= D; ++d) {
        Tensor a({V, V});
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j)
                if (dist[static_cast<std::size_t>(i) * V + j] == d) a.at(i, j) = 1.0;
        std::vector<double> deg(static_cast<std::size_t>(V), 0.0);
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j) deg[static_cast<std::size_t>(i)] += a.at(i, j);
        Tensor n({V, V});
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j)
                if (a.at(i, j) != 0.0)
                    n.at(i, j) = 1.0 / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]);
        set.hop.push_back(std::move(a));
        set.norm.push_back(std::move(n));
    }
    return set;
}

// Learnable per-hop edge masks, all-ones at initialization so training starts
// from the plain normalized adjacency.
struct EdgeImportance {
    std::vector<Parameter> masks;

    EdgeImportance() = default;
    EdgeImportance(int D, int V) {
        for (int d = 0; d <= D; ++d) masks.emplace_back(Tensor::full({V, V}, 1.0));
    }
};

// Elementwise product of each normalized adjacency with its mask,
// differentiable in the masks.
inline std::vector<Var> masked_adjacency(Tape& t, const AdjacencySet& adj, EdgeImportance& m) {
    if (m.masks.size() != adj.norm.size())
        throw dimension_error("masked_adjacency: " + std::to_string(adj.norm.size()) +
                              " adjacency matrices vs " + std::to_string(m.masks.size()) + " masks");
    std::vector<Var> out;
    for (std::size_t d = 0; d < adj.norm.size(); ++d) {
        if (!m.masks[d].value.same_shape(adj.norm[d]))
            throw dimension_error("masked_adjacency: mask shape " +
                                  Tensor::shape_string(m.masks[d].value.shape()) + " vs adjacency " +
                                  Tensor::shape_string(adj.norm[d].shape()));
        out.push_back(mul(t, t.constant(adj.norm[d]), t.param(m.masks[d])));
    }
    return out;
}

}  // namespace resgcn
