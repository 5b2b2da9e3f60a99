#include <gtest/gtest.h>

#include <cmath>

#include "resgcn/graph.hpp"
#include "support.hpp"

using namespace resgcn;

namespace {

std::vector<std::pair<int, int>> path_edges(int n) {
    std::vector<std::pair<int, int>> e;
    for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
    return e;
}

// Largest absolute eigenvalue of a symmetric matrix by power iteration.
double spectral_radius(const Tensor& a, int iters = 2000) {
    const int n = a.dim(0);
    std::vector<double> v(static_cast<std::size_t>(n), 1.0 / std::sqrt(n)), w(static_cast<std::size_t>(n));
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += a.at(i, j) * v[static_cast<std::size_t>(j)];
            w[static_cast<std::size_t>(i)] = s;
        }
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        lambda = norm;
        for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] / norm;
    }
    return lambda;
}

}  // namespace

TEST(GraphDistances, BasicProperties) {
    auto g = SkeletonGraph::ntu25();
    auto dist = graph_distances(g.edges, 25);
    for (int i = 0; i < 25; ++i) EXPECT_EQ(dist[static_cast<std::size_t>(i) * 25 + i], 0);
    for (auto [p, c] : g.edges) EXPECT_EQ(dist[static_cast<std::size_t>(p) * 25 + c], 1);
    // head (4) to base of spine (1): 4-3-21-2-1
    EXPECT_EQ(dist[static_cast<std::size_t>(3) * 25 + 0], 4);
}

TEST(GraphDistances, DisconnectedGraphIsError) {
    std::vector<std::pair<int, int>> edges = {{0, 1}};  // node 2 isolated
    EXPECT_THROW(graph_distances(edges, 3), topology_error);
}

TEST(Adjacency, IdentityAtDistanceZero) {
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    for (int i = 0; i < 25; ++i)
        for (int j = 0; j < 25; ++j) {
            EXPECT_DOUBLE_EQ(set.hop[0].at(i, j), i == j ? 1.0 : 0.0);
            EXPECT_DOUBLE_EQ(set.norm[0].at(i, j), i == j ? 1.0 : 0.0);
        }
}

TEST(Adjacency, TwoNodePathUnitDegrees) {
    auto set = build_adjacency(path_edges(2), 2, 1);
    EXPECT_EQ(set.norm[1].vec(), set.hop[1].vec());
}

TEST(Adjacency, ThreeNodePathHandNormalization) {
    auto set = build_adjacency(path_edges(3), 3, 1);
    const double r = 1.0 / std::sqrt(2.0);
    EXPECT_DOUBLE_EQ(set.norm[1].at(0, 1), r);
    EXPECT_DOUBLE_EQ(set.norm[1].at(1, 0), r);
    EXPECT_DOUBLE_EQ(set.norm[1].at(0, 2), 0.0);
}

TEST(Adjacency, HopClassesPartitionPairs) {
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    for (int i = 0; i < 25; ++i)
        for (int j = 0; j < 25; ++j) {
            double sum = 0.0;
            for (const auto& a : set.hop) sum += a.at(i, j);
            EXPECT_TRUE(sum == 0.0 || sum == 1.0) << "pair " << i << "," << j;
        }
}

TEST(Adjacency, SymmetricAndSpectrallyBounded) {
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    for (const auto& group : {set.hop, set.norm})
        for (const auto& a : group)
            for (int i = 0; i < 25; ++i)
                for (int j = 0; j < i; ++j) EXPECT_DOUBLE_EQ(a.at(i, j), a.at(j, i));
    EXPECT_LE(spectral_radius(set.norm[1]), 1.0 + 1e-9);
}

TEST(Adjacency, IndependentOfEdgeOrder) {
    auto g = SkeletonGraph::ntu25();
    auto shuffled = g.edges;
    Rng rng(5);
    rng.shuffle(shuffled);
    auto a = build_adjacency(g.edges, 25, 2);
    auto b = build_adjacency(shuffled, 25, 2);
    for (int d = 0; d <= 2; ++d) EXPECT_EQ(a.norm[static_cast<std::size_t>(d)].vec(), b.norm[static_cast<std::size_t>(d)].vec());
}

TEST(Adjacency, ZeroDegreeRowsStayZero) {
    // On a 2-node path nothing is at distance 2: the whole matrix is zero.
    auto set = build_adjacency(path_edges(2), 2, 2);
    for (std::int64_t i = 0; i < set.norm[2].numel(); ++i) EXPECT_DOUBLE_EQ(set.norm[2][i], 0.0);
}

TEST(MaskedAdjacency, OnesMaskIsIdentityZerosKill) {
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    EdgeImportance ones(2, 25);
    Tape t;
    auto masked = masked_adjacency(t, set, ones);
    for (int d = 0; d <= 2; ++d)
        EXPECT_EQ(t.value(masked[static_cast<std::size_t>(d)]).vec(), set.norm[static_cast<std::size_t>(d)].vec());

    EdgeImportance zeros(2, 25);
    for (auto& m : zeros.masks) m.value = Tensor::zeros({25, 25});
    Tape t2;
    auto dead = masked_adjacency(t2, set, zeros);
    for (int d = 0; d <= 2; ++d)
        for (std::int64_t i = 0; i < 625; ++i) EXPECT_DOUBLE_EQ(t2.value(dead[static_cast<std::size_t>(d)])[i], 0.0);
}

TEST(MaskedAdjacency, GradientOfSumIsNormalizedAdjacency) {
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    EdgeImportance m(2, 25);
    Tape t;
    auto masked = masked_adjacency(t, set, m);
    Var total = sum_all(t, masked[1]);
    for (std::size_t d = 2; d < masked.size(); ++d) total = add(t, total, sum_all(t, masked[d]));
    total = add(t, total, sum_all(t, masked[0]));
    t.backward(total);
    for (int d = 0; d <= 2; ++d)
        EXPECT_EQ(m.masks[static_cast<std::size_t>(d)].grad.vec(), set.norm[static_cast<std::size_t>(d)].vec());
}

TEST(SkeletonGraphDef, Ntu25IsAValidTreeWithParts) {
    auto g = SkeletonGraph::ntu25();
    EXPECT_EQ(g.edges.size(), 24u);
    EXPECT_EQ(g.root(), 0);       // base of the spine
    EXPECT_EQ(g.center_joint, 1); // middle of the spine
    std::size_t covered = 0;
    for (const auto& p : g.parts) covered += p.size();
    EXPECT_EQ(covered, 25u);
    EXPECT_EQ(g.parts.size(), 5u);
}

TEST(SkeletonGraphDef, JsonRoundTripAndValidation) {
    auto g = SkeletonGraph::ntu25();
    auto j = g.to_json();
    auto g2 = SkeletonGraph::from_json(j);
    EXPECT_EQ(g2.edges, g.edges);
    EXPECT_EQ(g2.center_joint, g.center_joint);
    EXPECT_EQ(g2.parts, g.parts);

    auto bad = j;
    bad["parts"][0]["joints"].push_back(6);  // joint 6 already in left_arm
    EXPECT_THROW(SkeletonGraph::from_json(bad), topology_error);
}
