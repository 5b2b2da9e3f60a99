#include <gtest/gtest.h>

#include <map>

#include "resgcn/layers.hpp"
#include "resgcn/model.hpp"
#include "support.hpp"

using namespace resgcn;

namespace {

std::vector<std::pair<int, int>> path_edges(int n) {
    std::vector<std::pair<int, int>> e;
    for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
    return e;
}

std::map<std::string, std::int64_t> count_by_category(std::vector<NamedParam>& params) {
    std::map<std::string, std::int64_t> out;
    for (auto& p : params) out[param_category_name(p.category)] += p.param->value.numel();
    return out;
}

// Direct summation of the spatial GCN formula, one joint pair at a time.
Tensor reference_spatial_gcn(const Tensor& x, const std::vector<Tensor>& w,
                             const std::vector<Tensor>& adj) {
    const int N = x.dim(0), Cin = x.dim(1), T = x.dim(2), V = x.dim(3);
    const int Cout = w[0].dim(0);
    Tensor out({N, Cout, T, V});
    for (std::size_t d = 0; d < w.size(); ++d)
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co)
                for (int t = 0; t < T; ++t)
                    for (int vout = 0; vout < V; ++vout) {
                        double s = 0.0;
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int vin = 0; vin < V; ++vin)
                                s += w[d].at(co, ci) * x.at(n, ci, t, vin) * adj[d].at(vin, vout);
                        out.at(n, co, t, vout) += s;
                    }
    return out;
}

}  // namespace

TEST(SpatialGcn, IdentityConfiguration) {
    // D=0, identity adjacency, all-ones mask, identity weights: output == input.
    Rng rng(3);
    const int C = 3, V = 4;
    Tensor x = testsupport::random_tensor({2, C, 5, V}, rng);
    Tape t;
    Var xv = t.constant(x);
    Var w = t.constant(Tensor::identity(C));
    Var adj = t.constant(Tensor::identity(V));
    const Tensor& y = t.value(spatial_gcn(t, xv, {w}, {adj}));
    EXPECT_EQ(y.vec(), x.vec());
}

TEST(SpatialGcn, SingleJointReducesToChannelTransform) {
    Rng rng(5);
    Tensor x = testsupport::random_tensor({2, 3, 4, 1}, rng);
    Tensor w0 = testsupport::random_tensor({2, 3}, rng);
    Tape t;
    const Tensor& y = t.value(spatial_gcn(t, t.constant(x), {t.constant(w0)},
                                          {t.constant(Tensor::identity(1))}));
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 2; ++co)
            for (int tt = 0; tt < 4; ++tt) {
                double s = 0.0;
                for (int ci = 0; ci < 3; ++ci) s += w0.at(co, ci) * x.at(n, ci, tt, 0);
                EXPECT_NEAR(y.at(n, co, tt, 0), s, 1e-12);
            }
}

TEST(SpatialGcn, MatchesDirectSummationOracle) {
    Rng rng(7);
    auto set = build_adjacency(path_edges(3), 3, 1);
    Tensor x = testsupport::random_tensor({1, 2, 1, 3}, rng);
    std::vector<Tensor> w = {testsupport::random_tensor({2, 2}, rng),
                             testsupport::random_tensor({2, 2}, rng)};
    Tape t;
    const Tensor& got = t.value(spatial_gcn(t, t.constant(x), {t.constant(w[0]), t.constant(w[1])},
                                            {t.constant(set.norm[0]), t.constant(set.norm[1])}));
    Tensor ref = reference_spatial_gcn(x, w, {set.norm[0], set.norm[1]});
    EXPECT_LT(testsupport::max_abs_diff(got, ref), 1e-12);
}

TEST(SpatialGcn, LinearityInTheInput) {
    Rng rng(9);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    Tensor x = testsupport::random_tensor({1, 3, 2, 25}, rng);
    Tensor y = testsupport::random_tensor({1, 3, 2, 25}, rng);
    std::vector<Tensor> w;
    for (int d = 0; d <= 2; ++d) w.push_back(testsupport::random_tensor({4, 3}, rng));
    const double alpha = 0.7, beta = -1.3;

    auto run = [&](const Tensor& in) {
        Tape t;
        std::vector<Var> wv, av;
        for (int d = 0; d <= 2; ++d) {
            wv.push_back(t.constant(w[static_cast<std::size_t>(d)]));
            av.push_back(t.constant(set.norm[static_cast<std::size_t>(d)]));
        }
        return t.value(spatial_gcn(t, t.constant(in), wv, av));
    };

    Tensor mix = x;
    for (std::int64_t i = 0; i < mix.numel(); ++i) mix[i] = alpha * x[i] + beta * y[i];
    Tensor fx = run(x), fy = run(y), fmix = run(mix);
    for (std::int64_t i = 0; i < fmix.numel(); ++i)
        EXPECT_NEAR(fmix[i], alpha * fx[i] + beta * fy[i], 1e-9);
}

TEST(SpatialGcn, LocalityWithinHopDistance) {
    Rng rng(11);
    auto g = SkeletonGraph::ntu25();
    auto set = build_adjacency(g.edges, 25, 2);
    auto dist = graph_distances(g.edges, 25);
    Tensor x = testsupport::random_tensor({1, 2, 3, 25}, rng);
    std::vector<Tensor> w;
    for (int d = 0; d <= 2; ++d) w.push_back(testsupport::random_tensor({2, 2}, rng));

    auto run = [&](const Tensor& in) {
        Tape t;
        std::vector<Var> wv, av;
        for (int d = 0; d <= 2; ++d) {
            wv.push_back(t.constant(w[static_cast<std::size_t>(d)]));
            av.push_back(t.constant(set.norm[static_cast<std::size_t>(d)]));
        }
        return t.value(spatial_gcn(t, t.constant(in), wv, av));
    };

    const int joint = 7;  // left hand
    Tensor bumped = x;
    bumped.at(0, 1, 1, joint) += 2.5;
    Tensor base = run(x), after = run(bumped);
    for (int v = 0; v < 25; ++v) {
        double delta = 0.0;
        for (int co = 0; co < 2; ++co)
            for (int t = 0; t < 3; ++t) delta += std::abs(after.at(0, co, t, v) - base.at(0, co, t, v));
        if (dist[static_cast<std::size_t>(joint) * 25 + v] <= 2)
            continue;  // may change
        EXPECT_EQ(delta, 0.0) << "joint " << v << " beyond hop distance 2 changed";
    }
}

TEST(SpatialGcn, GradientsMatchFiniteDifferences) {
    Rng rng(13);
    auto set = build_adjacency(path_edges(4), 4, 2);
    Parameter w0(testsupport::random_tensor({3, 2}, rng));
    Parameter w1(testsupport::random_tensor({3, 2}, rng));
    Parameter w2(testsupport::random_tensor({3, 2}, rng));
    EdgeImportance masks(2, 4);
    Tensor x = testsupport::random_tensor({2, 2, 3, 4}, rng);

    auto loss = [&](bool with_grad) {
        Tape t(with_grad);
        auto adj = masked_adjacency(t, set, masks);
        Var y = spatial_gcn(t, t.constant(x), {t.param(w0), t.param(w1), t.param(w2)}, adj);
        Var l = scale(t, sum_all(t, mul(t, y, y)), 0.5);
        if (with_grad) t.backward(l);
        return t.value(l)[0];
    };
    auto rep = testsupport::check_gradients({{"w0", &w0},
                                             {"w1", &w1},
                                             {"w2", &w2},
                                             {"m0", &masks.masks[0]},
                                             {"m1", &masks.masks[1]},
                                             {"m2", &masks.masks[2]}},
                                            loss, 1e-5, 1e-6, 1e-9);
    EXPECT_TRUE(rep.ok()) << rep.worst_param << " ratio " << rep.worst_ratio;
}

TEST(BlockCounts, TemporalBasic589824) {
    Rng rng(1);
    TemporalBlock block(256, 9, 1, false, 4, rng);
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    block.collect("t", params, buffers);
    auto by_cat = count_by_category(params);
    EXPECT_EQ(by_cat["conv"], 256 * 256 * 9);  // 589824
    EXPECT_EQ(by_cat["conv"], 589824);
    EXPECT_EQ(by_cat["bn_affine"], 512);
}

TEST(BlockCounts, TemporalBottleneck69632) {
    Rng rng(1);
    TemporalBlock block(256, 9, 1, true, 4, rng);
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    block.collect("t", params, buffers);
    auto by_cat = count_by_category(params);
    EXPECT_EQ(by_cat["conv"], 256 * 64 + 64 * 64 * 9 + 64 * 256);
    EXPECT_EQ(by_cat["conv"], 69632);
    // about 8.5x fewer weights than the basic block
    EXPECT_NEAR(589824.0 / 69632.0, 8.47, 0.01);
}

TEST(BlockCounts, SpatialBottleneck45056PlusMasks) {
    Rng rng(1);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    SpatialBlock block(256, 256, true, 4, set, rng);
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    block.collect("s", params, buffers);
    auto by_cat = count_by_category(params);
    EXPECT_EQ(by_cat["conv"], 256 * 64 + 3 * 64 * 64 + 64 * 256);
    EXPECT_EQ(by_cat["conv"], 45056);
    EXPECT_EQ(by_cat["mask"], 3 * 25 * 25);
}

TEST(BlockCounts, BottleneckRequiresDivisibleReduction) {
    Rng rng(1);
    auto set = build_adjacency(path_edges(3), 3, 1);
    EXPECT_THROW(SpatialBlock(16, 30, true, 4, set, rng), spec_error);
    EXPECT_THROW(TemporalBlock(30, 9, 1, true, 4, rng), spec_error);
    EXPECT_THROW(ResGCNModule(8, 8, 3, BlockKind::basic, 4, 9, ResidualKind::none, set, rng),
                 spec_error);
}

TEST(Module, BasicBlockKeepsFrameCountAndIsNonNegative) {
    Rng rng(17);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    ResGCNModule mod(3, 8, 1, BlockKind::basic, 4, 9, ResidualKind::block, set, rng);
    Tensor x = testsupport::random_tensor({2, 3, 12, 25}, rng);
    Tape t;
    const Tensor& y = t.value(mod.forward(t, t.constant(x), true));
    EXPECT_EQ(y.shape(), (std::vector<int>{2, 8, 12, 25}));
    for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_GE(y[i], 0.0);
}

TEST(Module, StrideTwoHalvesFrames) {
    Rng rng(19);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    ResGCNModule mod(4, 8, 2, BlockKind::bottleneck, 4, 9, ResidualKind::block, set, rng);
    Tensor x = testsupport::random_tensor({2, 4, 300, 25}, rng);
    Tape t;
    const Tensor& y = t.value(mod.forward(t, t.constant(x), true));
    EXPECT_EQ(y.dim(2), 150);
}

TEST(Module, ZeroedConvolutionsLeaveIdentityPath) {
    Rng rng(23);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    ResGCNModule mod(6, 6, 1, BlockKind::bottleneck, 2, 9, ResidualKind::block, set, rng);
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    mod.collect("m", params, buffers);
    for (auto& p : params)
        if (p.category == ParamCategory::conv)
            p.param->value = Tensor::zeros(p.param->value.shape());
    // Non-negative input: the residual identity path must survive exactly.
    Tensor x = testsupport::random_tensor({2, 6, 5, 25}, rng, 0.0, 1.0);
    Tape t;
    const Tensor& y = t.value(mod.forward(t, t.constant(x), true));
    EXPECT_EQ(y.vec(), x.vec());
}

TEST(Module, DenseHasMoreParamsThanBlockOnMismatchedChannels) {
    Rng rng(29);
    auto set = build_adjacency(SkeletonGraph::ntu25().edges, 25, 2);
    auto count = [&](ResidualKind k) {
        ResGCNModule mod(64, 128, 2, BlockKind::bottleneck, 4, 9, k, set, rng);
        std::vector<NamedParam> params;
        std::vector<NamedBuffer> buffers;
        mod.collect("m", params, buffers);
        std::int64_t n = 0;
        for (auto& p : params) n += p.param->value.numel();
        return n;
    };
    const auto none = count(ResidualKind::none);
    const auto module_ = count(ResidualKind::module);
    const auto block = count(ResidualKind::block);
    const auto dense = count(ResidualKind::dense);
    EXPECT_GT(dense, block);
    EXPECT_GT(block, module_);
    EXPECT_GT(module_, none);
}
