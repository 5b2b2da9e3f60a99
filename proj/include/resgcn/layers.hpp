#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "resgcn/autograd.hpp"
#include "resgcn/graph.hpp"
#include "resgcn/rng.hpp"

namespace resgcn {

enum class ParamCategory { conv, mask, bn_affine, attention, classifier };

inline const char* param_category_name(ParamCategory c) {
    switch (c) {
        case ParamCategory::conv: return "conv";
        case ParamCategory::mask: return "mask";
        case ParamCategory::bn_affine: return "bn_affine";
        case ParamCategory::attention: return "attention";
        case ParamCategory::classifier: return "classifier";
    }
    return "?";
}

struct NamedParam {
    std::string name;
    ParamCategory category;
    Parameter* param;
};

// Persistent non-trainable state (BatchNorm running estimates); checkpointed
// alongside the parameters. `state` points at the owning BatchNormState so a
// loader can flip its initialized flag.
struct NamedBuffer {
    std::string name;
    Tensor* tensor;
    BatchNormState* state = nullptr;
};

// Spatial graph convolution: per frame, transform features with one weight
// matrix per hop distance and mix joints through the matching masked
// adjacency, summed over distances. The per-distance intermediates are
// recomputed in backward instead of stored.
inline Var spatial_gcn(Tape& t, Var x, const std::vector<Var>& weights,
                       const std::vector<Var>& masked_adj) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw dimension_error("spatial_gcn: input must be [N,C,T,V]");
    if (weights.empty() || weights.size() != masked_adj.size())
        throw dimension_error("spatial_gcn: " + std::to_string(weights.size()) + " weights vs " +
                              std::to_string(masked_adj.size()) + " adjacency matrices");
    const int N = xv.dim(0), Cin = xv.dim(1), T = xv.dim(2), V = xv.dim(3);
    const int D1 = static_cast<int>(weights.size());
    const int Cout = t.value(weights[0]).dim(0);
    for (const Var w : weights) {
        const Tensor& wv = t.value(w);
        if (wv.rank() != 2 || wv.dim(0) != Cout || wv.dim(1) != Cin)
            throw dimension_error("spatial_gcn: weight shape " + Tensor::shape_string(wv.shape()) +
                                  ", expected [" + std::to_string(Cout) + "," + std::to_string(Cin) + "]");
    }
    for (const Var a : masked_adj) {
        const Tensor& av = t.value(a);
        if (av.rank() != 2 || av.dim(0) != V || av.dim(1) != V)
            throw dimension_error("spatial_gcn: adjacency shape " + Tensor::shape_string(av.shape()) +
                                  ", expected [" + std::to_string(V) + "," + std::to_string(V) + "]");
    }

    const std::int64_t xs = static_cast<std::int64_t>(Cin) * T * V;
    const std::int64_t os = static_cast<std::int64_t>(Cout) * T * V;
    Tensor out({N, Cout, T, V});
    parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
        std::vector<double> z(static_cast<std::size_t>(Cout) * T * V);
        for (std::int64_t n = nb; n < ne; ++n) {
            for (int d = 0; d < D1; ++d) {
                std::fill(z.begin(), z.end(), 0.0);
                gemm_acc(t.value(weights[static_cast<std::size_t>(d)]).data(), xv.data() + n * xs,
                         z.data(), Cout, Cin, T * V);
                gemm_acc(z.data(), t.value(masked_adj[static_cast<std::size_t>(d)]).data(),
                         out.data() + n * os, Cout * T, V, V);
            }
        }
    });

    std::vector<Var> parents = {x};
    parents.insert(parents.end(), weights.begin(), weights.end());
    parents.insert(parents.end(), masked_adj.begin(), masked_adj.end());
    return t.push(std::move(out), parents,
                  [x, weights, masked_adj, N, Cin, T, V, D1, Cout, xs, os](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv = tp.value(x);
        const std::int64_t plane = static_cast<std::int64_t>(Cout) * T * V;

        // Recompute z_d and form dz_d for every sample, then the per-sample
        // input gradient; weight and adjacency gradients sum samples in
        // ascending order afterwards.
        Tensor zall({N, D1, Cout, T, V});
        Tensor dzall({N, D1, Cout, T, V});
        std::vector<Tensor> adj_t;  // transposed adjacencies, so dz is a plain gemm
        for (int d = 0; d < D1; ++d) {
            const Tensor& b = tp.value(masked_adj[static_cast<std::size_t>(d)]);
            Tensor bt({V, V});
            for (int i = 0; i < V; ++i)
                for (int j = 0; j < V; ++j) bt.at(i, j) = b.at(j, i);
            adj_t.push_back(std::move(bt));
        }
        const bool track_x = tp.tracked(x);
        parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
            for (std::int64_t n = nb; n < ne; ++n) {
                for (int d = 0; d < D1; ++d) {
                    double* z = zall.data() + (n * D1 + d) * plane;
                    double* dz = dzall.data() + (n * D1 + d) * plane;
                    gemm_acc(tp.value(weights[static_cast<std::size_t>(d)]).data(), xv.data() + n * xs,
                             z, Cout, Cin, T * V);
                    gemm_acc(g.data() + n * os, adj_t[static_cast<std::size_t>(d)].data(),
                             dz, Cout * T, V, V);
                }
            }
        });
        if (track_x) {
            Tensor& gx = tp.gbuf(x);
            parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
                for (std::int64_t n = nb; n < ne; ++n)
                    for (int d = 0; d < D1; ++d)
                        gemm_tn_acc(tp.value(weights[static_cast<std::size_t>(d)]).data(),
                                    dzall.data() + (n * D1 + d) * plane, gx.data() + n * xs,
                                    Cin, Cout, T * V);
            });
        }
        parallel_for(D1, [&](std::int64_t db, std::int64_t de) {
            for (std::int64_t d = db; d < de; ++d) {
                if (tp.tracked(weights[static_cast<std::size_t>(d)])) {
                    Tensor& gw = tp.gbuf(weights[static_cast<std::size_t>(d)]);
                    for (std::int64_t n = 0; n < N; ++n)
                        gemm_nt_acc(dzall.data() + (n * D1 + d) * plane, xv.data() + n * xs,
                                    gw.data(), Cout, T * V, Cin);
                }
                if (tp.tracked(masked_adj[static_cast<std::size_t>(d)])) {
                    Tensor& ga = tp.gbuf(masked_adj[static_cast<std::size_t>(d)]);
                    for (std::int64_t n = 0; n < N; ++n)
                        gemm_tn_acc(zall.data() + (n * D1 + d) * plane, g.data() + n * os,
                                    ga.data(), V, Cout * T, V);
                }
            }
        });
    });
}

// --- parameterized layers -----------------------------------------------------

struct Conv2dLayer {
    Parameter weight;  // [Cout, Cin, kt, 1]
    int stride = 1;
    int pad = 0;

    Conv2dLayer(int cin, int cout, int kt, int stride_, int pad_, Rng& rng)
        : weight(Tensor({cout, cin, kt, 1})), stride(stride_), pad(pad_) {
        const double stddev = std::sqrt(2.0 / (static_cast<double>(cout) * kt));
        for (std::int64_t i = 0; i < weight.value.numel(); ++i) weight.value[i] = rng.gauss(0.0, stddev);
    }

    Var forward(Tape& t, Var x) { return conv2d(t, x, t.param(weight), stride, pad); }

    void collect(const std::string& prefix, ParamCategory cat, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>&) {
        params.push_back({prefix + ".weight", cat, &weight});
    }
};

struct BatchNormLayer {
    Parameter gamma;
    Parameter beta;
    BatchNormState state;

    explicit BatchNormLayer(int channels)
        : gamma(Tensor::full({channels}, 1.0), true, false),
          beta(Tensor::zeros({channels}), true, false),
          state(channels) {}

    Var forward(Tape& t, Var x, bool training) {
        return batchnorm(t, x, t.param(gamma), t.param(beta), state, training);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers, ParamCategory cat = ParamCategory::bn_affine) {
        params.push_back({prefix + ".gamma", cat, &gamma});
        params.push_back({prefix + ".beta", cat, &beta});
        buffers.push_back({prefix + ".running_mean", &state.running_mean, &state});
        buffers.push_back({prefix + ".running_var", &state.running_var, &state});
    }
};

struct LinearLayer {
    Parameter weight;  // [Cin, K]
    Parameter bias;    // [1, K]

    LinearLayer(int cin, int k, Rng& rng)
        : weight(Tensor({cin, k})), bias(Tensor::zeros({1, k}), true, false) {
        const double stddev = std::sqrt(1.0 / static_cast<double>(cin));
        for (std::int64_t i = 0; i < weight.value.numel(); ++i) weight.value[i] = rng.gauss(0.0, stddev);
    }

    Var forward(Tape& t, Var x) {
        return add(t, matmul(t, x, t.param(weight)), t.param(bias));
    }

    void collect(const std::string& prefix, ParamCategory cat, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>&) {
        params.push_back({prefix + ".weight", cat, &weight});
        params.push_back({prefix + ".bias", cat, &bias});
    }
};

// --- ResGCN building blocks -----------------------------------------------------
//
// A block is a spatial GCN or temporal convolution stage, in the plain
// ("basic") form or wrapped in 1x1 reduce/expand layers ("bottleneck").
// forward() returns the pre-activation output: the final ReLU is applied by
// the owning module after residual sums.

struct SpatialBlock {
    bool bottleneck;
    int in_channels, out_channels, core_channels;
    const AdjacencySet* adj;

    std::optional<Conv2dLayer> reduce;
    std::optional<BatchNormLayer> reduce_bn;
    std::vector<Parameter> gcn_weights;  // D+1 of [core_out, core_in]
    EdgeImportance masks;
    BatchNormLayer core_bn;
    std::optional<Conv2dLayer> expand;
    std::optional<BatchNormLayer> expand_bn;

    SpatialBlock(int cin, int cout, bool bottleneck_, int reduction, const AdjacencySet& adjacency,
                 Rng& rng)
        : bottleneck(bottleneck_),
          in_channels(cin),
          out_channels(cout),
          core_channels(bottleneck_ ? cout / reduction : cout),
          adj(&adjacency),
          masks(adjacency.max_distance, adjacency.num_joints),
          core_bn(core_channels) {
        if (bottleneck) {
            if (reduction < 1 || cout % reduction != 0)
                throw spec_error("bottleneck: reduction " + std::to_string(reduction) +
                                 " does not divide " + std::to_string(cout) + " output channels");
            reduce.emplace(cin, core_channels, 1, 1, 0, rng);
            reduce_bn.emplace(core_channels);
            expand.emplace(core_channels, cout, 1, 1, 0, rng);
            expand_bn.emplace(cout);
        }
        const int core_in = bottleneck ? core_channels : cin;
        const double stddev = std::sqrt(2.0 / static_cast<double>(core_channels));
        for (int d = 0; d <= adjacency.max_distance; ++d) {
            Parameter w(Tensor({core_channels, core_in}));
            for (std::int64_t i = 0; i < w.value.numel(); ++i) w.value[i] = rng.gauss(0.0, stddev);
            gcn_weights.push_back(std::move(w));
        }
    }

    Var forward(Tape& t, Var x, bool training) {
        Var h = x;
        if (bottleneck) {
            h = relu(t, reduce_bn->forward(t, reduce->forward(t, h), training));
        }
        std::vector<Var> wv;
        for (auto& w : gcn_weights) wv.push_back(t.param(w));
        Var core = spatial_gcn(t, h, wv, masked_adjacency(t, *adj, masks));
        Var pre = core_bn.forward(t, core, training);
        if (bottleneck) {
            pre = expand_bn->forward(t, expand->forward(t, relu(t, pre)), training);
        }
        return pre;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers) {
        if (reduce) {
            reduce->collect(prefix + ".reduce", ParamCategory::conv, params, buffers);
            reduce_bn->collect(prefix + ".reduce_bn", params, buffers);
        }
        for (std::size_t d = 0; d < gcn_weights.size(); ++d)
            params.push_back({prefix + ".gcn_w" + std::to_string(d), ParamCategory::conv, &gcn_weights[d]});
        for (std::size_t d = 0; d < masks.masks.size(); ++d)
            params.push_back({prefix + ".mask" + std::to_string(d), ParamCategory::mask, &masks.masks[d]});
        core_bn.collect(prefix + ".bn", params, buffers);
        if (expand) {
            expand->collect(prefix + ".expand", ParamCategory::conv, params, buffers);
            expand_bn->collect(prefix + ".expand_bn", params, buffers);
        }
    }
};

struct TemporalBlock {
    bool bottleneck;
    int channels, core_channels;

    std::optional<Conv2dLayer> reduce;
    std::optional<BatchNormLayer> reduce_bn;
    Conv2dLayer core;  // window x 1, stride on the frame axis
    BatchNormLayer core_bn;
    std::optional<Conv2dLayer> expand;
    std::optional<BatchNormLayer> expand_bn;

    TemporalBlock(int c, int window, int stride, bool bottleneck_, int reduction, Rng& rng)
        : bottleneck(bottleneck_),
          channels(c),
          core_channels(bottleneck_ ? c / reduction : c),
          core(bottleneck_ ? make_core(c, window, stride, reduction, rng)
                           : Conv2dLayer(c, c, window, stride, (window - 1) / 2, rng)),
          core_bn(core_channels) {
        if (bottleneck) {
            reduce.emplace(c, core_channels, 1, 1, 0, rng);
            reduce_bn.emplace(core_channels);
            expand.emplace(core_channels, c, 1, 1, 0, rng);
            expand_bn.emplace(c);
        }
    }

    Var forward(Tape& t, Var x, bool training) {
        Var h = x;
        if (bottleneck) h = relu(t, reduce_bn->forward(t, reduce->forward(t, h), training));
        Var pre = core_bn.forward(t, core.forward(t, h), training);
        if (bottleneck) pre = expand_bn->forward(t, expand->forward(t, relu(t, pre)), training);
        return pre;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers) {
        if (reduce) {
            reduce->collect(prefix + ".reduce", ParamCategory::conv, params, buffers);
            reduce_bn->collect(prefix + ".reduce_bn", params, buffers);
        }
        core.collect(prefix + ".conv", ParamCategory::conv, params, buffers);
        core_bn.collect(prefix + ".bn", params, buffers);
        if (expand) {
            expand->collect(prefix + ".expand", ParamCategory::conv, params, buffers);
            expand_bn->collect(prefix + ".expand_bn", params, buffers);
        }
    }

private:
    static Conv2dLayer make_core(int c, int window, int stride, int reduction, Rng& rng) {
        if (reduction < 1 || c % reduction != 0)
            throw spec_error("bottleneck: reduction " + std::to_string(reduction) +
                             " does not divide " + std::to_string(c) + " channels");
        const int mid = c / reduction;
        return Conv2dLayer(mid, mid, window, stride, (window - 1) / 2, rng);
    }
};

// Identity when shapes match, otherwise a 1x1 projection (with the matching
// frame stride) followed by BatchNorm, no activation.
struct ResidualShortcut {
    std::optional<Conv2dLayer> proj;
    std::optional<BatchNormLayer> bn;

    ResidualShortcut(int cin, int cout, int stride, Rng& rng) {
        if (cin != cout || stride != 1) {
            proj.emplace(cin, cout, 1, stride, 0, rng);
            bn.emplace(cout);
        }
    }

    bool is_identity() const { return !proj.has_value(); }

    Var forward(Tape& t, Var x, bool training) {
        if (!proj) return x;
        return bn->forward(t, proj->forward(t, x), training);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers) {
        if (proj) {
            proj->collect(prefix + ".proj", ParamCategory::conv, params, buffers);
            bn->collect(prefix + ".proj_bn", params, buffers);
        }
    }
};

enum class BlockKind { basic, bottleneck };
enum class ResidualKind { none, block, module, dense };

inline bool residual_has_block(ResidualKind k) {
    return k == ResidualKind::block || k == ResidualKind::dense;
}
inline bool residual_has_module(ResidualKind k) {
    return k == ResidualKind::module || k == ResidualKind::dense;
}

// One ResGCN module: a spatial block then a temporal block, with residual
// links added to the pre-activation sums according to the residual kind.
struct ResGCNModule {
    int in_channels, out_channels, stride;
    ResidualKind residual;

    SpatialBlock spatial;
    TemporalBlock temporal;
    std::optional<ResidualShortcut> spatial_short;
    std::optional<ResidualShortcut> temporal_short;
    std::optional<ResidualShortcut> module_short;

    ResGCNModule(int cin, int cout, int stride_, BlockKind kind, int reduction, int window,
                 ResidualKind residual_, const AdjacencySet& adj, Rng& rng)
        : in_channels(cin),
          out_channels(cout),
          stride((check_stride(stride_), stride_)),
          residual(residual_),
          spatial(cin, cout, kind == BlockKind::bottleneck, reduction, adj, rng),
          temporal(cout, window, stride_, kind == BlockKind::bottleneck, reduction, rng) {
        if (residual_has_block(residual)) {
            spatial_short.emplace(cin, cout, 1, rng);
            temporal_short.emplace(cout, cout, stride_, rng);
        }
        if (residual_has_module(residual)) module_short.emplace(cin, cout, stride_, rng);
    }

    Var forward(Tape& t, Var x, bool training) {
        Var pre_s = spatial.forward(t, x, training);
        if (spatial_short) pre_s = add(t, pre_s, spatial_short->forward(t, x, training));
        Var a = relu(t, pre_s);
        Var pre_t = temporal.forward(t, a, training);
        if (temporal_short) pre_t = add(t, pre_t, temporal_short->forward(t, a, training));
        if (module_short) pre_t = add(t, pre_t, module_short->forward(t, x, training));
        return relu(t, pre_t);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers) {
        spatial.collect(prefix + ".s", params, buffers);
        if (spatial_short) spatial_short->collect(prefix + ".s_res", params, buffers);
        temporal.collect(prefix + ".t", params, buffers);
        if (temporal_short) temporal_short->collect(prefix + ".t_res", params, buffers);
        if (module_short) module_short->collect(prefix + ".m_res", params, buffers);
    }

private:
    static void check_stride(int stride) {
        if (stride != 1 && stride != 2)
            throw spec_error("module: frame stride must be 1 or 2, got " + std::to_string(stride));
    }
};

}  // namespace resgcn
