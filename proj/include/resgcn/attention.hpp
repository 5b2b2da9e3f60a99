#pragma once

#include <string>
#include <vector>

#include "resgcn/autograd.hpp"
#include "resgcn/graph.hpp"
#include "resgcn/layers.hpp"
#include "resgcn/rng.hpp"

namespace resgcn {

// Rescale every joint's features by its body part's attention vector:
// out[n,c,t,v] = x[n,c,t,v] * att[n, part_of[v], c].
inline Var apply_part_attention(Tape& t, Var x, Var att, std::vector<int> part_of) {
    const Tensor& xv = t.value(x);
    const Tensor& av = t.value(att);
    if (xv.rank() != 4 || av.rank() != 3)
        throw dimension_error("apply_part_attention: expected x[N,C,T,V] and att[N,P,C]");
    const int N = xv.dim(0), C = xv.dim(1), T = xv.dim(2), V = xv.dim(3);
    const int P = av.dim(1);
    if (av.dim(0) != N || av.dim(2) != C)
        throw dimension_error("apply_part_attention: attention shape " +
                              Tensor::shape_string(av.shape()) + " does not match input " +
                              Tensor::shape_string(xv.shape()));
    if (static_cast<int>(part_of.size()) != V)
        throw dimension_error("apply_part_attention: part map covers " +
                              std::to_string(part_of.size()) + " joints, input has " + std::to_string(V));
    for (int v = 0; v < V; ++v)
        if (part_of[static_cast<std::size_t>(v)] < 0 || part_of[static_cast<std::size_t>(v)] >= P)
            throw spec_error("apply_part_attention: joint " + std::to_string(v + 1) +
                             " mapped to part " + std::to_string(part_of[static_cast<std::size_t>(v)]));

    Tensor out(xv.shape());
    parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
        for (std::int64_t n = nb; n < ne; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (n * C + c) * T * V;
                for (int tt = 0; tt < T; ++tt)
                    for (int v = 0; v < V; ++v) {
                        const std::int64_t i = base + static_cast<std::int64_t>(tt) * V + v;
                        out[i] = xv[i] * av[(n * P + part_of[static_cast<std::size_t>(v)]) * C + c];
                    }
            }
    });

    return t.push(std::move(out), {x, att}, [x, att, part_of, N, C, T, V, P](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        const Tensor& xv = tp.value(x);
        const Tensor& av = tp.value(att);
        if (tp.tracked(x)) {
            Tensor& gx = tp.gbuf(x);
            parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
                for (std::int64_t n = nb; n < ne; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (n * C + c) * T * V;
                        for (int tt = 0; tt < T; ++tt)
                            for (int v = 0; v < V; ++v) {
                                const std::int64_t i = base + static_cast<std::int64_t>(tt) * V + v;
                                gx[i] += g[i] * av[(n * P + part_of[static_cast<std::size_t>(v)]) * C + c];
                            }
                    }
            });
        }
        if (tp.tracked(att)) {
            Tensor& ga = tp.gbuf(att);
            parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
                for (std::int64_t n = nb; n < ne; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (n * C + c) * T * V;
                        for (int tt = 0; tt < T; ++tt)
                            for (int v = 0; v < V; ++v) {
                                const std::int64_t i = base + static_cast<std::int64_t>(tt) * V + v;
                                ga[(n * P + part_of[static_cast<std::size_t>(v)]) * C + c] += g[i] * xv[i];
                            }
                    }
            });
        }
    });
}

// Trainable scalar count of a part attention block at a given width.
inline std::int64_t part_att_param_count(int channels, int reduction, int parts = 5) {
    if (reduction < 1 || channels % reduction != 0)
        throw spec_error("part attention: reduction " + std::to_string(reduction) +
                         " does not divide " + std::to_string(channels) + " channels");
    const std::int64_t mid = channels / reduction;
    return static_cast<std::int64_t>(channels) * mid + static_cast<std::int64_t>(parts) * mid * channels +
           2 * mid;
}

// Part-wise attention: pool the whole sequence to one vector per sample,
// reduce through a shared projection (BatchNorm + ReLU), project per part,
// softmax across parts per channel, and rescale each part's joints. Joints
// keep their original order.
struct PartAttention {
    int channels, reduced, num_parts;
    std::vector<int> part_of;

    Parameter w_shared;               // [C, C/r]
    BatchNormLayer bn;                // over C/r
    std::vector<Parameter> w_part;    // P of [C/r, C]

    PartAttention(int channels_, int reduction, const SkeletonGraph& graph, Rng& rng)
        : channels(channels_),
          reduced(check_reduced(channels_, reduction)),
          num_parts(static_cast<int>(graph.parts.size())),
          part_of(graph.part_of),
          w_shared(Tensor({channels_, reduced})),
          bn(reduced) {
        const double s_shared = std::sqrt(2.0 / static_cast<double>(channels));
        for (std::int64_t i = 0; i < w_shared.value.numel(); ++i)
            w_shared.value[i] = rng.gauss(0.0, s_shared);
        const double s_part = std::sqrt(2.0 / static_cast<double>(reduced));
        for (int p = 0; p < num_parts; ++p) {
            Parameter w(Tensor({reduced, channels}));
            for (std::int64_t i = 0; i < w.value.numel(); ++i) w.value[i] = rng.gauss(0.0, s_part);
            w_part.push_back(std::move(w));
        }
    }

    // Attention weights [N, P, C]; softmax-normalized across the part axis.
    Var attention(Tape& t, Var x, bool training) {
        Var pooled = mean_pool(t, x, {2, 3});                               // [N, C]
        Var h = relu(t, bn.forward(t, matmul(t, pooled, t.param(w_shared)), training));
        std::vector<Var> logits;
        const int n = t.value(x).dim(0);
        for (auto& wp : w_part)
            logits.push_back(reshape(t, matmul(t, h, t.param(wp)), {n, 1, channels}));
        return softmax(t, concat(t, logits, 1), 1);
    }

    Var forward(Tape& t, Var x, bool training) {
        return apply_part_attention(t, x, attention(t, x, training), part_of);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& params,
                 std::vector<NamedBuffer>& buffers) {
        params.push_back({prefix + ".w_shared", ParamCategory::attention, &w_shared});
        bn.collect(prefix + ".bn", params, buffers, ParamCategory::attention);
        for (std::size_t p = 0; p < w_part.size(); ++p)
            params.push_back({prefix + ".w_part" + std::to_string(p), ParamCategory::attention, &w_part[p]});
    }

private:
    static int check_reduced(int channels, int reduction) {
        if (reduction < 1 || channels % reduction != 0)
            throw spec_error("part attention: reduction " + std::to_string(reduction) +
                             " does not divide " + std::to_string(channels) + " channels");
        return channels / reduction;
    }
};

}  // namespace resgcn
