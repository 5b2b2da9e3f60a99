#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "resgcn/attention.hpp"
#include "resgcn/graph.hpp"
#include "resgcn/layers.hpp"
#include "resgcn/preprocess.hpp"

namespace resgcn {

struct StructureEntry {
    BlockKind kind;
    int count;
    bool operator==(const StructureEntry&) const = default;
};

// Structure strings like "[B1,N2,N3,N3]": four (kind, count) entries, B for
// basic blocks and N for bottleneck blocks.
inline std::vector<StructureEntry> parse_structure(const std::string& s) {
    auto fail = [&](std::size_t pos, const std::string& why) {
        throw parse_error("structure '" + s + "': " + why + " at position " + std::to_string(pos));
    };
    std::size_t i = 0;
    if (s.empty() || s[i] != '[') fail(0, "expected '['");
    ++i;
    std::vector<StructureEntry> entries;
    for (;;) {
        if (i >= s.size()) fail(i, "unterminated structure");
        StructureEntry e{};
        if (s[i] == 'B') e.kind = BlockKind::basic;
        else if (s[i] == 'N') e.kind = BlockKind::bottleneck;
        else fail(i, std::string("expected block kind B or N, got '") + s[i] + "'");
        ++i;
        std::size_t digits = 0;
        int count = 0;
        while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
            count = count * 10 + (s[i] - '0');
            ++i;
            ++digits;
        }
        if (digits == 0) fail(i, "expected a module count");
        if (count < 1) fail(i, "module count must be at least 1");
        e.count = count;
        entries.push_back(e);
        if (i >= s.size()) fail(i, "unterminated structure");
        if (s[i] == ']') {
            ++i;
            break;
        }
        if (s[i] != ',') fail(i, std::string("expected ',' or ']', got '") + s[i] + "'");
        ++i;
    }
    if (i != s.size()) fail(i, "trailing characters");
    if (entries.size() != 4)
        throw parse_error("structure '" + s + "': expected exactly 4 parts, got " +
                          std::to_string(entries.size()));
    return entries;
}

inline std::string structure_to_string(const std::vector<StructureEntry>& entries) {
    std::string s = "[";
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i) s += ',';
        s += entries[i].kind == BlockKind::basic ? 'B' : 'N';
        s += std::to_string(entries[i].count);
    }
    return s + "]";
}

inline const char* residual_kind_name(ResidualKind k) {
    switch (k) {
        case ResidualKind::none: return "none";
        case ResidualKind::block: return "block";
        case ResidualKind::module: return "module";
        case ResidualKind::dense: return "dense";
    }
    return "?";
}

inline ResidualKind residual_kind_from_name(const std::string& s) {
    if (s == "none") return ResidualKind::none;
    if (s == "block") return ResidualKind::block;
    if (s == "module") return ResidualKind::module;
    if (s == "dense") return ResidualKind::dense;
    throw usage_error("unknown residual kind '" + s + "'");
}

// Everything needed to build a model. channel_plan gives the widths of the
// four structure parts: input branches run at plan[0] / plan[1] with the last
// branch module exiting at plan[1]/2, the fused mainstream at plan[2] and
// plan[3]. Parts 3 and 4 open with frame stride 2.
struct ModelSpec {
    std::vector<StructureEntry> structure;  // 4 entries
    std::vector<int> channel_plan = {64, 64, 128, 256};
    int num_classes = 60;
    bool part_attention = false;
    ResidualKind residual = ResidualKind::block;
    int reduction = 4;
    int temporal_window = 9;
    int max_distance = 2;
    int attention_reduction = 4;

    void validate() const {
        if (structure.size() != 4) throw spec_error("model spec: structure must have 4 parts");
        if (channel_plan.size() != structure.size())
            throw spec_error("model spec: channel plan has " + std::to_string(channel_plan.size()) +
                             " widths for " + std::to_string(structure.size()) + " parts");
        for (int w : channel_plan)
            if (w < 1) throw spec_error("model spec: non-positive channel width");
        if (channel_plan[1] % 2 != 0)
            throw spec_error("model spec: part 2 width must be even (branch exit is half width)");
        if (num_classes < 2) throw spec_error("model spec: need at least 2 classes");
        if (temporal_window < 1 || temporal_window % 2 == 0)
            throw spec_error("model spec: temporal window must be odd and positive");
        if (max_distance < 0) throw spec_error("model spec: negative max distance");
    }

    int branch_exit_channels() const { return channel_plan[1] / 2; }
    int fused_channels() const { return 3 * branch_exit_channels(); }

    nlohmann::json to_json() const {
        return nlohmann::json{{"structure", structure_to_string(structure)},
                              {"channel_plan", channel_plan},
                              {"num_classes", num_classes},
                              {"part_attention", part_attention},
                              {"residual", residual_kind_name(residual)},
                              {"reduction", reduction},
                              {"temporal_window", temporal_window},
                              {"max_distance", max_distance},
                              {"attention_reduction", attention_reduction}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        try {
            s.structure = parse_structure(j.at("structure").get<std::string>());
            s.channel_plan = j.at("channel_plan").get<std::vector<int>>();
            s.num_classes = j.at("num_classes").get<int>();
            s.part_attention = j.at("part_attention").get<bool>();
            s.residual = residual_kind_from_name(j.at("residual").get<std::string>());
            s.reduction = j.at("reduction").get<int>();
            s.temporal_window = j.at("temporal_window").get<int>();
            s.max_distance = j.at("max_distance").get<int>();
            s.attention_reduction = j.value("attention_reduction", 4);
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(std::string("model spec json: ") + e.what());
        }
        s.validate();
        return s;
    }
};

// The assembled network: three weight-independent input branches over the
// joint / velocity / bone features (structure parts 1-2), channel
// concatenation, a mainstream of parts 3-4 (first module of each at frame
// stride 2, each module followed by part attention when enabled), then global
// mean pooling and a fully connected classifier.
class ResGCNModel {
public:
    ResGCNModel(ModelSpec spec, SkeletonGraph graph, std::uint64_t seed = 1)
        : spec_(std::move(spec)), graph_(std::move(graph)) {
        spec_.validate();
        graph_.validate();
        adj_ = build_adjacency(graph_.edges, graph_.num_joints, spec_.max_distance);
        Rng rng(seed);

        const auto& st = spec_.structure;
        for (int b = 0; b < 3; ++b) {
            Branch br;
            int c = 6;
            for (int m = 0; m < st[0].count; ++m) {
                br.modules.emplace_back(c, spec_.channel_plan[0], 1, st[0].kind, spec_.reduction,
                                        spec_.temporal_window, spec_.residual, adj_, rng);
                c = spec_.channel_plan[0];
            }
            for (int m = 0; m < st[1].count; ++m) {
                const bool last = m + 1 == st[1].count;
                const int out = last ? spec_.branch_exit_channels() : spec_.channel_plan[1];
                br.modules.emplace_back(c, out, 1, st[1].kind, spec_.reduction, spec_.temporal_window,
                                        spec_.residual, adj_, rng);
                c = out;
            }
            branches_.push_back(std::move(br));
        }

        int c = spec_.fused_channels();
        for (int part = 2; part < 4; ++part) {
            for (int m = 0; m < st[static_cast<std::size_t>(part)].count; ++m) {
                const int out = spec_.channel_plan[static_cast<std::size_t>(part)];
                const int stride = m == 0 ? 2 : 1;
                mainstream_.emplace_back(c, out, stride, st[static_cast<std::size_t>(part)].kind,
                                         spec_.reduction, spec_.temporal_window, spec_.residual, adj_, rng);
                mainstream_part_.push_back(part);
                if (spec_.part_attention)
                    attention_.emplace_back(out, spec_.attention_reduction, graph_, rng);
                c = out;
            }
        }

        classifier_ = std::make_unique<LinearLayer>(c, spec_.num_classes, rng);
    }

    struct ForwardResult {
        Var logits;          // [N, num_classes]
        Var features;        // last pre-pooling feature map [N, C, T', V]
        Var last_attention;  // [N, P, C] of the final attention block; invalid without attention
    };

    // branches: joint, velocity, bone features, each [N, 6, T, V].
    ForwardResult forward(Tape& t, const std::array<Var, 3>& branch_inputs, bool training) {
        std::vector<Var> fused;
        for (int b = 0; b < 3; ++b) {
            Var h = branch_inputs[static_cast<std::size_t>(b)];
            for (auto& mod : branches_[static_cast<std::size_t>(b)].modules)
                h = mod.forward(t, h, training);
            fused.push_back(h);
        }
        Var h = concat(t, fused, 1);
        Var last_att;
        for (std::size_t m = 0; m < mainstream_.size(); ++m) {
            h = mainstream_[m].forward(t, h, training);
            if (spec_.part_attention) {
                last_att = attention_[m].attention(t, h, training);
                h = apply_part_attention(t, h, last_att, attention_[m].part_of);
            }
        }
        Var pooled = mean_pool(t, h, {2, 3});
        return {classifier_->forward(t, pooled), h, last_att};
    }

    Var forward_logits(Tape& t, const std::array<Var, 3>& branch_inputs, bool training) {
        return forward(t, branch_inputs, training).logits;
    }

    const ModelSpec& spec() const { return spec_; }
    const SkeletonGraph& graph() const { return graph_; }
    const AdjacencySet& adjacency() const { return adj_; }
    LinearLayer& classifier() { return *classifier_; }
    std::size_t mainstream_modules() const { return mainstream_.size(); }
    PartAttention& attention_block(std::size_t i) { return attention_.at(i); }

    std::size_t module_count() const {
        std::size_t n = mainstream_.size();
        for (const auto& b : branches_) n += b.modules.size();
        return n;
    }

    std::vector<NamedParam> named_params() {
        std::vector<NamedParam> params;
        std::vector<NamedBuffer> buffers;
        collect(params, buffers);
        return params;
    }

    std::vector<NamedBuffer> named_buffers() {
        std::vector<NamedParam> params;
        std::vector<NamedBuffer> buffers;
        collect(params, buffers);
        return buffers;
    }

    void collect(std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) {
        for (std::size_t b = 0; b < branches_.size(); ++b) {
            const auto& st = spec_.structure;
            for (std::size_t m = 0; m < branches_[b].modules.size(); ++m) {
                const int part = static_cast<int>(m) < st[0].count ? 1 : 2;
                const int local = part == 1 ? static_cast<int>(m) : static_cast<int>(m) - st[0].count;
                branches_[b].modules[m].collect("branch" + std::to_string(b) + ".p" +
                                                    std::to_string(part) + "m" + std::to_string(local),
                                                params, buffers);
            }
        }
        std::map<int, int> local_index;
        for (std::size_t m = 0; m < mainstream_.size(); ++m) {
            const int part = mainstream_part_[m];
            const int local = local_index[part]++;
            const std::string prefix =
                "main.p" + std::to_string(part + 1) + "m" + std::to_string(local);
            mainstream_[m].collect(prefix, params, buffers);
            if (spec_.part_attention) attention_[m].collect(prefix + ".att", params, buffers);
        }
        classifier_->collect("classifier", ParamCategory::classifier, params, buffers);
    }

    void zero_grad() {
        for (auto& np : named_params()) np.param->zero_grad();
    }

private:
    struct Branch {
        std::vector<ResGCNModule> modules;
    };

    ModelSpec spec_;
    SkeletonGraph graph_;
    AdjacencySet adj_;
    std::vector<Branch> branches_;
    std::vector<ResGCNModule> mainstream_;
    std::vector<int> mainstream_part_;  // 2 or 3 (0-based structure part)
    std::vector<PartAttention> attention_;
    std::unique_ptr<LinearLayer> classifier_;
};

// --- parameter counting -------------------------------------------------------

struct ParamCountBreakdown {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_module;
    std::map<std::string, std::int64_t> per_category;
};

// Exact count of trainable scalars, grouped by module prefix and by category.
// Purely structural: depends only on the ModelSpec and graph.
inline ParamCountBreakdown count_params(ResGCNModel& model) {
    ParamCountBreakdown out;
    std::vector<std::pair<std::string, std::int64_t>> modules;
    for (const auto& np : model.named_params()) {
        if (!np.param->trainable) continue;
        const std::int64_t n = np.param->value.numel();
        out.total += n;
        out.per_category[param_category_name(np.category)] += n;
        const auto d1 = np.name.find('.');
        const auto d2 = d1 == std::string::npos ? d1 : np.name.find('.', d1 + 1);
        const std::string key = np.name.substr(0, d2 != std::string::npos ? d2 : d1);
        if (!modules.empty() && modules.back().first == key) {
            modules.back().second += n;
        } else {
            modules.emplace_back(key, n);
        }
    }
    out.per_module = std::move(modules);
    return out;
}

inline ParamCountBreakdown count_params(const ModelSpec& spec, const SkeletonGraph& graph) {
    ResGCNModel model(spec, graph, 1);
    return count_params(model);
}

}  // namespace resgcn
