#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "resgcn/checkpoint.hpp"
#include "resgcn/dataset.hpp"
#include "resgcn/model.hpp"
#include "resgcn/preprocess.hpp"
#include "resgcn/rng.hpp"

namespace resgcn {

struct TrainConfig {
    double base_lr = 0.1;
    std::vector<int> decay_epochs = {20, 50};
    double decay_factor = 10.0;
    int warmup_epochs = 10;
    int max_epochs = 70;
    double momentum = 0.9;  // Nesterov
    double weight_decay = 1e-4;
    int batch_size = 16;
    std::uint64_t seed = 1;
    int eval_every = 1;  // epochs between held-out evaluations; 0 = only at the end

    void validate() const {
        if (base_lr <= 0.0 || decay_factor <= 0.0) throw usage_error("train config: rates must be positive");
        if (warmup_epochs < 0 || max_epochs < 1 || batch_size < 1)
            throw usage_error("train config: bad epoch or batch settings");
        for (int e : decay_epochs)
            if (e <= warmup_epochs)
                throw usage_error("train config: decay epoch " + std::to_string(e) +
                                  " inside the warmup phase");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"base_lr", base_lr},
                              {"decay_epochs", decay_epochs},
                              {"decay_factor", decay_factor},
                              {"warmup_epochs", warmup_epochs},
                              {"max_epochs", max_epochs},
                              {"momentum", momentum},
                              {"weight_decay", weight_decay},
                              {"batch_size", batch_size},
                              {"seed", seed},
                              {"eval_every", eval_every}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        try {
            c.base_lr = j.value("base_lr", c.base_lr);
            if (j.contains("decay_epochs")) c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
            c.decay_factor = j.value("decay_factor", c.decay_factor);
            c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
            c.max_epochs = j.value("max_epochs", c.max_epochs);
            c.momentum = j.value("momentum", c.momentum);
            c.weight_decay = j.value("weight_decay", c.weight_decay);
            c.batch_size = j.value("batch_size", c.batch_size);
            c.seed = j.value("seed", c.seed);
            c.eval_every = j.value("eval_every", c.eval_every);
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(std::string("train config json: ") + e.what());
        }
        c.validate();
        return c;
    }
};

// Linear warmup over the first warmup_epochs, then the base rate divided by
// decay_factor once per passed decay epoch.
inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.max_epochs)
        throw usage_error("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0," +
                          std::to_string(cfg.max_epochs) + ")");
    if (epoch < cfg.warmup_epochs)
        return cfg.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
    double lr = cfg.base_lr;
    for (int d : cfg.decay_epochs)
        if (epoch >= d) lr /= cfg.decay_factor;
    return lr;
}

// One SGD update with Nesterov momentum:
//   g <- grad + weight_decay * w;  v <- momentum * v + g;  w <- w - lr * (g + momentum * v)
// Weight decay only applies to parameters flagged for it.
inline void sgd_nesterov_step(Parameter& p, Tensor& velocity, double lr, double momentum,
                              double weight_decay) {
    if (!velocity.same_shape(p.value))
        throw dimension_error("sgd: velocity shape " + Tensor::shape_string(velocity.shape()) +
                              " vs parameter " + Tensor::shape_string(p.value.shape()));
    const double wd = p.decay ? weight_decay : 0.0;
    const std::int64_t n = p.value.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double g = p.grad[i] + wd * p.value[i];
        velocity[i] = momentum * velocity[i] + g;
        p.value[i] -= lr * (g + momentum * velocity[i]);
    }
}

class SgdNesterov {
public:
    SgdNesterov(ResGCNModel& model, double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        for (auto& np : model.named_params()) velocity_.emplace_back(Tensor::zeros(np.param->value.shape()));
    }

    void step(ResGCNModel& model, double lr) {
        auto params = model.named_params();
        if (params.size() != velocity_.size()) throw state_error("sgd: optimizer bound to a different model");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].param->trainable)
                sgd_nesterov_step(*params[i].param, velocity_[i], lr, momentum_, weight_decay_);
    }

private:
    double momentum_, weight_decay_;
    std::vector<Tensor> velocity_;
};

// --- dataset in memory -------------------------------------------------------

struct Sample {
    std::array<BranchInput, 3> branches;  // joint, velocity, bone
    int label = 0;
};

struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;  // parallel to manifest.entries
};

inline std::string branch_file_name(const std::string& sequence_path, BranchKind kind) {
    return std::filesystem::path(sequence_path).stem().string() + "." + branch_kind_name(kind) + ".skb";
}

// Reads a directory produced by the preprocess step: manifest.json plus one
// .skb file per sequence and branch kind.
inline LoadedDataset load_branch_dataset(const std::string& dir) {
    LoadedDataset data;
    data.manifest = DatasetManifest::load((std::filesystem::path(dir) / "manifest.json").string());
    for (const auto& e : data.manifest.entries) {
        Sample s;
        for (int k = 0; k < 3; ++k) {
            const auto path = std::filesystem::path(dir) / branch_file_name(e.path, static_cast<BranchKind>(k));
            s.branches[static_cast<std::size_t>(k)] = load_branch(path.string());
            if (s.branches[static_cast<std::size_t>(k)].kind != static_cast<BranchKind>(k))
                throw parse_error("dataset: kind tag mismatch in " + path.string());
        }
        s.label = e.label;
        data.samples.push_back(std::move(s));
    }
    return data;
}

// Runs the whole preprocess step for one dataset directory.
inline void preprocess_dataset(const std::string& in_dir, const std::string& out_dir,
                               const SkeletonGraph& graph, int target_frames = 0) {
    auto manifest = DatasetManifest::load((std::filesystem::path(in_dir) / "manifest.json").string());
    std::filesystem::create_directories(out_dir);
    for (const auto& e : manifest.entries) {
        SkeletonSequence seq = load_skl((std::filesystem::path(in_dir) / e.path).string());
        if (target_frames > 0) seq = pad_or_crop(seq, target_frames);
        auto branches = build_branches(seq, graph);
        for (const auto& b : branches)
            save_branch(b, (std::filesystem::path(out_dir) / branch_file_name(e.path, b.kind)).string());
    }
    manifest.save((std::filesystem::path(out_dir) / "manifest.json").string());
}

// --- batching with body folding ------------------------------------------------
//
// The body axis folds into the batch: every non-empty body becomes one row,
// and a constant averaging matrix maps row logits back to per-sample logits.
// A sample with no non-empty body contributes its zero body as a single row.

struct FoldedBatch {
    std::array<Tensor, 3> inputs;  // [R, 6, T, V]
    Tensor fold;                   // [S, R]
    std::vector<int> labels;       // S
};

inline FoldedBatch fold_samples(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw usage_error("fold_samples: empty batch");
    const Tensor& probe = batch[0]->branches[0].features;
    const int T = probe.dim(1), V = probe.dim(2);

    std::vector<std::vector<int>> bodies_of;  // per sample, body slots used
    int rows = 0;
    for (const Sample* s : batch) {
        const Tensor& joint = s->branches[0].features;
        if (joint.dim(1) != T || joint.dim(2) != V)
            throw dimension_error("fold_samples: inconsistent sequence shapes in one batch");
        std::vector<int> present;
        for (int m = 0; m < joint.dim(3); ++m) {
            bool any = false;
            for (int c = 0; c < 6 && !any; ++c)
                for (int t = 0; t < T && !any; ++t)
                    for (int v = 0; v < V && !any; ++v)
                        if (joint.at(c, t, v, m) != 0.0) any = true;
            if (any) present.push_back(m);
        }
        if (present.empty()) present.push_back(0);
        rows += static_cast<int>(present.size());
        bodies_of.push_back(std::move(present));
    }

    FoldedBatch out;
    const int S = static_cast<int>(batch.size());
    out.fold = Tensor({S, rows});
    for (int k = 0; k < 3; ++k) out.inputs[static_cast<std::size_t>(k)] = Tensor({rows, 6, T, V});
    int row = 0;
    for (int i = 0; i < S; ++i) {
        const auto& present = bodies_of[static_cast<std::size_t>(i)];
        const double w = 1.0 / static_cast<double>(present.size());
        for (int m : present) {
            out.fold.at(i, row) = w;
            for (int k = 0; k < 3; ++k) {
                const Tensor& f = batch[static_cast<std::size_t>(i)]->branches[static_cast<std::size_t>(k)].features;
                Tensor& dst = out.inputs[static_cast<std::size_t>(k)];
                for (int c = 0; c < 6; ++c)
                    for (int t = 0; t < T; ++t)
                        for (int v = 0; v < V; ++v) dst.at(row, c, t, v) = f.at(c, t, v, m);
            }
            ++row;
        }
        out.labels.push_back(batch[static_cast<std::size_t>(i)]->label);
    }
    return out;
}

// Per-sample logits for a batch: rows through the network, then the fold
// average. Differentiable end to end.
inline Var batch_logits(Tape& t, ResGCNModel& model, const FoldedBatch& batch, bool training) {
    std::array<Var, 3> rows = {t.constant(batch.inputs[0]), t.constant(batch.inputs[1]),
                               t.constant(batch.inputs[2])};
    Var row_logits = model.forward_logits(t, rows, training);
    return matmul(t, t.constant(batch.fold), row_logits);
}

// --- training and evaluation ----------------------------------------------------

struct EvalReport {
    double top1 = 0.0;
    std::vector<double> per_class;
    std::vector<std::vector<int>> confusion;  // [true][predicted]
    int total = 0;
};

inline EvalReport evaluate(ResGCNModel& model, const LoadedDataset& data,
                           const std::vector<int>& indices, int batch_size = 16) {
    if (indices.empty()) throw usage_error("evaluate: empty split");
    const int K = model.spec().num_classes;
    EvalReport rep;
    rep.per_class.assign(static_cast<std::size_t>(K), 0.0);
    rep.confusion.assign(static_cast<std::size_t>(K), std::vector<int>(static_cast<std::size_t>(K), 0));
    std::vector<int> class_total(static_cast<std::size_t>(K), 0);
    int correct = 0;
    for (std::size_t at = 0; at < indices.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<const Sample*> batch;
        for (std::size_t i = at; i < std::min(indices.size(), at + static_cast<std::size_t>(batch_size)); ++i)
            batch.push_back(&data.samples[static_cast<std::size_t>(indices[i])]);
        auto folded = fold_samples(batch);
        Tape t(false);
        const Tensor& logits = t.value(batch_logits(t, model, folded, false));
        for (int s = 0; s < static_cast<int>(batch.size()); ++s) {
            int arg = 0;
            for (int k = 1; k < K; ++k)
                if (logits.at(s, k) > logits.at(s, arg)) arg = k;
            const int truth = folded.labels[static_cast<std::size_t>(s)];
            ++rep.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(arg)];
            ++class_total[static_cast<std::size_t>(truth)];
            if (arg == truth) ++correct;
        }
    }
    rep.total = static_cast<int>(indices.size());
    rep.top1 = static_cast<double>(correct) / rep.total;
    for (int k = 0; k < K; ++k)
        if (class_total[static_cast<std::size_t>(k)] > 0)
            rep.per_class[static_cast<std::size_t>(k)] =
                static_cast<double>(rep.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]) /
                class_total[static_cast<std::size_t>(k)];
    return rep;
}

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double train_acc = 0.0;
    double eval_acc = -1.0;  // negative when the epoch had no evaluation

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"train_acc", train_acc}};
        if (eval_acc >= 0.0) j["eval_acc"] = eval_acc;
        return j;
    }
};

struct TrainResult {
    std::vector<EpochLog> log;
    double final_eval_acc = -1.0;
};

// Epochs of seeded-shuffle minibatch SGD. Every log line is machine-readable
// JSON; the effective configuration is echoed as the first line. `stop_when`
// (optional) is polled after each epoch with the latest log entry.
inline TrainResult train(ResGCNModel& model, const LoadedDataset& data, const TrainConfig& cfg,
                         std::ostream* log_stream = nullptr,
                         const std::function<bool(const EpochLog&)>& stop_when = nullptr) {
    cfg.validate();
    auto train_ix = data.manifest.train_indices();
    auto eval_ix = data.manifest.eval_indices();
    if (train_ix.empty()) throw usage_error("train: empty training split");

    if (log_stream)
        *log_stream << nlohmann::json{{"config", cfg.to_json()},
                                      {"model", model.spec().to_json()},
                                      {"train_sequences", train_ix.size()},
                                      {"eval_sequences", eval_ix.size()}}
                               .dump()
                    << "\n";

    SgdNesterov opt(model, cfg.momentum, cfg.weight_decay);
    Rng rng(cfg.seed);
    TrainResult result;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at_epoch(epoch, cfg);
        rng.shuffle(train_ix);
        double loss_sum = 0.0;
        int seen = 0, correct = 0;
        for (std::size_t at = 0; at < train_ix.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const Sample*> batch;
            for (std::size_t i = at; i < std::min(train_ix.size(), at + static_cast<std::size_t>(cfg.batch_size)); ++i)
                batch.push_back(&data.samples[static_cast<std::size_t>(train_ix[i])]);
            auto folded = fold_samples(batch);
            Tape t;
            Var logits = batch_logits(t, model, folded, true);
            Var loss = cross_entropy(t, logits, folded.labels);
            model.zero_grad();
            t.backward(loss);
            opt.step(model, lr);

            const Tensor& lv = t.value(logits);
            const int K = model.spec().num_classes;
            for (int s = 0; s < static_cast<int>(batch.size()); ++s) {
                int arg = 0;
                for (int k = 1; k < K; ++k)
                    if (lv.at(s, k) > lv.at(s, arg)) arg = k;
                if (arg == folded.labels[static_cast<std::size_t>(s)]) ++correct;
            }
            loss_sum += t.value(loss)[0] * static_cast<double>(batch.size());
            seen += static_cast<int>(batch.size());
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        entry.loss = loss_sum / seen;
        entry.train_acc = static_cast<double>(correct) / seen;
        const bool last = epoch + 1 == cfg.max_epochs;
        if (!eval_ix.empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
            entry.eval_acc = evaluate(model, data, eval_ix, cfg.batch_size).top1;
            result.final_eval_acc = entry.eval_acc;
        }
        if (log_stream) *log_stream << entry.to_json().dump() << "\n";
        result.log.push_back(entry);
        if (stop_when && stop_when(entry)) break;
    }
    return result;
}

}  // namespace resgcn
