#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "resgcn/train.hpp"
#include "support.hpp"

using namespace resgcn;

namespace {

TrainConfig default_config() { return TrainConfig{}; }

ModelSpec tiny_spec(int classes, bool attention) {
    ModelSpec s;
    s.structure = parse_structure("[B1,N1,N1,N1]");
    s.channel_plan = {8, 8, 8, 8};
    s.num_classes = classes;
    s.part_attention = attention;
    s.reduction = 2;
    s.temporal_window = 3;
    s.attention_reduction = 2;
    return s;
}

// Builds a small in-memory dataset without touching the filesystem.
LoadedDataset tiny_dataset(int classes, int per_class, int frames, std::uint64_t seed) {
    auto dir = std::filesystem::temp_directory_path() /
               ("resgcn_train_ds_" + std::to_string(seed) + "_" + std::to_string(classes));
    std::filesystem::remove_all(dir);
    synth_dataset(classes, per_class, frames, seed, dir.string());
    auto pre = dir.string() + "_pre";
    std::filesystem::remove_all(pre);
    preprocess_dataset(dir.string(), pre, SkeletonGraph::ntu25());
    auto data = load_branch_dataset(pre);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(pre);
    return data;
}

}  // namespace

TEST(LrSchedule, DefaultScheduleValues) {
    auto cfg = default_config();
    EXPECT_DOUBLE_EQ(lr_at_epoch(15, cfg), 0.1);
    EXPECT_DOUBLE_EQ(lr_at_epoch(25, cfg), 0.01);
    EXPECT_DOUBLE_EQ(lr_at_epoch(55, cfg), 0.001);
    EXPECT_DOUBLE_EQ(lr_at_epoch(0, cfg), 0.01);  // warmup ramp 1/10
    EXPECT_DOUBLE_EQ(lr_at_epoch(9, cfg), 0.1);   // warmup end
    EXPECT_THROW(lr_at_epoch(-1, cfg), usage_error);
    EXPECT_THROW(lr_at_epoch(70, cfg), usage_error);
}

TEST(LrSchedule, NonIncreasingAfterWarmupAndPiecewiseConstant) {
    auto cfg = default_config();
    double prev = lr_at_epoch(cfg.warmup_epochs, cfg);
    for (int e = cfg.warmup_epochs + 1; e < cfg.max_epochs; ++e) {
        const double lr = lr_at_epoch(e, cfg);
        EXPECT_LE(lr, prev);
        const bool at_decay = std::find(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), e) !=
                              cfg.decay_epochs.end();
        if (!at_decay) EXPECT_DOUBLE_EQ(lr, prev);
        prev = lr;
    }
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    Tape t;
    Var logits = t.constant(Tensor({2, 60}));
    const Tensor& l = t.value(cross_entropy(t, logits, {7, 42}));
    EXPECT_NEAR(l[0], std::log(60.0), 1e-12);
}

TEST(CrossEntropy, DecreasesWithMargin) {
    double prev = 1e300;
    for (double margin : {0.5, 1.0, 2.0, 4.0}) {
        Tape t;
        Tensor z({1, 4});
        z.at(0, 2) = margin;
        const double loss = t.value(cross_entropy(t, t.constant(z), {2}))[0];
        EXPECT_LT(loss, prev);
        prev = loss;
    }
}

TEST(CrossEntropy, LabelRangeAndGradient) {
    Tape t;
    Var logits = t.constant(Tensor({1, 3}));
    EXPECT_THROW(cross_entropy(t, logits, {3}), usage_error);
    EXPECT_THROW(cross_entropy(t, logits, {-1}), usage_error);

    Rng rng(3);
    Parameter w(testsupport::random_tensor({4, 3}, rng));
    Tensor x = testsupport::random_tensor({2, 4}, rng);
    auto loss = [&](bool with_grad) {
        Tape tp(with_grad);
        Var l = cross_entropy(tp, matmul(tp, tp.constant(x), tp.param(w)), {0, 2});
        if (with_grad) tp.backward(l);
        return tp.value(l)[0];
    };
    auto rep = testsupport::check_gradients({{"w", &w}}, loss, 1e-5, 1e-6, 1e-9);
    EXPECT_TRUE(rep.ok()) << rep.worst_param << " ratio " << rep.worst_ratio;
}

TEST(Sgd, DegenerateMomentumIsPlainStep) {
    Parameter p(Tensor({2}, {1.0, -2.0}));
    p.grad = Tensor({2}, {0.5, 0.25});
    Tensor v = Tensor::zeros({2});
    sgd_nesterov_step(p, v, 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.1 * 0.5);
    EXPECT_DOUBLE_EQ(p.value[1], -2.0 - 0.1 * 0.25);
}

TEST(Sgd, ZeroGradientShrinksTowardZero) {
    Parameter p(Tensor({1}, {4.0}));
    Tensor v = Tensor::zeros({1});
    sgd_nesterov_step(p, v, 0.5, 0.0, 0.01);
    // g = 0 + 0.01*4 = 0.04; w = 4 - 0.5*0.04
    EXPECT_DOUBLE_EQ(p.value[0], 4.0 - 0.5 * 0.04);
    EXPECT_LT(p.value[0], 4.0);
}

TEST(Sgd, MatchesHandIteratedRecurrence) {
    // Quadratic loss 0.5*w^2 (grad = w), two steps by hand.
    const double lr = 0.1, mu = 0.9, wd = 0.0;
    double w = 1.0, v = 0.0;
    Parameter p(Tensor({1}, {w}));
    Tensor vel = Tensor::zeros({1});
    for (int step = 0; step < 2; ++step) {
        const double g = w;  // + wd*w
        v = mu * v + g;
        w = w - lr * (g + mu * v);
        p.grad[0] = p.value[0];
        sgd_nesterov_step(p, vel, lr, mu, wd);
        EXPECT_DOUBLE_EQ(p.value[0], w) << "step " << step;
    }
}

TEST(Sgd, ZeroLearningRateLeavesWeightsUnchanged) {
    auto data = tiny_dataset(2, 3, 8, 5);
    ResGCNModel model(tiny_spec(2, false), SkeletonGraph::ntu25(), 7);
    auto before = model.named_params();
    std::vector<Tensor> snapshot;
    for (auto& np : before) snapshot.push_back(np.param->value);

    SgdNesterov opt(model, 0.9, 1e-4);
    std::vector<const Sample*> batch;
    for (const auto& s : data.samples) batch.push_back(&s);
    auto folded = fold_samples(batch);
    Tape t;
    Var loss = cross_entropy(t, batch_logits(t, model, folded, true), folded.labels);
    model.zero_grad();
    t.backward(loss);
    opt.step(model, 0.0);

    auto after = model.named_params();
    for (std::size_t i = 0; i < after.size(); ++i)
        EXPECT_EQ(after[i].param->value.vec(), snapshot[i].vec()) << after[i].name;
}

TEST(Sgd, WeightDecayExemptionsHonored) {
    ResGCNModel model(tiny_spec(2, true), SkeletonGraph::ntu25(), 7);
    for (auto& np : model.named_params()) {
        const bool is_bn = np.name.find("gamma") != std::string::npos ||
                           np.name.find("beta") != std::string::npos;
        const bool is_bias = np.name.find("bias") != std::string::npos;
        if (is_bn || is_bias)
            EXPECT_FALSE(np.param->decay) << np.name;
        else
            EXPECT_TRUE(np.param->decay) << np.name;
    }
}

TEST(Evaluate, ConstantLogitsHitLargestClassPrior) {
    auto data = tiny_dataset(2, 4, 8, 9);
    ResGCNModel model(tiny_spec(2, false), SkeletonGraph::ntu25(), 7);
    // Zero the classifier: logits are the bias, i.e. identical per class;
    // argmax resolves to class 0 deterministically.
    model.classifier().weight.value = Tensor::zeros(model.classifier().weight.value.shape());
    model.classifier().bias.value = Tensor::zeros(model.classifier().bias.value.shape());
    // Run one training forward so BatchNorm has statistics.
    std::vector<const Sample*> batch;
    for (const auto& s : data.samples) batch.push_back(&s);
    auto folded = fold_samples(batch);
    {
        Tape t;
        batch_logits(t, model, folded, true);
    }
    model.classifier().weight.value = Tensor::zeros(model.classifier().weight.value.shape());

    std::vector<int> all;
    for (int i = 0; i < static_cast<int>(data.samples.size()); ++i) all.push_back(i);
    auto rep = evaluate(model, data, all);
    int class0 = 0;
    for (const auto& e : data.manifest.entries) class0 += e.label == 0 ? 1 : 0;
    EXPECT_NEAR(rep.top1, static_cast<double>(class0) / data.samples.size(), 1e-12);
}

TEST(Evaluate, ConfusionRowSumsMatchClassCounts) {
    auto data = tiny_dataset(3, 4, 8, 11);
    ResGCNModel model(tiny_spec(3, false), SkeletonGraph::ntu25(), 3);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.decay_epochs = {};
    cfg.base_lr = 0.01;
    cfg.batch_size = 6;
    cfg.seed = 1;
    train(model, data, cfg);
    std::vector<int> all;
    for (int i = 0; i < static_cast<int>(data.samples.size()); ++i) all.push_back(i);
    auto rep = evaluate(model, data, all);
    std::vector<int> per_class(3, 0);
    for (const auto& e : data.manifest.entries) ++per_class[static_cast<std::size_t>(e.label)];
    for (int k = 0; k < 3; ++k) {
        int row = 0;
        for (int j = 0; j < 3; ++j) row += rep.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
        EXPECT_EQ(row, per_class[static_cast<std::size_t>(k)]);
    }
    EXPECT_THROW(evaluate(model, data, {}), usage_error);
}

TEST(Train, SeededRunsAreBitIdentical) {
    auto data = tiny_dataset(2, 5, 8, 13);
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.decay_epochs = {2};
    cfg.base_lr = 0.05;
    cfg.batch_size = 4;
    cfg.seed = 42;

    std::ostringstream log1, log2;
    ResGCNModel m1(tiny_spec(2, true), SkeletonGraph::ntu25(), 21);
    ResGCNModel m2(tiny_spec(2, true), SkeletonGraph::ntu25(), 21);
    auto r1 = train(m1, data, cfg, &log1);
    auto r2 = train(m2, data, cfg, &log2);
    EXPECT_EQ(log1.str(), log2.str());
    ASSERT_EQ(r1.log.size(), r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i)
        EXPECT_EQ(r1.log[i].loss, r2.log[i].loss);  // bitwise
    auto pa = m1.named_params();
    auto pb = m2.named_params();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].param->value.vec(), pb[i].param->value.vec());
}

TEST(Train, LossDecreasesOnFixedBatchAtSmallLr) {
    auto data = tiny_dataset(2, 4, 8, 17);
    ResGCNModel model(tiny_spec(2, false), SkeletonGraph::ntu25(), 5);
    SgdNesterov opt(model, 0.9, 0.0);
    std::vector<const Sample*> batch;
    for (const auto& s : data.samples) batch.push_back(&s);
    auto folded = fold_samples(batch);
    std::vector<double> losses;
    for (int step = 0; step < 5; ++step) {
        Tape t;
        Var loss = cross_entropy(t, batch_logits(t, model, folded, true), folded.labels);
        model.zero_grad();
        t.backward(loss);
        opt.step(model, 1e-3);
        losses.push_back(t.value(loss)[0]);
    }
    for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]);
}

TEST(Train, EmptySplitIsUsageError) {
    auto data = tiny_dataset(2, 3, 8, 19);
    data.manifest.train_ids = {999};  // nothing matches
    ResGCNModel model(tiny_spec(2, false), SkeletonGraph::ntu25(), 5);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.decay_epochs = {};
    EXPECT_THROW(train(model, data, cfg), usage_error);
}

TEST(FoldSamples, TwoBodiesBecomeTwoRowsAveraged) {
    Rng rng(23);
    Sample s;
    for (int k = 0; k < 3; ++k) {
        s.branches[static_cast<std::size_t>(k)].kind = static_cast<BranchKind>(k);
        s.branches[static_cast<std::size_t>(k)].features = testsupport::random_tensor({6, 4, 25, 2}, rng);
    }
    s.label = 1;
    Sample one_body = s;
    for (int k = 0; k < 3; ++k)
        for (int c = 0; c < 6; ++c)
            for (int t = 0; t < 4; ++t)
                for (int v = 0; v < 25; ++v)
                    one_body.branches[static_cast<std::size_t>(k)].features.at(c, t, v, 1) = 0.0;

    auto folded = fold_samples({&s, &one_body});
    EXPECT_EQ(folded.inputs[0].dim(0), 3);  // 2 bodies + 1 body
    EXPECT_EQ(folded.fold.shape(), (std::vector<int>{2, 3}));
    EXPECT_DOUBLE_EQ(folded.fold.at(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(folded.fold.at(0, 1), 0.5);
    EXPECT_DOUBLE_EQ(folded.fold.at(0, 2), 0.0);
    EXPECT_DOUBLE_EQ(folded.fold.at(1, 2), 1.0);
}
