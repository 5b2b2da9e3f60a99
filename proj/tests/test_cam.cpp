#include <gtest/gtest.h>

#include <filesystem>

#include "resgcn/cam.hpp"
#include "resgcn/train.hpp"
#include "support.hpp"

using namespace resgcn;

namespace {

ModelSpec tiny_spec(int classes) {
    ModelSpec s;
    s.structure = parse_structure("[B1,N1,N1,N1]");
    s.channel_plan = {8, 8, 8, 8};
    s.num_classes = classes;
    s.part_attention = true;
    s.reduction = 2;
    s.temporal_window = 3;
    s.attention_reduction = 2;
    return s;
}

struct CamFixture {
    LoadedDataset data;
    std::unique_ptr<ResGCNModel> model;
};

CamFixture make_fixture(std::uint64_t seed) {
    auto dir = std::filesystem::temp_directory_path() / ("resgcn_cam_" + std::to_string(seed));
    std::filesystem::remove_all(dir);
    synth_dataset(3, 4, 16, seed, dir.string());
    auto pre = dir.string() + "_pre";
    std::filesystem::remove_all(pre);
    preprocess_dataset(dir.string(), pre, SkeletonGraph::ntu25());
    CamFixture fx;
    fx.data = load_branch_dataset(pre);
    fx.model = std::make_unique<ResGCNModel>(tiny_spec(3), SkeletonGraph::ntu25(), seed);
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.decay_epochs = {};
    cfg.base_lr = 0.02;
    cfg.batch_size = 6;
    cfg.seed = seed;
    train(*fx.model, fx.data, cfg);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(pre);
    return fx;
}

}  // namespace

TEST(Cam, MeanEqualsLogitMinusBias) {
    auto fx = make_fixture(31);
    for (int i = 0; i < 3; ++i) {
        const auto& sample = fx.data.samples[static_cast<std::size_t>(i)];
        for (int cls = 0; cls < 3; ++cls) {
            auto res = class_activation_map(*fx.model, sample.branches, cls);
            double mean = 0.0;
            for (std::int64_t j = 0; j < res.map.values.numel(); ++j) mean += res.map.values[j];
            mean /= static_cast<double>(res.map.values.numel());
            const double bias = fx.model->classifier().bias.value.at(0, cls);
            EXPECT_NEAR(mean, res.logits[static_cast<std::size_t>(cls)] - bias, 1e-6);
        }
    }
}

TEST(Cam, ZeroClassifierRowGivesZeroMap) {
    auto fx = make_fixture(37);
    auto& w = fx.model->classifier().weight.value;
    for (int c = 0; c < w.dim(0); ++c) w.at(c, 1) = 0.0;
    auto res = class_activation_map(*fx.model, fx.data.samples[0].branches, 1);
    for (std::int64_t j = 0; j < res.map.values.numel(); ++j) EXPECT_DOUBLE_EQ(res.map.values[j], 0.0);
}

TEST(Cam, HandComputedToyModel) {
    // Features dotted with the classifier row, one cell at a time.
    auto fx = make_fixture(41);
    const auto& sample = fx.data.samples[2];

    Sample s = sample;
    std::vector<const Sample*> one = {&s};
    auto folded = fold_samples(one);
    Tape t(false);
    std::array<Var, 3> rows = {t.constant(folded.inputs[0]), t.constant(folded.inputs[1]),
                               t.constant(folded.inputs[2])};
    auto fw = fx.model->forward(t, rows, false);
    const Tensor& feat = t.value(fw.features);
    const Tensor& w = fx.model->classifier().weight.value;
    const int cls = 2;
    Tensor expected({feat.dim(2), feat.dim(3)});
    for (int r = 0; r < feat.dim(0); ++r)
        for (int c = 0; c < feat.dim(1); ++c)
            for (int tt = 0; tt < feat.dim(2); ++tt)
                for (int v = 0; v < feat.dim(3); ++v)
                    expected.at(tt, v) += feat.at(r, c, tt, v) * w.at(c, cls) / feat.dim(0);

    auto res = class_activation_map(*fx.model, sample.branches, cls);
    EXPECT_LT(testsupport::max_abs_diff(res.map.values, expected), 1e-12);
    EXPECT_DOUBLE_EQ(res.map.frame_scale, 0.25);  // two stride-2 modules
}

TEST(Cam, ClassIdOutOfRange) {
    auto fx = make_fixture(43);
    EXPECT_THROW(class_activation_map(*fx.model, fx.data.samples[0].branches, 3), usage_error);
}

TEST(ActivatedJoints, QuantileLimitsAndTies) {
    ActivationMap map;
    map.values = Tensor({4, 25});
    map.class_id = 0;
    // Uniform map: strictly-greater comparison activates nothing.
    for (std::int64_t i = 0; i < map.values.numel(); ++i) map.values[i] = 1.0;
    auto sets = activated_joints(map, {0, 3}, 0.5);
    for (const auto& s : sets) EXPECT_TRUE(s.empty());

    // Near-1 quantile: threshold is the maximum, nothing exceeds it.
    Rng rng(3);
    for (std::int64_t i = 0; i < map.values.numel(); ++i) map.values[i] = rng.uniform(0.0, 1.0);
    sets = activated_joints(map, {1}, 0.9999);
    EXPECT_TRUE(sets[0].empty());

    EXPECT_THROW(activated_joints(map, {0}, 0.0), usage_error);
    EXPECT_THROW(activated_joints(map, {0}, 1.0), usage_error);
    EXPECT_THROW(activated_joints(map, {4}, 0.5), usage_error);
}

TEST(ActivatedJoints, DominantJointIsExactlyDetected) {
    ActivationMap map;
    map.values = Tensor({4, 25});
    map.values.at(2, 7) = 1.0;  // single dominant joint
    auto sets = activated_joints(map, {0, 2}, 0.9);
    EXPECT_TRUE(sets[0].empty());
    ASSERT_EQ(sets[1].size(), 1u);
    EXPECT_EQ(sets[1][0], 7);
}

TEST(CamExport, RoundTripAndSchema) {
    auto fx = make_fixture(47);
    auto res = class_activation_map(*fx.model, fx.data.samples[1].branches, -1);
    std::vector<int> frames = {0, 1, 2, 3};
    auto sets = activated_joints(res.map, frames, 0.8);

    auto dir = std::filesystem::temp_directory_path() / "resgcn_cam_export";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "cam.json").string();
    export_cam(res.map, frames, sets, fx.model->graph(), path);

    auto back = import_cam(path);
    EXPECT_EQ(back.values.vec(), res.map.values.vec());  // lossless
    EXPECT_EQ(back.class_id, res.map.class_id);
    EXPECT_DOUBLE_EQ(back.frame_scale, res.map.frame_scale);

    // Document count matches the frame count and the schema accepts it.
    auto doc = load_json_file(path);
    EXPECT_EQ(doc.at("frames").size(), static_cast<std::size_t>(res.map.values.dim(0)));
    auto schema = load_json_file(std::string(RESGCN_DATA_DIR) + "/cam_schema.json");
    std::string why;
    EXPECT_TRUE(validate_json(schema, doc, &why)) << why;
    std::filesystem::remove_all(dir);
}

TEST(CamExport, StandardLengthSequenceHas75FrameRecords) {
    // 300 input frames through two stride-2 modules leave 75 feature frames,
    // and the export carries one record per feature frame.
    auto fx = make_fixture(59);
    Rng rng(3);
    SkeletonSequence seq;
    seq.coords = testsupport::random_tensor({3, 140, 25, 1}, rng);
    seq.valid_frames = 140;
    auto padded = pad_or_crop(seq, 300);
    auto branches = build_branches(padded, fx.model->graph());
    auto res = class_activation_map(*fx.model, {branches[0], branches[1], branches[2]}, -1);
    EXPECT_EQ(res.map.values.dim(0), 75);
    auto dir = std::filesystem::temp_directory_path() / "resgcn_cam_75";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "cam.json").string();
    export_cam(res.map, {0, 37, 74}, activated_joints(res.map, {0, 37, 74}, 0.8),
               fx.model->graph(), path);
    EXPECT_EQ(load_json_file(path).at("frames").size(), 75u);
    std::filesystem::remove_all(dir);
}

TEST(Cam, PartCamShareFollowsAttentionOrdering) {
    // Crafted fixture (rank agreement is not a universal property): two
    // copies of one trained model, attention forced uniform everywhere except
    // that one copy's last block decisively favors the left arm. With an
    // all-positive classifier column, the favored part's share of the
    // part-aggregated map must rise and the attention ordering must agree.
    auto fx = make_fixture(61);
    const auto& sample = fx.data.samples[0];
    const int favored = 1;  // left arm

    auto dir = std::filesystem::temp_directory_path() / "resgcn_cam_rank";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "m.rgcn").string();
    save_model(*fx.model, path);
    auto crafted = load_model(path);
    auto uniform = load_model(path);
    for (auto* model : {crafted.get(), uniform.get()}) {
        for (std::size_t m = 0; m < model->mainstream_modules(); ++m) {
            auto& att = model->attention_block(m);
            for (std::size_t p = 1; p < att.w_part.size(); ++p) att.w_part[p].value = att.w_part[0].value;
        }
        auto& w = model->classifier().weight.value;
        for (int c = 0; c < w.dim(0); ++c) w.at(c, 0) = 1.0;
    }
    {
        // Bias the last block toward the favored part: its logits exceed the
        // others by a constant times the (non-negative) reduced features.
        auto& att = crafted->attention_block(crafted->mainstream_modules() - 1);
        Parameter& wp = att.w_part[static_cast<std::size_t>(favored)];
        for (std::int64_t i = 0; i < wp.value.numel(); ++i) wp.value[i] += 0.75;
    }

    // The crafted model's last attention block must rank the favored part first.
    Sample s = sample;
    std::vector<const Sample*> one = {&s};
    auto folded = fold_samples(one);
    Tape t(false);
    std::array<Var, 3> rows = {t.constant(folded.inputs[0]), t.constant(folded.inputs[1]),
                               t.constant(folded.inputs[2])};
    auto fw = crafted->forward(t, rows, false);
    ASSERT_TRUE(fw.last_attention.valid());
    const Tensor& att = t.value(fw.last_attention);  // [1, 5, C]
    std::vector<double> att_mean(5, 0.0);
    for (int p = 0; p < 5; ++p)
        for (int c = 0; c < att.dim(2); ++c) att_mean[static_cast<std::size_t>(p)] += att.at(0, p, c);
    for (int p = 0; p < 5; ++p)
        if (p != favored) EXPECT_GT(att_mean[static_cast<std::size_t>(favored)], att_mean[static_cast<std::size_t>(p)]);

    auto cam_share = [&](ResGCNModel& model) {
        auto res = class_activation_map(model, sample.branches, 0);
        std::vector<double> share(5, 0.0);
        double total = 0.0;
        const auto& g = model.graph();
        for (int tt = 0; tt < res.map.values.dim(0); ++tt)
            for (int v = 0; v < res.map.values.dim(1); ++v) {
                const double val = std::abs(res.map.values.at(tt, v));
                share[static_cast<std::size_t>(g.part_of[static_cast<std::size_t>(v)])] += val;
                total += val;
            }
        for (auto& x : share) x /= total;
        return share;
    };
    auto with_att = cam_share(*crafted);
    auto without = cam_share(*uniform);
    EXPECT_GT(with_att[static_cast<std::size_t>(favored)], without[static_cast<std::size_t>(favored)]);
    std::filesystem::remove_all(dir);
}

TEST(Cam, LinearityInClassifierRows) {
    auto fx = make_fixture(53);
    const auto& sample = fx.data.samples[0];
    auto a = class_activation_map(*fx.model, sample.branches, 0);
    auto b = class_activation_map(*fx.model, sample.branches, 1);
    // Synthetic combined class: weight row = row0 + row1.
    auto& w = fx.model->classifier().weight.value;
    Tensor keep = w;
    for (int c = 0; c < w.dim(0); ++c) w.at(c, 2) = w.at(c, 0) + w.at(c, 1);
    auto combo = class_activation_map(*fx.model, sample.branches, 2);
    for (std::int64_t i = 0; i < combo.map.values.numel(); ++i)
        EXPECT_NEAR(combo.map.values[i], a.map.values[i] + b.map.values[i], 1e-9);
    w = keep;
}
