// Command-line front end for the ResGCN toolkit: dataset synthesis and
// preprocessing, training, evaluation, parameter counting, class activation
// maps and a small inference benchmark. Every subcommand is deterministic
// given identical flags, seed and inputs.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "resgcn/cam.hpp"
#include "resgcn/checkpoint.hpp"
#include "resgcn/dataset.hpp"
#include "resgcn/jsonschema.hpp"
#include "resgcn/model.hpp"
#include "resgcn/train.hpp"

namespace {

using nlohmann::json;
using namespace resgcn;

#ifndef RESGCN_DATA_DIR
#define RESGCN_DATA_DIR "data"
#endif

std::string data_dir() {
    if (const char* env = std::getenv("RESGCN_DATA")) return env;
    return RESGCN_DATA_DIR;
}

std::uint64_t env_seed_default() {
    if (const char* env = std::getenv("RESGCN_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end && *end == '\0') return v;
    }
    return 1;
}

// Model-related flags shared by train / count-params / bench.
struct ModelFlags {
    std::string structure = "[B1,N2,N3,N3]";
    std::string block = "bottleneck";
    std::string residual = "block";
    int reduction = 4;
    bool attention = false;
    int attention_reduction = 4;
    int temporal_window = 9;
    int max_distance = 2;
    std::vector<int> channel_plan = {64, 64, 128, 256};
    std::string graph_file;  // empty: built-in 25-joint skeleton

    void add_options(CLI::App* cmd) {
        cmd->add_option("--structure", structure, "Structure string, e.g. [B1,N2,N3,N3]")
            ->capture_default_str();
        cmd->add_option("--block", block, "Block kind: basic|bottleneck (basic rewrites every part)")
            ->check(CLI::IsMember({"basic", "bottleneck"}))
            ->capture_default_str();
        cmd->add_option("--residual", residual, "Residual link kind: none|block|module|dense")
            ->check(CLI::IsMember({"none", "block", "module", "dense"}))
            ->capture_default_str();
        cmd->add_option("--r,--reduction", reduction, "Bottleneck channel reduction rate")
            ->capture_default_str();
        cmd->add_option("--attention", attention, "Part attention after every mainstream module")
            ->capture_default_str();
        cmd->add_option("--attention-r", attention_reduction, "Part attention reduction rate")
            ->capture_default_str();
        cmd->add_option("--window", temporal_window, "Temporal convolution window")
            ->capture_default_str();
        cmd->add_option("--max-distance", max_distance, "Maximum graph hop distance")
            ->capture_default_str();
        cmd->add_option("--channel-plan", channel_plan, "Widths of the four structure parts")
            ->expected(4);
        cmd->add_option("--graph", graph_file, "Skeleton graph JSON (default: built-in NTU-25)");
    }

    void apply_config(const json& cfg) {
        if (cfg.contains("structure")) structure = cfg.at("structure").get<std::string>();
        if (cfg.contains("block")) block = cfg.at("block").get<std::string>();
        if (cfg.contains("residual")) residual = cfg.at("residual").get<std::string>();
        if (cfg.contains("reduction")) reduction = cfg.at("reduction").get<int>();
        if (cfg.contains("attention")) attention = cfg.at("attention").get<bool>();
        if (cfg.contains("attention_reduction")) attention_reduction = cfg.at("attention_reduction").get<int>();
        if (cfg.contains("temporal_window")) temporal_window = cfg.at("temporal_window").get<int>();
        if (cfg.contains("max_distance")) max_distance = cfg.at("max_distance").get<int>();
        if (cfg.contains("channel_plan")) channel_plan = cfg.at("channel_plan").get<std::vector<int>>();
        if (cfg.contains("graph")) graph_file = cfg.at("graph").get<std::string>();
    }

    SkeletonGraph load_graph() const {
        return graph_file.empty() ? SkeletonGraph::ntu25() : SkeletonGraph::from_json_file(graph_file);
    }

    ModelSpec to_spec(int num_classes) const {
        ModelSpec spec;
        spec.structure = parse_structure(structure);
        if (block == "basic")
            for (auto& e : spec.structure) e.kind = BlockKind::basic;
        spec.channel_plan = channel_plan;
        spec.num_classes = num_classes;
        spec.part_attention = attention;
        spec.residual = residual_kind_from_name(residual);
        spec.reduction = reduction;
        spec.temporal_window = temporal_window;
        spec.max_distance = max_distance;
        spec.attention_reduction = attention_reduction;
        spec.validate();
        return spec;
    }

    json to_json() const {
        return json{{"structure", structure},
                    {"block", block},
                    {"residual", residual},
                    {"reduction", reduction},
                    {"attention", attention},
                    {"attention_reduction", attention_reduction},
                    {"temporal_window", temporal_window},
                    {"max_distance", max_distance},
                    {"channel_plan", channel_plan},
                    {"graph", graph_file.empty() ? "builtin:ntu25" : graph_file}};
    }
};

// Loads --config JSON (validated against the shipped schema) before the real
// parse, so explicit flags override file values and file values override
// defaults.
json preload_config(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            json cfg = load_json_file(argv[i + 1]);
            const auto schema_path = std::filesystem::path(data_dir()) / "config_schema.json";
            if (std::filesystem::exists(schema_path)) {
                std::string why;
                if (!validate_json(load_json_file(schema_path.string()), cfg, &why))
                    throw usage_error("config file: " + why);
            }
            return cfg;
        }
    }
    return json::object();
}

void echo_config(const std::string& command, const json& effective) {
    std::cout << json{{"command", command}, {"effective_config", effective}}.dump() << "\n";
}

std::vector<int> parse_frame_list(const std::string& csv, int available) {
    std::vector<int> frames;
    if (csv.empty()) {
        for (int k = 0; k < 4; ++k) frames.push_back(k * available / 4);
        return frames;
    }
    std::istringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) frames.push_back(std::stoi(tok));
    return frames;
}

int run(int argc, char** argv) {
    CLI::App app{"ResGCN skeleton action recognition toolkit"};
    app.require_subcommand(1);
    const json file_cfg = preload_config(argc, argv);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags override file values)");

    std::uint64_t seed = env_seed_default();
    if (file_cfg.contains("seed")) seed = file_cfg.at("seed").get<std::uint64_t>();
    app.add_option("--seed", seed, "Global random seed (env RESGCN_SEED is the fallback)")
        ->capture_default_str();

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "Generate a deterministic synthetic skeleton dataset");
    int synth_classes = 4, synth_per_class = 50, synth_frames = 64;
    std::string synth_out;
    synth->add_option("--classes", synth_classes, "Number of motion classes")->capture_default_str();
    synth->add_option("--per-class", synth_per_class, "Sequences per class")->capture_default_str();
    synth->add_option("--frames", synth_frames, "Frames per sequence")->capture_default_str();
    synth->add_option("--out", synth_out, "Output directory")->required();

    // --- preprocess ---
    auto* prep = app.add_subcommand("preprocess", "Turn raw sequences into joint/velocity/bone branches");
    std::string prep_data, prep_out, prep_graph, prep_exclude;
    int prep_frames = 0;
    prep->add_option("--data", prep_data, "Directory with SKL1 files and manifest.json")->required();
    prep->add_option("--out", prep_out, "Output directory for branch files")->required();
    prep->add_option("--graph", prep_graph, "Skeleton graph JSON (default: built-in NTU-25)");
    prep->add_option("--frames", prep_frames, "Pad or crop every sequence to this length (0 = keep)")
        ->capture_default_str();
    prep->add_option("--exclude", prep_exclude, "Exclusion list file of known-bad sample names");

    // --- count-params ---
    auto* count = app.add_subcommand("count-params", "Report trainable parameter counts for a model");
    ModelFlags count_flags;
    count_flags.add_options(count);
    int count_classes = 60;
    bool count_json = false;
    count->add_option("--classes", count_classes, "Number of output classes")->capture_default_str();
    count->add_flag("--json", count_json, "Emit the full breakdown as JSON");

    // --- train ---
    auto* tr = app.add_subcommand("train", "Train a model on a preprocessed dataset");
    ModelFlags train_flags;
    train_flags.add_options(tr);
    std::string train_data, train_out, train_log;
    TrainConfig tc;
    if (file_cfg.is_object() && !file_cfg.empty()) tc = TrainConfig::from_json(file_cfg);
    tr->add_option("--data", train_data, "Preprocessed dataset directory")->required();
    tr->add_option("--out", train_out, "Checkpoint output path");
    tr->add_option("--log", train_log, "Per-epoch JSON-lines log file");
    tr->add_option("--lr", tc.base_lr, "Base learning rate")->capture_default_str();
    tr->add_option("--epochs", tc.max_epochs, "Number of training epochs")->capture_default_str();
    tr->add_option("--warmup", tc.warmup_epochs, "Warmup epochs")->capture_default_str();
    tr->add_option("--decay-epochs", tc.decay_epochs, "Epochs at which the rate decays");
    tr->add_option("--decay-factor", tc.decay_factor, "Decay divisor")->capture_default_str();
    tr->add_option("--momentum", tc.momentum, "Nesterov momentum")->capture_default_str();
    tr->add_option("--weight-decay", tc.weight_decay, "L2 weight decay")->capture_default_str();
    tr->add_option("--batch", tc.batch_size, "Minibatch size")->capture_default_str();
    tr->add_option("--eval-every", tc.eval_every, "Epochs between held-out evaluations (0 = final only)")
        ->capture_default_str();

    // --- eval ---
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    std::string eval_ckpt, eval_data, eval_split = "eval";
    int eval_batch = 16;
    ev->add_option("--checkpoint", eval_ckpt, "Model checkpoint path")->required();
    ev->add_option("--data", eval_data, "Preprocessed dataset directory")->required();
    ev->add_option("--split", eval_split, "Which split to evaluate: train|eval|all")
        ->check(CLI::IsMember({"train", "eval", "all"}))
        ->capture_default_str();
    ev->add_option("--batch", eval_batch, "Evaluation batch size")->capture_default_str();

    // --- cam ---
    auto* cam = app.add_subcommand("cam", "Class activation map for one sequence");
    std::string cam_ckpt, cam_input, cam_out, cam_frames_csv;
    int cam_class = -1;
    double cam_quantile = 0.8;
    cam->add_option("--checkpoint", cam_ckpt, "Model checkpoint path")->required();
    cam->add_option("--input", cam_input, "SKL1 sequence file")->required();
    cam->add_option("--out", cam_out, "Output JSON path")->required();
    cam->add_option("--class-id", cam_class, "Class to explain (-1 = predicted class)")
        ->capture_default_str();
    cam->add_option("--frames", cam_frames_csv, "Comma-separated frame indices (default: 4 samples)");
    cam->add_option("--quantile", cam_quantile, "Activation threshold quantile")->capture_default_str();

    // --- bench ---
    auto* bench = app.add_subcommand("bench", "Measure eval-mode forward throughput");
    ModelFlags bench_flags;
    bench_flags.add_options(bench);
    std::string bench_ckpt;
    int bench_batch = 8, bench_repeat = 3, bench_frames = 300, bench_classes = 60;
    bench->add_option("--checkpoint", bench_ckpt, "Optional checkpoint (otherwise a fresh model)");
    bench->add_option("--batch", bench_batch, "Sequences per forward")->capture_default_str();
    bench->add_option("--repeat", bench_repeat, "Number of forwards")->capture_default_str();
    bench->add_option("--frames", bench_frames, "Frames per sequence")->capture_default_str();
    bench->add_option("--classes", bench_classes, "Classes for the fresh model")->capture_default_str();

    for (CLI::App* sub : {synth, prep, count, tr, ev, cam, bench}) sub->fallthrough();
    for (auto* flags : {&count_flags, &train_flags, &bench_flags}) flags->apply_config(file_cfg);
    if (file_cfg.contains("frames")) {
        prep_frames = file_cfg.at("frames").get<int>();
        synth_frames = prep_frames > 0 ? prep_frames : synth_frames;
    }
    if (file_cfg.contains("num_classes")) {
        synth_classes = file_cfg.at("num_classes").get<int>();
        count_classes = synth_classes;
        bench_classes = synth_classes;
    }

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        json effective{{"classes", synth_classes}, {"per_class", synth_per_class},
                       {"frames", synth_frames}, {"seed", seed}, {"out", synth_out}};
        echo_config("synth", effective);
        auto manifest = synth_dataset(synth_classes, synth_per_class, synth_frames, seed, synth_out);
        std::cout << json{{"sequences", manifest.entries.size()},
                          {"train", manifest.train_indices().size()},
                          {"eval", manifest.eval_indices().size()}}
                         .dump()
                  << "\n";
        return 0;
    }

    if (prep->parsed()) {
        json effective{{"data", prep_data}, {"out", prep_out},
                       {"graph", prep_graph.empty() ? "builtin:ntu25" : prep_graph},
                       {"frames", prep_frames}, {"exclude", prep_exclude}};
        echo_config("preprocess", effective);
        auto graph = prep_graph.empty() ? SkeletonGraph::ntu25() : SkeletonGraph::from_json_file(prep_graph);
        auto manifest = DatasetManifest::load((std::filesystem::path(prep_data) / "manifest.json").string());
        int dropped = 0;
        if (!prep_exclude.empty()) dropped = apply_exclusions(manifest, load_exclusion_list(prep_exclude));
        std::filesystem::create_directories(prep_out);
        for (const auto& e : manifest.entries) {
            SkeletonSequence seq = load_skl((std::filesystem::path(prep_data) / e.path).string());
            if (prep_frames > 0) seq = pad_or_crop(seq, prep_frames);
            for (const auto& b : build_branches(seq, graph))
                save_branch(b, (std::filesystem::path(prep_out) / branch_file_name(e.path, b.kind)).string());
        }
        manifest.save((std::filesystem::path(prep_out) / "manifest.json").string());
        std::cout << json{{"sequences", manifest.entries.size()}, {"excluded", dropped}}.dump() << "\n";
        return 0;
    }

    if (count->parsed()) {
        json effective = count_flags.to_json();
        effective["classes"] = count_classes;
        echo_config("count-params", effective);
        auto graph = count_flags.load_graph();
        auto breakdown = count_params(count_flags.to_spec(count_classes), graph);
        if (count_json) {
            json out{{"total", breakdown.total}, {"per_category", breakdown.per_category}};
            auto& jm = out["per_module"] = json::array();
            for (auto& [name, n] : breakdown.per_module) jm.push_back({{"module", name}, {"count", n}});
            std::cout << out.dump(2) << "\n";
        } else {
            for (auto& [name, n] : breakdown.per_module) std::cout << name << " " << n << "\n";
            for (auto& [name, n] : breakdown.per_category) std::cout << "category." << name << " " << n << "\n";
            std::cout << "total " << breakdown.total << "\n";
        }
        return 0;
    }

    if (tr->parsed()) {
        tc.seed = seed;
        auto data = load_branch_dataset(train_data);
        json effective{{"model", train_flags.to_json()}, {"train", tc.to_json()},
                       {"data", train_data}, {"out", train_out}, {"log", train_log}};
        echo_config("train", effective);
        auto graph = train_flags.load_graph();
        ResGCNModel model(train_flags.to_spec(data.manifest.num_classes), graph, seed);

        std::ofstream log_file;
        std::ostream* log_stream = nullptr;
        if (!train_log.empty()) {
            log_file.open(train_log);
            if (!log_file) throw io_error("train: cannot write log " + train_log);
            log_stream = &log_file;
        }
        auto result = train(model, data, tc, log_stream);
        const auto& last = result.log.back();
        json summary{{"epochs", result.log.size()},
                     {"final_loss", last.loss},
                     {"final_train_acc", last.train_acc}};
        if (last.eval_acc >= 0.0) summary["final_eval_acc"] = last.eval_acc;
        std::cout << summary.dump() << "\n";
        if (!train_out.empty()) {
            save_model(model, train_out,
                       train_flags.graph_file.empty() ? "builtin:ntu25" : train_flags.graph_file);
            std::cout << json{{"checkpoint", train_out}}.dump() << "\n";
        }
        return 0;
    }

    if (ev->parsed()) {
        json effective{{"checkpoint", eval_ckpt}, {"data", eval_data},
                       {"split", eval_split}, {"batch", eval_batch}};
        echo_config("eval", effective);
        auto model = load_model(eval_ckpt);
        auto data = load_branch_dataset(eval_data);
        std::vector<int> ix;
        if (eval_split == "train") ix = data.manifest.train_indices();
        else if (eval_split == "eval") ix = data.manifest.eval_indices();
        else
            for (int i = 0; i < static_cast<int>(data.samples.size()); ++i) ix.push_back(i);
        auto rep = evaluate(*model, data, ix, eval_batch);
        json out{{"split", eval_split}, {"sequences", rep.total}, {"top1", rep.top1},
                 {"per_class", rep.per_class}, {"confusion", rep.confusion}};
        std::cout << out.dump() << "\n";
        return 0;
    }

    if (cam->parsed()) {
        json effective{{"checkpoint", cam_ckpt}, {"input", cam_input}, {"out", cam_out},
                       {"class_id", cam_class}, {"frames", cam_frames_csv}, {"quantile", cam_quantile}};
        echo_config("cam", effective);
        auto model = load_model(cam_ckpt);
        SkeletonSequence seq = load_skl(cam_input);
        auto branches = build_branches(seq, model->graph());
        auto res = class_activation_map(*model, {branches[0], branches[1], branches[2]}, cam_class);
        auto frames = parse_frame_list(cam_frames_csv, res.map.values.dim(0));
        auto sets = activated_joints(res.map, frames, cam_quantile);
        export_cam(res.map, frames, sets, model->graph(), cam_out);
        std::cout << json{{"class_id", res.map.class_id}, {"predicted", res.predicted},
                          {"frames", frames}, {"out", cam_out}}
                         .dump()
                  << "\n";
        return 0;
    }

    if (bench->parsed()) {
        json effective = bench_flags.to_json();
        effective["batch"] = bench_batch;
        effective["repeat"] = bench_repeat;
        effective["frames"] = bench_frames;
        echo_config("bench", effective);
        std::unique_ptr<ResGCNModel> model;
        if (!bench_ckpt.empty()) {
            model = load_model(bench_ckpt);
        } else {
            model = std::make_unique<ResGCNModel>(bench_flags.to_spec(bench_classes),
                                                  bench_flags.load_graph(), seed);
        }
        const int V = model->graph().num_joints;
        Rng rng(seed);
        std::array<Tensor, 3> inputs;
        for (auto& x : inputs) {
            x = Tensor({bench_batch, 6, bench_frames, V});
            for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);
        }
        if (bench_ckpt.empty()) {
            // fresh model: one training-mode pass so BatchNorm has statistics
            Tape warm;
            std::array<Var, 3> b = {warm.constant(inputs[0]), warm.constant(inputs[1]),
                                    warm.constant(inputs[2])};
            model->forward_logits(warm, b, true);
        }
        const auto t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < bench_repeat; ++r) {
            Tape t(false);
            std::array<Var, 3> b = {t.constant(inputs[0]), t.constant(inputs[1]), t.constant(inputs[2])};
            model->forward_logits(t, b, false);
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << json{{"sequences", bench_batch * bench_repeat}, {"seconds", secs},
                          {"sequences_per_second", bench_batch * bench_repeat / secs}}
                         .dump()
                  << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::ParseError& e) {
        CLI::App dummy;
        return dummy.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
