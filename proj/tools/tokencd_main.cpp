#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "tokencd/harness.hpp"
#include "tokencd/png_io.hpp"

namespace fs = std::filesystem;
using namespace tokencd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNanAbort = 3;

std::vector<SampleSource> sources_from_manifests(const std::vector<std::string>& manifest_paths,
                                                 const std::string& split) {
    std::vector<SampleSource> sources;
    for (const auto& path : manifest_paths)
        sources.push_back(SampleSource::from_manifest(load_manifest(path), split));
    return sources;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& manifests, const std::string& out_dir) {
    TrainConfig cfg = load_train_config(config_path);
    if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = out_dir;
    std::vector<SampleSource> sources = sources_from_manifests(manifests, "train");
    Trainer trainer(cfg, std::move(sources));
    fs::create_directories(out_dir);
    std::ofstream log_out(fs::path(out_dir) / "loss_log.jsonl");
    trainer.run([&](const StepLog& entry) {
        nlohmann::json j{{"step", entry.step},   {"source", entry.source_id}, {"total", entry.report.total},
                         {"txt", entry.report.txt}, {"bce", entry.report.bce},   {"dice", entry.report.dice},
                         {"ss", entry.report.ss},   {"sc", entry.report.sc},     {"gated", entry.report.gated}};
        log_out << j.dump() << "\n";
        return true;
    });
    const Checkpoint ckpt = trainer.snapshot();
    save_checkpoint(ckpt, (fs::path(out_dir) / "checkpoint.bin").string());
    std::ofstream vocab_out(fs::path(out_dir) / "token_vocab.json");
    vocab_out << trainer.model().codec().vocab().to_json() << "\n";
    std::ofstream cfg_out(fs::path(out_dir) / "train_config.json");
    cfg_out << cfg.to_json() << "\n";
    std::cout << "trained " << trainer.global_step() << " steps; checkpoint written to "
              << (fs::path(out_dir) / "checkpoint.bin").string() << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path, const std::string& split) {
    const auto model = model_from_checkpoint(load_checkpoint(ckpt_path));
    const SampleSource source = SampleSource::from_manifest(load_manifest(manifest_path), split);
    const MetricReport report = evaluate_model(*model, source);
    std::cout << report.to_json() << "\n" << report.to_table();
    return kExitOk;
}

int cmd_predict(const std::string& ckpt_path, const std::string& t1, const std::string& t2, const std::string& task,
                const std::string& classes, const std::string& out_dir, bool figure) {
    const auto model = model_from_checkpoint(load_checkpoint(ckpt_path));
    const TaskKind kind = task_from_string(task);
    std::vector<std::string> class_names;
    std::stringstream ss(classes);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) class_names.push_back(item);
    ClassVocabulary vocab = class_names.empty() && kind == TaskKind::Bcd
                                ? ClassVocabulary::generic_binary()
                                : ClassVocabulary::with_change_classes(class_names);
    const TaskQuery query = make_task_query(kind, vocab);
    const PredictionFiles files = predict_to_files(*model, t1, t2, query, out_dir, figure);
    for (const auto& f : files.files) std::cout << f << "\n";
    return kExitOk;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    std::ifstream in(spec_path);
    if (!in) throw std::runtime_error("cannot open spec: " + spec_path);
    nlohmann::json j;
    in >> j;
    SyntheticSpec spec;
    spec.image_size = j.value("image_size", spec.image_size);
    if (j.contains("class_families")) spec.class_families = j["class_families"].get<std::vector<std::string>>();
    if (j.contains("background_families"))
        spec.background_families = j["background_families"].get<std::vector<std::string>>();
    spec.change_rate = j.value("change_rate", spec.change_rate);
    spec.noise_level = j.value("noise_level", spec.noise_level);
    spec.seed = j.value("seed", spec.seed);
    const std::string task = j.value("task", std::string("bcd"));
    const int count = j.value("count", 16);
    const std::string source_id = j.value("source_id", std::string("synthetic"));
    std::vector<double> ratios = j.value("split_ratios", std::vector<double>{8, 1, 1});

    const auto violations = spec.validate();
    if (!violations.empty()) throw std::invalid_argument("spec: " + violations.front());
    std::vector<Sample> samples = task == "scd" ? generate_scd_source(spec, count, source_id)
                                                : generate_bcd_source(spec, count, source_id);
    DatasetManifest manifest = write_source(samples, task_from_string(task), spec.vocabulary(), out_dir, ratios, spec.seed);
    manifest.source_id = source_id;
    save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "wrote " << samples.size() << " samples under " << out_dir << "\n";
    return kExitOk;
}

int cmd_metrics(const std::string& pred_dir, const std::string& gt_dir, int classes) {
    std::vector<std::string> mask_names, sem_names;
    for (const auto& entry : fs::directory_iterator(gt_dir)) {
        if (entry.path().extension() != ".png") continue;
        const std::string name = entry.path().filename().string();
        (name.find("sem") != std::string::npos ? sem_names : mask_names).push_back(name);
    }
    std::sort(mask_names.begin(), mask_names.end());
    std::sort(sem_names.begin(), sem_names.end());
    if (mask_names.empty() && sem_names.empty()) throw std::runtime_error("no ground-truth pngs found in " + gt_dir);

    auto pred_path = [&](const std::string& name) {
        const fs::path p = fs::path(pred_dir) / name;
        if (!fs::exists(p)) throw std::runtime_error("missing prediction for " + name);
        return p.string();
    };

    BinaryCounts counts;
    ScdConfusion confusion(sem_names.empty() ? 1 : std::max(classes, 1));
    for (const auto& name : mask_names) {
        const BinaryMask gt = read_mask_png((fs::path(gt_dir) / name).string());
        const BinaryMask pred = read_mask_png(pred_path(name));
        counts += binary_counts(pred, gt);
        if (sem_names.empty())
            for (std::size_t i = 0; i < pred.data.size(); ++i) ++confusion.q(pred.data[i], gt.data[i]);
    }
    for (const auto& name : sem_names) {
        const LabelMap gt = read_label_png((fs::path(gt_dir) / name).string());
        const LabelMap pred = read_label_png(pred_path(name));
        if (pred.h != gt.h || pred.w != gt.w) throw std::runtime_error("size mismatch for " + name);
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            if (pred.data[i] > confusion.change_classes() || gt.data[i] > confusion.change_classes())
                throw std::runtime_error("label out of range in " + name);
            ++confusion.q(pred.data[i], gt.data[i]);
        }
    }
    const MetricReport report = make_report(counts, confusion, !sem_names.empty());
    std::cout << report.to_json() << "\n" << report.to_table();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-instructed dual-temporal change detection toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, manifest_path, split = "test";
    std::string t1, t2, task = "bcd", classes, spec_path, pred_dir, gt_dir;
    std::vector<std::string> manifests;
    bool figure = false;
    int metric_classes = 1;

    auto* train = app.add_subcommand("train", "train a model on one or more manifests");
    train->add_option("--config", config_path, "train config (.json or .toml)")->required();
    train->add_option("--manifest", manifests, "dataset manifest path(s)")->required();
    train->add_option("--out", out_dir, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--manifest", manifest_path, "dataset manifest")->required();
    eval->add_option("--split", split, "split name (default test)");

    auto* predict = app.add_subcommand("predict", "predict masks for an image pair");
    predict->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    predict->add_option("--t1", t1, "temporal-1 image png")->required();
    predict->add_option("--t2", t2, "temporal-2 image png")->required();
    predict->add_option("--task", task, "bcd or scd")->required();
    predict->add_option("--classes", classes, "comma-separated change classes");
    predict->add_option("--out", out_dir, "output directory")->required();
    predict->add_flag("--figure", figure, "also write a side-by-side composite");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--spec", spec_path, "synthetic spec json")->required();
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* metrics = app.add_subcommand("metrics", "score prediction pngs against ground truth pngs");
    metrics->add_option("--pred-dir", pred_dir, "directory of predicted masks")->required();
    metrics->add_option("--gt-dir", gt_dir, "directory of ground-truth masks")->required();
    metrics->add_option("--classes", metric_classes, "change-class count for semantic maps");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, manifests, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt_path, manifest_path, split);
        if (predict->parsed()) return cmd_predict(ckpt_path, t1, t2, task, classes, out_dir, figure);
        if (gen->parsed()) return cmd_gen_data(spec_path, out_dir);
        if (metrics->parsed()) return cmd_metrics(pred_dir, gt_dir, metric_classes);
    } catch (const NanLossError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNanAbort;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitOk;
}
