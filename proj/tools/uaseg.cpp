// uaseg: synthetic layered-particle segmentation with post-hoc
// misclassification detection.
//
// Subcommands: synth, train-seg, train-meta, pipeline, eval, predict.
// Exit codes: 0 success, 2 usage error, 1 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "uaseg/dataio.hpp"
#include "uaseg/synthgen.hpp"
#include "uaseg/trainer.hpp"
#include "uaseg/viz.hpp"

namespace fs = std::filesystem;
using namespace uaseg;

namespace {

std::string default_artifacts_root() {
    const char* env = std::getenv("UASEG_ARTIFACTS_ROOT");
    return env && *env ? std::string(env) : std::string("artifacts");
}

SegModelConfig make_seg_config(const std::string& preset, int input_size, int num_classes) {
    SegModelConfig cfg = preset == "tiny" ? SegModelConfig::tiny(input_size) : SegModelConfig{};
    cfg.preset = preset;
    cfg.input_size = input_size;
    cfg.num_classes = num_classes;
    return cfg;
}

struct SynthArgs {
    std::string profile = "agr567like";
    int count = 0;
    std::uint64_t seed = 0;
    std::string out;
    int size = 512;
    std::vector<double> fractions = {0.64, 0.16, 0.20};
};

int cmd_synth(const SynthArgs& a) {
    synth::DomainProfile profile = synth::DomainProfile::by_name(a.profile);
    synth::SplitFractions fr{a.fractions[0], a.fractions[1], a.fractions[2]};
    synth::DatasetManifest m =
        synth::generate_dataset(profile, a.count, fr, a.seed, a.out, a.size);
    const auto sizes = synth::split_sizes(a.count, fr);
    std::cout << "wrote " << m.samples.size() << " samples (" << sizes.train << "/" << sizes.val
              << "/" << sizes.test << " train/val/test) to " << a.out << "\n";
    std::cout << (fs::path(a.out) / "manifest.json").string() << "\n";
    return 0;
}

struct TrainSegArgs {
    std::string manifest;
    int stage = 2;
    std::string init;  // "random", backbone ckpt, or segmentation ckpt
    std::string out;
    std::string preset = "tiny";
    int input_size = 64;
    int epochs = 50;
    double lr = 1e-3;
    int batch = 4;
    std::uint64_t seed = 0;
    bool no_augment = false;
};

int cmd_train_seg(const TrainSegArgs& a) {
    synth::DatasetManifest data = synth::load_manifest(a.manifest);
    SegModelConfig cfg = make_seg_config(a.preset, a.input_size, kNumClasses);

    Rng rng(derive_seed(a.seed, static_cast<std::uint64_t>(a.stage)));
    std::optional<SegNet<float>> model;
    if (a.init.empty() || a.init == "random") {
        model.emplace(cfg, rng);
    } else {
        Checkpoint ck = read_checkpoint(a.init);
        if (ck.kind == "backbone") {
            model.emplace(cfg, rng);
            load_backbone(*model, ck);
        } else if (ck.kind == "segmentation") {
            model.emplace(load_segmentation_model(ck));
        } else {
            throw CheckpointError("--init checkpoint must be a backbone or segmentation model");
        }
    }

    StageConfig sc;
    sc.id = "stage" + std::to_string(a.stage);
    sc.epochs = a.epochs;
    sc.lr = a.lr;
    sc.batch_size = a.batch;
    sc.augment = !a.no_augment;
    sc.seed = derive_seed(a.seed, static_cast<std::uint64_t>(a.stage));

    const Normalization norm = compute_normalization(data, "train", cfg.input_size);
    const bool use_val = a.stage != 2 && !data.split("val").empty();
    AugmentPolicy policy;
    SegTrainResult r =
        train_segmentation(*model, data, sc, policy, a.out, norm, use_val);
    std::cout << "best checkpoint: " << r.best_checkpoint << "\n";
    if (r.best_val_miou >= 0) std::cout << "best val mIoU: " << r.best_val_miou << "\n";
    return 0;
}

struct TrainMetaArgs {
    std::string seg_checkpoint;
    std::string manifest;
    std::string out;
    int epochs = 50;
    double lr = 1e-4;
    int batch = 16;
    std::uint64_t seed = 0;
    WfmseParams wfmse;
    std::vector<int> enc, dec;
};

int cmd_train_meta(const TrainMetaArgs& a) {
    synth::DatasetManifest data = synth::load_manifest(a.manifest);
    Checkpoint seg_ck = read_checkpoint(a.seg_checkpoint);
    SegNet<float> seg = load_segmentation_model(seg_ck);

    MetaModelConfig mc;
    mc.input_size = seg.config().input_size;
    mc.in_channels = seg.config().num_classes;
    if (seg.config().preset == "tiny") {
        mc.encoder_channels = MetaModelConfig::tiny().encoder_channels;
        mc.decoder_channels = MetaModelConfig::tiny().decoder_channels;
    }
    if (!a.enc.empty()) mc.encoder_channels = a.enc;
    if (!a.dec.empty()) mc.decoder_channels = a.dec;

    Rng rng(derive_seed(a.seed, 4));
    MetaNet<float> meta(mc, rng);

    StageConfig sc = StageConfig::meta_defaults();
    sc.epochs = a.epochs;
    sc.lr = a.lr;
    sc.batch_size = a.batch;
    sc.seed = derive_seed(a.seed, 4);

    MetaTrainResult r = train_meta(seg, meta, data, sc, a.wfmse, a.out,
                                   checkpoint_normalization(seg_ck));
    std::cout << "best checkpoint: " << r.best_checkpoint << "\n";
    std::cout << "best val AP-E: " << r.best_val_ap_e << "\n";
    return 0;
}

int cmd_pipeline(const std::string& config_path) {
    std::ifstream is(config_path);
    if (!is) throw IoError("cannot read pipeline config: " + config_path);
    nlohmann::json j;
    is >> j;
    PipelineConfig cfg = pipeline_config_from_json(j);
    if (cfg.artifacts_root.empty()) cfg.artifacts_root = default_artifacts_root();
    PipelineResult r = run_pipeline(cfg);
    std::cout << "variant: " << r.variant << "\n";
    std::cout << "segmentation checkpoint: " << r.seg_checkpoint << "\n";
    std::cout << "meta checkpoint: " << r.meta_checkpoint << "\n";
    std::cout << "test mIoU: " << r.seg_report.miou << "  mP: " << r.seg_report.mp << "\n";
    std::cout << "UQ: AP " << r.uq_report.ap << "  AP-E " << r.uq_report.ap_e << "  F1-SS "
              << r.uq_report.f1_ss << " at tau " << r.uq_report.tau << "\n";
    std::cout << "reports: " << (fs::path(cfg.artifacts_root) / "reports").string() << "\n";
    return 0;
}

struct EvalArgs {
    std::string seg_checkpoint, meta_checkpoint, manifest;
    std::string split = "test";
    std::string calib_split = "val";
    std::optional<double> tau;
    std::string out;
    int batch = 4;
};

int cmd_eval(const EvalArgs& a) {
    synth::DatasetManifest data = synth::load_manifest(a.manifest);
    Checkpoint seg_ck = read_checkpoint(a.seg_checkpoint);
    SegNet<float> seg = load_segmentation_model(seg_ck);
    const Normalization norm = checkpoint_normalization(seg_ck);

    fs::create_directories(a.out);
    const SegMetricsReport sr = evaluate_segmentation(seg, data, a.split, norm, a.batch);
    {
        std::ofstream os((fs::path(a.out) / "segmentation.json").string(), std::ios::trunc);
        os << seg_report_json(sr).dump(2) << "\n";
        std::ofstream cs((fs::path(a.out) / "segmentation.csv").string(), std::ios::trunc);
        cs << seg_report_csv(sr);
        std::ofstream ts((fs::path(a.out) / "segmentation_table.csv").string(), std::ios::trunc);
        ts << seg_report_table_csv(sr);
    }
    std::cout << seg_report_table_csv(sr);

    if (!a.meta_checkpoint.empty()) {
        MetaNet<float> meta = load_meta_model(read_checkpoint(a.meta_checkpoint));
        const UqMetricsReport ur =
            evaluate_uq(seg, meta, data, a.calib_split, a.split, norm, a.tau, a.batch);
        std::ofstream os((fs::path(a.out) / "uncertainty.json").string(), std::ios::trunc);
        os << uq_report_json(ur).dump(2) << "\n";
        std::ofstream cs((fs::path(a.out) / "uncertainty.csv").string(), std::ios::trunc);
        cs << uq_report_csv(ur);
        std::cout << uq_report_csv(ur);
    }
    std::cout << "reports written to " << a.out << "\n";
    return 0;
}

struct PredictArgs {
    std::string seg_checkpoint, meta_checkpoint;
    std::vector<std::string> inputs;
    std::string gt;  // optional ground-truth mask for a single input
    std::string manifest, split;
    std::string out;
    double alpha = 0.5;
};

int cmd_predict(const PredictArgs& a) {
    Checkpoint seg_ck = read_checkpoint(a.seg_checkpoint);
    SegNet<float> seg = load_segmentation_model(seg_ck);
    const Normalization norm = checkpoint_normalization(seg_ck);
    std::optional<MetaNet<float>> meta;
    if (!a.meta_checkpoint.empty())
        meta.emplace(load_meta_model(read_checkpoint(a.meta_checkpoint)));

    struct Item {
        std::string path;
        std::optional<std::string> gt_path;
    };
    std::vector<Item> items;
    if (!a.manifest.empty()) {
        synth::DatasetManifest m = synth::load_manifest(a.manifest);
        for (const auto* e : m.split(a.split.empty() ? "test" : a.split))
            items.push_back({(fs::path(m.root) / e->image).string(),
                             (fs::path(m.root) / e->mask).string()});
    }
    for (std::size_t i = 0; i < a.inputs.size(); ++i) {
        Item it{a.inputs[i], std::nullopt};
        if (!a.gt.empty() && a.inputs.size() == 1) it.gt_path = a.gt;
        items.push_back(std::move(it));
    }
    if (items.empty()) throw ConfigError("predict: no inputs (pass image paths or --manifest)");

    fs::create_directories(a.out);
    const int target = seg.config().input_size;
    int failures = 0;
    for (const auto& item : items) {
        try {
            cv::Mat img = read_png_gray(item.path);
            std::optional<LabelMask> gt;
            if (item.gt_path) gt = mat_to_mask(read_png_gray(*item.gt_path));
            LabelMask placeholder(img.rows, img.cols);
            ImageSample s = preprocess(img, gt ? *gt : placeholder, target);

            Batch batch;
            batch.images.resize(1, 3, target, target);
            sample_to_batch(s, batch.images, 0, norm);
            auto [probs, preds] = seg.predict(batch.images);
            const LabelMask& pred = preds[0];

            const std::string stem = fs::path(item.path).stem().string();
            write_png((fs::path(a.out) / (stem + "_mask.png")).string(), mask_to_mat(pred));
            write_png((fs::path(a.out) / (stem + "_overlay.png")).string(),
                      overlay_mask(s.image, pred, a.alpha));
            if (meta) {
                Tensor<float> u_hat = meta->forward(probs, false);
                SoftLabelMap soft(target, target);
                std::copy(u_hat.ptr(), u_hat.ptr() + u_hat.size(), soft.v.begin());
                write_png((fs::path(a.out) / (stem + "_uncertainty.png")).string(),
                          uncertainty_heatmap(soft));
            }
            if (gt) {
                write_png((fs::path(a.out) / (stem + "_error.png")).string(),
                          error_map(pred, s.mask));
            }
        } catch (const std::exception& e) {
            std::cerr << "predict: " << item.path << ": " << e.what() << "\n";
            ++failures;
        }
    }
    std::cout << "wrote outputs for " << (items.size() - failures) << "/" << items.size()
              << " inputs to " << a.out << "\n";
    return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layered-particle segmentation with uncertainty-aware misclassification "
                 "detection"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth_cmd->add_option("--profile", sa.profile, "Domain profile: agr2like | agr567like");
    synth_cmd->add_option("--count", sa.count, "Number of samples")
        ->required()
        ->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", sa.seed, "Global seed");
    synth_cmd->add_option("--out", sa.out, "Output directory")->required();
    synth_cmd->add_option("--size", sa.size, "Canvas size in pixels")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--fractions", sa.fractions, "train,val,test split fractions")
        ->expected(3);

    TrainSegArgs ta;
    auto* train_cmd = app.add_subcommand("train-seg", "Train the segmentation model");
    train_cmd->add_option("--manifest", ta.manifest, "Dataset manifest")->required();
    train_cmd->add_option("--stage", ta.stage, "Training stage (2 or 3)")
        ->check(CLI::Range(2, 3));
    train_cmd->add_option("--init", ta.init,
                          "Initialization: 'random', a backbone checkpoint, or a segmentation "
                          "checkpoint to fine-tune");
    train_cmd->add_option("--out", ta.out, "Artifacts directory");
    train_cmd->add_option("--preset", ta.preset, "Model preset: resnet152like | tiny");
    train_cmd->add_option("--input-size", ta.input_size, "Model input resolution");
    train_cmd->add_option("--epochs", ta.epochs, "Epochs")->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", ta.lr, "Adam learning rate");
    train_cmd->add_option("--batch", ta.batch, "Batch size")->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", ta.seed, "Seed");
    train_cmd->add_flag("--no-augment", ta.no_augment, "Disable training augmentation");

    TrainMetaArgs ma;
    auto* meta_cmd = app.add_subcommand("train-meta", "Train the uncertainty meta-model");
    meta_cmd->add_option("--seg-checkpoint", ma.seg_checkpoint, "Frozen segmentation checkpoint")
        ->required();
    meta_cmd->add_option("--manifest", ma.manifest, "Dataset manifest")->required();
    meta_cmd->add_option("--out", ma.out, "Artifacts directory");
    meta_cmd->add_option("--epochs", ma.epochs, "Epochs")->check(CLI::PositiveNumber);
    meta_cmd->add_option("--lr", ma.lr, "Adam learning rate");
    meta_cmd->add_option("--batch", ma.batch, "Batch size")->check(CLI::PositiveNumber);
    meta_cmd->add_option("--seed", ma.seed, "Seed");
    meta_cmd->add_option("--e-correct", ma.wfmse.e_correct, "WFMSE weight for correct pixels");
    meta_cmd->add_option("--e-incorrect", ma.wfmse.e_incorrect,
                         "WFMSE weight for incorrect pixels");
    meta_cmd->add_option("--beta", ma.wfmse.beta, "WFMSE beta");
    meta_cmd->add_option("--gamma", ma.wfmse.gamma, "WFMSE gamma");

    std::string pipeline_config;
    auto* pipe_cmd = app.add_subcommand("pipeline", "Run the full multi-stage pipeline");
    pipe_cmd->add_option("--config", pipeline_config, "Pipeline config (JSON)")->required();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints on a dataset split");
    eval_cmd->add_option("--seg-checkpoint", ea.seg_checkpoint, "Segmentation checkpoint")
        ->required();
    eval_cmd->add_option("--meta-checkpoint", ea.meta_checkpoint, "Meta checkpoint (optional)");
    eval_cmd->add_option("--manifest", ea.manifest, "Dataset manifest")->required();
    eval_cmd->add_option("--split", ea.split, "Split to evaluate");
    eval_cmd->add_option("--calib-split", ea.calib_split, "Split used to calibrate tau");
    double tau_value = -2.0;
    eval_cmd->add_option("--tau", tau_value, "Override the calibrated threshold");
    eval_cmd->add_option("--out", ea.out, "Report directory");
    eval_cmd->add_option("--batch", ea.batch, "Batch size")->check(CLI::PositiveNumber);

    PredictArgs pa;
    auto* pred_cmd = app.add_subcommand("predict", "Run inference and write result images");
    pred_cmd->add_option("--seg-checkpoint", pa.seg_checkpoint, "Segmentation checkpoint")
        ->required();
    pred_cmd->add_option("--meta-checkpoint", pa.meta_checkpoint, "Meta checkpoint (optional)");
    pred_cmd->add_option("inputs", pa.inputs, "Input image paths");
    pred_cmd->add_option("--gt", pa.gt, "Ground-truth mask (single input only)");
    pred_cmd->add_option("--manifest", pa.manifest, "Dataset manifest to draw inputs from");
    pred_cmd->add_option("--split", pa.split, "Split within --manifest");
    pred_cmd->add_option("--out", pa.out, "Output directory");
    pred_cmd->add_option("--alpha", pa.alpha, "Overlay opacity");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (sa.out.empty()) sa.out = default_artifacts_root() + "/dataset";
    if (ta.out.empty()) ta.out = default_artifacts_root();
    if (ma.out.empty()) ma.out = default_artifacts_root();
    if (ea.out.empty()) ea.out = default_artifacts_root() + "/reports";
    if (pa.out.empty()) pa.out = default_artifacts_root() + "/predictions";
    if (tau_value >= -1.0) ea.tau = tau_value;

    try {
        if (synth_cmd->parsed()) return cmd_synth(sa);
        if (train_cmd->parsed()) return cmd_train_seg(ta);
        if (meta_cmd->parsed()) return cmd_train_meta(ma);
        if (pipe_cmd->parsed()) return cmd_pipeline(pipeline_config);
        if (eval_cmd->parsed()) return cmd_eval(ea);
        if (pred_cmd->parsed()) return cmd_predict(pa);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
