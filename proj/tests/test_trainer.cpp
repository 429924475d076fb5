#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "uaseg/trainer.hpp"

using namespace uaseg;

namespace {

struct MiniData {
    std::string dir;
    synth::DatasetManifest manifest;
};

// Small agr567like dataset shared across the training tests.
const MiniData& mini_dataset() {
    static MiniData data = [] {
        MiniData d;
        d.dir = testutil::scratch_dir("trainer_data");
        d.manifest = synth::generate_dataset(synth::DomainProfile::agr567like(), 24,
                                             synth::SplitFractions{0.5, 0.25, 0.25}, 9, d.dir, 64);
        return d;
    }();
    return data;
}

StageConfig quick_stage(const std::string& id, int epochs, double lr = 1e-3, int batch = 4) {
    StageConfig cfg;
    cfg.id = id;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.batch_size = batch;
    cfg.augment = false;  // keep unit runs fast; augmentation is exercised in dataio tests
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("stage config validation") {
    StageConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = StageConfig{};
    cfg.plateau_factor = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = StageConfig::meta_defaults();
    CHECK(cfg.lr == 1e-4);
    CHECK(cfg.batch_size == 16);
    CHECK_FALSE(cfg.augment);
}

TEST_CASE("segmentation training drops the loss and logs every epoch") {
    const auto& data = mini_dataset();
    const std::string out = testutil::scratch_dir("trainer_seg");
    Rng rng(71);
    SegNet<float> model(SegModelConfig::tiny(64), rng);
    const Normalization norm = compute_normalization(data.manifest, "train", 64);
    const StageConfig cfg = quick_stage("stage3", 4);
    AugmentPolicy policy;
    const SegTrainResult r =
        train_segmentation(model, data.manifest, cfg, policy, out, norm, true);

    REQUIRE(r.log.epochs.size() == 4);
    for (int e = 0; e < 4; ++e) REQUIRE(r.log.epochs[e].epoch == e + 1);
    CHECK(r.log.epochs.back().train_loss < r.log.epochs.front().train_loss);
    CHECK(r.best_val_miou > 0.0);
    CHECK(std::filesystem::exists(r.best_checkpoint));
    CHECK(std::filesystem::exists(out + "/logs/stage3.jsonl"));

    // Learning rate never increases and any decrease is exactly x0.1.
    for (std::size_t e = 1; e < r.log.epochs.size(); ++e) {
        const double prev = r.log.epochs[e - 1].lr, cur = r.log.epochs[e].lr;
        REQUIRE(cur <= prev + 1e-15);
        if (cur < prev) REQUIRE(cur == Catch::Approx(prev * 0.1));
    }

    // Checkpoint metadata carries the stage's normalization.
    const Checkpoint ck = read_checkpoint(r.best_checkpoint);
    CHECK(ck.kind == "segmentation");
    const Normalization saved = checkpoint_normalization(ck);
    CHECK(saved.mean == Catch::Approx(norm.mean));
}

TEST_CASE("seeded training is bit-reproducible") {
    const auto& data = mini_dataset();
    auto run = [&](const std::string& tag) {
        const std::string out = testutil::scratch_dir("trainer_repro_" + tag);
        Rng rng(72);
        SegNet<float> model(SegModelConfig::tiny(64), rng);
        const Normalization norm = compute_normalization(data.manifest, "train", 64);
        AugmentPolicy policy;
        StageConfig cfg = quick_stage("stage3", 2);
        cfg.augment = true;  // exercise augmentation determinism too
        return train_segmentation(model, data.manifest, cfg, policy, out, norm, true);
    };
    const auto a = run("a");
    const auto b = run("b");
    REQUIRE(a.log.epochs.size() == b.log.epochs.size());
    for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
        REQUIRE(a.log.epochs[e].train_loss == b.log.epochs[e].train_loss);
        REQUIRE(a.log.epochs[e].val_miou == b.log.epochs[e].val_miou);
    }
    SegNet<float> ma = load_segmentation_model(read_checkpoint(a.best_checkpoint));
    SegNet<float> mb = load_segmentation_model(read_checkpoint(b.best_checkpoint));
    REQUIRE(tensors_checksum(ma.named_tensors()) == tensors_checksum(mb.named_tensors()));
}

TEST_CASE("training aborts with a diagnostic checkpoint when the loss diverges") {
    const auto& data = mini_dataset();
    const std::string out = testutil::scratch_dir("trainer_diverge");
    Rng rng(73);
    SegNet<float> model(SegModelConfig::tiny(64), rng);
    const Normalization norm = compute_normalization(data.manifest, "train", 64);
    AugmentPolicy policy;
    StageConfig cfg = quick_stage("stage3", 6, /*lr=*/1e28);
    try {
        train_segmentation(model, data.manifest, cfg, policy, out, norm, false);
        SUCCEED("run survived an absurd learning rate without NaN");
    } catch (const TrainingDivergedError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("diagnostic") != std::string::npos);
        CHECK(std::filesystem::exists(out + "/checkpoints/diagnostic_stage3.ckpt"));
    }
}

TEST_CASE("meta training freezes the segmentation model and records defaults") {
    const auto& data = mini_dataset();
    const std::string out = testutil::scratch_dir("trainer_meta");
    Rng rng(74);
    SegNet<float> seg(SegModelConfig::tiny(64), rng);
    const Normalization norm = compute_normalization(data.manifest, "train", 64);
    const std::uint64_t before = tensors_checksum(seg.named_tensors());

    Rng mrng(75);
    MetaNet<float> meta(MetaModelConfig::tiny(64), mrng);
    StageConfig cfg = StageConfig::meta_defaults();
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.seed = 7;
    const WfmseParams wfmse;
    const MetaTrainResult r = train_meta(seg, meta, data.manifest, cfg, wfmse, out, norm);

    REQUIRE(tensors_checksum(seg.named_tensors()) == before);
    REQUIRE(std::filesystem::exists(r.best_checkpoint));
    REQUIRE(r.best_val_ap_e >= 0.0);
    // Selection rule: best checkpoint's AP-E is at least epoch 1's.
    REQUIRE(r.best_val_ap_e >= r.log.epochs.front().val_ap_e);

    const Checkpoint ck = read_checkpoint(r.best_checkpoint);
    CHECK(ck.kind == "meta");
    CHECK(ck.metadata.at("lr").get<double>() == 1e-4);
    CHECK(ck.metadata.at("batch").get<int>() == 6);
    CHECK(ck.metadata.at("wfmse").at("e_correct").get<double>() == 1.0);
    CHECK(ck.metadata.at("wfmse").at("e_incorrect").get<double>() == 8.0);
    CHECK(ck.metadata.at("wfmse").at("beta").get<double>() == 20.0);
    CHECK(ck.metadata.at("wfmse").at("gamma").get<double>() == 1.0);
}

TEST_CASE("backbone initialization paths") {
    const auto& data = mini_dataset();
    SegModelConfig cfg = SegModelConfig::tiny(64);

    SECTION("random is deterministic") {
        BackboneInit init;
        init.source = "random";
        init.seed = 42;
        Checkpoint a = init_backbone(cfg, init);
        Checkpoint b = init_backbone(cfg, init);
        REQUIRE(a.order == b.order);
        for (const auto& name : a.order)
            REQUIRE(a.tensors.at(name).raw() == b.tensors.at(name).raw());
    }

    SECTION("file round trip validates shapes") {
        const std::string dir = testutil::scratch_dir("trainer_bb");
        BackboneInit init;
        init.source = "random";
        init.seed = 1;
        write_checkpoint(dir + "/bb.ckpt", init_backbone(cfg, init));
        BackboneInit from_file;
        from_file.source = "file";
        from_file.path = dir + "/bb.ckpt";
        CHECK_NOTHROW(init_backbone(cfg, from_file));
    }

    SECTION("synthetic pretrain reaches above-chance patch accuracy") {
        const Normalization norm = compute_normalization(data.manifest, "train", 64);
        BackboneInit init;
        init.source = "synthetic-pretrain";
        init.seed = 3;
        init.pretrain_epochs = 3;
        Checkpoint ck = init_backbone(cfg, init, &data.manifest, norm);
        REQUIRE(ck.metadata.at("source") == "synthetic-pretrain");
        const double acc = ck.metadata.at("patch_accuracy").get<double>();
        INFO("patch accuracy " << acc);
        REQUIRE(acc > 1.0 / 6.0);
    }
}

TEST_CASE("pipeline resumes from a completed stage with identical results") {
    const std::string data_dir = testutil::scratch_dir("pipeline_data");
    const auto agr2 = synth::generate_dataset(synth::DomainProfile::agr2like(), 12,
                                              synth::SplitFractions{1.0, 0.0, 0.0}, 31, data_dir + "/agr2", 64);
    const auto agr567 = synth::generate_dataset(synth::DomainProfile::agr567like(), 20,
                                                synth::SplitFractions{0.6, 0.2, 0.2}, 32,
                                                data_dir + "/agr567", 64);

    PipelineConfig cfg;
    cfg.seed = 17;
    cfg.model = SegModelConfig::tiny(64);
    cfg.meta_model = MetaModelConfig::tiny(64);
    cfg.stage1.source = "random";
    cfg.stage2 = quick_stage("stage2", 2);
    cfg.stage3 = quick_stage("stage3", 2);
    cfg.meta = StageConfig::meta_defaults();
    cfg.meta.epochs = 2;
    cfg.meta.batch_size = 6;
    cfg.stage2_manifest = data_dir + "/agr2/manifest.json";
    cfg.stage3_manifest = data_dir + "/agr567/manifest.json";
    cfg.eval_manifest = cfg.stage3_manifest;
    cfg.augment.p_grid = cfg.augment.p_elastic = 0.0;  // shave a little time

    // Full run A.
    cfg.artifacts_root = testutil::scratch_dir("pipeline_a");
    const PipelineResult a = run_pipeline(cfg);
    REQUIRE(a.variant == "full");
    REQUIRE(std::filesystem::exists(cfg.artifacts_root + "/reports/segmentation.json"));
    REQUIRE(std::filesystem::exists(cfg.artifacts_root + "/reports/uncertainty.csv"));

    // Run B resumes after stages 1-2 (their artifacts borrowed from A).
    const std::string root_b = testutil::scratch_dir("pipeline_b");
    {
        nlohmann::ordered_json state;
        state["completed"]["stage1"] =
            (std::filesystem::path(a.seg_checkpoint).parent_path() / "backbone.ckpt").string();
        state["completed"]["stage2"] =
            (std::filesystem::path(a.seg_checkpoint).parent_path() / "stage2_best.ckpt").string();
        std::filesystem::create_directories(root_b);
        std::ofstream os(root_b + "/pipeline_state.json");
        os << state.dump(2) << "\n";
    }
    PipelineConfig cfg_b = cfg;
    cfg_b.artifacts_root = root_b;
    const PipelineResult b = run_pipeline(cfg_b);

    REQUIRE(a.seg_report.miou == b.seg_report.miou);
    REQUIRE(a.seg_report.mp == b.seg_report.mp);
    REQUIRE(a.uq_report.tau == b.uq_report.tau);
    REQUIRE(a.uq_report.f1_ss == b.uq_report.f1_ss);

    // Ablation flag labels the report.
    PipelineConfig cfg_c = cfg;
    cfg_c.artifacts_root = testutil::scratch_dir("pipeline_c");
    cfg_c.skip_stage2 = true;
    cfg_c.stage3.epochs = 1;
    cfg_c.meta.epochs = 1;
    const PipelineResult c = run_pipeline(cfg_c);
    REQUIRE(c.variant == "w/o FT-stage2");
    std::ifstream is(cfg_c.artifacts_root + "/reports/segmentation.json");
    nlohmann::json report;
    is >> report;
    REQUIRE(report.at("variant") == "w/o FT-stage2");
}
