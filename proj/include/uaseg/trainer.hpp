#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaseg/checkpoint.hpp"
#include "uaseg/dataio.hpp"
#include "uaseg/losses.hpp"
#include "uaseg/metanet.hpp"
#include "uaseg/metrics.hpp"
#include "uaseg/segnet.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Stage configuration and the epoch log.
// ---------------------------------------------------------------------------

struct StageConfig {
    std::string id = "stage2";  // stage2 | stage3 | meta
    int epochs = 50;
    double lr = 1e-3;  // 1e-4 for the meta stage
    int batch_size = 4;  // 16 for the meta stage
    double plateau_factor = 0.1;
    int plateau_patience = 5;
    double plateau_min_delta = 1e-4;
    bool augment = true;  // off for the meta stage
    std::uint64_t seed = 0;
    int grad_accum = 1;

    void validate() const {
        if (epochs <= 0) throw ConfigError("StageConfig: epochs must be > 0");
        if (batch_size <= 0) throw ConfigError("StageConfig: batch size must be > 0");
        if (plateau_factor <= 0.0 || plateau_factor >= 1.0)
            throw ConfigError("StageConfig: plateau factor must be in (0,1)");
        if (grad_accum <= 0 || batch_size % grad_accum != 0)
            throw ConfigError("StageConfig: grad_accum must divide the batch size");
    }

    static StageConfig meta_defaults() {
        StageConfig c;
        c.id = "meta";
        c.lr = 1e-4;
        c.batch_size = 16;
        c.augment = false;
        return c;
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double lr = 0.0;
    double val_miou = -1.0;  // -1 when not evaluated
    double val_ap_e = -1.0;
    std::string checkpoint;
    double wall_ms = 0.0;
};

struct TrainLog {
    std::string stage;
    std::string reproducibility_mode = "exact";
    int batch_size = 0;
    int grad_accum = 1;
    std::vector<EpochRecord> epochs;

    void write_jsonl(const std::string& path) const {
        std::filesystem::path p(path);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw IoError("cannot write train log: " + path);
        nlohmann::ordered_json head{{"event", "start"},
                                    {"stage", stage},
                                    {"reproducibility_mode", reproducibility_mode},
                                    {"batch_size", batch_size},
                                    {"grad_accum", grad_accum}};
        os << head.dump() << "\n";
        for (const auto& e : epochs) {
            nlohmann::ordered_json j{{"epoch", e.epoch},         {"train_loss", e.train_loss},
                                     {"lr", e.lr},               {"val_miou", e.val_miou},
                                     {"val_ap_e", e.val_ap_e},   {"checkpoint", e.checkpoint},
                                     {"wall_ms", e.wall_ms}};
            os << j.dump() << "\n";
        }
    }
};

// ---------------------------------------------------------------------------
// Evaluation helpers shared by training (per-epoch selection) and the CLI.
// ---------------------------------------------------------------------------

inline SegMetricsReport evaluate_segmentation(SegNet<float>& model,
                                              const synth::DatasetManifest& data,
                                              const std::string& split, Normalization norm,
                                              int batch_size = 4) {
    SplitLoader loader(data, split, batch_size, 0, model.config().input_size, norm);
    ConfusionCounts counts(model.config().num_classes);
    for (int b = 0; b < loader.num_batches(); ++b) {
        Batch batch = loader.get_batch(0, b);
        auto [probs, preds] = model.predict(batch.images);
        for (std::size_t i = 0; i < preds.size(); ++i)
            accumulate_confusion(counts, preds[i], batch.masks[i]);
    }
    return seg_report(counts);
}

// Per-pixel vectors needed by the misclassification-detection metrics.
struct UqPixels {
    std::vector<float> u_hat;          // meta-model soft labels
    std::vector<std::uint8_t> correct; // segmentation correctness
    std::vector<float> u_target;       // SoftLabel ground truth
    std::vector<float> msp;            // max softmax probability (baseline score)
};

inline UqPixels collect_uq_pixels(SegNet<float>& seg, MetaNet<float>& meta,
                                  const synth::DatasetManifest& data, const std::string& split,
                                  Normalization norm, int batch_size = 4) {
    SplitLoader loader(data, split, batch_size, 0, seg.config().input_size, norm);
    UqPixels out;
    for (int b = 0; b < loader.num_batches(); ++b) {
        Batch batch = loader.get_batch(0, b);
        auto [probs, preds] = seg.predict(batch.images);
        Tensor<float> u = soft_label_targets(probs, preds, batch.masks);
        Tensor<float> u_hat = meta.forward(probs, /*train=*/false);
        const int H = probs.h(), W = probs.w();
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int n = 0; n < probs.n(); ++n) {
            const float* up = u.plane(n, 0);
            const float* hp = u_hat.plane(n, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                out.u_hat.push_back(hp[i]);
                out.u_target.push_back(up[i]);
                out.correct.push_back(preds[n].v[i] == batch.masks[n].v[i] ? 1 : 0);
                float mx = probs.plane(n, 0)[i];
                for (int c = 1; c < probs.c(); ++c) mx = std::max(mx, probs.plane(n, c)[i]);
                out.msp.push_back(mx);
            }
        }
    }
    return out;
}

// Calibrates tau on `calib_split` (unless overridden) and evaluates the six
// detection measures on `eval_split`.
inline UqMetricsReport evaluate_uq(SegNet<float>& seg, MetaNet<float>& meta,
                                   const synth::DatasetManifest& data,
                                   const std::string& calib_split, const std::string& eval_split,
                                   Normalization norm, std::optional<double> tau_override = {},
                                   int batch_size = 4) {
    UqMetricsReport r;
    if (tau_override) {
        r.tau = *tau_override;
    } else {
        UqPixels calib = collect_uq_pixels(seg, meta, data, calib_split, norm, batch_size);
        r.tau = select_threshold(calib.u_hat, calib.correct);
    }
    UqPixels px = collect_uq_pixels(seg, meta, data, eval_split, norm, batch_size);
    r.ap = average_precision(px.u_hat, px.correct, PositiveClass::Correct);
    r.ap_e = average_precision(px.u_hat, px.correct, PositiveClass::Incorrect);
    r.mse = uq_mse(px.u_target, px.u_hat);
    const SpecSensF1 s = spec_sens_f1(px.u_hat, px.correct, r.tau);
    r.spec = s.spec;
    r.sens = s.sens;
    r.f1_ss = s.f1_ss;
    r.tn = s.tn;
    r.fp = s.fp;
    r.tp = s.tp;
    r.fn = s.fn;
    r.msp_ap_e = average_precision(px.msp, px.correct, PositiveClass::Incorrect);
    return r;
}

// ---------------------------------------------------------------------------
// Segmentation training (stages two and three): Dice loss, Adam, LR plateau
// on the training loss, best checkpoint by validation mIoU (or the final
// epoch when the stage trains without validation).
// ---------------------------------------------------------------------------

struct SegTrainResult {
    std::string best_checkpoint;
    TrainLog log;
    double best_val_miou = -1.0;
};

namespace detail {

inline nlohmann::ordered_json norm_json(const Normalization& n) {
    return {{"mean", n.mean}, {"stddev", n.stddev}};
}

inline Normalization norm_from_json(const nlohmann::json& j) {
    return {j.at("mean").get<float>(), j.at("stddev").get<float>()};
}

inline std::string checkpoint_path(const std::string& out_dir, const std::string& name) {
    return (std::filesystem::path(out_dir) / "checkpoints" / (name + ".ckpt")).string();
}

}  // namespace detail

inline SegTrainResult train_segmentation(SegNet<float>& model, const synth::DatasetManifest& data,
                                         const StageConfig& cfg, const AugmentPolicy& policy,
                                         const std::string& out_dir, Normalization norm,
                                         bool use_val_selection = true) {
    cfg.validate();
    const int micro_batch = cfg.batch_size / cfg.grad_accum;
    SplitLoader train_loader(data, "train", micro_batch, cfg.seed,
                             model.config().input_size, norm,
                             cfg.augment ? &policy : nullptr, /*shuffle=*/true);

    nn::ParamSet<float> params;
    model.params(params);
    nn::Adam<float> adam(params, static_cast<float>(cfg.lr));
    nn::PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);

    SegTrainResult result;
    result.log.stage = cfg.id;
    result.log.batch_size = cfg.batch_size;
    result.log.grad_accum = cfg.grad_accum;
    nlohmann::ordered_json cfg_json;
    to_json(cfg_json, model.config());

    auto save = [&](const std::string& name, int epoch, double val_miou) {
        nlohmann::ordered_json meta{{"stage", cfg.id},
                                    {"epoch", epoch},
                                    {"lr", adam.lr()},
                                    {"batch", cfg.batch_size},
                                    {"seed", cfg.seed},
                                    {"val_miou", val_miou},
                                    {"normalization", detail::norm_json(norm)}};
        const std::string path = detail::checkpoint_path(out_dir, name);
        write_checkpoint(path, snapshot_tensors(model.named_tensors(), "segmentation", cfg_json,
                                                meta));
        return path;
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        std::int64_t sample_count = 0;
        int micro_in_group = 0;
        for (int b = 0; b < train_loader.num_batches(); ++b) {
            Batch batch = train_loader.get_batch(epoch, b);
            Tensor<float> logits = model.forward(batch.images, /*train=*/true);
            Tensor<float> probs = nn::softmax_channels(logits);
            Tensor<float> gprobs;
            const float loss = dice_loss(probs, batch.masks, &gprobs);
            if (!std::isfinite(loss)) {
                const std::string diag = save("diagnostic_" + cfg.id, epoch, -1.0);
                throw TrainingDivergedError("training loss is not finite at " + cfg.id +
                                            " epoch " + std::to_string(epoch) + ", batch " +
                                            std::to_string(b) + "; diagnostic checkpoint at " +
                                            diag);
            }
            Tensor<float> glogits = nn::softmax_backward(probs, gprobs);
            if (cfg.grad_accum > 1) glogits.scale_(1.f / static_cast<float>(cfg.grad_accum));
            if (micro_in_group == 0) nn::zero_grads(params);
            model.backward(glogits);
            ++micro_in_group;
            if (micro_in_group == cfg.grad_accum || b + 1 == train_loader.num_batches()) {
                adam.step(params);
                micro_in_group = 0;
            }
            loss_sum += static_cast<double>(loss) * batch.masks.size();
            sample_count += static_cast<std::int64_t>(batch.masks.size());
        }
        const double epoch_loss = loss_sum / static_cast<double>(sample_count);
        if (plateau.observe(epoch_loss))
            adam.set_lr(static_cast<float>(adam.lr() * plateau.factor()));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss;
        rec.lr = adam.lr();
        if (use_val_selection) {
            const SegMetricsReport vr =
                evaluate_segmentation(model, data, "val", norm, micro_batch);
            rec.val_miou = vr.miou;
            if (vr.miou > result.best_val_miou) {
                result.best_val_miou = vr.miou;
                result.best_checkpoint = save(cfg.id + "_best", epoch, vr.miou);
            }
        }
        rec.checkpoint = save(cfg.id + "_last", epoch, rec.val_miou);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count();
        result.log.epochs.push_back(rec);
    }
    if (!use_val_selection || result.best_checkpoint.empty()) {
        result.best_checkpoint = save(cfg.id + "_best", cfg.epochs, result.best_val_miou);
    }
    result.log.write_jsonl(
        (std::filesystem::path(out_dir) / "logs" / (cfg.id + ".jsonl")).string());
    return result;
}

// ---------------------------------------------------------------------------
// Meta-model training: the segmentation model runs frozen in evaluation mode
// (verified by checksum); targets and weights come from its predictions; the
// best checkpoint maximizes validation AP-E.
// ---------------------------------------------------------------------------

struct MetaTrainResult {
    std::string best_checkpoint;
    TrainLog log;
    double best_val_ap_e = -1.0;
};

inline MetaTrainResult train_meta(SegNet<float>& seg, MetaNet<float>& meta,
                                  const synth::DatasetManifest& data, const StageConfig& cfg,
                                  const WfmseParams& wfmse, const std::string& out_dir,
                                  Normalization norm) {
    cfg.validate();
    wfmse.validate();
    const std::uint64_t seg_checksum_before = tensors_checksum(seg.named_tensors());

    SplitLoader train_loader(data, "train", cfg.batch_size, cfg.seed,
                             seg.config().input_size, norm, nullptr, /*shuffle=*/true);

    nn::ParamSet<float> params;
    meta.params(params);
    nn::Adam<float> adam(params, static_cast<float>(cfg.lr));
    nn::PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);

    MetaTrainResult result;
    result.log.stage = cfg.id;
    result.log.batch_size = cfg.batch_size;
    nlohmann::ordered_json cfg_json;
    to_json(cfg_json, meta.config());
    nlohmann::ordered_json wfmse_json{{"e_correct", wfmse.e_correct},
                                      {"e_incorrect", wfmse.e_incorrect},
                                      {"beta", wfmse.beta},
                                      {"gamma", wfmse.gamma}};

    auto save = [&](const std::string& name, int epoch, double ap_e) {
        nlohmann::ordered_json md{{"stage", cfg.id},
                                  {"epoch", epoch},
                                  {"lr", cfg.lr},
                                  {"batch", cfg.batch_size},
                                  {"seed", cfg.seed},
                                  {"wfmse", wfmse_json},
                                  {"val_ap_e", ap_e},
                                  {"normalization", detail::norm_json(norm)}};
        const std::string path = detail::checkpoint_path(out_dir, name);
        write_checkpoint(path, snapshot_tensors(meta.named_tensors(), "meta", cfg_json, md));
        return path;
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        std::int64_t sample_count = 0;
        for (int b = 0; b < train_loader.num_batches(); ++b) {
            Batch batch = train_loader.get_batch(epoch, b);
            auto [probs, preds] = seg.predict(batch.images);
            Tensor<float> u = soft_label_targets(probs, preds, batch.masks);
            Tensor<float> weights = error_weights<float>(preds, batch.masks, wfmse);
            Tensor<float> u_hat = meta.forward(probs, /*train=*/true);
            Tensor<float> grad;
            const float loss = wfmse_loss(u, u_hat, weights, wfmse, &grad);
            if (!std::isfinite(loss)) {
                const std::string diag = save("diagnostic_meta", epoch, -1.0);
                throw TrainingDivergedError("meta training loss is not finite at epoch " +
                                            std::to_string(epoch) + "; diagnostic checkpoint at " +
                                            diag);
            }
            nn::zero_grads(params);
            meta.backward(grad);
            adam.step(params);
            loss_sum += static_cast<double>(loss) * batch.masks.size();
            sample_count += static_cast<std::int64_t>(batch.masks.size());
        }
        const double epoch_loss = loss_sum / static_cast<double>(sample_count);
        if (plateau.observe(epoch_loss))
            adam.set_lr(static_cast<float>(adam.lr() * plateau.factor()));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss;
        rec.lr = adam.lr();
        double ap_e = -1.0;
        try {
            UqPixels vp = collect_uq_pixels(seg, meta, data, "val", norm, cfg.batch_size);
            ap_e = average_precision(vp.u_hat, vp.correct, PositiveClass::Incorrect);
        } catch (const UndefinedMetricError&) {
            ap_e = -1.0;  // no misclassified validation pixels this epoch
        }
        rec.val_ap_e = ap_e;
        if (ap_e > result.best_val_ap_e) {
            result.best_val_ap_e = ap_e;
            result.best_checkpoint = save("meta_best", epoch, ap_e);
        }
        rec.checkpoint = save("meta_last", epoch, ap_e);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count();
        result.log.epochs.push_back(rec);
    }
    if (result.best_checkpoint.empty())
        result.best_checkpoint = save("meta_best", cfg.epochs, result.best_val_ap_e);
    result.log.write_jsonl((std::filesystem::path(out_dir) / "logs" / "meta.jsonl").string());

    if (tensors_checksum(seg.named_tensors()) != seg_checksum_before)
        throw Error("frozen segmentation model changed during meta training");
    return result;
}

// ---------------------------------------------------------------------------
// Stage one: backbone initialization. Either random, an external backbone
// checkpoint, or a quick synthetic classification pretrain (the encoder plus
// a 1x1 head classifying each /32 cell of a synthetic particle image).
// ---------------------------------------------------------------------------

struct BackboneInit {
    std::string source = "random";  // random | file | synthetic-pretrain
    std::string path;
    std::uint64_t seed = 0;
    int pretrain_epochs = 3;
    double pretrain_lr = 1e-3;
    int pretrain_batch = 8;
};

namespace detail {

// Nearest-neighbor downsample of a mask by the encoder's total stride.
inline LabelMask coarse_labels(const LabelMask& m, int factor) {
    LabelMask out(m.h / factor, m.w / factor);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            out.at(y, x) = m.at(y * factor + factor / 2, x * factor + factor / 2);
    return out;
}

}  // namespace detail

inline Checkpoint init_backbone(const SegModelConfig& cfg, const BackboneInit& init,
                                const synth::DatasetManifest* pretrain_data = nullptr,
                                Normalization norm = {});

// Validated load of a backbone checkpoint into a model's encoder.
inline void load_backbone(SegNet<float>& model, const Checkpoint& ck) {
    if (ck.kind != "backbone")
        throw CheckpointError("expected a backbone checkpoint, got kind '" + ck.kind + "'");
    nn::ParamSet<float> refs;
    model.encoder().params(refs, "encoder");
    model.encoder().buffers(refs, "encoder");
    apply_checkpoint(ck, refs);
}

inline Checkpoint init_backbone(const SegModelConfig& cfg, const BackboneInit& init,
                                const synth::DatasetManifest* pretrain_data, Normalization norm) {
    cfg.validate();
    nlohmann::ordered_json bb_config{{"preset", cfg.preset}, {"input_size", cfg.input_size}};

    if (init.source == "file") {
        Checkpoint ck = read_checkpoint(init.path);
        if (ck.kind != "backbone")
            throw CheckpointError("expected a backbone checkpoint at " + init.path);
        // Shape-validate against the preset before handing it out.
        Rng rng(0);
        SegNet<float> probe(cfg, rng);
        load_backbone(probe, ck);
        return ck;
    }

    Rng rng(init.seed);
    SegNet<float> model(cfg, rng);

    if (init.source == "random") {
        nn::ParamSet<float> refs;
        model.encoder().params(refs, "encoder");
        model.encoder().buffers(refs, "encoder");
        return snapshot_tensors(refs, "backbone", bb_config,
                                {{"source", "random"}, {"seed", init.seed}});
    }

    if (init.source != "synthetic-pretrain")
        throw ConfigError("init_backbone: unknown source '" + init.source + "'");
    if (!pretrain_data)
        throw ConfigError("init_backbone: synthetic-pretrain requires a dataset manifest");

    // Coarse-cell classification: encoder features -> 1x1 conv -> dice loss
    // against the /32-downsampled mask.
    auto& encoder = model.encoder();
    nn::Conv2d<float> head(encoder.plan().out_ch[3], cfg.num_classes, 1, 1, 0, true, rng);
    nn::ParamSet<float> params;
    encoder.params(params, "encoder");
    head.params(params, "head");
    nn::Adam<float> adam(params, static_cast<float>(init.pretrain_lr));

    SplitLoader loader(*pretrain_data, "train", init.pretrain_batch, init.seed,
                       cfg.input_size, norm, nullptr, /*shuffle=*/true);
    double accuracy = 0.0;
    for (int epoch = 1; epoch <= init.pretrain_epochs; ++epoch) {
        std::int64_t hits = 0, cells = 0;
        for (int b = 0; b < loader.num_batches(); ++b) {
            Batch batch = loader.get_batch(epoch, b);
            auto feats = encoder.forward(batch.images, /*train=*/true);
            Tensor<float> logits = head.forward(feats.bottleneck, /*train=*/true);
            Tensor<float> probs = nn::softmax_channels(logits);
            std::vector<LabelMask> coarse;
            coarse.reserve(batch.masks.size());
            for (const auto& m : batch.masks) coarse.push_back(detail::coarse_labels(m, 32));
            Tensor<float> gprobs;
            dice_loss(probs, coarse, &gprobs);
            Tensor<float> glogits = nn::softmax_backward(probs, gprobs);
            nn::zero_grads(params);
            Tensor<float> gfeat = head.backward(glogits);
            encoder.backward(gfeat, {}, {}, {}, {});
            adam.step(params);
            for (int n = 0; n < probs.n(); ++n) {
                LabelMask pred = argmax_labels(probs, n);
                for (std::size_t i = 0; i < pred.size(); ++i) {
                    hits += pred.v[i] == coarse[n].v[i];
                    ++cells;
                }
            }
        }
        accuracy = static_cast<double>(hits) / static_cast<double>(cells);
    }

    nn::ParamSet<float> refs;
    encoder.params(refs, "encoder");
    encoder.buffers(refs, "encoder");
    return snapshot_tensors(refs, "backbone", bb_config,
                            {{"source", "synthetic-pretrain"},
                             {"seed", init.seed},
                             {"epochs", init.pretrain_epochs},
                             {"patch_accuracy", accuracy}});
}

// ---------------------------------------------------------------------------
// Checkpoint loaders for full models.
// ---------------------------------------------------------------------------

inline SegNet<float> load_segmentation_model(const Checkpoint& ck) {
    if (ck.kind != "segmentation")
        throw CheckpointError("expected a segmentation checkpoint, got kind '" + ck.kind + "'");
    SegModelConfig cfg = ck.config.get<SegModelConfig>();
    Rng rng(0);
    SegNet<float> model(cfg, rng);
    apply_checkpoint(ck, model.named_tensors());
    return model;
}

inline MetaNet<float> load_meta_model(const Checkpoint& ck) {
    if (ck.kind != "meta")
        throw CheckpointError("expected a meta checkpoint, got kind '" + ck.kind + "'");
    MetaModelConfig cfg = ck.config.get<MetaModelConfig>();
    Rng rng(0);
    MetaNet<float> model(cfg, rng);
    apply_checkpoint(ck, model.named_tensors());
    return model;
}

inline Normalization checkpoint_normalization(const Checkpoint& ck) {
    if (ck.metadata.contains("normalization"))
        return detail::norm_from_json(ck.metadata.at("normalization"));
    return {};
}

// ---------------------------------------------------------------------------
// Pipeline: stage 1 (backbone init), stage 2 (related-domain training),
// stage 3 (target-domain fine-tune), meta stage, final evaluation. Each
// completed stage is recorded in a state file so an interrupted run resumes
// from the next stage.
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::string artifacts_root;
    std::uint64_t seed = 0;
    SegModelConfig model;
    MetaModelConfig meta_model;
    BackboneInit stage1;
    StageConfig stage2, stage3, meta;
    std::string stage2_manifest, stage3_manifest, eval_manifest;
    bool skip_stage2 = false;
    WfmseParams wfmse;
    AugmentPolicy augment;
    int eval_batch = 4;
};

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.artifacts_root = j.at("artifacts_root").get<std::string>();
    c.seed = j.value("seed", 0ULL);
    if (j.contains("model")) c.model = j.at("model").get<SegModelConfig>();
    if (j.contains("meta_model"))
        c.meta_model = j.at("meta_model").get<MetaModelConfig>();
    else {
        c.meta_model.input_size = c.model.input_size;
        c.meta_model.in_channels = c.model.num_classes;
    }

    auto stage = [&](const char* key, StageConfig base) {
        StageConfig s = base;
        if (!j.contains(key)) return s;
        const auto& js = j.at(key);
        s.epochs = js.value("epochs", s.epochs);
        s.lr = js.value("lr", s.lr);
        s.batch_size = js.value("batch", s.batch_size);
        s.grad_accum = js.value("grad_accum", s.grad_accum);
        return s;
    };
    StageConfig s2;
    s2.id = "stage2";
    c.stage2 = stage("stage2", s2);
    StageConfig s3;
    s3.id = "stage3";
    c.stage3 = stage("stage3", s3);
    c.meta = stage("meta", StageConfig::meta_defaults());

    if (j.contains("stage1")) {
        const auto& s1 = j.at("stage1");
        c.stage1.source = s1.value("source", c.stage1.source);
        c.stage1.path = s1.value("path", c.stage1.path);
        c.stage1.pretrain_epochs = s1.value("epochs", c.stage1.pretrain_epochs);
        c.stage1.pretrain_lr = s1.value("lr", c.stage1.pretrain_lr);
    }
    if (j.contains("stage2")) c.stage2_manifest = j.at("stage2").value("manifest", "");
    if (j.contains("stage3")) c.stage3_manifest = j.at("stage3").value("manifest", "");
    c.skip_stage2 = j.contains("stage2") && j.at("stage2").value("skip", false);
    if (j.contains("meta") && j.at("meta").contains("wfmse")) {
        const auto& w = j.at("meta").at("wfmse");
        c.wfmse.e_correct = w.value("e_correct", c.wfmse.e_correct);
        c.wfmse.e_incorrect = w.value("e_incorrect", c.wfmse.e_incorrect);
        c.wfmse.beta = w.value("beta", c.wfmse.beta);
        c.wfmse.gamma = w.value("gamma", c.wfmse.gamma);
    }
    c.eval_manifest = j.contains("eval") ? j.at("eval").value("manifest", "") : "";
    if (c.eval_manifest.empty()) c.eval_manifest = c.stage3_manifest;
    return c;
}

struct PipelineResult {
    std::string seg_checkpoint, meta_checkpoint;
    SegMetricsReport seg_report;
    UqMetricsReport uq_report;
    std::string variant;  // "full" or "w/o FT-stage2"
};

inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    namespace fs = std::filesystem;
    const fs::path root(cfg.artifacts_root);
    fs::create_directories(root / "checkpoints");
    fs::create_directories(root / "logs");
    fs::create_directories(root / "reports");
    const std::string state_path = (root / "pipeline_state.json").string();

    nlohmann::ordered_json state;
    if (fs::exists(state_path)) {
        std::ifstream is(state_path);
        is >> state;
    }
    if (!state.contains("completed")) state["completed"] = nlohmann::ordered_json::object();
    auto done = [&](const std::string& s) { return state["completed"].contains(s); };
    auto mark = [&](const std::string& s, const std::string& artifact) {
        state["completed"][s] = artifact;
        std::ofstream os(state_path, std::ios::trunc);
        os << state.dump(2) << "\n";
    };

    PipelineResult result;
    result.variant = cfg.skip_stage2 ? "w/o FT-stage2" : "full";

    const synth::DatasetManifest stage3_data = synth::load_manifest(cfg.stage3_manifest);
    const synth::DatasetManifest eval_data = synth::load_manifest(cfg.eval_manifest);

    // Stage 1: backbone.
    const std::string backbone_path = detail::checkpoint_path(cfg.artifacts_root, "backbone");
    if (!done("stage1")) {
        BackboneInit s1 = cfg.stage1;
        s1.seed = derive_seed(cfg.seed, 1);
        std::optional<synth::DatasetManifest> pretrain_data;
        Normalization pre_norm;
        if (s1.source == "synthetic-pretrain") {
            const std::string src =
                !cfg.stage2_manifest.empty() && !cfg.skip_stage2 ? cfg.stage2_manifest
                                                                 : cfg.stage3_manifest;
            pretrain_data = synth::load_manifest(src);
            pre_norm = compute_normalization(*pretrain_data, "train", cfg.model.input_size);
        }
        Checkpoint bb = init_backbone(cfg.model, s1,
                                      pretrain_data ? &*pretrain_data : nullptr, pre_norm);
        write_checkpoint(backbone_path, bb);
        mark("stage1", backbone_path);
    }

    // Stage 2: related-domain training (no validation split; final epoch is
    // the stage's checkpoint).
    std::string stage2_best;
    if (cfg.skip_stage2) {
        stage2_best = "";
    } else if (done("stage2")) {
        stage2_best = state["completed"]["stage2"].get<std::string>();
    } else {
        const synth::DatasetManifest stage2_data = synth::load_manifest(cfg.stage2_manifest);
        Rng rng(derive_seed(cfg.seed, 2));
        SegNet<float> model(cfg.model, rng);
        load_backbone(model, read_checkpoint(backbone_path));
        StageConfig s2 = cfg.stage2;
        s2.id = "stage2";
        s2.seed = derive_seed(cfg.seed, 2);
        const Normalization norm =
            compute_normalization(stage2_data, "train", cfg.model.input_size);
        SegTrainResult r = train_segmentation(model, stage2_data, s2, cfg.augment,
                                              cfg.artifacts_root, norm,
                                              /*use_val_selection=*/false);
        stage2_best = r.best_checkpoint;
        mark("stage2", stage2_best);
    }

    // Stage 3: target-domain fine-tune with validation-mIoU selection.
    std::string stage3_best;
    if (done("stage3")) {
        stage3_best = state["completed"]["stage3"].get<std::string>();
    } else {
        Rng rng(derive_seed(cfg.seed, 3));
        SegNet<float> model(cfg.model, rng);
        if (!stage2_best.empty()) {
            Checkpoint ck = read_checkpoint(stage2_best);
            apply_checkpoint(ck, model.named_tensors());
        } else {
            load_backbone(model, read_checkpoint(backbone_path));
        }
        StageConfig s3 = cfg.stage3;
        s3.id = "stage3";
        s3.seed = derive_seed(cfg.seed, 3);
        const Normalization norm =
            compute_normalization(stage3_data, "train", cfg.model.input_size);
        SegTrainResult r = train_segmentation(model, stage3_data, s3, cfg.augment,
                                              cfg.artifacts_root, norm,
                                              /*use_val_selection=*/true);
        stage3_best = r.best_checkpoint;
        mark("stage3", stage3_best);
    }
    result.seg_checkpoint = stage3_best;

    // Meta stage on the frozen stage-3 model.
    if (done("meta")) {
        result.meta_checkpoint = state["completed"]["meta"].get<std::string>();
    } else {
        Checkpoint seg_ck = read_checkpoint(stage3_best);
        SegNet<float> seg = load_segmentation_model(seg_ck);
        Rng rng(derive_seed(cfg.seed, 4));
        MetaNet<float> meta(cfg.meta_model, rng);
        StageConfig mc = cfg.meta;
        mc.id = "meta";
        mc.seed = derive_seed(cfg.seed, 4);
        MetaTrainResult r = train_meta(seg, meta, stage3_data, mc, cfg.wfmse, cfg.artifacts_root,
                                       checkpoint_normalization(seg_ck));
        result.meta_checkpoint = r.best_checkpoint;
        mark("meta", result.meta_checkpoint);
    }

    // Final evaluation on the test split; tau calibrated on validation.
    Checkpoint seg_ck = read_checkpoint(result.seg_checkpoint);
    SegNet<float> seg = load_segmentation_model(seg_ck);
    const Normalization norm = checkpoint_normalization(seg_ck);
    result.seg_report = evaluate_segmentation(seg, eval_data, "test", norm, cfg.eval_batch);
    MetaNet<float> meta = load_meta_model(read_checkpoint(result.meta_checkpoint));
    result.uq_report = evaluate_uq(seg, meta, eval_data, "val", "test", norm, {}, cfg.eval_batch);

    nlohmann::ordered_json seg_json = seg_report_json(result.seg_report);
    seg_json["variant"] = result.variant;
    {
        std::ofstream os((root / "reports" / "segmentation.json").string(), std::ios::trunc);
        os << seg_json.dump(2) << "\n";
        std::ofstream cs((root / "reports" / "segmentation.csv").string(), std::ios::trunc);
        cs << seg_report_csv(result.seg_report);
        std::ofstream ts((root / "reports" / "segmentation_table.csv").string(), std::ios::trunc);
        ts << seg_report_table_csv(result.seg_report);
        nlohmann::ordered_json uq_json = uq_report_json(result.uq_report);
        uq_json["variant"] = result.variant;
        std::ofstream us((root / "reports" / "uncertainty.json").string(), std::ios::trunc);
        us << uq_json.dump(2) << "\n";
        std::ofstream uc((root / "reports" / "uncertainty.csv").string(), std::ios::trunc);
        uc << uq_report_csv(result.uq_report);
    }
    mark("eval", (root / "reports").string());
    return result;
}

}  // namespace uaseg
