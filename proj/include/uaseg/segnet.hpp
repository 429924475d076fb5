#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaseg/core.hpp"
#include "uaseg/nn/blocks.hpp"
#include "uaseg/nn/optim.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Configuration. Two presets share one topology: a residual encoder that
// halves resolution five times (x32 total) and a five-block decoder that
// exactly undoes it. "resnet152like" is the full-scale layout; "tiny" keeps
// the same wiring at desk scale for tests and CPU training.
// ---------------------------------------------------------------------------

struct SegModelConfig {
    std::string preset = "resnet152like";
    std::vector<int> decoder_channels = {256, 128, 64, 32, 16};
    int num_classes = 6;
    int input_size = 512;

    void validate() const {
        if (preset != "resnet152like" && preset != "tiny")
            throw ConfigError("SegModelConfig: unknown preset '" + preset + "'");
        if (decoder_channels.size() != 5)
            throw ConfigError("SegModelConfig: decoder must have exactly 5 blocks");
        if (input_size <= 0 || input_size % 32 != 0)
            throw ConfigError("SegModelConfig: input size must be divisible by 32");
        if (num_classes < 2) throw ConfigError("SegModelConfig: need at least 2 classes");
    }

    static SegModelConfig tiny(int input_size = 64) {
        SegModelConfig c;
        c.preset = "tiny";
        c.decoder_channels = {64, 32, 16, 8, 8};
        c.input_size = input_size;
        return c;
    }
};

inline void to_json(nlohmann::ordered_json& j, const SegModelConfig& c) {
    j = {{"preset", c.preset},
         {"decoder_channels", c.decoder_channels},
         {"num_classes", c.num_classes},
         {"input_size", c.input_size}};
}

template <typename BasicJsonType>
void from_json(const BasicJsonType& j, SegModelConfig& c) {
    c.preset = j.at("preset").template get<std::string>();
    c.decoder_channels = j.at("decoder_channels").template get<std::vector<int>>();
    c.num_classes = j.at("num_classes").template get<int>();
    c.input_size = j.at("input_size").template get<int>();
}

// Structural plan of the encoder for a preset.
struct EncoderPlan {
    int stem_channels;
    int stem_kernel;
    bool stage1_pool;  // ResNet puts a 3x3/2 max pool in front of stage 1
    bool bottleneck;
    std::array<int, 4> blocks;
    std::array<int, 4> width;
    std::array<int, 4> out_ch;
};

inline EncoderPlan encoder_plan(const std::string& preset) {
    if (preset == "resnet152like")
        return {64, 7, true, true, {3, 8, 36, 3}, {64, 128, 256, 512}, {256, 512, 1024, 2048}};
    if (preset == "tiny")
        return {8, 3, false, false, {1, 1, 1, 1}, {8, 16, 32, 64}, {8, 16, 32, 64}};
    throw ConfigError("encoder_plan: unknown preset '" + preset + "'");
}

namespace nn {

template <typename T>
class ResStage {
public:
    ResStage() = default;
    ResStage(int in_ch, int width, int out_ch, int n_blocks, int stride, bool pool, bool bottleneck,
             Rng& rng)
        : pool_(pool), maxpool_(3, 2, 1) {
        blocks_.reserve(n_blocks);
        for (int b = 0; b < n_blocks; ++b)
            blocks_.emplace_back(b == 0 ? in_ch : out_ch, width, out_ch, b == 0 ? stride : 1,
                                 bottleneck, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> t = pool_ ? maxpool_.forward(x, train) : x;
        for (auto& b : blocks_) t = b.forward(t, train);
        return t;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> g = gy;
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
        return pool_ ? maxpool_.backward(g) : g;
    }

    void params(ParamSet<T>& ps, const std::string& p) {
        for (std::size_t b = 0; b < blocks_.size(); ++b)
            blocks_[b].params(ps, p + ".block" + std::to_string(b));
    }
    void buffers(ParamSet<T>& ps, const std::string& p) {
        for (std::size_t b = 0; b < blocks_.size(); ++b)
            blocks_[b].buffers(ps, p + ".block" + std::to_string(b));
    }

private:
    bool pool_ = false;
    MaxPool2d<T> maxpool_;
    std::vector<ResidualBlock<T>> blocks_;
};

// Residual encoder: stem conv (stride 2) plus four stages, each halving the
// resolution. Skip features come from the stem activation and the outputs of
// stages 1-3; stage 4 is the bottleneck.
template <typename T>
class ResEncoder {
public:
    struct Features {
        Tensor<T> stem, s1, s2, s3, bottleneck;
    };

    ResEncoder() = default;
    ResEncoder(const EncoderPlan& plan, Rng& rng) : plan_(plan) {
        stem_conv_ = Conv2d<T>(3, plan.stem_channels, plan.stem_kernel, 2, plan.stem_kernel / 2,
                               false, rng);
        stem_bn_ = BatchNorm2d<T>(plan.stem_channels);
        // With a stage-1 pool the pool provides the stage's downsampling and
        // the blocks keep stride 1; otherwise the first block strides.
        stages_[0] = ResStage<T>(plan.stem_channels, plan.width[0], plan.out_ch[0], plan.blocks[0],
                                 plan.stage1_pool ? 1 : 2, plan.stage1_pool, plan.bottleneck, rng);
        for (int s = 1; s < 4; ++s)
            stages_[s] = ResStage<T>(plan.out_ch[s - 1], plan.width[s], plan.out_ch[s],
                                     plan.blocks[s], 2, false, plan.bottleneck, rng);
    }

    Features forward(const Tensor<T>& x, bool train) {
        Features f;
        f.stem = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(x, train), train), train);
        f.s1 = stages_[0].forward(f.stem, train);
        f.s2 = stages_[1].forward(f.s1, train);
        f.s3 = stages_[2].forward(f.s2, train);
        f.bottleneck = stages_[3].forward(f.s3, train);
        return f;
    }

    // Gradients arriving at each tapped feature; empty tensors mean zero.
    Tensor<T> backward(const Tensor<T>& g_bottleneck, Tensor<T> g_s3, Tensor<T> g_s2, Tensor<T> g_s1,
                       Tensor<T> g_stem) {
        Tensor<T> g = stages_[3].backward(g_bottleneck);
        if (!g_s3.empty()) g.add_(g_s3);
        g = stages_[2].backward(g);
        if (!g_s2.empty()) g.add_(g_s2);
        g = stages_[1].backward(g);
        if (!g_s1.empty()) g.add_(g_s1);
        g = stages_[0].backward(g);
        if (!g_stem.empty()) g.add_(g_stem);
        return stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(g)));
    }

    void params(ParamSet<T>& ps, const std::string& p) {
        stem_conv_.params(ps, p + ".stem.conv");
        stem_bn_.params(ps, p + ".stem.bn");
        for (int s = 0; s < 4; ++s) stages_[s].params(ps, p + ".stage" + std::to_string(s + 1));
    }
    void buffers(ParamSet<T>& ps, const std::string& p) {
        stem_bn_.buffers(ps, p + ".stem.bn");
        for (int s = 0; s < 4; ++s) stages_[s].buffers(ps, p + ".stage" + std::to_string(s + 1));
    }

    const EncoderPlan& plan() const { return plan_; }

private:
    EncoderPlan plan_{};
    Conv2d<T> stem_conv_;
    BatchNorm2d<T> stem_bn_;
    ReLU<T> stem_relu_;
    std::array<ResStage<T>, 4> stages_;
};

}  // namespace nn

// ---------------------------------------------------------------------------
// The segmentation model. Decoder blocks D1-D4 consume skips at matching
// resolutions (stage3, stage2, stage1, stem); D5 has none. A 1x1 head emits
// per-class logits at full input resolution.
// ---------------------------------------------------------------------------

template <typename T>
class SegNet {
public:
    explicit SegNet(const SegModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const EncoderPlan plan = encoder_plan(cfg.preset);
        encoder_ = nn::ResEncoder<T>(plan, rng);
        const auto& dch = cfg_.decoder_channels;
        dec_[0] = nn::DecoderBlock<T>(plan.out_ch[3], plan.out_ch[2], dch[0], rng);
        dec_[1] = nn::DecoderBlock<T>(dch[0], plan.out_ch[1], dch[1], rng);
        dec_[2] = nn::DecoderBlock<T>(dch[1], plan.out_ch[0], dch[2], rng);
        dec_[3] = nn::DecoderBlock<T>(dch[2], plan.stem_channels, dch[3], rng);
        dec_[4] = nn::DecoderBlock<T>(dch[3], 0, dch[4], rng);
        head_ = nn::Conv2d<T>(dch[4], cfg.num_classes, 1, 1, 0, true, rng);
    }

    const SegModelConfig& config() const { return cfg_; }

    // Skip channel counts (stem, stage1..3) plus the bottleneck width,
    // exposed so callers can sanity-check a preset.
    std::array<int, 5> feature_channels() const {
        const auto& p = encoder_.plan();
        return {p.stem_channels, p.out_ch[0], p.out_ch[1], p.out_ch[2], p.out_ch[3]};
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        if (x.h() != cfg_.input_size || x.w() != cfg_.input_size)
            throw ShapeError("seg_forward: expected " + std::to_string(cfg_.input_size) + "x" +
                             std::to_string(cfg_.input_size) + " input, got " +
                             std::to_string(x.h()) + "x" + std::to_string(x.w()));
        if (x.c() != 3) throw ShapeError("seg_forward: expected 3 input channels");
        auto f = encoder_.forward(x, train);
        Tensor<T> t = dec_[0].forward(f.bottleneck, &f.s3, train);
        t = dec_[1].forward(t, &f.s2, train);
        t = dec_[2].forward(t, &f.s1, train);
        t = dec_[3].forward(t, &f.stem, train);
        t = dec_[4].forward(t, nullptr, train);
        return head_.forward(t, train);
    }

    void backward(const Tensor<T>& g_logits) {
        Tensor<T> g = head_.backward(g_logits);
        g = dec_[4].backward(g, nullptr);
        Tensor<T> g_stem, g_s1, g_s2, g_s3;
        g = dec_[3].backward(g, &g_stem);
        g = dec_[2].backward(g, &g_s1);
        g = dec_[1].backward(g, &g_s2);
        g = dec_[0].backward(g, &g_s3);
        encoder_.backward(g, std::move(g_s3), std::move(g_s2), std::move(g_s1), std::move(g_stem));
    }

    // Softmax probabilities + argmax mask for one preprocessed image batch.
    std::pair<Tensor<T>, std::vector<LabelMask>> predict(const Tensor<T>& x) {
        Tensor<T> probs = nn::softmax_channels(forward(x, /*train=*/false));
        std::vector<LabelMask> masks;
        masks.reserve(probs.n());
        for (int n = 0; n < probs.n(); ++n) masks.push_back(argmax_labels(probs, n));
        return {std::move(probs), std::move(masks)};
    }

    void params(nn::ParamSet<T>& ps) {
        encoder_.params(ps, "encoder");
        for (int d = 0; d < 5; ++d) dec_[d].params(ps, "decoder.d" + std::to_string(d + 1));
        head_.params(ps, "head");
    }
    void buffers(nn::ParamSet<T>& ps) {
        encoder_.buffers(ps, "encoder");
        for (int d = 0; d < 5; ++d) dec_[d].buffers(ps, "decoder.d" + std::to_string(d + 1));
    }
    // Params + buffers: everything a checkpoint stores.
    nn::ParamSet<T> named_tensors() {
        nn::ParamSet<T> ps;
        params(ps);
        buffers(ps);
        return ps;
    }

    nn::ResEncoder<T>& encoder() { return encoder_; }

private:
    SegModelConfig cfg_;
    nn::ResEncoder<T> encoder_;
    std::array<nn::DecoderBlock<T>, 5> dec_;
    nn::Conv2d<T> head_;
};

}  // namespace uaseg
