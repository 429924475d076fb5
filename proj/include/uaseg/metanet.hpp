#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaseg/core.hpp"
#include "uaseg/nn/blocks.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// U-Net meta-model: maps the segmentation model's softmax probability map to
// a per-pixel soft-label certainty map in (-1, 1).
// ---------------------------------------------------------------------------

struct MetaModelConfig {
    std::vector<int> encoder_channels = {64, 128, 256, 512, 1024};
    std::vector<int> decoder_channels = {256, 128, 64, 32};
    int in_channels = 6;
    int input_size = 512;

    void validate() const {
        if (encoder_channels.size() != 5)
            throw ConfigError("MetaModelConfig: encoder must have exactly 5 blocks");
        if (decoder_channels.size() != 4)
            throw ConfigError("MetaModelConfig: decoder must have exactly 4 blocks");
        if (input_size <= 0 || input_size % 16 != 0)
            throw ConfigError("MetaModelConfig: input size must be divisible by 16");
        if (in_channels < 2) throw ConfigError("MetaModelConfig: need at least 2 input channels");
    }

    static MetaModelConfig tiny(int input_size = 64) {
        MetaModelConfig c;
        c.encoder_channels = {8, 16, 32, 64, 128};
        c.decoder_channels = {32, 16, 8, 8};
        c.input_size = input_size;
        return c;
    }
};

inline void to_json(nlohmann::ordered_json& j, const MetaModelConfig& c) {
    j = {{"encoder_channels", c.encoder_channels},
         {"decoder_channels", c.decoder_channels},
         {"in_channels", c.in_channels},
         {"input_size", c.input_size}};
}

template <typename BasicJsonType>
void from_json(const BasicJsonType& j, MetaModelConfig& c) {
    c.encoder_channels = j.at("encoder_channels").template get<std::vector<int>>();
    c.decoder_channels = j.at("decoder_channels").template get<std::vector<int>>();
    c.in_channels = j.at("in_channels").template get<int>();
    c.input_size = j.at("input_size").template get<int>();
}

template <typename T>
class MetaNet {
public:
    explicit MetaNet(const MetaModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const auto& ec = cfg_.encoder_channels;
        const auto& dc = cfg_.decoder_channels;
        enc_[0] = nn::UnetEncBlock<T>(cfg.in_channels, ec[0], /*pool=*/false, rng);
        for (int i = 1; i < 5; ++i) enc_[i] = nn::UnetEncBlock<T>(ec[i - 1], ec[i], true, rng);
        // All four decoder blocks consume skips; the last one uses E1's.
        dec_[0] = nn::DecoderBlock<T>(ec[4], ec[3], dc[0], rng);
        dec_[1] = nn::DecoderBlock<T>(dc[0], ec[2], dc[1], rng);
        dec_[2] = nn::DecoderBlock<T>(dc[1], ec[1], dc[2], rng);
        dec_[3] = nn::DecoderBlock<T>(dc[2], ec[0], dc[3], rng);
        head_ = nn::Conv2d<T>(dc[3], 1, 1, 1, 0, true, rng);
    }

    const MetaModelConfig& config() const { return cfg_; }

    // probs: [N, C, H, W] softmax output of the segmentation model.
    // Returns [N, 1, H, W] soft labels, strictly inside (-1, 1).
    Tensor<T> forward(const Tensor<T>& probs, bool train) {
        if (probs.c() != cfg_.in_channels)
            throw ShapeError("meta_forward: expected " + std::to_string(cfg_.in_channels) +
                             " channels, got " + std::to_string(probs.c()));
        if (probs.h() != cfg_.input_size || probs.w() != cfg_.input_size)
            throw ShapeError("meta_forward: expected " + std::to_string(cfg_.input_size) + "x" +
                             std::to_string(cfg_.input_size) + " input, got " +
                             std::to_string(probs.h()) + "x" + std::to_string(probs.w()));
        Tensor<T> e1 = enc_[0].forward(probs, train);
        Tensor<T> e2 = enc_[1].forward(e1, train);
        Tensor<T> e3 = enc_[2].forward(e2, train);
        Tensor<T> e4 = enc_[3].forward(e3, train);
        Tensor<T> e5 = enc_[4].forward(e4, train);
        Tensor<T> t = dec_[0].forward(e5, &e4, train);
        t = dec_[1].forward(t, &e3, train);
        t = dec_[2].forward(t, &e2, train);
        t = dec_[3].forward(t, &e1, train);
        return tanh_.forward(head_.forward(t, train), train);
    }

    void backward(const Tensor<T>& g_out) {
        Tensor<T> g = head_.backward(tanh_.backward(g_out));
        Tensor<T> g_e1, g_e2, g_e3, g_e4;
        g = dec_[3].backward(g, &g_e1);
        g = dec_[2].backward(g, &g_e2);
        g = dec_[1].backward(g, &g_e3);
        g = dec_[0].backward(g, &g_e4);
        g = enc_[4].backward(g);
        g.add_(g_e4);
        g = enc_[3].backward(g);
        g.add_(g_e3);
        g = enc_[2].backward(g);
        g.add_(g_e2);
        g = enc_[1].backward(g);
        g.add_(g_e1);
        enc_[0].backward(g);
    }

    void params(nn::ParamSet<T>& ps) {
        for (int i = 0; i < 5; ++i) enc_[i].params(ps, "enc.e" + std::to_string(i + 1));
        for (int i = 0; i < 4; ++i) dec_[i].params(ps, "dec.d" + std::to_string(i + 1));
        head_.params(ps, "head");
    }
    void buffers(nn::ParamSet<T>& ps) {
        for (int i = 0; i < 5; ++i) enc_[i].buffers(ps, "enc.e" + std::to_string(i + 1));
        for (int i = 0; i < 4; ++i) dec_[i].buffers(ps, "dec.d" + std::to_string(i + 1));
    }
    nn::ParamSet<T> named_tensors() {
        nn::ParamSet<T> ps;
        params(ps);
        buffers(ps);
        return ps;
    }

private:
    MetaModelConfig cfg_;
    std::array<nn::UnetEncBlock<T>, 5> enc_;
    std::array<nn::DecoderBlock<T>, 4> dec_;
    nn::Conv2d<T> head_;
    nn::Tanh<T> tanh_;
};

// The meta-model predicts certainty; uncertainty is its elementwise negation.
inline SoftLabelMap uncertainty_map(const SoftLabelMap& soft) {
    SoftLabelMap out(soft.h, soft.w);
    for (std::size_t i = 0; i < soft.size(); ++i) out.v[i] = -soft.v[i];
    return out;
}

}  // namespace uaseg
