#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uaseg/nn/layers.hpp"

namespace uaseg::nn {

// ---------------------------------------------------------------------------
// Conv -> BN -> ReLU, the workhorse unit.
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBnRelu {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    ReLU<T> relu;

    ConvBnRelu() = default;
    ConvBnRelu(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
        : conv(in_ch, out_ch, kernel, stride, pad, /*bias=*/false, rng), bn(out_ch) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return relu.forward(bn.forward(conv.forward(x, train), train), train);
    }
    Tensor<T> backward(const Tensor<T>& gy) {
        return conv.backward(bn.backward(relu.backward(gy)));
    }
    void params(ParamSet<T>& ps, const std::string& p) {
        conv.params(ps, p + ".conv");
        bn.params(ps, p + ".bn");
    }
    void buffers(ParamSet<T>& ps, const std::string& p) { bn.buffers(ps, p + ".bn"); }
};

// ---------------------------------------------------------------------------
// Residual block. Basic (two 3x3 convs) or bottleneck (1x1 -> 3x3 -> 1x1)
// form, with a projection shortcut when stride or channel count changes.
// ---------------------------------------------------------------------------

template <typename T>
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(int in_ch, int width, int out_ch, int stride, bool bottleneck, Rng& rng)
        : bottleneck_(bottleneck) {
        if (bottleneck_) {
            conv1_ = Conv2d<T>(in_ch, width, 1, 1, 0, false, rng);
            bn1_ = BatchNorm2d<T>(width);
            conv2_ = Conv2d<T>(width, width, 3, stride, 1, false, rng);
            bn2_ = BatchNorm2d<T>(width);
            conv3_ = Conv2d<T>(width, out_ch, 1, 1, 0, false, rng);
            bn3_ = BatchNorm2d<T>(out_ch);
        } else {
            conv1_ = Conv2d<T>(in_ch, out_ch, 3, stride, 1, false, rng);
            bn1_ = BatchNorm2d<T>(out_ch);
            conv2_ = Conv2d<T>(out_ch, out_ch, 3, 1, 1, false, rng);
            bn2_ = BatchNorm2d<T>(out_ch);
        }
        if (stride != 1 || in_ch != out_ch) {
            has_proj_ = true;
            proj_ = Conv2d<T>(in_ch, out_ch, 1, stride, 0, false, rng);
            proj_bn_ = BatchNorm2d<T>(out_ch);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> main;
        if (bottleneck_) {
            main = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
            main = relu2_.forward(bn2_.forward(conv2_.forward(main, train), train), train);
            main = bn3_.forward(conv3_.forward(main, train), train);
        } else {
            main = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
            main = bn2_.forward(conv2_.forward(main, train), train);
        }
        Tensor<T> sc = has_proj_ ? proj_bn_.forward(proj_.forward(x, train), train) : x;
        main.add_(sc);
        return relu_out_.forward(main, train);
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> g = relu_out_.backward(gy);
        // g flows unchanged into both the residual branch and the shortcut.
        Tensor<T> gmain;
        if (bottleneck_) {
            gmain = conv3_.backward(bn3_.backward(g));
            gmain = conv2_.backward(bn2_.backward(relu2_.backward(gmain)));
            gmain = conv1_.backward(bn1_.backward(relu1_.backward(gmain)));
        } else {
            gmain = conv2_.backward(bn2_.backward(g));
            gmain = conv1_.backward(bn1_.backward(relu1_.backward(gmain)));
        }
        if (has_proj_) {
            Tensor<T> gsc = proj_.backward(proj_bn_.backward(g));
            gmain.add_(gsc);
        } else {
            gmain.add_(g);
        }
        return gmain;
    }

    void params(ParamSet<T>& ps, const std::string& p) {
        conv1_.params(ps, p + ".conv1");
        bn1_.params(ps, p + ".bn1");
        conv2_.params(ps, p + ".conv2");
        bn2_.params(ps, p + ".bn2");
        if (bottleneck_) {
            conv3_.params(ps, p + ".conv3");
            bn3_.params(ps, p + ".bn3");
        }
        if (has_proj_) {
            proj_.params(ps, p + ".proj");
            proj_bn_.params(ps, p + ".proj_bn");
        }
    }

    void buffers(ParamSet<T>& ps, const std::string& p) {
        bn1_.buffers(ps, p + ".bn1");
        bn2_.buffers(ps, p + ".bn2");
        if (bottleneck_) bn3_.buffers(ps, p + ".bn3");
        if (has_proj_) proj_bn_.buffers(ps, p + ".proj_bn");
    }

private:
    bool bottleneck_ = false, has_proj_ = false;
    Conv2d<T> conv1_, conv2_, conv3_, proj_;
    BatchNorm2d<T> bn1_, bn2_, bn3_, proj_bn_;
    ReLU<T> relu1_, relu2_, relu_out_;
};

// ---------------------------------------------------------------------------
// Decoder block: TCBR (4x4 transposed conv, stride 2 -> BN -> ReLU) doubles
// the resolution, then CBR (3x3 conv over [decoder features, skip] -> BN ->
// ReLU). The skip is optional; when present it must already be at 2x the
// input resolution.
// ---------------------------------------------------------------------------

template <typename T>
class DecoderBlock {
public:
    DecoderBlock() = default;
    DecoderBlock(int prev_ch, int skip_ch, int out_ch, Rng& rng)
        : skip_ch_(skip_ch),
          tc_(prev_ch, out_ch, 4, 2, 1, false, rng),
          tc_bn_(out_ch),
          conv_(out_ch + skip_ch, out_ch, 3, 1, 1, false, rng),
          conv_bn_(out_ch) {}

    Tensor<T> forward(const Tensor<T>& prev, const Tensor<T>* skip, bool train) {
        Tensor<T> t = tc_relu_.forward(tc_bn_.forward(tc_.forward(prev, train), train), train);
        if (skip_ch_ > 0) {
            if (!skip) throw ShapeError("DecoderBlock: skip expected but not provided");
            if (skip->h() != t.h() || skip->w() != t.w())
                throw ShapeError("DecoderBlock: skip resolution " + skip->shape_str() +
                                 " does not match upsampled features " + t.shape_str());
            t = concat_channels(t, *skip);
        } else if (skip) {
            throw ShapeError("DecoderBlock: block built without skip input");
        }
        up_ch_ = t.c() - skip_ch_;
        return conv_relu_.forward(conv_bn_.forward(conv_.forward(t, train), train), train);
    }

    // Returns gradient for prev; skip gradient (if any) lands in *gskip.
    Tensor<T> backward(const Tensor<T>& gy, Tensor<T>* gskip) {
        Tensor<T> g = conv_.backward(conv_bn_.backward(conv_relu_.backward(gy)));
        Tensor<T> gup;
        if (skip_ch_ > 0) {
            auto [a, b] = split_channels(g, up_ch_);
            gup = std::move(a);
            if (gskip) *gskip = std::move(b);
        } else {
            gup = std::move(g);
        }
        return tc_.backward(tc_bn_.backward(tc_relu_.backward(gup)));
    }

    void params(ParamSet<T>& ps, const std::string& p) {
        tc_.params(ps, p + ".tc");
        tc_bn_.params(ps, p + ".tc_bn");
        conv_.params(ps, p + ".conv");
        conv_bn_.params(ps, p + ".conv_bn");
    }

    void buffers(ParamSet<T>& ps, const std::string& p) {
        tc_bn_.buffers(ps, p + ".tc_bn");
        conv_bn_.buffers(ps, p + ".conv_bn");
    }

private:
    int skip_ch_ = 0, up_ch_ = 0;
    ConvTranspose2d<T> tc_;
    BatchNorm2d<T> tc_bn_;
    ReLU<T> tc_relu_;
    Conv2d<T> conv_;
    BatchNorm2d<T> conv_bn_;
    ReLU<T> conv_relu_;
};

// ---------------------------------------------------------------------------
// U-Net encoder block: optional 2x2 max pool, then two 3x3 ConvBnRelu units.
// ---------------------------------------------------------------------------

template <typename T>
class UnetEncBlock {
public:
    UnetEncBlock() = default;
    UnetEncBlock(int in_ch, int out_ch, bool pool, Rng& rng)
        : pool_(pool),
          maxpool_(2, 2, 0),
          c1_(in_ch, out_ch, 3, 1, 1, rng),
          c2_(out_ch, out_ch, 3, 1, 1, rng) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> t = pool_ ? maxpool_.forward(x, train) : x;
        return c2_.forward(c1_.forward(t, train), train);
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> g = c1_.backward(c2_.backward(gy));
        return pool_ ? maxpool_.backward(g) : g;
    }

    void params(ParamSet<T>& ps, const std::string& p) {
        c1_.params(ps, p + ".c1");
        c2_.params(ps, p + ".c2");
    }
    void buffers(ParamSet<T>& ps, const std::string& p) {
        c1_.buffers(ps, p + ".c1");
        c2_.buffers(ps, p + ".c2");
    }

private:
    bool pool_ = false;
    MaxPool2d<T> maxpool_;
    ConvBnRelu<T> c1_, c2_;
};

}  // namespace uaseg::nn
