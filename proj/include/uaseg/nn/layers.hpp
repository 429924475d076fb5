#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "uaseg/common.hpp"
#include "uaseg/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uaseg::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Parameter registry. Models expose their learnables (and BN running stats as
// buffers) through flat name -> tensor lists; the optimizer and the checkpoint
// code work purely on these.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;  // null for buffers
};

template <typename T>
using ParamSet = std::vector<ParamRef<T>>;

template <typename T>
void zero_grads(ParamSet<T>& ps) {
    for (auto& p : ps)
        if (p.grad) p.grad->fill(T(0));
}

inline int conv_out_size(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// im2col / col2im for one sample. col has C*kh*kw rows and Ho*Wo columns.
// ---------------------------------------------------------------------------

template <typename T>
void im2col(const T* src, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t ocols = static_cast<std::size_t>(Ho) * Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int c = 0; c < C; ++c) {
        const T* sp = src + c * plane;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * ocols;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = T(0);
                        continue;
                    }
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[oy * Wo + ox] = (ix >= 0 && ix < W) ? sp[iy * W + ix] : T(0);
                    }
                }
            }
    }
}

// Adjoint of im2col: scatter-adds col entries back into the image.
template <typename T>
void col2im(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* dst) {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t ocols = static_cast<std::size_t>(Ho) * Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int c = 0; c < C; ++c) {
        T* dp = dst + c * plane;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * ocols;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dp[iy * W + ix] += row[oy * Wo + ox];
                    }
                }
            }
    }
}

// ---------------------------------------------------------------------------
// Weight init: Kaiming normal over fan-in, the usual choice for ReLU stacks.
// ---------------------------------------------------------------------------

template <typename T>
void kaiming_normal(Tensor<T>& w, int fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.raw()) v = static_cast<T>(rng.normal(0.0, std));
}

// ---------------------------------------------------------------------------
// Conv2d: weight [out_ch, in_ch, kh, kw].
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng)
        : in_ch_(in_ch), out_ch_(out_ch), kh_(kernel), kw_(kernel), stride_(stride), pad_(pad),
          has_bias_(bias) {
        weight_.resize(out_ch, in_ch, kh_, kw_);
        wgrad_.resize(out_ch, in_ch, kh_, kw_);
        kaiming_normal(weight_, in_ch * kh_ * kw_, rng);
        if (has_bias_) {
            bias_.resize(1, out_ch, 1, 1);
            bgrad_.resize(1, out_ch, 1, 1);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        if (x.c() != in_ch_)
            throw ShapeError("Conv2d: expected " + std::to_string(in_ch_) + " input channels, got " +
                             std::to_string(x.c()));
        const int N = x.n(), H = x.h(), W = x.w();
        const int Ho = conv_out_size(H, kh_, stride_, pad_);
        const int Wo = conv_out_size(W, kw_, stride_, pad_);
        Tensor<T> y(N, out_ch_, Ho, Wo);
        (void)train;
        x_cache_ = x;
        if (N == 0) return y;

        const std::size_t krows = static_cast<std::size_t>(in_ch_) * kh_ * kw_;
        const std::size_t ocols = static_cast<std::size_t>(Ho) * Wo;
        col_.assign(krows * ocols, T(0));
        ConstMatMap<T> Wm(weight_.ptr(), out_ch_, krows);
        for (int n = 0; n < N; ++n) {
            im2col(x.plane(n, 0), in_ch_, H, W, kh_, kw_, stride_, pad_, Ho, Wo, col_.data());
            ConstMatMap<T> Cm(col_.data(), krows, ocols);
            MatMap<T> Ym(y.plane(n, 0), out_ch_, ocols);
            Ym.noalias() = Wm * Cm;
            if (has_bias_)
                for (int oc = 0; oc < out_ch_; ++oc)
                    Ym.row(oc).array() += bias_.ptr()[oc];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const Tensor<T>& x = x_cache_;
        const int N = x.n(), H = x.h(), W = x.w();
        const int Ho = gy.h(), Wo = gy.w();
        Tensor<T> gx(N, in_ch_, H, W);
        const std::size_t krows = static_cast<std::size_t>(in_ch_) * kh_ * kw_;
        const std::size_t ocols = static_cast<std::size_t>(Ho) * Wo;
        col_.assign(krows * ocols, T(0));
        std::vector<T> gcol(krows * ocols);
        ConstMatMap<T> Wm(weight_.ptr(), out_ch_, krows);
        MatMap<T> Gw(wgrad_.ptr(), out_ch_, krows);
        for (int n = 0; n < N; ++n) {
            ConstMatMap<T> Gy(gy.plane(n, 0), out_ch_, ocols);
            im2col(x.plane(n, 0), in_ch_, H, W, kh_, kw_, stride_, pad_, Ho, Wo, col_.data());
            ConstMatMap<T> Cm(col_.data(), krows, ocols);
            Gw.noalias() += Gy * Cm.transpose();
            MatMap<T> Gc(gcol.data(), krows, ocols);
            Gc.noalias() = Wm.transpose() * Gy;
            col2im(gcol.data(), in_ch_, H, W, kh_, kw_, stride_, pad_, Ho, Wo, gx.plane(n, 0));
            if (has_bias_)
                for (int oc = 0; oc < out_ch_; ++oc)
                    bgrad_.ptr()[oc] += Gy.row(oc).sum();
        }
        return gx;
    }

    void params(ParamSet<T>& ps, const std::string& prefix) {
        ps.push_back({prefix + ".weight", &weight_, &wgrad_});
        if (has_bias_) ps.push_back({prefix + ".bias", &bias_, &bgrad_});
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    int out_channels() const { return out_ch_; }

private:
    int in_ch_ = 0, out_ch_ = 0, kh_ = 0, kw_ = 0, stride_ = 1, pad_ = 0;
    bool has_bias_ = false;
    Tensor<T> weight_, wgrad_, bias_, bgrad_;
    Tensor<T> x_cache_;
    std::vector<T> col_;
};

// ---------------------------------------------------------------------------
// ConvTranspose2d: weight [in_ch, out_ch, kh, kw]. Fixed to the exact-doubling
// configuration the decoders use (4x4 kernel, stride 2, pad 1) unless
// configured otherwise.
// ---------------------------------------------------------------------------

template <typename T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng)
        : in_ch_(in_ch), out_ch_(out_ch), kh_(kernel), kw_(kernel), stride_(stride), pad_(pad),
          has_bias_(bias) {
        weight_.resize(in_ch, out_ch, kh_, kw_);
        wgrad_.resize(in_ch, out_ch, kh_, kw_);
        kaiming_normal(weight_, in_ch * kh_ * kw_, rng);
        if (has_bias_) {
            bias_.resize(1, out_ch, 1, 1);
            bgrad_.resize(1, out_ch, 1, 1);
        }
    }

    int out_size(int in) const { return (in - 1) * stride_ - 2 * pad_ + kh_; }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        if (x.c() != in_ch_)
            throw ShapeError("ConvTranspose2d: expected " + std::to_string(in_ch_) +
                             " input channels, got " + std::to_string(x.c()));
        const int N = x.n(), H = x.h(), W = x.w();
        const int Ho = out_size(H), Wo = out_size(W);
        Tensor<T> y(N, out_ch_, Ho, Wo);
        (void)train;
        x_cache_ = x;
        if (N == 0) return y;

        // Transposed conv forward == gradient-of-conv w.r.t. data: expand the
        // input through W^T into column space, then scatter with col2im over
        // the *output* geometry.
        const std::size_t krows = static_cast<std::size_t>(out_ch_) * kh_ * kw_;
        const std::size_t icols = static_cast<std::size_t>(H) * W;
        std::vector<T> cols(krows * icols);
        ConstMatMap<T> Wm(weight_.ptr(), in_ch_, krows);
        for (int n = 0; n < N; ++n) {
            ConstMatMap<T> Xm(x.plane(n, 0), in_ch_, icols);
            MatMap<T> Cm(cols.data(), krows, icols);
            Cm.noalias() = Wm.transpose() * Xm;
            col2im(cols.data(), out_ch_, Ho, Wo, kh_, kw_, stride_, pad_, H, W, y.plane(n, 0));
            if (has_bias_) {
                T* yp = y.plane(n, 0);
                const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;
                for (int oc = 0; oc < out_ch_; ++oc)
                    for (std::size_t i = 0; i < oplane; ++i) yp[oc * oplane + i] += bias_.ptr()[oc];
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const Tensor<T>& x = x_cache_;
        const int N = x.n(), H = x.h(), W = x.w();
        const int Ho = gy.h(), Wo = gy.w();
        Tensor<T> gx(N, in_ch_, H, W);
        const std::size_t krows = static_cast<std::size_t>(out_ch_) * kh_ * kw_;
        const std::size_t icols = static_cast<std::size_t>(H) * W;
        std::vector<T> cols(krows * icols);
        ConstMatMap<T> Wm(weight_.ptr(), in_ch_, krows);
        MatMap<T> Gw(wgrad_.ptr(), in_ch_, krows);
        for (int n = 0; n < N; ++n) {
            im2col(gy.plane(n, 0), out_ch_, Ho, Wo, kh_, kw_, stride_, pad_, H, W, cols.data());
            ConstMatMap<T> Cm(cols.data(), krows, icols);
            ConstMatMap<T> Xm(x.plane(n, 0), in_ch_, icols);
            MatMap<T> Gx(gx.plane(n, 0), in_ch_, icols);
            Gx.noalias() = Wm * Cm;
            Gw.noalias() += Xm * Cm.transpose();
            if (has_bias_) {
                const T* gp = gy.plane(n, 0);
                const std::size_t oplane = static_cast<std::size_t>(Ho) * Wo;
                for (int oc = 0; oc < out_ch_; ++oc) {
                    T s = T(0);
                    for (std::size_t i = 0; i < oplane; ++i) s += gp[oc * oplane + i];
                    bgrad_.ptr()[oc] += s;
                }
            }
        }
        return gx;
    }

    void params(ParamSet<T>& ps, const std::string& prefix) {
        ps.push_back({prefix + ".weight", &weight_, &wgrad_});
        if (has_bias_) ps.push_back({prefix + ".bias", &bias_, &bgrad_});
    }

private:
    int in_ch_ = 0, out_ch_ = 0, kh_ = 4, kw_ = 4, stride_ = 2, pad_ = 1;
    bool has_bias_ = false;
    Tensor<T> weight_, wgrad_, bias_, bgrad_;
    Tensor<T> x_cache_;
};

// ---------------------------------------------------------------------------
// BatchNorm2d. Batch statistics in training mode, running statistics in
// evaluation mode. Backward honors the mode of the preceding forward pass so
// frozen-statistics differentiation works (gradient checks run the model in
// eval mode).
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels, T eps = T(1e-5), T momentum = T(0.1))
        : ch_(channels), eps_(eps), momentum_(momentum) {
        gamma_.resize(1, channels, 1, 1);
        beta_.resize(1, channels, 1, 1);
        ggrad_.resize(1, channels, 1, 1);
        bgrad_.resize(1, channels, 1, 1);
        running_mean_.resize(1, channels, 1, 1);
        running_var_.resize(1, channels, 1, 1);
        gamma_.fill(T(1));
        running_var_.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.n(), H = x.h(), W = x.w();
        const std::size_t M = static_cast<std::size_t>(N) * H * W;
        Tensor<T> y(N, ch_, H, W);
        last_train_ = train;
        if (M == 0) return y;

        mean_.assign(ch_, T(0));
        invstd_.assign(ch_, T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < ch_; ++c) {
            double mu, var;
            if (train) {
                double s = 0.0;
                for (int n = 0; n < N; ++n) {
                    const T* p = x.plane(n, c);
                    for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) s += p[i];
                }
                mu = s / static_cast<double>(M);
                double sq = 0.0;
                for (int n = 0; n < N; ++n) {
                    const T* p = x.plane(n, c);
                    for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) {
                        double d = p[i] - mu;
                        sq += d * d;
                    }
                }
                var = sq / static_cast<double>(M);
                double unbiased = M > 1 ? sq / static_cast<double>(M - 1) : var;
                running_mean_.ptr()[c] = static_cast<T>((1.0 - momentum_) * running_mean_.ptr()[c] +
                                                        momentum_ * mu);
                running_var_.ptr()[c] = static_cast<T>((1.0 - momentum_) * running_var_.ptr()[c] +
                                                       momentum_ * unbiased);
            } else {
                mu = running_mean_.ptr()[c];
                var = running_var_.ptr()[c];
            }
            const double is = 1.0 / std::sqrt(var + static_cast<double>(eps_));
            mean_[c] = static_cast<T>(mu);
            invstd_[c] = static_cast<T>(is);
            const T g = gamma_.ptr()[c], b = beta_.ptr()[c];
            for (int n = 0; n < N; ++n) {
                const T* p = x.plane(n, c);
                T* q = y.plane(n, c);
                for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i)
                    q[i] = g * static_cast<T>((p[i] - mu) * is) + b;
            }
        }
        x_cache_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const Tensor<T>& x = x_cache_;
        const int N = x.n(), H = x.h(), W = x.w();
        const std::size_t M = static_cast<std::size_t>(N) * H * W;
        Tensor<T> gx(N, ch_, H, W);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < ch_; ++c) {
            const T mu = mean_[c], is = invstd_[c];
            const T g = gamma_.ptr()[c];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* gp = gy.plane(n, c);
                const T* xp = x.plane(n, c);
                for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) {
                    sum_gy += gp[i];
                    sum_gy_xhat += gp[i] * (xp[i] - mu) * is;
                }
            }
            ggrad_.ptr()[c] += static_cast<T>(sum_gy_xhat);
            bgrad_.ptr()[c] += static_cast<T>(sum_gy);
            const double mgy = sum_gy / static_cast<double>(M);
            const double mgyx = sum_gy_xhat / static_cast<double>(M);
            for (int n = 0; n < N; ++n) {
                const T* gp = gy.plane(n, c);
                const T* xp = x.plane(n, c);
                T* op = gx.plane(n, c);
                for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) {
                    if (last_train_) {
                        double xhat = (xp[i] - mu) * is;
                        op[i] = static_cast<T>(g * is * (gp[i] - mgy - xhat * mgyx));
                    } else {
                        op[i] = static_cast<T>(g * is * gp[i]);
                    }
                }
            }
        }
        return gx;
    }

    void params(ParamSet<T>& ps, const std::string& prefix) {
        ps.push_back({prefix + ".gamma", &gamma_, &ggrad_});
        ps.push_back({prefix + ".beta", &beta_, &bgrad_});
    }

    void buffers(ParamSet<T>& ps, const std::string& prefix) {
        ps.push_back({prefix + ".running_mean", &running_mean_, nullptr});
        ps.push_back({prefix + ".running_var", &running_var_, nullptr});
    }

private:
    int ch_ = 0;
    T eps_ = T(1e-5), momentum_ = T(0.1);
    bool last_train_ = true;
    Tensor<T> gamma_, beta_, ggrad_, bgrad_;
    Tensor<T> running_mean_, running_var_;
    Tensor<T> x_cache_;
    std::vector<T> mean_, invstd_;
};

// ---------------------------------------------------------------------------
// ReLU / Tanh.
// ---------------------------------------------------------------------------

template <typename T>
class ReLU {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> y = x;
        (void)train;
        for (auto& v : y.raw())
            if (v < T(0)) v = T(0);
        x_cache_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> gx = gy;
        const auto& xv = x_cache_.raw();
        auto& gv = gx.raw();
        for (std::size_t i = 0; i < gv.size(); ++i)
            if (xv[i] <= T(0)) gv[i] = T(0);
        return gx;
    }

private:
    Tensor<T> x_cache_;
};

template <typename T>
class Tanh {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> y = x;
        (void)train;
        for (auto& v : y.raw()) v = std::tanh(v);
        y_cache_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> gx = gy;
        const auto& yv = y_cache_.raw();
        auto& gv = gx.raw();
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= (T(1) - yv[i] * yv[i]);
        return gx;
    }

private:
    Tensor<T> y_cache_;
};

// ---------------------------------------------------------------------------
// MaxPool2d with argmax caching.
// ---------------------------------------------------------------------------

template <typename T>
class MaxPool2d {
public:
    MaxPool2d() = default;
    MaxPool2d(int kernel, int stride, int pad) : k_(kernel), stride_(stride), pad_(pad) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
        const int Ho = conv_out_size(H, k_, stride_, pad_);
        const int Wo = conv_out_size(W, k_, stride_, pad_);
        Tensor<T> y(N, C, Ho, Wo);
        in_h_ = H;
        in_w_ = W;
        in_c_ = C;
        (void)train;
        argmax_.assign(static_cast<std::size_t>(N) * C * Ho * Wo, 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* sp = x.plane(n, c);
                T* dp = y.plane(n, c);
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        T best = -std::numeric_limits<T>::infinity();
                        int besti = -1;
                        for (int ky = 0; ky < k_; ++ky) {
                            int iy = oy * stride_ - pad_ + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < k_; ++kx) {
                                int ix = ox * stride_ - pad_ + kx;
                                if (ix < 0 || ix >= W) continue;
                                T v = sp[iy * W + ix];
                                if (v > best) {
                                    best = v;
                                    besti = iy * W + ix;
                                }
                            }
                        }
                        dp[oy * Wo + ox] = best;
                        argmax_[((static_cast<std::size_t>(n) * C + c) * Ho + oy) * Wo + ox] = besti;
                    }
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const int N = gy.n(), C = gy.c(), Ho = gy.h(), Wo = gy.w();
        Tensor<T> gx(N, C, in_h_, in_w_);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* gp = gy.plane(n, c);
                T* dp = gx.plane(n, c);
                for (int o = 0; o < Ho * Wo; ++o) {
                    int idx = argmax_[((static_cast<std::size_t>(n) * C + c) * Ho * Wo) + o];
                    if (idx >= 0) dp[idx] += gp[o];
                }
            }
        return gx;
    }

private:
    int k_ = 2, stride_ = 2, pad_ = 0;
    int in_h_ = 0, in_w_ = 0, in_c_ = 0;
    std::vector<int> argmax_;
};

// ---------------------------------------------------------------------------
// Channel softmax + channel concatenation helpers.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
    const int N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
    Tensor<T> p(N, C, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int n = 0; n < N; ++n) {
        const T* in = logits.plane(n, 0);
        T* out = p.plane(n, 0);
        for (std::size_t i = 0; i < plane; ++i) {
            T mx = in[i];
            for (int c = 1; c < C; ++c) mx = std::max(mx, in[c * plane + i]);
            double denom = 0.0;
            for (int c = 0; c < C; ++c) denom += std::exp(static_cast<double>(in[c * plane + i] - mx));
            for (int c = 0; c < C; ++c)
                out[c * plane + i] =
                    static_cast<T>(std::exp(static_cast<double>(in[c * plane + i] - mx)) / denom);
        }
    }
    return p;
}

// d(loss)/d(logits) from d(loss)/d(probs) and the probs themselves.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& gprobs) {
    const int N = probs.n(), C = probs.c(), H = probs.h(), W = probs.w();
    Tensor<T> gz(N, C, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int n = 0; n < N; ++n) {
        const T* p = probs.plane(n, 0);
        const T* g = gprobs.plane(n, 0);
        T* o = gz.plane(n, 0);
        for (std::size_t i = 0; i < plane; ++i) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += static_cast<double>(g[c * plane + i]) * p[c * plane + i];
            for (int c = 0; c < C; ++c)
                o[c * plane + i] = static_cast<T>(p[c * plane + i] * (g[c * plane + i] - dot));
        }
    }
    return gz;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ShapeError("concat_channels: spatial/batch mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
    const std::size_t plane = static_cast<std::size_t>(a.h()) * a.w();
    for (int n = 0; n < a.n(); ++n) {
        std::copy(a.plane(n, 0), a.plane(n, 0) + a.c() * plane, out.plane(n, 0));
        std::copy(b.plane(n, 0), b.plane(n, 0) + b.c() * plane, out.plane(n, a.c()));
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int c_first) {
    Tensor<T> a(g.n(), c_first, g.h(), g.w());
    Tensor<T> b(g.n(), g.c() - c_first, g.h(), g.w());
    const std::size_t plane = static_cast<std::size_t>(g.h()) * g.w();
    for (int n = 0; n < g.n(); ++n) {
        std::copy(g.plane(n, 0), g.plane(n, 0) + c_first * plane, a.plane(n, 0));
        std::copy(g.plane(n, c_first), g.plane(n, c_first) + (g.c() - c_first) * plane, b.plane(n, 0));
    }
    return {std::move(a), std::move(b)};
}

}  // namespace uaseg::nn
