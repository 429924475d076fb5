#pragma once

#include <cmath>
#include <type_traits>
#include <vector>

#include "uaseg/core.hpp"
#include "uaseg/tensor.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Dice loss over softmax probabilities and index-encoded ground truth.
//
// Per-class sums run over every pixel of every sample in the batch
// (squared-denominator form). A smoothing epsilon on numerator and denominator
// makes a class absent from both prediction and ground truth score perfectly
// instead of 0/0, which matters for missing-OPyC samples.
// ---------------------------------------------------------------------------

template <typename T>
T dice_loss(const Tensor<T>& probs, const std::vector<LabelMask>& gt,
            Tensor<std::type_identity_t<T>>* grad = nullptr,
            std::type_identity_t<T> eps = T(1e-6)) {
    const int N = probs.n(), C = probs.c(), H = probs.h(), W = probs.w();
    if (static_cast<int>(gt.size()) != N)
        throw ShapeError("dice_loss: batch size mismatch: probs " + std::to_string(N) +
                         " vs gt " + std::to_string(gt.size()));
    for (const auto& m : gt)
        if (m.h != H || m.w != W) throw ShapeError("dice_loss: mask size mismatch");

    std::vector<double> inter(C, 0.0), psum(C, 0.0), gsum(C, 0.0);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        const auto& mask = gt[n];
        for (int c = 0; c < C; ++c) {
            const T* p = probs.plane(n, c);
            double in = 0.0, ps = 0.0, gs = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                const double pv = p[i];
                ps += pv * pv;
                if (mask.v[i] == c) {
                    in += pv;
                    gs += 1.0;
                }
            }
            inter[c] += in;
            psum[c] += ps;
            gsum[c] += gs;
        }
    }

    double dice_sum = 0.0;
    std::vector<double> num(C), den(C);
    for (int c = 0; c < C; ++c) {
        num[c] = 2.0 * inter[c] + eps;
        den[c] = psum[c] + gsum[c] + eps;
        dice_sum += num[c] / den[c];
    }
    const double loss = 1.0 - dice_sum / C;

    if (grad) {
        grad->resize(N, C, H, W);
        for (int n = 0; n < N; ++n) {
            const auto& mask = gt[n];
            for (int c = 0; c < C; ++c) {
                const T* p = probs.plane(n, c);
                T* g = grad->plane(n, c);
                const double inv_den = 1.0 / den[c];
                const double ratio = num[c] * inv_den * inv_den;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double gv = mask.v[i] == c ? 1.0 : 0.0;
                    // d(dice_c)/dp = (2 g den - num * 2 p) / den^2
                    const double dd = 2.0 * gv * inv_den - 2.0 * p[i] * ratio;
                    g[i] = static_cast<T>(-dd / C);
                }
            }
        }
    }
    return static_cast<T>(loss);
}

// ---------------------------------------------------------------------------
// SoftLabel uncertainty targets. For each pixel, with p = probability the
// segmentation model assigned to the TRUE class:
//   correct prediction  -> u =  p          (>= 0)
//   incorrect prediction -> u = -(1 - p)   (<= 0)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> soft_label_targets(const Tensor<T>& probs, const std::vector<LabelMask>& pred,
                             const std::vector<LabelMask>& gt) {
    const int N = probs.n(), H = probs.h(), W = probs.w();
    if (static_cast<int>(pred.size()) != N || static_cast<int>(gt.size()) != N)
        throw ShapeError("soft_label_targets: batch size mismatch");
    Tensor<T> u(N, 1, H, W);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        if (pred[n].h != H || pred[n].w != W || gt[n].h != H || gt[n].w != W)
            throw ShapeError("soft_label_targets: mask size mismatch");
        T* up = u.plane(n, 0);
        for (std::size_t i = 0; i < plane; ++i) {
            const int truec = gt[n].v[i];
            const T p_true = probs.plane(n, truec)[i];
            up[i] = (pred[n].v[i] == truec) ? p_true : -(T(1) - p_true);
        }
    }
    return u;
}

inline SoftLabelMap soft_label_targets_single(const Tensor<float>& probs, const LabelMask& pred,
                                              const LabelMask& gt) {
    Tensor<float> u = soft_label_targets(probs, std::vector<LabelMask>{pred},
                                         std::vector<LabelMask>{gt});
    SoftLabelMap out(u.h(), u.w());
    std::copy(u.ptr(), u.ptr() + u.size(), out.v.begin());
    return out;
}

// ---------------------------------------------------------------------------
// WFMSE: weighted focal mean squared error for the uncertainty regression.
// ---------------------------------------------------------------------------

struct WfmseParams {
    double e_correct = 1.0;
    double e_incorrect = 8.0;
    double beta = 20.0;
    double gamma = 1.0;

    void validate() const {
        if (e_correct <= 0 || e_incorrect <= 0) throw ConfigError("WfmseParams: weights must be > 0");
        if (beta <= 0) throw ConfigError("WfmseParams: beta must be > 0");
        if (gamma < 0) throw ConfigError("WfmseParams: gamma must be >= 0");
    }
};

// Per-pixel error weights: e_correct where pred == gt, e_incorrect elsewhere.
template <typename T>
Tensor<T> error_weights(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt,
                        const WfmseParams& params) {
    if (pred.size() != gt.size()) throw ShapeError("error_weights: batch size mismatch");
    const int N = static_cast<int>(pred.size());
    const int H = N ? pred[0].h : 0, W = N ? pred[0].w : 0;
    Tensor<T> w(N, 1, H, W);
    for (int n = 0; n < N; ++n) {
        if (pred[n].h != H || pred[n].w != W || gt[n].h != H || gt[n].w != W)
            throw ShapeError("error_weights: mask size mismatch");
        T* wp = w.plane(n, 0);
        for (std::size_t i = 0; i < pred[n].size(); ++i)
            wp[i] = static_cast<T>(pred[n].v[i] == gt[n].v[i] ? params.e_correct : params.e_incorrect);
    }
    return w;
}

inline Plane<float> error_weights_single(const LabelMask& pred, const LabelMask& gt,
                                         const WfmseParams& params) {
    Tensor<float> w = error_weights<float>({pred}, {gt}, params);
    Plane<float> out(w.h(), w.w());
    std::copy(w.ptr(), w.ptr() + w.size(), out.v.begin());
    return out;
}

// loss = (1/N) sum_i e_i * (u_i - uhat_i)^2 * (2 sigma(beta |u_i - uhat_i|) - 1)^gamma
// N is the total pixel count across the batch. Optional gradient w.r.t. uhat.
template <typename T>
T wfmse_loss(const Tensor<T>& u, const Tensor<T>& u_hat, const Tensor<T>& weights,
             const WfmseParams& params, Tensor<T>* grad = nullptr) {
    if (!same_shape(u, u_hat) || !same_shape(u, weights))
        throw ShapeError("wfmse_loss: shape mismatch");
    params.validate();
    const std::size_t n = u.size();
    if (grad) grad->resize(u.n(), u.c(), u.h(), u.w());
    const double beta = params.beta, gamma = params.gamma;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = weights.ptr()[i];
        const double r = static_cast<double>(u_hat.ptr()[i]) - static_cast<double>(u.ptr()[i]);
        const double a = std::abs(r);
        const double sig = 1.0 / (1.0 + std::exp(-beta * a));
        const double focal = 2.0 * sig - 1.0;  // 0 at zero residual
        const double fpow = gamma == 0.0 ? 1.0 : std::pow(focal, gamma);
        acc += e * r * r * fpow;
        if (grad) {
            double g = 0.0;
            if (r != 0.0) {
                g = e * 2.0 * r * fpow;
                if (gamma > 0.0) {
                    const double dfocal = 2.0 * beta * sig * (1.0 - sig) * (r > 0 ? 1.0 : -1.0);
                    const double fpow1 = gamma == 1.0 ? 1.0 : std::pow(focal, gamma - 1.0);
                    g += e * r * r * gamma * fpow1 * dfocal;
                }
            }
            grad->ptr()[i] = static_cast<T>(g / static_cast<double>(n));
        }
    }
    return static_cast<T>(acc / static_cast<double>(n));
}

inline float wfmse_loss_single(const SoftLabelMap& u, const SoftLabelMap& u_hat,
                               const Plane<float>& weights, const WfmseParams& params) {
    if (u.h != u_hat.h || u.w != u_hat.w || u.h != weights.h || u.w != weights.w)
        throw ShapeError("wfmse_loss: shape mismatch");
    Tensor<float> ut(1, 1, u.h, u.w), ht(1, 1, u.h, u.w), wt(1, 1, u.h, u.w);
    std::copy(u.v.begin(), u.v.end(), ut.ptr());
    std::copy(u_hat.v.begin(), u_hat.v.end(), ht.ptr());
    std::copy(weights.v.begin(), weights.v.end(), wt.ptr());
    return wfmse_loss(ut, ht, wt, params);
}

}  // namespace uaseg
