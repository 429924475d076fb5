#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uaseg/common.hpp"
#include "uaseg/tensor.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Class taxonomy. Indices are fixed by contract: every mask, probability map
// and report in the project uses this order.
// ---------------------------------------------------------------------------

struct Rgb {
    std::uint8_t r, g, b;
    bool operator==(const Rgb&) const = default;
};

struct ClassTaxonomy {
    static constexpr int kNumClasses = 6;

    static const std::array<std::string, kNumClasses>& names() {
        static const std::array<std::string, kNumClasses> n = {
            "background", "kernel", "buffer", "IPyC", "SiC", "OPyC"};
        return n;
    }

    // Display palette: background black, kernel red, buffer green, IPyC blue,
    // SiC yellow, OPyC magenta.
    static const std::array<Rgb, kNumClasses>& colors() {
        static const std::array<Rgb, kNumClasses> c = {{
            {0, 0, 0},
            {255, 0, 0},
            {0, 255, 0},
            {0, 0, 255},
            {255, 255, 0},
            {255, 0, 255},
        }};
        return c;
    }
};

inline constexpr int kNumClasses = ClassTaxonomy::kNumClasses;

// ---------------------------------------------------------------------------
// LabelMask: H x W integer class map, values in {0, ..., C-1}.
// Index-encoded; one-hot is materialized only where a loss needs it.
// ---------------------------------------------------------------------------

struct LabelMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    LabelMask() = default;
    LabelMask(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0) {}

    std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return v.size(); }

    bool operator==(const LabelMask&) const = default;
};

inline void validate_mask(const LabelMask& m, int num_classes) {
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x) >= num_classes)
                throw ValidationError("label " + std::to_string(int(m.at(y, x))) +
                                      " out of range [0," + std::to_string(num_classes) +
                                      ") at pixel (y=" + std::to_string(y) +
                                      ", x=" + std::to_string(x) + ")");
}

// ---------------------------------------------------------------------------
// Plane: H x W scalar field. Used for soft labels (values in [-1,1]) and
// per-pixel weight maps.
// ---------------------------------------------------------------------------

template <typename T>
struct Plane {
    int h = 0, w = 0;
    std::vector<T> v;

    Plane() = default;
    Plane(int h_, int w_, T fill = T(0)) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}

    T& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    T at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return v.size(); }
};

using SoftLabelMap = Plane<float>;

// ---------------------------------------------------------------------------
// Probability map helpers. A probability map is a Tensor with C channels,
// entries in [0,1] and per-pixel channel sums equal to 1 within 1e-5.
// ---------------------------------------------------------------------------

template <typename T>
void validate_probability_map(const Tensor<T>& p, double tol = 1e-5) {
    const int N = p.n(), C = p.c(), H = p.h(), W = p.w();
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int c = 0; c < C; ++c) {
                    T v = p.at(n, c, y, x);
                    if (v < T(0) || v > T(1))
                        throw ValidationError("probability out of [0,1] at (n=" + std::to_string(n) +
                                              ", c=" + std::to_string(c) + ", y=" + std::to_string(y) +
                                              ", x=" + std::to_string(x) + ")");
                    s += static_cast<double>(v);
                }
                if (std::abs(s - 1.0) > tol)
                    throw ValidationError("probabilities sum to " + std::to_string(s) +
                                          " at pixel (y=" + std::to_string(y) +
                                          ", x=" + std::to_string(x) + ")");
            }
}

// One-hot expansion of a label mask: channel c is 1 iff the mask value is c.
template <typename T = float>
Tensor<T> one_hot(const LabelMask& mask, int num_classes) {
    validate_mask(mask, num_classes);
    Tensor<T> out(1, num_classes, mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            out.at(0, mask.at(y, x), y, x) = T(1);
    return out;
}

// Per-pixel argmax over channels. Ties break toward the lowest class index so
// results are reproducible.
template <typename T>
LabelMask argmax_labels(const Tensor<T>& probs, int sample = 0) {
    const int C = probs.c(), H = probs.h(), W = probs.w();
    LabelMask out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            T bv = probs.at(sample, 0, y, x);
            for (int c = 1; c < C; ++c) {
                T v = probs.at(sample, c, y, x);
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.at(y, x) = static_cast<std::uint8_t>(best);
        }
    return out;
}

}  // namespace uaseg
