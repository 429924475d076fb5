#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "uaseg/common.hpp"
#include "uaseg/image.hpp"
#include "uaseg/synthgen.hpp"
#include "uaseg/tensor.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Preprocessing: grayscale, [0,1], bilinear resize to model resolution; mask
// resized with nearest neighbor so no new labels appear. Dataset-level
// normalization (z-score) is applied later, when batches are assembled, so
// samples stay in [0,1] through augmentation.
// ---------------------------------------------------------------------------

inline ImageSample preprocess(const cv::Mat& image, const LabelMask& mask, int target = 512,
                              SampleMeta meta = {}) {
    if (image.rows != mask.h || image.cols != mask.w)
        throw ValidationError("preprocess: image " + std::to_string(image.rows) + "x" +
                              std::to_string(image.cols) + " and mask " + std::to_string(mask.h) +
                              "x" + std::to_string(mask.w) + " sizes differ");
    cv::Mat gray;
    if (image.channels() == 3)
        cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY);
    else if (image.channels() == 1)
        gray = image;
    else
        throw ValidationError("preprocess: expected 1 or 3 channel input");

    cv::Mat gray32;
    if (gray.depth() == CV_8U)
        gray.convertTo(gray32, CV_32F, 1.0 / 255.0);
    else if (gray.depth() == CV_32F)
        gray32 = gray.clone();
    else
        throw ValidationError("preprocess: expected 8-bit or float input");

    meta.orig_h = image.rows;
    meta.orig_w = image.cols;

    ImageSample out;
    if (gray32.rows == target && gray32.cols == target) {
        out.image = gray32;
        out.mask = mask;
    } else {
        cv::resize(gray32, out.image, cv::Size(target, target), 0, 0, cv::INTER_LINEAR);
        cv::Mat m8 = mask_to_mat(mask), r8;
        cv::resize(m8, r8, cv::Size(target, target), 0, 0, cv::INTER_NEAREST);
        out.mask = mat_to_mask(r8);
    }
    out.meta = std::move(meta);
    for (int y = 0; y < out.image.rows; ++y) {
        float* row = out.image.ptr<float>(y);
        for (int x = 0; x < out.image.cols; ++x) row[x] = clampf(row[x], 0.f, 1.f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training-time augmentation. Geometric transforms are applied identically to
// image (bilinear) and mask (nearest neighbor); photometric transforms touch
// only the image. CLAHE runs after the brightness/contrast and shadow steps.
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    double p_hflip = 0.5, p_vflip = 0.5;
    double p_scale = 0.5;
    double scale_lo = 0.8, scale_hi = 1.2;
    double p_grid = 0.5;
    int grid_steps = 4;
    double grid_distort = 0.3;
    double p_elastic = 0.5;
    double elastic_alpha_frac = 0.03;  // displacement magnitude, fraction of image size
    double elastic_sigma_frac = 0.012;
    double p_brightness_contrast = 0.5;
    double brightness_limit = 0.2, contrast_limit = 0.2;
    double p_shadow = 0.5;
    double shadow_lo = 0.3, shadow_hi = 0.6;
    double p_noise = 0.5;
    double noise_amp = 0.03;
    bool clahe = true;
    double clahe_clip = 4.0;
    int clahe_tiles = 8;

    void validate() const {
        for (double p : {p_hflip, p_vflip, p_scale, p_grid, p_elastic, p_brightness_contrast,
                         p_shadow, p_noise})
            if (p < 0.0 || p > 1.0) throw ConfigError("AugmentPolicy: probability outside [0,1]");
        if (scale_lo <= 0 || scale_lo > scale_hi)
            throw ConfigError("AugmentPolicy: invalid scale range");
    }

    static AugmentPolicy none() {
        AugmentPolicy p;
        p.p_hflip = p.p_vflip = p.p_scale = p.p_grid = p.p_elastic = 0.0;
        p.p_brightness_contrast = p.p_shadow = p.p_noise = 0.0;
        p.clahe = false;
        return p;
    }
};

namespace detail {

inline void clamp01(cv::Mat& img) {
    for (int y = 0; y < img.rows; ++y) {
        float* row = img.ptr<float>(y);
        for (int x = 0; x < img.cols; ++x) row[x] = clampf(row[x], 0.f, 1.f);
    }
}

inline void remap_pair(ImageSample& s, const cv::Mat& map_x, const cv::Mat& map_y) {
    cv::Mat img;
    cv::remap(s.image, img, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    s.image = img;
    cv::Mat m8 = mask_to_mat(s.mask), r8;
    cv::remap(m8, r8, map_x, map_y, cv::INTER_NEAREST, cv::BORDER_REPLICATE);
    s.mask = mat_to_mask(r8);
}

// Piecewise-linear axis map for grid distortion: cell widths jittered, then
// renormalized so the full extent is preserved.
inline std::vector<float> distorted_axis(int size, int steps, double distort, Rng& rng) {
    std::vector<double> widths(steps);
    double total = 0.0;
    for (int i = 0; i < steps; ++i) {
        widths[i] = 1.0 + rng.uniform(-distort, distort);
        total += widths[i];
    }
    std::vector<float> map(size);
    // Source position of each destination node.
    std::vector<double> node(steps + 1, 0.0);
    for (int i = 0; i < steps; ++i)
        node[i + 1] = node[i] + widths[i] / total * size;
    const double cell = static_cast<double>(size) / steps;
    for (int x = 0; x < size; ++x) {
        const int c = std::min(steps - 1, static_cast<int>(x / cell));
        const double f = (x - c * cell) / cell;
        map[x] = static_cast<float>(node[c] + f * (node[c + 1] - node[c]));
    }
    return map;
}

}  // namespace detail

inline ImageSample augment(const ImageSample& sample, Rng& rng, const AugmentPolicy& policy) {
    policy.validate();
    ImageSample s;
    s.image = sample.image.clone();
    s.mask = sample.mask;
    s.meta = sample.meta;
    const int H = s.image.rows, W = s.image.cols;

    if (rng.bernoulli(policy.p_hflip)) {
        cv::flip(s.image, s.image, 1);
        cv::Mat m8 = mask_to_mat(s.mask);
        cv::flip(m8, m8, 1);
        s.mask = mat_to_mask(m8);
    }
    if (rng.bernoulli(policy.p_vflip)) {
        cv::flip(s.image, s.image, 0);
        cv::Mat m8 = mask_to_mat(s.mask);
        cv::flip(m8, m8, 0);
        s.mask = mat_to_mask(m8);
    }

    // Random scaling, then center crop / replicate-pad back to the original
    // size so downstream shapes stay fixed.
    if (rng.bernoulli(policy.p_scale)) {
        const double scale = rng.uniform(policy.scale_lo, policy.scale_hi);
        const int nh = std::max(1, static_cast<int>(std::lround(H * scale)));
        const int nw = std::max(1, static_cast<int>(std::lround(W * scale)));
        cv::Mat img;
        cv::resize(s.image, img, cv::Size(nw, nh), 0, 0, cv::INTER_LINEAR);
        cv::Mat m8 = mask_to_mat(s.mask), r8;
        cv::resize(m8, r8, cv::Size(nw, nh), 0, 0, cv::INTER_NEAREST);
        if (nh >= H) {
            const int oy = (nh - H) / 2, ox = (nw - W) / 2;
            s.image = img(cv::Rect(ox, oy, W, H)).clone();
            r8 = r8(cv::Rect(ox, oy, W, H)).clone();
        } else {
            const int top = (H - nh) / 2, left = (W - nw) / 2;
            cv::copyMakeBorder(img, s.image, top, H - nh - top, left, W - nw - left,
                               cv::BORDER_REPLICATE);
            cv::copyMakeBorder(r8, r8, top, H - nh - top, left, W - nw - left,
                               cv::BORDER_REPLICATE);
        }
        s.mask = mat_to_mask(r8);
    }

    if (rng.bernoulli(policy.p_grid)) {
        const auto mx = detail::distorted_axis(W, policy.grid_steps, policy.grid_distort, rng);
        const auto my = detail::distorted_axis(H, policy.grid_steps, policy.grid_distort, rng);
        cv::Mat map_x(H, W, CV_32FC1), map_y(H, W, CV_32FC1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                map_x.at<float>(y, x) = mx[x];
                map_y.at<float>(y, x) = my[y];
            }
        detail::remap_pair(s, map_x, map_y);
    }

    if (rng.bernoulli(policy.p_elastic)) {
        const double alpha = policy.elastic_alpha_frac * std::max(H, W);
        const double sigma = std::max(1.0, policy.elastic_sigma_frac * std::max(H, W));
        cv::Mat dx(H, W, CV_32FC1), dy(H, W, CV_32FC1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                dx.at<float>(y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));
                dy.at<float>(y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));
            }
        const int k = 2 * static_cast<int>(3 * sigma) + 1;
        cv::GaussianBlur(dx, dx, cv::Size(k, k), sigma);
        cv::GaussianBlur(dy, dy, cv::Size(k, k), sigma);
        cv::Mat map_x(H, W, CV_32FC1), map_y(H, W, CV_32FC1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                map_x.at<float>(y, x) = static_cast<float>(x + alpha * dx.at<float>(y, x));
                map_y.at<float>(y, x) = static_cast<float>(y + alpha * dy.at<float>(y, x));
            }
        detail::remap_pair(s, map_x, map_y);
    }

    if (rng.bernoulli(policy.p_brightness_contrast)) {
        const double a = 1.0 + rng.uniform(-policy.contrast_limit, policy.contrast_limit);
        const double b = rng.uniform(-policy.brightness_limit, policy.brightness_limit);
        for (int y = 0; y < H; ++y) {
            float* row = s.image.ptr<float>(y);
            for (int x = 0; x < W; ++x)
                row[x] = static_cast<float>(a * (row[x] - 0.5) + 0.5 + b);
        }
        detail::clamp01(s.image);
    }

    if (rng.bernoulli(policy.p_shadow)) {
        // Vertical shadow band with slanted edges.
        const double strength = rng.uniform(policy.shadow_lo, policy.shadow_hi);
        const int x1 = static_cast<int>(rng.uniform(0.0, W));
        const int x2 = static_cast<int>(rng.uniform(0.0, W));
        const int x3 = static_cast<int>(rng.uniform(0.0, W));
        const int x4 = static_cast<int>(rng.uniform(0.0, W));
        std::vector<cv::Point> poly = {{std::min(x1, x2), 0},
                                       {std::max(x1, x2), 0},
                                       {std::max(x3, x4), H - 1},
                                       {std::min(x3, x4), H - 1}};
        cv::Mat shade = cv::Mat::zeros(H, W, CV_8UC1);
        cv::fillConvexPoly(shade, poly, cv::Scalar(255));
        for (int y = 0; y < H; ++y) {
            float* row = s.image.ptr<float>(y);
            const std::uint8_t* srow = shade.ptr<std::uint8_t>(y);
            for (int x = 0; x < W; ++x)
                if (srow[x]) row[x] = static_cast<float>(row[x] * (1.0 - strength));
        }
    }

    if (policy.clahe) {
        cv::Mat img8, out8;
        s.image.convertTo(img8, CV_8U, 255.0);
        auto clahe = cv::createCLAHE(policy.clahe_clip,
                                     cv::Size(policy.clahe_tiles, policy.clahe_tiles));
        clahe->apply(img8, out8);
        out8.convertTo(s.image, CV_32F, 1.0 / 255.0);
    }

    if (rng.bernoulli(policy.p_noise)) {
        for (int y = 0; y < H; ++y) {
            float* row = s.image.ptr<float>(y);
            for (int x = 0; x < W; ++x)
                row[x] = static_cast<float>(row[x] + policy.noise_amp * rng.normal());
        }
        detail::clamp01(s.image);
    }

    return s;
}

// ---------------------------------------------------------------------------
// Batch assembly and the split loader.
// ---------------------------------------------------------------------------

struct Normalization {
    float mean = 0.5f;
    float stddev = 0.25f;
};

struct Batch {
    Tensor<float> images;  // [N, 3, H, W], z-scored, grayscale replicated
    std::vector<LabelMask> masks;
    std::vector<int> indices;  // positions within the split
};

inline void sample_to_batch(const ImageSample& s, Tensor<float>& images, int n,
                            const Normalization& norm) {
    const int H = s.image.rows, W = s.image.cols;
    for (int y = 0; y < H; ++y) {
        const float* row = s.image.ptr<float>(y);
        for (int x = 0; x < W; ++x) {
            const float v = (row[x] - norm.mean) / norm.stddev;
            images.at(n, 0, y, x) = v;
            images.at(n, 1, y, x) = v;
            images.at(n, 2, y, x) = v;
        }
    }
}

// Deterministic split loader. Epoch ordering is a function of (shuffle seed,
// epoch); per-sample augmentation randomness is a function of (epoch seed,
// sample index) only, so results do not depend on traversal details.
class SplitLoader {
public:
    SplitLoader(const synth::DatasetManifest& manifest, std::string split, int batch_size,
                std::uint64_t shuffle_seed, int target_size, Normalization norm,
                const AugmentPolicy* augment_policy = nullptr, bool shuffle = false)
        : root_(manifest.root), split_(std::move(split)), batch_size_(batch_size),
          shuffle_seed_(shuffle_seed), target_(target_size), norm_(norm) {
        if (batch_size_ <= 0) throw ConfigError("SplitLoader: batch size must be > 0");
        if (augment_policy) policy_ = *augment_policy;
        has_policy_ = augment_policy != nullptr;
        shuffle_ = shuffle || has_policy_;
        for (const auto& e : manifest.samples)
            if (e.split == split_) entries_.push_back(e);
        if (entries_.empty())
            throw ConfigError("SplitLoader: split '" + split_ + "' has no samples");
    }

    int size() const { return static_cast<int>(entries_.size()); }
    int num_batches() const { return (size() + batch_size_ - 1) / batch_size_; }
    const Normalization& normalization() const { return norm_; }

    ImageSample load_sample(int index) const {
        const auto& e = entries_[index];
        const auto img_path = (std::filesystem::path(root_) / e.image).string();
        const auto msk_path = (std::filesystem::path(root_) / e.mask).string();
        if (!std::filesystem::exists(img_path)) throw IoError("missing image file: " + img_path);
        if (!std::filesystem::exists(msk_path)) throw IoError("missing mask file: " + msk_path);
        cv::Mat img = read_png_gray(img_path);
        LabelMask mask = mat_to_mask(read_png_gray(msk_path));
        SampleMeta meta;
        meta.profile = e.profile;
        meta.seed = e.seed;
        return preprocess(img, mask, target_, meta);
    }

    std::vector<int> epoch_order(int epoch) const {
        std::vector<int> order(entries_.size());
        std::iota(order.begin(), order.end(), 0);
        if (shuffle_) {
            Rng rng(derive_seed(shuffle_seed_, static_cast<std::uint64_t>(epoch)));
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.uniform_int(i)]);
        }
        return order;
    }

    Batch get_batch(int epoch, int batch_index) const {
        const auto order = epoch_order(epoch);
        const int lo = batch_index * batch_size_;
        const int hi = std::min<int>(lo + batch_size_, static_cast<int>(order.size()));
        if (lo >= hi) throw ConfigError("SplitLoader: batch index out of range");
        Batch b;
        b.images.resize(hi - lo, 3, target_, target_);
        const std::uint64_t epoch_seed = derive_seed(derive_seed(shuffle_seed_, 0x415547ULL),
                                                     static_cast<std::uint64_t>(epoch));
        for (int k = lo; k < hi; ++k) {
            const int idx = order[k];
            ImageSample s = load_sample(idx);
            if (has_policy_) {
                Rng rng(derive_seed(epoch_seed, static_cast<std::uint64_t>(idx)));
                s = augment(s, rng, policy_);
            }
            sample_to_batch(s, b.images, k - lo, norm_);
            b.masks.push_back(s.mask);
            b.indices.push_back(idx);
        }
        return b;
    }

private:
    std::string root_, split_;
    int batch_size_;
    std::uint64_t shuffle_seed_;
    int target_;
    Normalization norm_;
    AugmentPolicy policy_;
    bool has_policy_ = false;
    bool shuffle_ = false;
    std::vector<synth::ManifestEntry> entries_;
};

// Channel mean/std of the [0,1] grayscale values over a split, computed once
// per training stage.
inline Normalization compute_normalization(const synth::DatasetManifest& manifest,
                                           const std::string& split, int target) {
    SplitLoader loader(manifest, split, 1, 0, target, Normalization{0.f, 1.f});
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (int i = 0; i < loader.size(); ++i) {
        ImageSample s = loader.load_sample(i);
        for (int y = 0; y < s.image.rows; ++y) {
            const float* row = s.image.ptr<float>(y);
            for (int x = 0; x < s.image.cols; ++x) {
                sum += row[x];
                sq += static_cast<double>(row[x]) * row[x];
            }
        }
        count += static_cast<std::size_t>(s.image.rows) * s.image.cols;
    }
    const double mean = sum / static_cast<double>(count);
    const double var = std::max(1e-8, sq / static_cast<double>(count) - mean * mean);
    return {static_cast<float>(mean), static_cast<float>(std::sqrt(var))};
}

}  // namespace uaseg
