#pragma once

#include <opencv2/core.hpp>

#include "uaseg/core.hpp"

namespace uaseg {

// Rendering conventions for human-reviewable outputs. The segmentation
// palette is the class taxonomy's; the uncertainty colormap is a fixed
// diverging blue -> white -> red over -u_hat in [-1,1] (not per-image
// normalized, so colors are comparable across images).
struct RenderSpec {
    double overlay_alpha = 0.5;
};

inline cv::Vec3b class_color_bgr(int cls) {
    const Rgb c = ClassTaxonomy::colors()[cls];
    return cv::Vec3b(c.b, c.g, c.r);
}

inline cv::Mat colorize_mask(const LabelMask& mask) {
    cv::Mat out(mask.h, mask.w, CV_8UC3);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) out.at<cv::Vec3b>(y, x) = class_color_bgr(mask.at(y, x));
    return out;
}

// Palette blended over the grayscale image.
inline cv::Mat overlay_mask(const cv::Mat& gray01, const LabelMask& mask, double alpha = 0.5) {
    cv::Mat out(mask.h, mask.w, CV_8UC3);
    for (int y = 0; y < mask.h; ++y) {
        const float* row = gray01.ptr<float>(y);
        for (int x = 0; x < mask.w; ++x) {
            const double g = 255.0 * row[x];
            const cv::Vec3b c = class_color_bgr(mask.at(y, x));
            for (int k = 0; k < 3; ++k)
                out.at<cv::Vec3b>(y, x)[k] =
                    static_cast<std::uint8_t>(alpha * c[k] + (1.0 - alpha) * g);
        }
    }
    return out;
}

// Uncertainty heatmap from predicted soft labels: t = -u_hat, blue at t=-1
// (certain/correct), white at 0, red at t=+1 (certain misclassification).
inline cv::Vec3b uncertainty_color(double t) {
    t = t < -1.0 ? -1.0 : (t > 1.0 ? 1.0 : t);
    if (t <= 0.0) {
        const double f = -t;  // toward blue
        const auto v = static_cast<std::uint8_t>(255.0 * (1.0 - f));
        return cv::Vec3b(255, v, v);
    }
    const auto v = static_cast<std::uint8_t>(255.0 * (1.0 - t));  // toward red
    return cv::Vec3b(v, v, 255);
}

inline cv::Mat uncertainty_heatmap(const SoftLabelMap& u_hat) {
    cv::Mat out(u_hat.h, u_hat.w, CV_8UC3);
    for (int y = 0; y < u_hat.h; ++y)
        for (int x = 0; x < u_hat.w; ++x)
            out.at<cv::Vec3b>(y, x) = uncertainty_color(-static_cast<double>(u_hat.at(y, x)));
    return out;
}

// Error map: purple where the prediction matches ground truth, yellow where
// it does not.
inline cv::Mat error_map(const LabelMask& pred, const LabelMask& gt) {
    if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("error_map: mask size mismatch");
    cv::Mat out(pred.h, pred.w, CV_8UC3);
    const cv::Vec3b purple(128, 0, 128), yellow(0, 255, 255);
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x)
            out.at<cv::Vec3b>(y, x) = pred.at(y, x) == gt.at(y, x) ? purple : yellow;
    return out;
}

}  // namespace uaseg
