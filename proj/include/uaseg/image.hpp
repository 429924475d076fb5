#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <string>

#include "uaseg/core.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// In-memory sample: grayscale image in [0,1] (stored single-channel and
// replicated to 3 channels when batches are assembled) plus its label mask.
// ---------------------------------------------------------------------------

struct SampleMeta {
    std::string profile;
    std::uint64_t seed = 0;
    int orig_h = 0, orig_w = 0;
};

struct ImageSample {
    cv::Mat image;  // CV_32FC1, values in [0,1]
    LabelMask mask;
    SampleMeta meta;

    void validate() const {
        if (image.type() != CV_32FC1) throw ValidationError("ImageSample: image must be CV_32FC1");
        if (image.rows != mask.h || image.cols != mask.w)
            throw ValidationError("ImageSample: image and mask sizes differ");
        for (int y = 0; y < image.rows; ++y) {
            const float* row = image.ptr<float>(y);
            for (int x = 0; x < image.cols; ++x)
                if (row[x] < 0.f || row[x] > 1.f)
                    throw ValidationError("ImageSample: image value outside [0,1]");
        }
        validate_mask(mask, kNumClasses);
    }
};

inline cv::Mat mask_to_mat(const LabelMask& m) {
    cv::Mat out(m.h, m.w, CV_8UC1);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) out.at<std::uint8_t>(y, x) = m.at(y, x);
    return out;
}

inline LabelMask mat_to_mask(const cv::Mat& m) {
    if (m.type() != CV_8UC1) throw ValidationError("mask image must be 8-bit single channel");
    LabelMask out(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) out.at(y, x) = m.at<std::uint8_t>(y, x);
    return out;
}

inline void write_png(const std::string& path, const cv::Mat& img) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    if (!cv::imwrite(path, img)) throw IoError("failed to write " + path);
}

inline cv::Mat read_png_gray(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw IoError("failed to read " + path);
    return img;
}

}  // namespace uaseg
