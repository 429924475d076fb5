#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uaseg/core.hpp"

namespace uaseg {

// ---------------------------------------------------------------------------
// Segmentation metrics (IoU / precision family). Counts are aggregated
// globally over all pixels of all images (micro aggregation), which stays
// well-defined when individual images lack some class.
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    int num_classes = 0;
    std::vector<std::int64_t> tp, fp, fn;

    explicit ConfusionCounts(int C = 0) : num_classes(C), tp(C, 0), fp(C, 0), fn(C, 0) {}

    void merge(const ConfusionCounts& o) {
        for (int c = 0; c < num_classes; ++c) {
            tp[c] += o.tp[c];
            fp[c] += o.fp[c];
            fn[c] += o.fn[c];
        }
    }

    std::int64_t gt_pixels(int c) const { return tp[c] + fn[c]; }
    std::int64_t pred_pixels(int c) const { return tp[c] + fp[c]; }
};

inline void accumulate_confusion(ConfusionCounts& counts, const LabelMask& pred,
                                 const LabelMask& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("seg_confusion: mask size mismatch (" + std::to_string(pred.h) + "x" +
                         std::to_string(pred.w) + " vs " + std::to_string(gt.h) + "x" +
                         std::to_string(gt.w) + ")");
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int p = pred.v[i], g = gt.v[i];
        if (p == g) {
            ++counts.tp[g];
        } else {
            ++counts.fp[p];
            ++counts.fn[g];
        }
    }
}

inline ConfusionCounts seg_confusion(const std::vector<LabelMask>& pred,
                                     const std::vector<LabelMask>& gt, int num_classes) {
    if (pred.size() != gt.size()) throw ShapeError("seg_confusion: pair count mismatch");
    ConfusionCounts counts(num_classes);
    for (std::size_t i = 0; i < pred.size(); ++i) accumulate_confusion(counts, pred[i], gt[i]);
    return counts;
}

struct SegMetricsReport {
    std::vector<double> iou, precision;
    std::vector<std::int64_t> gt_pixels, pred_pixels;
    double miou = 0.0, mp = 0.0;
};

// IoU_c = TP/(TP+FP+FN), P_c = TP/(TP+FP).
// A class absent from both ground truth and prediction scores 1 (correctly
// predicting total absence); a class present in ground truth but never
// predicted scores precision 0.
inline SegMetricsReport seg_report(const ConfusionCounts& counts) {
    const int C = counts.num_classes;
    SegMetricsReport r;
    r.iou.resize(C);
    r.precision.resize(C);
    r.gt_pixels.resize(C);
    r.pred_pixels.resize(C);
    for (int c = 0; c < C; ++c) {
        const double tp = static_cast<double>(counts.tp[c]);
        const double fp = static_cast<double>(counts.fp[c]);
        const double fn = static_cast<double>(counts.fn[c]);
        const bool vacuous = counts.tp[c] == 0 && counts.fp[c] == 0 && counts.fn[c] == 0;
        r.iou[c] = vacuous ? 1.0 : tp / (tp + fp + fn);
        if (vacuous)
            r.precision[c] = 1.0;
        else if (counts.tp[c] + counts.fp[c] == 0)
            r.precision[c] = 0.0;
        else
            r.precision[c] = tp / (tp + fp);
        r.gt_pixels[c] = counts.gt_pixels(c);
        r.pred_pixels[c] = counts.pred_pixels(c);
        r.miou += r.iou[c];
        r.mp += r.precision[c];
    }
    r.miou /= C;
    r.mp /= C;
    return r;
}

// ---------------------------------------------------------------------------
// Misclassification-detection metrics.
// ---------------------------------------------------------------------------

enum class PositiveClass { Correct, Incorrect };

// Average precision over the PR curve with thresholds at the distinct score
// values. Scores are the predicted soft labels; when the positive class is
// "incorrect" they are negated so that higher always means more likely
// positive. R_0 = 0.
inline double average_precision(const std::vector<float>& u_hat,
                                const std::vector<std::uint8_t>& correct,
                                PositiveClass positive) {
    if (u_hat.size() != correct.size()) throw ShapeError("average_precision: length mismatch");
    const std::size_t n = u_hat.size();
    std::int64_t total_pos = 0;
    std::vector<float> score(n);
    std::vector<std::uint8_t> is_pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (positive == PositiveClass::Correct) {
            score[i] = u_hat[i];
            is_pos[i] = correct[i] ? 1 : 0;
        } else {
            score[i] = -u_hat[i];
            is_pos[i] = correct[i] ? 0 : 1;
        }
        total_pos += is_pos[i];
    }
    if (total_pos == 0)
        throw UndefinedMetricError("average_precision: no positive samples; AP is undefined");

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::uint32_t a, std::uint32_t b) { return score[a] > score[b]; });

    double ap = 0.0, prev_recall = 0.0;
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        // Consume the whole tie group: one threshold per distinct score.
        std::size_t j = i;
        while (j < n && score[order[j]] == score[order[i]]) {
            if (is_pos[order[j]])
                ++tp;
            else
                ++fp;
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

inline double uq_mse(const SoftLabelMap& u, const SoftLabelMap& u_hat) {
    if (u.h != u_hat.h || u.w != u_hat.w) throw ShapeError("uq_mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = static_cast<double>(u.v[i]) - static_cast<double>(u_hat.v[i]);
        acc += d * d;
    }
    return u.size() ? acc / static_cast<double>(u.size()) : 0.0;
}

inline double uq_mse(const std::vector<float>& u, const std::vector<float>& u_hat) {
    if (u.size() != u_hat.size()) throw ShapeError("uq_mse: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = static_cast<double>(u[i]) - static_cast<double>(u_hat[i]);
        acc += d * d;
    }
    return u.empty() ? 0.0 : acc / static_cast<double>(u.size());
}

struct SpecSensF1 {
    double spec = 0.0, sens = 0.0, f1_ss = 0.0;
    std::int64_t tn = 0, fp = 0, tp = 0, fn = 0;
};

// A pixel is flagged "predicted correct" iff u_hat >= tau. The positive class
// is an incorrect classification: TP = incorrect flagged incorrect,
// FN = incorrect flagged correct, TN = correct flagged correct, FP = correct
// flagged incorrect. Degenerate 0/0 ratios resolve to 1 (nothing to get
// wrong).
inline SpecSensF1 spec_sens_f1(const std::vector<float>& u_hat,
                               const std::vector<std::uint8_t>& correct, double tau) {
    if (u_hat.size() != correct.size()) throw ShapeError("spec_sens_f1: length mismatch");
    SpecSensF1 r;
    for (std::size_t i = 0; i < u_hat.size(); ++i) {
        const bool flagged_correct = u_hat[i] >= tau;
        if (correct[i]) {
            if (flagged_correct)
                ++r.tn;
            else
                ++r.fp;
        } else {
            if (flagged_correct)
                ++r.fn;
            else
                ++r.tp;
        }
    }
    r.spec = (r.tn + r.fp) == 0 ? 1.0 : static_cast<double>(r.tn) / static_cast<double>(r.tn + r.fp);
    r.sens = (r.tp + r.fn) == 0 ? 1.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
    r.f1_ss = (r.spec + r.sens) == 0.0 ? 0.0 : 2.0 * r.sens * r.spec / (r.sens + r.spec);
    return r;
}

// The fixed 201-point calibration grid: -1.00, -0.99, ..., 1.00.
inline std::vector<double> uq_threshold_grid() {
    std::vector<double> grid(201);
    for (int k = 0; k <= 200; ++k) grid[k] = (k - 100) / 100.0;
    return grid;
}

// Pick the threshold maximizing F1-SS on validation pixels; ties resolve to
// the smallest tau.
inline double select_threshold(const std::vector<float>& u_hat_val,
                               const std::vector<std::uint8_t>& correct_val) {
    bool any_correct = false, any_incorrect = false;
    for (auto c : correct_val) (c ? any_correct : any_incorrect) = true;
    if (!any_correct || !any_incorrect)
        throw CalibrationError(
            "select_threshold: validation pixels must include both correct and incorrect "
            "classifications");
    double best_tau = -1.0, best_f1 = -1.0;
    for (double tau : uq_threshold_grid()) {
        const double f1 = spec_sens_f1(u_hat_val, correct_val, tau).f1_ss;
        if (f1 > best_f1) {
            best_f1 = f1;
            best_tau = tau;
        }
    }
    return best_tau;
}

struct UqMetricsReport {
    double ap = 0.0, ap_e = 0.0, mse = 0.0;
    double spec = 0.0, sens = 0.0, f1_ss = 0.0;
    double tau = 0.0;
    std::int64_t tn = 0, fp = 0, tp = 0, fn = 0;
    // Maximum-softmax-probability AP-E, reported alongside for comparison.
    double msp_ap_e = -1.0;
};

// ---------------------------------------------------------------------------
// Report serialization: JSON with stable key order plus CSV (one row per
// class and a summary row).
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json seg_report_json(const SegMetricsReport& r) {
    nlohmann::ordered_json j;
    j["classes"] = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < r.iou.size(); ++c) {
        nlohmann::ordered_json e;
        e["name"] = ClassTaxonomy::names()[c];
        e["iou"] = r.iou[c];
        e["precision"] = r.precision[c];
        e["gt_pixels"] = r.gt_pixels[c];
        e["pred_pixels"] = r.pred_pixels[c];
        j["classes"].push_back(e);
    }
    j["miou"] = r.miou;
    j["mp"] = r.mp;
    return j;
}

inline std::string seg_report_csv(const SegMetricsReport& r) {
    std::ostringstream os;
    os << "class,iou,precision,gt_pixels,pred_pixels\n";
    for (std::size_t c = 0; c < r.iou.size(); ++c)
        os << ClassTaxonomy::names()[c] << "," << r.iou[c] << "," << r.precision[c] << ","
           << r.gt_pixels[c] << "," << r.pred_pixels[c] << "\n";
    os << "all," << r.miou << "," << r.mp << ",,\n";
    return os.str();
}

// Wide table in the BG..OPyC,All column layout.
inline std::string seg_report_table_csv(const SegMetricsReport& r) {
    std::ostringstream os;
    os << "metric,BG,Kernel,Buffer,IPyC,SiC,OPyC,All\n";
    os << "iou";
    for (double v : r.iou) os << "," << v;
    os << "," << r.miou << "\n";
    os << "precision";
    for (double v : r.precision) os << "," << v;
    os << "," << r.mp << "\n";
    return os.str();
}

inline nlohmann::ordered_json uq_report_json(const UqMetricsReport& r) {
    nlohmann::ordered_json j;
    j["AP"] = r.ap;
    j["AP-E"] = r.ap_e;
    j["MSE"] = r.mse;
    j["Spec"] = r.spec;
    j["Sens"] = r.sens;
    j["F1-SS"] = r.f1_ss;
    j["tau"] = r.tau;
    j["counts_at_tau"] = {{"tn", r.tn}, {"fp", r.fp}, {"tp", r.tp}, {"fn", r.fn}};
    if (r.msp_ap_e >= 0.0) j["MSP_AP-E"] = r.msp_ap_e;
    return j;
}

inline std::string uq_report_csv(const UqMetricsReport& r) {
    std::ostringstream os;
    os << "AP,AP-E,MSE,Spec,Sens,F1-SS,tau\n";
    os << r.ap << "," << r.ap_e << "," << r.mse << "," << r.spec << "," << r.sens << "," << r.f1_ss
       << "," << r.tau << "\n";
    return os.str();
}

}  // namespace uaseg
