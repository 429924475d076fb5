#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "test_util.hpp"
#include "uaseg/metrics.hpp"

using namespace uaseg;

namespace {

// -----------------------------------------------------------------------
// Brute-force oracles.
// -----------------------------------------------------------------------

struct BruteCounts {
    std::vector<long long> tp, fp, fn;
};

BruteCounts brute_confusion(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt,
                            int C) {
    BruteCounts b{std::vector<long long>(C, 0), std::vector<long long>(C, 0),
                  std::vector<long long>(C, 0)};
    for (int c = 0; c < C; ++c)
        for (std::size_t k = 0; k < pred.size(); ++k)
            for (std::size_t i = 0; i < pred[k].size(); ++i) {
                const bool p = pred[k].v[i] == c;
                const bool g = gt[k].v[i] == c;
                if (p && g) ++b.tp[c];
                if (p && !g) ++b.fp[c];
                if (!p && g) ++b.fn[c];
            }
    return b;
}

// AP by explicit threshold enumeration: O(n^2), one threshold per distinct
// score, computing precision/recall from scratch at each.
double brute_ap(const std::vector<float>& score, const std::vector<std::uint8_t>& is_pos) {
    std::vector<float> thresholds = score;
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    long long total_pos = 0;
    for (auto p : is_pos) total_pos += p;
    double ap = 0.0, prev_recall = 0.0;
    for (float t : thresholds) {
        long long tp = 0, fp = 0;
        for (std::size_t i = 0; i < score.size(); ++i) {
            if (score[i] >= t) {
                if (is_pos[i])
                    ++tp;
                else
                    ++fp;
            }
        }
        const double recall = static_cast<double>(tp) / total_pos;
        const double precision = static_cast<double>(tp) / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

SpecSensF1 brute_spec_sens(const std::vector<float>& u_hat,
                           const std::vector<std::uint8_t>& correct, double tau) {
    SpecSensF1 r;
    for (std::size_t i = 0; i < u_hat.size(); ++i) {
        const bool pred_correct = u_hat[i] >= tau;
        if (correct[i] && pred_correct) ++r.tn;
        if (correct[i] && !pred_correct) ++r.fp;
        if (!correct[i] && !pred_correct) ++r.tp;
        if (!correct[i] && pred_correct) ++r.fn;
    }
    r.spec = (r.tn + r.fp) ? double(r.tn) / (r.tn + r.fp) : 1.0;
    r.sens = (r.tp + r.fn) ? double(r.tp) / (r.tp + r.fn) : 1.0;
    r.f1_ss = (r.spec + r.sens) ? 2 * r.spec * r.sens / (r.spec + r.sens) : 0.0;
    return r;
}

}  // namespace

TEST_CASE("seg_confusion worked 2x2 example") {
    LabelMask gt(2, 2), pred(2, 2);
    gt.at(0, 0) = 0;
    gt.at(0, 1) = 0;
    gt.at(1, 0) = 1;
    gt.at(1, 1) = 1;
    pred.at(0, 0) = 0;
    pred.at(0, 1) = 1;
    pred.at(1, 0) = 1;
    pred.at(1, 1) = 1;
    const auto c = seg_confusion({pred}, {gt}, 2);
    CHECK(c.tp[0] == 1);
    CHECK(c.fp[0] == 0);
    CHECK(c.fn[0] == 1);
    CHECK(c.tp[1] == 2);
    CHECK(c.fp[1] == 1);
    CHECK(c.fn[1] == 0);

    const auto r = seg_report(c);
    CHECK(r.iou[0] == Catch::Approx(0.5));
    CHECK(r.iou[1] == Catch::Approx(2.0 / 3.0));
    CHECK(r.miou == Catch::Approx(7.0 / 12.0));
    CHECK(r.precision[0] == Catch::Approx(1.0));
    CHECK(r.precision[1] == Catch::Approx(2.0 / 3.0));
    CHECK(r.mp == Catch::Approx(5.0 / 6.0));
}

TEST_CASE("seg_confusion edge cases") {
    CHECK_NOTHROW(seg_confusion({}, {}, 3));
    const auto empty = seg_confusion({}, {}, 3);
    for (int c = 0; c < 3; ++c) {
        CHECK(empty.tp[c] == 0);
        CHECK(empty.fp[c] == 0);
        CHECK(empty.fn[c] == 0);
    }
    LabelMask a(2, 2), b(3, 3);
    CHECK_THROWS_AS(seg_confusion({a}, {b}, 2), ShapeError);

    // Identical masks: no false positives or negatives, IoU = P = 1.
    Rng rng(31);
    LabelMask m = testutil::random_mask(5, 5, 4, rng);
    const auto c = seg_confusion({m}, {m}, 4);
    const auto r = seg_report(c);
    for (int k = 0; k < 4; ++k) {
        CHECK(c.fp[k] == 0);
        CHECK(c.fn[k] == 0);
    }
    CHECK(r.miou == 1.0);
    CHECK(r.mp == 1.0);
}

TEST_CASE("vacuous class scores one") {
    LabelMask gt(2, 2), pred(2, 2);  // all zeros; classes 1,2 vacuous
    const auto r = seg_report(seg_confusion({pred}, {gt}, 3));
    CHECK(r.iou[1] == 1.0);
    CHECK(r.precision[1] == 1.0);
    CHECK(r.miou == 1.0);
}

TEST_CASE("seg metrics equal brute-force counting on 1000 random mask pairs") {
    Rng rng(32);
    for (int trial = 0; trial < 1000; ++trial) {
        const int C = 2 + static_cast<int>(rng.uniform_int(5));
        const int h = 1 + static_cast<int>(rng.uniform_int(16));
        const int w = 1 + static_cast<int>(rng.uniform_int(16));
        const int n = 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<LabelMask> pred, gt;
        for (int k = 0; k < n; ++k) {
            pred.push_back(testutil::random_mask(h, w, C, rng));
            gt.push_back(testutil::random_mask(h, w, C, rng));
        }
        const auto counts = seg_confusion(pred, gt, C);
        const auto brute = brute_confusion(pred, gt, C);
        for (int c = 0; c < C; ++c) {
            REQUIRE(counts.tp[c] == brute.tp[c]);
            REQUIRE(counts.fp[c] == brute.fp[c]);
            REQUIRE(counts.fn[c] == brute.fn[c]);
            REQUIRE(counts.tp[c] + counts.fn[c] == counts.gt_pixels(c));
        }
    }
}

TEST_CASE("average precision worked examples") {
    SECTION("perfect ranking") {
        const double ap =
            average_precision({0.9f, 0.8f, 0.3f}, {1, 1, 0}, PositiveClass::Correct);
        CHECK(ap == Catch::Approx(1.0));
    }
    SECTION("one inversion") {
        const double ap =
            average_precision({0.9f, 0.8f, 0.3f}, {0, 1, 1}, PositiveClass::Correct);
        CHECK(ap == Catch::Approx(0.5 * 0.5 + 0.5 * (2.0 / 3.0)));
    }
    SECTION("all positives above all negatives") {
        const double ap = average_precision({0.7f, 0.6f, -0.2f, -0.5f}, {1, 1, 0, 0},
                                            PositiveClass::Correct);
        CHECK(ap == Catch::Approx(1.0));
    }
    SECTION("zero positives is an error") {
        CHECK_THROWS_AS(average_precision({0.5f, 0.2f}, {0, 0}, PositiveClass::Correct),
                        UndefinedMetricError);
        CHECK_THROWS_AS(average_precision({0.5f, 0.2f}, {1, 1}, PositiveClass::Incorrect),
                        UndefinedMetricError);
    }
}

TEST_CASE("average precision equals brute-force threshold enumeration") {
    Rng rng(33);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(63));
        std::vector<float> u_hat(n);
        std::vector<std::uint8_t> correct(n);
        bool any_pos = false, any_neg = false;
        for (int i = 0; i < n; ++i) {
            // Quantized scores so ties actually occur.
            u_hat[i] = static_cast<float>(std::round(rng.uniform(-1.0, 1.0) * 8.0) / 8.0);
            correct[i] = rng.bernoulli(0.6);
            (correct[i] ? any_pos : any_neg) = true;
        }
        if (!any_pos) correct[0] = 1;
        if (!any_neg) correct[n - 1] = 0;

        for (auto positive : {PositiveClass::Correct, PositiveClass::Incorrect}) {
            std::vector<float> score(n);
            std::vector<std::uint8_t> is_pos(n);
            for (int i = 0; i < n; ++i) {
                score[i] = positive == PositiveClass::Correct ? u_hat[i] : -u_hat[i];
                is_pos[i] = positive == PositiveClass::Correct ? correct[i] : !correct[i];
            }
            const double got = average_precision(u_hat, correct, positive);
            const double want = brute_ap(score, is_pos);
            REQUIRE(std::abs(got - want) < 1e-12);
        }
    }
}

TEST_CASE("average precision is invariant under strictly increasing transforms") {
    Rng rng(34);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(30));
        std::vector<float> u_hat(n);
        std::vector<std::uint8_t> correct(n);
        for (int i = 0; i < n; ++i) {
            u_hat[i] = static_cast<float>(std::round(rng.uniform(-1.0, 1.0) * 4.0) / 4.0);
            correct[i] = rng.bernoulli(0.5);
        }
        correct[0] = 1;
        const double before = average_precision(u_hat, correct, PositiveClass::Correct);
        std::vector<float> transformed(n);
        for (int i = 0; i < n; ++i)
            transformed[i] = std::tanh(2.0f * u_hat[i]) + u_hat[i] * u_hat[i] * u_hat[i];
        const double after = average_precision(transformed, correct, PositiveClass::Correct);
        REQUIRE(std::abs(before - after) < 1e-12);
    }
}

TEST_CASE("uq_mse") {
    SoftLabelMap u(1, 2), uh(1, 2);
    u.at(0, 0) = 1.f;
    u.at(0, 1) = -1.f;
    uh.at(0, 0) = 0.5f;
    uh.at(0, 1) = -0.5f;
    CHECK(uq_mse(u, uh) == Catch::Approx(0.25));
    CHECK(uq_mse(u, u) == 0.0);
    // Constant offset d everywhere -> d^2.
    SoftLabelMap a(3, 3, 0.2f), b(3, 3, -0.1f);
    CHECK(uq_mse(a, b) == Catch::Approx(0.09).epsilon(1e-5));
}

TEST_CASE("spec/sens/f1 worked example") {
    const std::vector<float> u_hat = {0.9f, -0.2f, 0.1f, -0.8f};
    const std::vector<std::uint8_t> correct = {1, 1, 0, 0};
    const auto r = spec_sens_f1(u_hat, correct, 0.0);
    CHECK(r.tn == 1);
    CHECK(r.fp == 1);
    CHECK(r.tp == 1);
    CHECK(r.fn == 1);
    CHECK(r.spec == Catch::Approx(0.5));
    CHECK(r.sens == Catch::Approx(0.5));
    CHECK(r.f1_ss == Catch::Approx(0.5));
}

TEST_CASE("spec/sens extremes") {
    SECTION("perfect separation") {
        const auto r = spec_sens_f1({0.8f, 0.9f, -0.7f, -0.6f}, {1, 1, 0, 0}, 0.0);
        CHECK(r.spec == 1.0);
        CHECK(r.sens == 1.0);
        CHECK(r.f1_ss == 1.0);
    }
    SECTION("tau = -1 flags everything correct") {
        const auto r = spec_sens_f1({0.5f, -0.5f}, {1, 0}, -1.0);
        CHECK(r.sens == 0.0);
        CHECK(r.spec == 1.0);
    }
    SECTION("f1(a, a) = a") {
        // Construct spec = sens = 0.75: 4 correct (3 above tau), 4 incorrect
        // (3 below tau).
        const std::vector<float> u_hat = {0.5f, 0.6f, 0.7f, -0.5f, -0.6f, -0.7f, -0.8f, 0.8f};
        const std::vector<std::uint8_t> correct = {1, 1, 1, 1, 0, 0, 0, 0};
        const auto r = spec_sens_f1(u_hat, correct, 0.0);
        CHECK(r.spec == Catch::Approx(0.75));
        CHECK(r.sens == Catch::Approx(0.75));
        CHECK(r.f1_ss == Catch::Approx(0.75));
    }
}

TEST_CASE("spec/sens/f1 equals brute-force counting on random data") {
    Rng rng(35);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(64));
        std::vector<float> u_hat(n);
        std::vector<std::uint8_t> correct(n);
        for (int i = 0; i < n; ++i) {
            u_hat[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
            correct[i] = rng.bernoulli(0.7);
        }
        const double tau = rng.uniform(-1.0, 1.0);
        const auto got = spec_sens_f1(u_hat, correct, tau);
        const auto want = brute_spec_sens(u_hat, correct, tau);
        REQUIRE(got.tn == want.tn);
        REQUIRE(got.fp == want.fp);
        REQUIRE(got.tp == want.tp);
        REQUIRE(got.fn == want.fn);
        REQUIRE(got.f1_ss == Catch::Approx(want.f1_ss));
    }
}

TEST_CASE("threshold grid has exactly 201 points") {
    const auto grid = uq_threshold_grid();
    REQUIRE(grid.size() == 201);
    CHECK(grid.front() == Catch::Approx(-1.0));
    CHECK(grid.back() == Catch::Approx(1.0));
    for (std::size_t i = 1; i < grid.size(); ++i)
        CHECK(grid[i] - grid[i - 1] == Catch::Approx(0.01));
}

TEST_CASE("select_threshold picks the smallest maximizer") {
    // Perfectly separated around 0: every tau in (-0.5, 0.5] is perfect; the
    // smallest grid point in the gap is -0.49.
    const std::vector<float> u_hat = {0.5f, 0.6f, -0.5f, -0.6f};
    const std::vector<std::uint8_t> correct = {1, 1, 0, 0};
    const double tau = select_threshold(u_hat, correct);
    CHECK(tau == Catch::Approx(-0.49));
}

TEST_CASE("select_threshold matches exhaustive recomputation on random data") {
    Rng rng(36);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 10 + static_cast<int>(rng.uniform_int(100));
        std::vector<float> u_hat(n);
        std::vector<std::uint8_t> correct(n);
        for (int i = 0; i < n; ++i) {
            u_hat[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
            correct[i] = rng.bernoulli(0.6);
        }
        correct[0] = 1;
        correct[1] = 0;
        const double tau = select_threshold(u_hat, correct);
        double best_f1 = -1.0, best_tau = -1.0;
        for (int k = 0; k <= 200; ++k) {
            const double t = (k - 100) / 100.0;
            const double f1 = brute_spec_sens(u_hat, correct, t).f1_ss;
            if (f1 > best_f1) {
                best_f1 = f1;
                best_tau = t;
            }
        }
        REQUIRE(tau == Catch::Approx(best_tau));
        REQUIRE(brute_spec_sens(u_hat, correct, tau).f1_ss == Catch::Approx(best_f1));
    }
}

TEST_CASE("select_threshold requires both outcomes") {
    CHECK_THROWS_AS(select_threshold({0.5f, 0.6f}, {1, 1}), CalibrationError);
    CHECK_THROWS_AS(select_threshold({0.5f, 0.6f}, {0, 0}), CalibrationError);
}

TEST_CASE("report serialization is stable") {
    LabelMask gt(2, 2), pred(2, 2);
    gt.at(0, 0) = 1;
    pred.at(0, 0) = 1;
    const auto r = seg_report(seg_confusion({pred}, {gt}, 6));
    const auto j = seg_report_json(r);
    REQUIRE(j.contains("classes"));
    REQUIRE(j["classes"].size() == 6);
    CHECK(j["classes"][0]["name"] == "background");
    CHECK(j.contains("miou"));

    const std::string csv = seg_report_csv(r);
    CHECK(csv.find("class,iou,precision") != std::string::npos);
    CHECK(csv.find("\nall,") != std::string::npos);

    const std::string table = seg_report_table_csv(r);
    CHECK(table.find("metric,BG,Kernel,Buffer,IPyC,SiC,OPyC,All") == 0);

    UqMetricsReport uq;
    uq.ap = 0.9;
    const std::string ucsv = uq_report_csv(uq);
    CHECK(ucsv.find("AP,AP-E,MSE,Spec,Sens,F1-SS,tau") == 0);
}
