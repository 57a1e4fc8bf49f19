#include <doctest.h>

#include <random>

#include "tokencd/metrics.hpp"

using namespace tokencd;

namespace {

// The SCD fixture worked through by hand from the appendix formulas.
ScdConfusion fixture_q() {
    ScdConfusion q(2);
    const std::int64_t vals[3][3] = {{10, 1, 0}, {2, 5, 1}, {0, 1, 6}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) q.q(i, j) = vals[i][j];
    return q;
}

BinaryMask random_mask(int size, std::mt19937_64& rng) {
    BinaryMask m(size, size);
    std::bernoulli_distribution bit(0.5);
    for (auto& v : m.data) v = bit(rng) ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("binary counts tally") {
    BinaryMask pred(2, 2), gt(2, 2);
    pred.data = {1, 0, 0, 0};
    gt.data = {1, 0, 0, 0};
    BinaryCounts c = binary_counts(pred, gt);
    CHECK(c.tp == 1);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tn == 3);

    pred.data = {1, 1, 0, 0};
    c = binary_counts(pred, gt);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 0);
    CHECK(c.tn == 2);

    for (std::size_t i = 0; i < pred.data.size(); ++i) pred.data[i] = gt.data[i] ? 0 : 1;
    c = binary_counts(pred, gt);
    CHECK(c.tp == 0);
    CHECK(c.tn == 0);
    CHECK(c.total() == 4);
}

TEST_CASE("bcd metrics from counts") {
    BcdMetrics m = bcd_metrics({1, 1, 0, 2});
    CHECK(m.precision == doctest::Approx(0.5));
    CHECK(m.recall == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.iou == doctest::Approx(0.5));

    m = bcd_metrics({5, 0, 0, 3});
    CHECK(m.precision == 1.0);
    CHECK(m.recall == 1.0);
    CHECK(m.f1 == 1.0);
    CHECK(m.iou == 1.0);

    // Empty-perfect convention: agreeing on "nothing changed" scores 1.
    m = bcd_metrics({0, 0, 0, 7});
    CHECK(m.precision == 1.0);
    CHECK(m.iou == 1.0);

    // Prediction misses everything: denominators partly vanish, metric 0.
    m = bcd_metrics({0, 0, 4, 3});
    CHECK(m.precision == 0.0);
    CHECK(m.recall == 0.0);
    CHECK(m.f1 == 0.0);
    CHECK(m.iou == 0.0);
}

TEST_CASE("scd confusion accumulates both temporal maps") {
    LabelMap p1(1, 1), p2(1, 1), g1(1, 1), g2(1, 1);
    p1.data = {1};
    p2.data = {1};
    g1.data = {2};
    g2.data = {2};
    ScdConfusion q = scd_confusion(p1, p2, g1, g2, 2);
    CHECK(q.q(1, 2) == 2);
    CHECK(q.total() == 2);

    LabelMap big_p(4, 4), big_g(4, 4);
    q = scd_confusion(big_p, big_p, big_g, big_g, 2);
    CHECK(q.total() == 2 * 16);

    LabelMap bad(1, 1);
    bad.data = {5};
    CHECK_THROWS(scd_confusion(bad, bad, g1, g2, 2));
}

TEST_CASE("miou on the hand fixture") {
    const MiouMetrics m = miou(fixture_q());
    CHECK(m.iou_nc == doctest::Approx(10.0 / 13.0).epsilon(1e-12));
    CHECK(m.iou_c == doctest::Approx(13.0 / 16.0).epsilon(1e-12));
    CHECK(m.miou == doctest::Approx(0.5 * (10.0 / 13.0 + 13.0 / 16.0)).epsilon(1e-12));
    CHECK(m.miou == doctest::Approx(0.79087).epsilon(1e-4));
}

TEST_CASE("miou degenerate cases") {
    ScdConfusion diag(2);
    diag.q(0, 0) = 4;
    diag.q(1, 1) = 2;
    diag.q(2, 2) = 3;
    const MiouMetrics m = miou(diag);
    CHECK(m.iou_nc == 1.0);
    CHECK(m.iou_c == 1.0);
    CHECK(m.miou == 1.0);

    ScdConfusion nochange(2);
    nochange.q(0, 0) = 9;
    const MiouMetrics m2 = miou(nochange);
    CHECK(m2.iou_nc == 1.0);
    CHECK(m2.iou_c == 0.0);  // 0/0 convention
}

TEST_CASE("sek on the hand fixture") {
    const double s = sek(fixture_q());
    // rho = 11/16, eta = 107/256, kappa = 69/149, SeK = exp(-3/16) * kappa
    const double expected = std::exp(13.0 / 16.0 - 1.0) * (69.0 / 149.0);
    CHECK(s == doctest::Approx(expected).epsilon(1e-12));
    CHECK(s == doctest::Approx(0.38393).epsilon(2e-3));
}

TEST_CASE("sek degenerate cases") {
    ScdConfusion empty(2);
    empty.q(0, 0) = 100;  // change-only confusion is all zero
    CHECK(sek(empty) == 0.0);

    // Perfectly predicted changes: rho = 1 and SeK = exp(IoU_c - 1).
    ScdConfusion perfect(2);
    perfect.q(0, 0) = 50;
    perfect.q(1, 1) = 10;
    perfect.q(2, 2) = 10;
    const double iou_c = miou(perfect).iou_c;
    CHECK(iou_c == 1.0);
    CHECK(sek(perfect) == doctest::Approx(std::exp(iou_c - 1.0)).epsilon(1e-12));
}

TEST_CASE("f_scd on the hand fixture") {
    const FscdMetrics f = f_scd(fixture_q());
    CHECK(f.precision == doctest::Approx(11.0 / 15.0).epsilon(1e-12));
    CHECK(f.recall == doctest::Approx(11.0 / 14.0).epsilon(1e-12));
    CHECK(f.f_scd == doctest::Approx(0.75862).epsilon(1e-4));

    ScdConfusion diag(2);
    diag.q(1, 1) = 3;
    diag.q(2, 2) = 4;
    const FscdMetrics fd = f_scd(diag);
    CHECK(fd.precision == 1.0);
    CHECK(fd.recall == 1.0);
    CHECK(fd.f_scd == 1.0);

    ScdConfusion zero_diag(2);
    zero_diag.q(1, 2) = 3;
    zero_diag.q(2, 1) = 4;
    const FscdMetrics fz = f_scd(zero_diag);
    CHECK(fz.precision == 0.0);
    CHECK(fz.recall == 0.0);
    CHECK(fz.f_scd == 0.0);
}

TEST_CASE("scale invariance of ratio metrics") {
    const ScdConfusion q = fixture_q();
    ScdConfusion scaled(2);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) scaled.q(i, j) = 7 * q.q(i, j);
    CHECK(miou(scaled).miou == doctest::Approx(miou(q).miou).epsilon(1e-12));
    CHECK(sek(scaled) == doctest::Approx(sek(q)).epsilon(1e-12));
    CHECK(f_scd(scaled).f_scd == doctest::Approx(f_scd(q).f_scd).epsilon(1e-12));
}

TEST_CASE("metric bounds over random confusions") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> count(0, 20);
    for (int trial = 0; trial < 200; ++trial) {
        ScdConfusion q(3);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) q.q(i, j) = count(rng);
        const MiouMetrics m = miou(q);
        CHECK(m.iou_nc >= 0.0);
        CHECK(m.iou_nc <= 1.0);
        CHECK(m.iou_c >= 0.0);
        CHECK(m.iou_c <= 1.0);
        const double s = sek(q);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
        const double bound = std::exp(m.iou_c - 1.0);
        CHECK(s >= -bound - 1e-12);
        CHECK(s <= bound + 1e-12);
        const FscdMetrics f = f_scd(q);
        CHECK(f.f_scd >= 0.0);
        CHECK(f.f_scd <= 1.0);
    }
}

TEST_CASE("adding correct change pixels never decreases iou_c") {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> count(0, 12);
    std::uniform_int_distribution<int> cls(1, 3);
    for (int trial = 0; trial < 100; ++trial) {
        ScdConfusion q(3);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) q.q(i, j) = count(rng);
        const double before = miou(q).iou_c;
        const int c = cls(rng);
        q.q(c, c) += 5;
        CHECK(miou(q).iou_c >= before - 1e-12);
    }
}

TEST_CASE("binary metric equivalence against brute force") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const BinaryMask pred = random_mask(8, rng);
        const BinaryMask gt = random_mask(8, rng);
        const BinaryCounts c = binary_counts(pred, gt);
        // brute force
        std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                if (pred.at(y, x) && gt.at(y, x)) ++tp;
                if (pred.at(y, x) && !gt.at(y, x)) ++fp;
                if (!pred.at(y, x) && gt.at(y, x)) ++fn;
                if (!pred.at(y, x) && !gt.at(y, x)) ++tn;
            }
        CHECK(c.tp == tp);
        CHECK(c.fp == fp);
        CHECK(c.fn == fn);
        CHECK(c.tn == tn);
    }
}

TEST_CASE("report json keys and table formatting") {
    BinaryCounts counts{3, 1, 1, 11};
    ScdConfusion q(1);
    q.q(0, 0) = 11;
    q.q(0, 1) = 1;
    q.q(1, 0) = 1;
    q.q(1, 1) = 3;
    const MetricReport r = make_report(counts, q, false);
    const std::string json = r.to_json();
    for (const char* key : {"\"P\":", "\"R\":", "\"F1\":", "\"IoU\":", "\"mIoU\":", "\"SeK\":", "\"F_scd\":",
                            "\"IoU_nc\":", "\"IoU_c\":"})
        CHECK(json.find(key) != std::string::npos);
    const std::string table = r.to_table();
    CHECK(table.find("0.60000") != std::string::npos);  // IoU = 3/5 at 5 decimals
}
