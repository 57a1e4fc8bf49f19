#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokencd/data_model.hpp"

namespace tokencd {

struct BinaryCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }
    BinaryCounts& operator+=(const BinaryCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct BcdMetrics {
    double precision = 0.0, recall = 0.0, f1 = 0.0, iou = 0.0;
};

// Confusion over N+1 classes (class 0 = unchanged); q(i, j) counts pixels
// predicted as class i whose ground truth is class j. Both temporal maps
// accumulate into the same matrix.
class ScdConfusion {
public:
    ScdConfusion() = default;
    explicit ScdConfusion(int change_classes)
        : n_(change_classes), q_(static_cast<std::size_t>((change_classes + 1)) * (change_classes + 1), 0) {}

    int change_classes() const { return n_; }
    int side() const { return n_ + 1; }
    std::int64_t& q(int i, int j) { return q_[static_cast<std::size_t>(i) * side() + j]; }
    std::int64_t q(int i, int j) const { return q_[static_cast<std::size_t>(i) * side() + j]; }
    std::int64_t total() const;
    ScdConfusion& operator+=(const ScdConfusion& o);

private:
    int n_ = 0;
    std::vector<std::int64_t> q_;
};

struct MiouMetrics {
    double iou_nc = 0.0, iou_c = 0.0, miou = 0.0;
};

struct FscdMetrics {
    double precision = 0.0, recall = 0.0, f_scd = 0.0;
};

BinaryCounts binary_counts(const BinaryMask& pred, const BinaryMask& gt);

// 0/0 denominators yield 0, except the all-agree empty case (tp=fp=fn=0)
// which scores 1 on all four metrics.
BcdMetrics bcd_metrics(const BinaryCounts& c);

ScdConfusion scd_confusion(const LabelMap& pred_t1, const LabelMap& pred_t2, const LabelMap& gt_t1,
                           const LabelMap& gt_t2, int change_classes);

MiouMetrics miou(const ScdConfusion& q);

// Separation kappa over the change-only confusion (q00 forced to zero),
// scaled by exp(IoU_c - 1). Degenerate cases: empty change confusion -> 0;
// eta == 1 -> kappa is 1 when rho == 1, else 0.
double sek(const ScdConfusion& q);

FscdMetrics f_scd(const ScdConfusion& q);

// Full report with the JSON key set used by eval/metrics tooling.
struct MetricReport {
    double p = 0.0, r = 0.0, f1 = 0.0, iou = 0.0;
    double miou = 0.0, sek = 0.0, f_scd = 0.0, iou_nc = 0.0, iou_c = 0.0;

    std::string to_json() const;
    std::string to_table() const;  // 5-decimal fixed formatting
};

MetricReport make_report(const BinaryCounts& counts, const ScdConfusion& confusion, bool scd_task);

}  // namespace tokencd
