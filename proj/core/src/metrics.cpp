#include "tokencd/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tokencd {

std::int64_t ScdConfusion::total() const {
    std::int64_t s = 0;
    for (auto v : q_) s += v;
    return s;
}

ScdConfusion& ScdConfusion::operator+=(const ScdConfusion& o) {
    if (o.n_ != n_) throw std::invalid_argument("confusion class count mismatch");
    for (std::size_t i = 0; i < q_.size(); ++i) q_[i] += o.q_[i];
    return *this;
}

BinaryCounts binary_counts(const BinaryMask& pred, const BinaryMask& gt) {
    if (pred.h != gt.h || pred.w != gt.w) throw std::invalid_argument("binary_counts: shape mismatch");
    BinaryCounts c;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

namespace {

double ratio0(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

BcdMetrics bcd_metrics(const BinaryCounts& c) {
    BcdMetrics m;
    if (c.tp == 0 && c.fp == 0 && c.fn == 0) {
        // Prediction and ground truth agree on "no positives anywhere".
        m.precision = m.recall = m.f1 = m.iou = 1.0;
        return m;
    }
    m.precision = ratio0(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
    m.recall = ratio0(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
    m.f1 = ratio0(2.0 * m.precision * m.recall, m.precision + m.recall);
    m.iou = ratio0(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp + c.fn));
    return m;
}

ScdConfusion scd_confusion(const LabelMap& pred_t1, const LabelMap& pred_t2, const LabelMap& gt_t1,
                           const LabelMap& gt_t2, int change_classes) {
    ScdConfusion q(change_classes);
    auto accumulate = [&q, change_classes](const LabelMap& pred, const LabelMap& gt) {
        if (pred.h != gt.h || pred.w != gt.w) throw std::invalid_argument("scd_confusion: shape mismatch");
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            const int pi = pred.data[i], gi = gt.data[i];
            if (pi < 0 || pi > change_classes || gi < 0 || gi > change_classes)
                throw std::invalid_argument("scd_confusion: label out of range");
            ++q.q(pi, gi);
        }
    };
    accumulate(pred_t1, gt_t1);
    accumulate(pred_t2, gt_t2);
    return q;
}

MiouMetrics miou(const ScdConfusion& q) {
    const int side = q.side();
    double row0 = 0.0, col0 = 0.0, total = 0.0, change = 0.0;
    for (int i = 0; i < side; ++i) {
        row0 += static_cast<double>(q.q(0, i));
        col0 += static_cast<double>(q.q(i, 0));
        for (int j = 0; j < side; ++j) {
            total += static_cast<double>(q.q(i, j));
            if (i >= 1 && j >= 1) change += static_cast<double>(q.q(i, j));
        }
    }
    const double q00 = static_cast<double>(q.q(0, 0));
    MiouMetrics m;
    m.iou_nc = ratio0(q00, col0 + row0 - q00);
    m.iou_c = ratio0(change, total - q00);
    m.miou = 0.5 * (m.iou_nc + m.iou_c);
    return m;
}

double sek(const ScdConfusion& q) {
    const int side = q.side();
    double hat_total = 0.0, hat_diag = 0.0;
    std::vector<double> rows(static_cast<std::size_t>(side), 0.0), cols(static_cast<std::size_t>(side), 0.0);
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j) {
            double v = static_cast<double>(q.q(i, j));
            if (i == 0 && j == 0) v = 0.0;
            hat_total += v;
            if (i == j) hat_diag += v;
            rows[static_cast<std::size_t>(i)] += v;
            cols[static_cast<std::size_t>(j)] += v;
        }
    if (hat_total <= 0.0) return 0.0;
    const double rho = hat_diag / hat_total;
    double eta = 0.0;
    for (int i = 0; i < side; ++i) eta += rows[static_cast<std::size_t>(i)] * cols[static_cast<std::size_t>(i)];
    eta /= hat_total * hat_total;
    double kappa;
    if (eta >= 1.0)
        kappa = rho >= 1.0 ? 1.0 : 0.0;
    else
        kappa = (rho - eta) / (1.0 - eta);
    return std::exp(miou(q).iou_c - 1.0) * kappa;
}

FscdMetrics f_scd(const ScdConfusion& q) {
    const int side = q.side();
    double diag = 0.0, pred_change = 0.0, gt_change = 0.0;
    for (int i = 1; i < side; ++i) {
        diag += static_cast<double>(q.q(i, i));
        for (int j = 0; j < side; ++j) {
            pred_change += static_cast<double>(q.q(i, j));
            gt_change += static_cast<double>(q.q(j, i));
        }
    }
    FscdMetrics m;
    m.precision = ratio0(diag, pred_change);
    m.recall = ratio0(diag, gt_change);
    m.f_scd = ratio0(2.0 * m.precision * m.recall, m.precision + m.recall);
    return m;
}

namespace {

std::string fmt5(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(5);
    os << v;
    return os.str();
}

}  // namespace

std::string MetricReport::to_json() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(12);
    os << "{\"P\":" << p << ",\"R\":" << r << ",\"F1\":" << f1 << ",\"IoU\":" << iou << ",\"mIoU\":" << miou
       << ",\"SeK\":" << sek << ",\"F_scd\":" << f_scd << ",\"IoU_nc\":" << iou_nc << ",\"IoU_c\":" << iou_c << "}";
    return os.str();
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    os << "metric     value\n";
    os << "P          " << fmt5(p) << "\n";
    os << "R          " << fmt5(r) << "\n";
    os << "F1         " << fmt5(f1) << "\n";
    os << "IoU        " << fmt5(iou) << "\n";
    os << "mIoU       " << fmt5(miou) << "\n";
    os << "SeK        " << fmt5(sek) << "\n";
    os << "F_scd      " << fmt5(f_scd) << "\n";
    os << "IoU_nc     " << fmt5(iou_nc) << "\n";
    os << "IoU_c      " << fmt5(iou_c) << "\n";
    return os.str();
}

MetricReport make_report(const BinaryCounts& counts, const ScdConfusion& confusion, bool scd_task) {
    MetricReport r;
    const BcdMetrics b = bcd_metrics(counts);
    r.p = b.precision;
    r.r = b.recall;
    r.f1 = b.f1;
    const MiouMetrics m = miou(confusion);
    r.miou = m.miou;
    r.iou_nc = m.iou_nc;
    r.iou_c = m.iou_c;
    r.sek = sek(confusion);
    r.f_scd = f_scd(confusion).f_scd;
    // For SCD the "IoU" column reports the pooled change-region IoU_c.
    r.iou = scd_task ? m.iou_c : b.iou;
    return r;
}

}  // namespace tokencd
