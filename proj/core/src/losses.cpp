#include "tokencd/losses.hpp"

#include <stdexcept>

namespace tokencd {

namespace {

Tensor mask_to_tensor(const BinaryMask& m) {
    Tensor t({m.h, m.w});
    for (std::size_t i = 0; i < m.data.size(); ++i) t[static_cast<std::int64_t>(i)] = m.data[i] ? 1.0 : 0.0;
    return t;
}

void check_mask_shape(const ag::Var& logits, const BinaryMask& gt, const char* who) {
    if (logits->value.ndim() != 2 || logits->value.dim(0) != gt.h || logits->value.dim(1) != gt.w)
        throw std::invalid_argument(std::string(who) + ": logits/mask shape mismatch");
}

}  // namespace

ag::Var bce_loss(const ag::Var& change_logits, const BinaryMask& gt) {
    check_mask_shape(change_logits, gt, "bce_loss");
    return ag::bce_with_logits(change_logits, mask_to_tensor(gt));
}

ag::Var dice_loss(const ag::Var& change_logits, const BinaryMask& gt, double eps) {
    check_mask_shape(change_logits, gt, "dice_loss");
    Tensor g = mask_to_tensor(gt);
    double gt_sum = 0.0;
    for (std::int64_t i = 0; i < g.size(); ++i) gt_sum += g[i];
    ag::Var p = ag::sigmoid(change_logits);
    ag::Var inter = ag::sum(ag::mul(p, ag::constant(g)));
    ag::Var num = ag::add_const(ag::scale(inter, 2.0), eps);
    ag::Var den = ag::add_const(ag::sum(p), gt_sum + eps);
    return ag::add_const(ag::neg(ag::div(num, den)), 1.0);
}

ag::Var ss_loss(const ag::Var& t1_logits, const ag::Var& t2_logits, const LabelMap& sem_t1, const LabelMap& sem_t2) {
    if (!t1_logits || !t2_logits) throw std::invalid_argument("ss_loss: missing semantic logits");
    if (t1_logits->value.ndim() != 3 || t2_logits->value.ndim() != 3)
        throw std::invalid_argument("ss_loss: logits must be H x W x C");
    const int h = t1_logits->value.dim(0), w = t1_logits->value.dim(1), c = t1_logits->value.dim(2);
    if (sem_t1.h != h || sem_t1.w != w || sem_t2.h != h || sem_t2.w != w)
        throw std::invalid_argument("ss_loss: label shape mismatch");
    for (const LabelMap* m : {&sem_t1, &sem_t2})
        for (int v : m->data)
            if (v < 0 || v >= c) throw std::invalid_argument("ss_loss: label value out of range");
    ag::Var ce1 = ag::cross_entropy_rows(ag::reshape(t1_logits, {h * w, c}), sem_t1.data);
    ag::Var ce2 = ag::cross_entropy_rows(ag::reshape(t2_logits, {h * w, c}), sem_t2.data);
    return ag::scale(ag::add(ce1, ce2), 0.5);
}

BinaryMask downsample_mask_nearest(const BinaryMask& m, int out_h, int out_w) {
    BinaryMask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        int sy = static_cast<int>((y + 0.5) * m.h / out_h);
        sy = std::min(sy, m.h - 1);
        for (int x = 0; x < out_w; ++x) {
            int sx = static_cast<int>((x + 0.5) * m.w / out_w);
            sx = std::min(sx, m.w - 1);
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

ag::Var sc_loss(const ag::Var& f_t1, const ag::Var& f_t2, const BinaryMask& gt_change) {
    if (!f_t1->value.same_shape(f_t2->value)) throw std::invalid_argument("sc_loss: feature shape mismatch");
    const int h = f_t1->value.dim(0), w = f_t1->value.dim(1);
    const BinaryMask ds = downsample_mask_nearest(gt_change, h, w);
    Tensor changed = mask_to_tensor(ds);
    Tensor unchanged({h, w});
    for (std::int64_t i = 0; i < changed.size(); ++i) unchanged[i] = 1.0 - changed[i];
    ag::Var s = ag::cosine_map(f_t1, f_t2);
    ag::Var keep = ag::mul(ag::sub(ag::constant(Tensor::full({h, w}, 1.0)), s), ag::constant(unchanged));
    ag::Var push = ag::mul(ag::relu(s), ag::constant(changed));
    return ag::mean(ag::add(keep, push));
}

MaskLoss mask_loss(const MaskBundleVars& bundle, const GroundTruth& gt, const FusedStreamsVars& streams,
                   const LossWeights& w, bool is_scd) {
    const bool has_sem = bundle.t1_logits && bundle.t2_logits && gt.is_scd();
    if (is_scd && !has_sem) throw std::invalid_argument("mask_loss: scd flagged but semantic data missing");
    if (!is_scd && (bundle.t1_logits || bundle.t2_logits))
        throw std::invalid_argument("mask_loss: bcd flagged but semantic logits present");
    MaskLoss out;
    ag::Var bce = bce_loss(bundle.change_logits, gt.change_mask);
    ag::Var dice = dice_loss(bundle.change_logits, gt.change_mask);
    out.bce = bce->value[0];
    out.dice = dice->value[0];
    out.weighted = ag::add(ag::scale(bce, w.bce), ag::scale(dice, w.dice));
    if (is_scd) {
        ag::Var ss = ss_loss(bundle.t1_logits, bundle.t2_logits, *gt.sem_t1, *gt.sem_t2);
        ag::Var sc = sc_loss(streams.t1, streams.t2, gt.change_mask);
        out.ss = ss->value[0];
        out.sc = sc->value[0];
        out.weighted = ag::add(out.weighted, ag::add(ag::scale(ss, w.ss), ag::scale(sc, w.sc)));
    } else {
        out.gated = true;  // semantic terms never enter the graph
    }
    return out;
}

LossGraph total_loss(const ag::Var& txt, const MaskLoss& mask, const LossWeights& w) {
    LossGraph g;
    g.total = ag::add(txt, mask.weighted);
    g.report.txt = txt->value[0];
    g.report.bce = mask.bce;
    g.report.dice = mask.dice;
    g.report.ss = mask.ss;
    g.report.sc = mask.sc;
    g.report.gated = mask.gated;
    g.report.total = g.report.txt + w.bce * g.report.bce + w.dice * g.report.dice + w.ss * g.report.ss + w.sc * g.report.sc;
    return g;
}

}  // namespace tokencd
