#pragma once

#include "tokencd/autograd.hpp"
#include "tokencd/data_model.hpp"

namespace tokencd {

// Mask-loss weighting; defaults follow the training recipe.
struct LossWeights {
    double bce = 2.0;
    double dice = 0.5;
    double ss = 0.5;
    double sc = 1.0;
};

struct LossReport {
    double total = 0.0;
    double txt = 0.0;
    double bce = 0.0;
    double dice = 0.0;
    double ss = 0.0;
    double sc = 0.0;
    bool gated = false;
};

// Graph-side logits (H x W and H x W x C layouts) predicted for one sample.
struct MaskBundleVars {
    ag::Var change_logits;          // H x W
    ag::Var t1_logits, t2_logits;   // H x W x C, null for BCD queries
};

// Stride-4 fused feature maps (H/4 x W/4 x d).
struct FusedStreamsVars {
    ag::Var t1, t2, change;
};

// Mean binary cross-entropy on sigmoid(logits), log-sum-exp stable form.
ag::Var bce_loss(const ag::Var& change_logits, const BinaryMask& gt);

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) with p = sigmoid(logits).
ag::Var dice_loss(const ag::Var& change_logits, const BinaryMask& gt, double eps = 1.0);

// Mean multi-class cross-entropy averaged over both temporal maps.
ag::Var ss_loss(const ag::Var& t1_logits, const ag::Var& t2_logits, const LabelMap& sem_t1, const LabelMap& sem_t2);

// Cosine-embedding constraint on the stride-4 streams: unchanged cells pay
// (1 - cos), changed cells pay max(0, cos). Ground truth is nearest-neighbor
// downsampled to the feature resolution.
ag::Var sc_loss(const ag::Var& f_t1, const ag::Var& f_t2, const BinaryMask& gt_change);

// Weighted mask loss. For BCD batches the semantic terms are never built, so
// parameters feeding only those terms receive exactly zero gradient.
struct MaskLoss {
    ag::Var weighted;  // scalar graph node
    double bce = 0.0, dice = 0.0, ss = 0.0, sc = 0.0;
    bool gated = false;
};

MaskLoss mask_loss(const MaskBundleVars& bundle, const GroundTruth& gt, const FusedStreamsVars& streams,
                   const LossWeights& w, bool is_scd);

struct LossGraph {
    ag::Var total;  // scalar graph node
    LossReport report;
};

LossGraph total_loss(const ag::Var& txt, const MaskLoss& mask, const LossWeights& w);

// Nearest-neighbor mask downsample used by sc_loss (exposed for tests).
BinaryMask downsample_mask_nearest(const BinaryMask& m, int out_h, int out_w);

}  // namespace tokencd
