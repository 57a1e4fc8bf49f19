#pragma once

#include <array>
#include <random>
#include <utility>
#include <vector>

#include "tokencd/instruction_codec.hpp"
#include "tokencd/losses.hpp"
#include "tokencd/vision_encoder.hpp"

namespace tokencd {

struct DecoderConfig {
    int d_dec = 64;
    int d_lm = 64;
    int heads = 4;
    int ffn_mult = 4;
};

// Class-conditioned projections of the refined query. `change` is a d_dec
// vector; the banks hold one row per class (background row 0 included).
struct ProjectedTaskEmbeddings {
    ag::Var change;
    ag::Var t1_bank, t2_bank;  // C x d_dec
};

// Cross-attention decoder refining the (t1, t2, change) task queries against
// the dual-temporal visual sequence across the four pyramid levels, then
// fusing refined features into stride-4 streams and emitting mask logits.
class TokenDecoder {
public:
    TokenDecoder(DecoderConfig cfg, nn::ParamStore& store, std::mt19937_64& rng);

    const DecoderConfig& config() const { return cfg_; }

    // Rows ordered (t1, t2, change).
    ag::Var init_queries(const TaskEmbeddings& emb) const;

    // Row-major flatten of both temporal maps; temporal-1 tokens first.
    static ag::Var flatten_concat(const ag::Var& f1, const ag::Var& f2);

    // Exact inverse of flatten_concat for an h x w grid per temporal half.
    static std::pair<ag::Var, ag::Var> split_reshape(const ag::Var& seq, int h, int w);

    // One refinement level: query self-attention, query->visual cross
    // attention, feedforward, then the visual->query update. Returns the
    // refined query and the refined visual sequence.
    std::pair<ag::Var, ag::Var> decoder_layer(int level, const ag::Var& e_prev, const ag::Var& t_seq, int h,
                                              int w) const;

    struct RefineResult {
        ag::Var e4;                                   // 3 x d_dec
        std::array<ag::Var, 4> refined_t1, refined_t2;  // H_i x W_i x d_dec
    };

    // Processes levels coarsest to finest, threading the query through.
    RefineResult refine_all(const FeaturePyramid& p1, const FeaturePyramid& p2, const ag::Var& e0) const;

    // Upsample every level to stride 4, concatenate channels, fuse with a
    // per-stream 1x1 convolution. The change stream fuses the elementwise
    // temporal difference.
    FusedStreamsVars fuse_streams(const std::array<ag::Var, 4>& f1, const std::array<ag::Var, 4>& f2) const;

    // class_name_embs holds one d_lm vector per class including background.
    ProjectedTaskEmbeddings split_project(const ag::Var& e4, const std::vector<ag::Var>& class_name_embs) const;

    // Einstein-summation mask heads, bilinearly upsampled to (out_h, out_w).
    // Semantic logits are produced only for SCD queries.
    MaskBundleVars generate_masks(const FusedStreamsVars& streams, const ProjectedTaskEmbeddings& proj, int out_h,
                                  int out_w, TaskKind task) const;

private:
    DecoderConfig cfg_;
    struct Layer {
        nn::LayerNorm ln_self, ln_query, ln_ffn, ln_visual;
        nn::MultiheadAttention self_attn, query_to_visual, visual_to_query;
        nn::Mlp ffn;
    };
    std::array<Layer, 4> layers_;
    ag::Var query_pe_;     // learned 3 x d_dec role encodings
    ag::Var temporal_pe_;  // learned 2 x d_dec temporal-half encodings
    nn::Linear fuse_t1_, fuse_t2_, fuse_change_;  // 1x1 fusers: 4*d_dec -> d_dec
    nn::Linear change_proj_;
    nn::Mlp bank_mlp_;       // (d_dec + d_lm) -> d_dec, shared across t1/t2
    nn::Linear name_proj_;   // direct d_lm -> d_dec path added to each bank row

    // Visual-sequence positional encoding: fixed 2-D sinusoid per cell plus
    // the learned temporal-half embedding; shape (2hw) x d_dec.
    ag::Var visual_pe(int h, int w) const;
};

}  // namespace tokencd
