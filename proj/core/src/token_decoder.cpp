#include "tokencd/token_decoder.hpp"

#include <stdexcept>

namespace tokencd {

TokenDecoder::TokenDecoder(DecoderConfig cfg, nn::ParamStore& store, std::mt19937_64& rng) : cfg_(cfg) {
    for (int l = 0; l < 4; ++l) {
        const std::string p = "decoder.layer" + std::to_string(l);
        Layer layer{nn::LayerNorm::create(store, p + ".ln_self", cfg_.d_dec),
                    nn::LayerNorm::create(store, p + ".ln_query", cfg_.d_dec),
                    nn::LayerNorm::create(store, p + ".ln_ffn", cfg_.d_dec),
                    nn::LayerNorm::create(store, p + ".ln_visual", cfg_.d_dec),
                    nn::MultiheadAttention::create(store, p + ".self_attn", cfg_.d_dec, cfg_.heads, rng),
                    nn::MultiheadAttention::create(store, p + ".query_to_visual", cfg_.d_dec, cfg_.heads, rng),
                    nn::MultiheadAttention::create(store, p + ".visual_to_query", cfg_.d_dec, cfg_.heads, rng),
                    nn::Mlp::create(store, p + ".ffn", cfg_.d_dec, cfg_.d_dec * cfg_.ffn_mult, cfg_.d_dec, rng)};
        layers_[static_cast<std::size_t>(l)] = std::move(layer);
    }
    query_pe_ = store.make("decoder.query_pe", nn::uniform_init({3, cfg_.d_dec}, -0.05, 0.05, rng));
    temporal_pe_ = store.make("decoder.temporal_pe", nn::uniform_init({2, cfg_.d_dec}, -0.05, 0.05, rng));
    fuse_t1_ = nn::Linear::create(store, "decoder.fuse_t1", 4 * cfg_.d_dec, cfg_.d_dec, rng);
    fuse_t2_ = nn::Linear::create(store, "decoder.fuse_t2", 4 * cfg_.d_dec, cfg_.d_dec, rng);
    fuse_change_ = nn::Linear::create(store, "decoder.fuse_change", 4 * cfg_.d_dec, cfg_.d_dec, rng);
    change_proj_ = nn::Linear::create(store, "decoder.change_proj", cfg_.d_dec, cfg_.d_dec, rng);
    bank_mlp_ = nn::Mlp::create(store, "decoder.bank_mlp", cfg_.d_dec + cfg_.d_lm, cfg_.d_dec, cfg_.d_dec, rng);
    name_proj_ = nn::Linear::create(store, "decoder.name_proj", cfg_.d_lm, cfg_.d_dec, rng, 3.0);
}

ag::Var TokenDecoder::init_queries(const TaskEmbeddings& emb) const {
    if (!emb.t1 || !emb.t2 || !emb.change) throw std::invalid_argument("init_queries: missing task embeddings");
    return ag::stack_rows({emb.t1, emb.t2, emb.change});
}

ag::Var TokenDecoder::flatten_concat(const ag::Var& f1, const ag::Var& f2) {
    if (!f1->value.same_shape(f2->value)) throw std::invalid_argument("flatten_concat: shape mismatch");
    const int h = f1->value.dim(0), w = f1->value.dim(1), d = f1->value.dim(2);
    return ag::concat_rows({ag::reshape(f1, {h * w, d}), ag::reshape(f2, {h * w, d})});
}

std::pair<ag::Var, ag::Var> TokenDecoder::split_reshape(const ag::Var& seq, int h, int w) {
    const int n = seq->value.dim(0), d = seq->value.dim(1);
    if (n % 2 != 0) throw std::invalid_argument("split_reshape: odd token count");
    if (n != 2 * h * w) throw std::invalid_argument("split_reshape: token count does not match grid");
    ag::Var f1 = ag::reshape(ag::slice_rows(seq, 0, h * w), {h, w, d});
    ag::Var f2 = ag::reshape(ag::slice_rows(seq, h * w, n), {h, w, d});
    return {f1, f2};
}

ag::Var TokenDecoder::visual_pe(int h, int w) const {
    const int d = cfg_.d_dec;
    const Tensor sin_pe = nn::sinusoidal_pe_2d(h, w, d);
    ag::Var half = ag::constant(sin_pe);
    ag::Var ones = ag::constant(Tensor::full({h * w, 1}, 1.0));
    ag::Var t1 = ag::add(half, ag::matmul(ones, ag::reshape(ag::row(temporal_pe_, 0), {1, d})));
    ag::Var t2 = ag::add(half, ag::matmul(ones, ag::reshape(ag::row(temporal_pe_, 1), {1, d})));
    return ag::concat_rows({t1, t2});
}

std::pair<ag::Var, ag::Var> TokenDecoder::decoder_layer(int level, const ag::Var& e_prev, const ag::Var& t_seq, int h,
                                                        int w) const {
    if (e_prev->value.ndim() != 2 || e_prev->value.dim(0) != 3 || e_prev->value.dim(1) != cfg_.d_dec)
        throw std::invalid_argument("decoder_layer: query must be 3 x d_dec");
    const Layer& L = layers_[static_cast<std::size_t>(level)];
    ag::Var vpe = visual_pe(h, w);
    ag::Var tokens_pe = ag::add(t_seq, vpe);

    // Query self-attention.
    ag::Var xs = L.ln_self(e_prev);
    ag::Var xs_pe = ag::add(xs, query_pe_);
    ag::Var e = ag::add(e_prev, L.self_attn(xs_pe, xs_pe, xs));

    // Query attends to the visual sequence.
    ag::Var xq = L.ln_query(e);
    e = ag::add(e, L.query_to_visual(ag::add(xq, query_pe_), tokens_pe, t_seq));

    // Feedforward.
    e = ag::add(e, L.ffn(L.ln_ffn(e)));

    // Visual sequence attends back to the refined query.
    ag::Var xt = L.ln_visual(t_seq);
    ag::Var t_hat = ag::add(t_seq, L.visual_to_query(ag::add(xt, vpe), ag::add(e, query_pe_), e));
    return {e, t_hat};
}

TokenDecoder::RefineResult TokenDecoder::refine_all(const FeaturePyramid& p1, const FeaturePyramid& p2,
                                                    const ag::Var& e0) const {
    for (int i = 0; i < 4; ++i)
        if (!p1.levels[static_cast<std::size_t>(i)] || !p2.levels[static_cast<std::size_t>(i)])
            throw std::invalid_argument("refine_all: expected 4 pyramid levels per side");
    RefineResult out;
    ag::Var e = e0;
    for (int i = 0; i < 4; ++i) {
        const ag::Var& f1 = p1.levels[static_cast<std::size_t>(i)];
        const ag::Var& f2 = p2.levels[static_cast<std::size_t>(i)];
        const int h = f1->value.dim(0), w = f1->value.dim(1);
        ag::Var seq = flatten_concat(f1, f2);
        auto [e_next, t_hat] = decoder_layer(i, e, seq, h, w);
        e = e_next;
        auto [r1, r2] = split_reshape(t_hat, h, w);
        out.refined_t1[static_cast<std::size_t>(i)] = r1;
        out.refined_t2[static_cast<std::size_t>(i)] = r2;
    }
    out.e4 = e;
    return out;
}

FusedStreamsVars TokenDecoder::fuse_streams(const std::array<ag::Var, 4>& f1, const std::array<ag::Var, 4>& f2) const {
    for (int i = 0; i < 4; ++i)
        if (!f1[static_cast<std::size_t>(i)] || !f2[static_cast<std::size_t>(i)])
            throw std::invalid_argument("fuse_streams: expected 4 levels per side");
    const ag::Var& finest = f1[3];
    const int oh = finest->value.dim(0), ow = finest->value.dim(1), d = cfg_.d_dec;
    auto gather = [&](auto&& level_map) {
        std::vector<ag::Var> cols;
        cols.reserve(4);
        for (int i = 0; i < 4; ++i) {
            ag::Var up = ag::upsample_bilinear(level_map(i), oh, ow);
            cols.push_back(ag::reshape(up, {oh * ow, d}));
        }
        return ag::concat_cols(cols);
    };
    FusedStreamsVars out;
    out.t1 = ag::reshape(fuse_t1_(gather([&](int i) { return f1[static_cast<std::size_t>(i)]; })), {oh, ow, d});
    out.t2 = ag::reshape(fuse_t2_(gather([&](int i) { return f2[static_cast<std::size_t>(i)]; })), {oh, ow, d});
    out.change = ag::reshape(
        fuse_change_(gather([&](int i) { return ag::sub(f1[static_cast<std::size_t>(i)], f2[static_cast<std::size_t>(i)]); })),
        {oh, ow, d});
    return out;
}

ProjectedTaskEmbeddings TokenDecoder::split_project(const ag::Var& e4,
                                                    const std::vector<ag::Var>& class_name_embs) const {
    if (class_name_embs.empty()) throw std::invalid_argument("split_project: need at least one class embedding");
    const int c = static_cast<int>(class_name_embs.size());
    ProjectedTaskEmbeddings out;
    out.change = ag::reshape(change_proj_(ag::reshape(ag::row(e4, 2), {1, cfg_.d_dec})), {cfg_.d_dec});
    ag::Var names = ag::stack_rows(class_name_embs);  // C x d_lm
    ag::Var ones = ag::constant(Tensor::full({c, 1}, 1.0));
    // The direct name path keeps class rows separable from step one; the MLP
    // mixes in the refined query.
    ag::Var name_direct = name_proj_(names);
    auto bank_for = [&](int row_index) {
        ag::Var row_mat = ag::matmul(ones, ag::reshape(ag::row(e4, row_index), {1, cfg_.d_dec}));
        return ag::add(bank_mlp_(ag::concat_cols({row_mat, names})), name_direct);
    };
    out.t1_bank = bank_for(0);
    out.t2_bank = bank_for(1);
    return out;
}

MaskBundleVars TokenDecoder::generate_masks(const FusedStreamsVars& streams, const ProjectedTaskEmbeddings& proj,
                                            int out_h, int out_w, TaskKind task) const {
    const int h = streams.change->value.dim(0), w = streams.change->value.dim(1), d = cfg_.d_dec;
    MaskBundleVars bundle;
    ag::Var change_cells = ag::matmul(ag::reshape(streams.change, {h * w, d}), ag::reshape(proj.change, {d, 1}));
    ag::Var change_up = ag::upsample_bilinear(ag::reshape(change_cells, {h, w, 1}), out_h, out_w);
    bundle.change_logits = ag::reshape(change_up, {out_h, out_w});
    if (task == TaskKind::Scd) {
        const int c = proj.t1_bank->value.dim(0);
        auto head = [&](const ag::Var& stream, const ag::Var& bank) {
            ag::Var cells = ag::matmul_nt(ag::reshape(stream, {h * w, d}), bank);  // (hw) x C
            return ag::upsample_bilinear(ag::reshape(cells, {h, w, c}), out_h, out_w);
        };
        bundle.t1_logits = head(streams.t1, proj.t1_bank);
        bundle.t2_logits = head(streams.t2, proj.t2_bank);
    }
    return bundle;
}

}  // namespace tokencd
