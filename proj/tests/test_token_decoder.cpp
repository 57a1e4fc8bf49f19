#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "tokencd/token_decoder.hpp"

using namespace tokencd;
using gradcheck::random_tensor;

namespace {

struct DecoderFixture {
    nn::ParamStore store;
    std::mt19937_64 rng{4242};
    DecoderConfig cfg;
    TokenDecoder decoder;

    DecoderFixture() : cfg{16, 16, 4, 2}, decoder(cfg, store, rng) {}

    TaskEmbeddings embeddings() {
        TaskEmbeddings e;
        e.t1 = ag::leaf(random_tensor({cfg.d_dec}, rng), "e_t1");
        e.t2 = ag::leaf(random_tensor({cfg.d_dec}, rng), "e_t2");
        e.change = ag::leaf(random_tensor({cfg.d_dec}, rng), "e_change");
        e.t1_present = e.t2_present = e.change_present = true;
        return e;
    }

    // Pyramid levels for a 32x32 input: (1,1), (2,2), (4,4), (8,8).
    FeaturePyramid pyramid(std::uint64_t salt) {
        std::mt19937_64 r(salt);
        FeaturePyramid p;
        int side = 1;
        for (int i = 0; i < 4; ++i, side *= 2)
            p.levels[static_cast<std::size_t>(i)] =
                ag::leaf(random_tensor({side, side, cfg.d_dec}, r), "level" + std::to_string(i));
        return p;
    }

    void zero_attention_and_ffn() {
        for (const auto& p : store.params()) {
            const std::string& n = p->name;
            if (n.find("attn") != std::string::npos || n.find("ffn") != std::string::npos ||
                n.find("query_to_visual") != std::string::npos || n.find("visual_to_query") != std::string::npos)
                p->value.fill(0.0);
        }
    }
};

}  // namespace

TEST_CASE("init_queries preserves row order") {
    DecoderFixture f;
    const TaskEmbeddings e = f.embeddings();
    const ag::Var e0 = f.decoder.init_queries(e);
    CHECK(e0->value.shape() == std::vector<int>{3, f.cfg.d_dec});
    for (int j = 0; j < f.cfg.d_dec; ++j) {
        CHECK(e0->value.at({0, j}) == e.t1->value[j]);
        CHECK(e0->value.at({1, j}) == e.t2->value[j]);
        CHECK(e0->value.at({2, j}) == e.change->value[j]);
    }

    TaskEmbeddings zero;
    zero.t1 = ag::constant(Tensor({f.cfg.d_dec}));
    zero.t2 = ag::constant(Tensor({f.cfg.d_dec}));
    zero.change = ag::constant(Tensor({f.cfg.d_dec}));
    const ag::Var z0 = f.decoder.init_queries(zero);
    for (std::int64_t i = 0; i < z0->value.size(); ++i) CHECK(z0->value[i] == 0.0);
}

TEST_CASE("flatten_concat layout and round trip") {
    DecoderFixture f;
    std::mt19937_64 rng(5);
    auto f1 = ag::leaf(random_tensor({4, 4, 6}, rng), "f1");
    auto f2 = ag::leaf(random_tensor({4, 4, 6}, rng), "f2");
    const ag::Var seq = TokenDecoder::flatten_concat(f1, f2);
    CHECK(seq->value.shape() == std::vector<int>{32, 6});
    for (int c = 0; c < 6; ++c) CHECK(seq->value.at({0, c}) == f1->value.at({0, 0, c}));

    const auto [r1, r2] = TokenDecoder::split_reshape(seq, 4, 4);
    for (std::int64_t i = 0; i < f1->value.size(); ++i) {
        CHECK(r1->value[i] == f1->value[i]);
        CHECK(r2->value[i] == f2->value[i]);
    }

    // First-half token k maps to cell (k / w, k % w).
    const int k = 6;
    for (int c = 0; c < 6; ++c) CHECK(seq->value.at({k, c}) == f1->value.at({k / 4, k % 4, c}));

    auto odd = ag::constant(Tensor({5, 6}));
    CHECK_THROWS(TokenDecoder::split_reshape(odd, 1, 2));
    auto mismatch = ag::leaf(random_tensor({4, 2, 6}, rng), "bad");
    CHECK_THROWS(TokenDecoder::flatten_concat(f1, mismatch));
}

TEST_CASE("decoder layer shapes and zero-weight residual identity") {
    DecoderFixture f;
    std::mt19937_64 rng(7);
    auto e0 = ag::leaf(random_tensor({3, f.cfg.d_dec}, rng), "e0");
    auto t = ag::leaf(random_tensor({2 * 4 * 4, f.cfg.d_dec}, rng), "t");
    {
        const auto [e1, t1] = f.decoder.decoder_layer(2, e0, t, 4, 4);
        CHECK(e1->value.shape() == std::vector<int>{3, f.cfg.d_dec});
        CHECK(t1->value.shape() == t->value.shape());
    }

    f.zero_attention_and_ffn();
    const auto [e1, t1] = f.decoder.decoder_layer(2, e0, t, 4, 4);
    // Pre-norm residuals: zeroed sublayers leave both streams untouched.
    for (std::int64_t i = 0; i < e0->value.size(); ++i) CHECK(e1->value[i] == e0->value[i]);
    for (std::int64_t i = 0; i < t->value.size(); ++i) CHECK(t1->value[i] == t->value[i]);
}

TEST_CASE("decoder layer gradient matches finite differences") {
    DecoderFixture f;
    std::mt19937_64 rng(9);
    auto e0 = ag::leaf(random_tensor({3, f.cfg.d_dec}, rng), "e0");
    auto t = ag::leaf(random_tensor({2 * 2 * 2, f.cfg.d_dec}, rng), "t");
    auto readout = [&] {
        const auto [e1, t1] = f.decoder.decoder_layer(1, e0, t, 2, 2);
        return ag::sum(e1);
    };
    CHECK(gradcheck::max_rel_error(readout, e0, 1e-5) < 1e-4);
    CHECK(gradcheck::max_rel_error(readout, t, 1e-5, 32) < 1e-4);
    CHECK(gradcheck::max_rel_error(readout, f.store.find("decoder.layer1.query_to_visual.q.w"), 1e-5, 32) < 1e-4);
}

TEST_CASE("refine_all threads the query through all levels") {
    DecoderFixture f;
    const FeaturePyramid p1 = f.pyramid(100), p2 = f.pyramid(200);
    auto e0 = ag::leaf(random_tensor({3, f.cfg.d_dec}, f.rng), "e0");
    const auto result = f.decoder.refine_all(p1, p2, e0);
    CHECK(result.e4->value.shape() == std::vector<int>{3, f.cfg.d_dec});
    for (int i = 0; i < 4; ++i) {
        CHECK(result.refined_t1[static_cast<std::size_t>(i)]->value.shape() ==
              p1.levels[static_cast<std::size_t>(i)]->value.shape());
    }

    // Information flows from the coarsest level into E4.
    FeaturePyramid p1b = p1;
    Tensor bumped = p1.levels[0]->value;
    bumped[0] += 0.5;
    p1b.levels[0] = ag::constant(bumped);
    const auto result_b = f.decoder.refine_all(p1b, p2, e0);
    double delta = 0.0;
    for (std::int64_t i = 0; i < result.e4->value.size(); ++i)
        delta += std::abs(result.e4->value[i] - result_b.e4->value[i]);
    CHECK(delta > 1e-9);

    FeaturePyramid missing = p1;
    missing.levels[2] = nullptr;
    CHECK_THROWS(f.decoder.refine_all(missing, p2, e0));
}

TEST_CASE("fuse_streams shapes, bias-only nullity and antisymmetry") {
    DecoderFixture f;
    std::array<ag::Var, 4> f1, f2;
    std::mt19937_64 rng(11);
    int side = 1;
    for (int i = 0; i < 4; ++i, side *= 2) {
        f1[static_cast<std::size_t>(i)] = ag::leaf(random_tensor({side, side, f.cfg.d_dec}, rng), "a");
        f2[static_cast<std::size_t>(i)] = ag::leaf(random_tensor({side, side, f.cfg.d_dec}, rng), "b");
    }
    const FusedStreamsVars streams = f.decoder.fuse_streams(f1, f2);
    CHECK(streams.t1->value.shape() == std::vector<int>{8, 8, f.cfg.d_dec});
    CHECK(streams.t2->value.shape() == std::vector<int>{8, 8, f.cfg.d_dec});
    CHECK(streams.change->value.shape() == std::vector<int>{8, 8, f.cfg.d_dec});

    // Identical temporal features: the change stream reduces to the fuse bias.
    const FusedStreamsVars same = f.decoder.fuse_streams(f1, f1);
    const Tensor& bias = f.store.find("decoder.fuse_change.b")->value;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int d = 0; d < f.cfg.d_dec; ++d)
                CHECK(same.change->value.at({y, x, d}) == doctest::Approx(bias[d]).epsilon(1e-12));

    // With the fuse bias zeroed the change stream is linear in the temporal
    // difference, so swapping inputs negates it.
    f.store.find("decoder.fuse_change.b")->value.fill(0.0);
    const FusedStreamsVars fwd = f.decoder.fuse_streams(f1, f2);
    const FusedStreamsVars rev = f.decoder.fuse_streams(f2, f1);
    for (std::int64_t i = 0; i < fwd.change->value.size(); ++i)
        CHECK(fwd.change->value[i] == doctest::Approx(-rev.change->value[i]).epsilon(1e-9));
}

TEST_CASE("split_project class banks") {
    DecoderFixture f;
    auto e4 = ag::leaf(random_tensor({3, f.cfg.d_dec}, f.rng), "e4");
    auto name_a = ag::leaf(random_tensor({f.cfg.d_lm}, f.rng), "na");
    auto name_b = ag::leaf(random_tensor({f.cfg.d_lm}, f.rng), "nb");

    const ProjectedTaskEmbeddings one = f.decoder.split_project(e4, {name_a});
    CHECK(one.t1_bank->value.shape() == std::vector<int>{1, f.cfg.d_dec});
    CHECK(one.change->value.shape() == std::vector<int>{f.cfg.d_dec});

    // Identical class names produce identical bank rows.
    const ProjectedTaskEmbeddings dup = f.decoder.split_project(e4, {name_a, name_a, name_b});
    for (int d = 0; d < f.cfg.d_dec; ++d) {
        CHECK(dup.t1_bank->value.at({0, d}) == dup.t1_bank->value.at({1, d}));
        CHECK(dup.t2_bank->value.at({0, d}) == dup.t2_bank->value.at({1, d}));
    }

    // Perturbing one class's name embedding touches only that row.
    Tensor nb2 = name_b->value;
    nb2[0] += 0.25;
    const ProjectedTaskEmbeddings moved = f.decoder.split_project(e4, {name_a, name_a, ag::constant(nb2)});
    for (int d = 0; d < f.cfg.d_dec; ++d) {
        CHECK(moved.t1_bank->value.at({0, d}) == dup.t1_bank->value.at({0, d}));
        CHECK(moved.t1_bank->value.at({1, d}) == dup.t1_bank->value.at({1, d}));
    }
    double delta = 0.0;
    for (int d = 0; d < f.cfg.d_dec; ++d) delta += std::abs(moved.t1_bank->value.at({2, d}) - dup.t1_bank->value.at({2, d}));
    CHECK(delta > 1e-9);

    CHECK_THROWS(f.decoder.split_project(e4, {}));
}

TEST_CASE("generate_masks einsum heads") {
    DecoderFixture f;
    std::mt19937_64 rng(13);
    FusedStreamsVars streams;
    streams.t1 = ag::leaf(random_tensor({4, 4, f.cfg.d_dec}, rng), "s1");
    streams.t2 = ag::leaf(random_tensor({4, 4, f.cfg.d_dec}, rng), "s2");
    streams.change = ag::leaf(random_tensor({4, 4, f.cfg.d_dec}, rng), "sc");

    ProjectedTaskEmbeddings proj;
    Tensor onehot({f.cfg.d_dec});
    const int k = 5;
    onehot[k] = 1.0;
    proj.change = ag::constant(onehot);
    proj.t1_bank = ag::leaf(random_tensor({3, f.cfg.d_dec}, rng), "b1");
    proj.t2_bank = ag::leaf(random_tensor({3, f.cfg.d_dec}, rng), "b2");

    // Same output size as the stream grid: the upsample is the identity, so
    // a one-hot change embedding reads out channel k exactly.
    const MaskBundleVars bundle = f.decoder.generate_masks(streams, proj, 4, 4, TaskKind::Scd);
    CHECK(bundle.change_logits->value.shape() == std::vector<int>{4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(bundle.change_logits->value.at({y, x}) ==
                  doctest::Approx(streams.change->value.at({y, x, k})).epsilon(1e-12));
    CHECK(bundle.t1_logits->value.shape() == std::vector<int>{4, 4, 3});
    CHECK(bundle.t2_logits->value.shape() == std::vector<int>{4, 4, 3});

    // Upsampled output dimensions follow the requested size.
    const MaskBundleVars up = f.decoder.generate_masks(streams, proj, 16, 16, TaskKind::Scd);
    CHECK(up.change_logits->value.shape() == std::vector<int>{16, 16});
    CHECK(up.t1_logits->value.shape() == std::vector<int>{16, 16, 3});

    // BCD emits the change head only.
    const MaskBundleVars bcd = f.decoder.generate_masks(streams, proj, 16, 16, TaskKind::Bcd);
    CHECK(!bcd.t1_logits);
    CHECK(!bcd.t2_logits);

    // Zero streams give zero logits.
    FusedStreamsVars zero;
    zero.t1 = zero.t2 = zero.change = ag::constant(Tensor({4, 4, f.cfg.d_dec}));
    const MaskBundleVars zb = f.decoder.generate_masks(zero, proj, 8, 8, TaskKind::Scd);
    for (std::int64_t i = 0; i < zb.change_logits->value.size(); ++i) CHECK(zb.change_logits->value[i] == 0.0);
}

TEST_CASE("full decoder pass gradients against finite differences") {
    DecoderFixture f;
    TaskEmbeddings emb = f.embeddings();
    const FeaturePyramid p1 = f.pyramid(300), p2 = f.pyramid(400);
    auto name_a = ag::leaf(random_tensor({f.cfg.d_lm}, f.rng), "na");
    auto name_b = ag::leaf(random_tensor({f.cfg.d_lm}, f.rng), "nb");

    auto readout = [&] {
        const ag::Var e0 = f.decoder.init_queries(emb);
        const auto refined = f.decoder.refine_all(p1, p2, e0);
        const FusedStreamsVars streams = f.decoder.fuse_streams(refined.refined_t1, refined.refined_t2);
        const ProjectedTaskEmbeddings proj = f.decoder.split_project(refined.e4, {name_a, name_b});
        const MaskBundleVars bundle = f.decoder.generate_masks(streams, proj, 32, 32, TaskKind::Bcd);
        return ag::mean(bundle.change_logits);
    };
    CHECK(gradcheck::max_rel_error(readout, emb.change, 1e-5) < 1e-4);
    CHECK(gradcheck::max_rel_error(readout, f.store.find("decoder.fuse_change.w"), 1e-5, 32) < 1e-4);
    CHECK(gradcheck::max_rel_error(readout, f.store.find("decoder.temporal_pe"), 1e-5, 16) < 1e-4);
}
