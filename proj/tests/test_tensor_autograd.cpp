#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "tokencd/autograd.hpp"
#include "tokencd/nn.hpp"

using namespace tokencd;
using gradcheck::max_rel_error;
using gradcheck::random_tensor;

namespace {
constexpr double kTol = 1e-6;
}

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    t.at({1, 2, 3}) = 5.0;
    CHECK(t.at({1, 2, 3}) == 5.0);
    CHECK(t.all_finite());
    CHECK_THROWS(t.at({2, 0, 0}));
}

TEST_CASE("elementwise op gradients") {
    std::mt19937_64 rng(3);
    auto a = ag::leaf(random_tensor({3, 4}, rng), "a");
    auto b = ag::leaf(random_tensor({3, 4}, rng, 0.5, 2.0), "b");
    auto s = ag::leaf(random_tensor({1}, rng, 0.5, 1.5), "s");

    CHECK(max_rel_error([&] { return ag::mean(ag::mul(ag::add(a, b), ag::sub(a, b))); }, a) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::div(a, b)); }, b) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::mul(a, s)); }, s) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::gelu(a)); }, a) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::sigmoid(a)); }, a) < kTol);
    CHECK(max_rel_error([&] { return ag::sum(ag::relu(a)); }, a) < 1e-4);
}

TEST_CASE("matmul and linear gradients") {
    std::mt19937_64 rng(5);
    auto a = ag::leaf(random_tensor({3, 5}, rng), "a");
    auto b = ag::leaf(random_tensor({5, 2}, rng), "b");
    auto c = ag::leaf(random_tensor({4, 5}, rng), "c");
    auto w = ag::leaf(random_tensor({2, 5}, rng), "w");
    auto bias = ag::leaf(random_tensor({2}, rng), "bias");

    CHECK(max_rel_error([&] { return ag::mean(ag::matmul(a, b)); }, a) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::matmul(a, b)); }, b) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::matmul_nt(a, c)); }, c) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::linear(a, w, bias)); }, w) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::linear(a, w, bias)); }, bias) < kTol);
}

TEST_CASE("softmax, layer norm, cross entropy gradients") {
    std::mt19937_64 rng(7);
    auto x = ag::leaf(random_tensor({4, 6}, rng), "x");
    auto g = ag::leaf(random_tensor({6}, rng, 0.5, 1.5), "g");
    auto b = ag::leaf(random_tensor({6}, rng), "b");
    std::vector<int> labels{1, 0, 5, 2};

    auto weights = ag::constant(random_tensor({4, 6}, rng));
    CHECK(max_rel_error([&] { return ag::mean(ag::mul(ag::softmax_rows(x), weights)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::layer_norm_rows(x, g, b)); }, x) < 1e-5);
    CHECK(max_rel_error([&] { return ag::mean(ag::layer_norm_rows(x, g, b)); }, g) < kTol);
    CHECK(max_rel_error([&] { return ag::cross_entropy_rows(x, labels); }, x) < kTol);

    Tensor target = random_tensor({4, 6}, rng, 0.0, 1.0);
    for (std::int64_t i = 0; i < target.size(); ++i) target[i] = target[i] > 0.5 ? 1.0 : 0.0;
    CHECK(max_rel_error([&] { return ag::bce_with_logits(x, target); }, x) < kTol);
}

TEST_CASE("shape op gradients") {
    std::mt19937_64 rng(11);
    auto x = ag::leaf(random_tensor({6, 4}, rng), "x");
    auto v1 = ag::leaf(random_tensor({4}, rng), "v1");
    auto v2 = ag::leaf(random_tensor({4}, rng), "v2");

    CHECK(max_rel_error([&] { return ag::mean(ag::slice_rows(x, 1, 4)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::slice_cols(x, 1, 3)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::concat_rows({x, x})); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::concat_cols({x, x})); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::stack_rows({v1, v2, v1})); }, v1) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::row(x, 2)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::gather_rows(x, {0, 2, 2, 5})); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::reshape(x, {4, 6})); }, x) < kTol);
}

TEST_CASE("image op gradients") {
    std::mt19937_64 rng(13);
    auto x = ag::leaf(random_tensor({6, 6, 3}, rng), "x");
    auto w = ag::leaf(random_tensor({4, 3, 3, 3}, rng, -0.4, 0.4), "w");
    auto b = ag::leaf(random_tensor({4}, rng), "b");
    auto wt = ag::leaf(random_tensor({3, 2, 2, 4}, rng, -0.4, 0.4), "wt");
    auto bt = ag::leaf(random_tensor({4}, rng), "bt");

    CHECK(max_rel_error([&] { return ag::mean(ag::conv2d(x, w, b, 2, 1)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::conv2d(x, w, b, 2, 1)); }, w) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::conv2d(x, w, b, 1, 1)); }, b) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::conv_transpose2x2(x, wt, bt)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::conv_transpose2x2(x, wt, bt)); }, wt) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::upsample_bilinear(x, 12, 12)); }, x) < kTol);
    CHECK(max_rel_error([&] { return ag::mean(ag::maxpool2x2(x)); }, x) < 1e-4);

    auto y = ag::leaf(random_tensor({6, 6, 3}, rng), "y");
    CHECK(max_rel_error([&] { return ag::mean(ag::cosine_map(x, y)); }, x) < 1e-4);
    CHECK(max_rel_error([&] { return ag::mean(ag::cosine_map(x, y)); }, y) < 1e-4);
}

TEST_CASE("cosine map zero-norm convention") {
    auto a = ag::constant(Tensor({2, 2, 3}));
    std::mt19937_64 rng(17);
    auto b = ag::constant(random_tensor({2, 2, 3}, rng));
    auto s = ag::cosine_map(a, b);
    for (std::int64_t i = 0; i < s->value.size(); ++i) CHECK(s->value[i] == 0.0);
}

TEST_CASE("upsample identity at scale one") {
    std::mt19937_64 rng(19);
    auto x = ag::leaf(random_tensor({5, 7, 2}, rng), "x");
    auto y = ag::upsample_bilinear(x, 5, 7);
    for (std::int64_t i = 0; i < x->value.size(); ++i) CHECK(y->value[i] == doctest::Approx(x->value[i]).epsilon(1e-12));
}

TEST_CASE("multihead attention gradient") {
    std::mt19937_64 rng(23);
    nn::ParamStore store;
    auto attn = nn::MultiheadAttention::create(store, "attn", 8, 2, rng);
    auto q = ag::leaf(random_tensor({3, 8}, rng), "q");
    auto kv = ag::leaf(random_tensor({5, 8}, rng), "kv");
    CHECK(max_rel_error([&] { return ag::mean(attn(q, kv, kv)); }, q) < 1e-5);
    CHECK(max_rel_error([&] { return ag::mean(attn(q, kv, kv)); }, kv) < 1e-5);
    CHECK(max_rel_error([&] { return ag::mean(attn(q, kv, kv)); }, attn.wo.w) < 1e-5);
}

TEST_CASE("adamw zero-grad parameters stay put without weight decay") {
    nn::ParamStore store;
    std::mt19937_64 rng(29);
    auto p = store.make("p", random_tensor({3}, rng));
    const Tensor before = p->value;
    nn::AdamW opt;
    opt.lr = 0.1;
    opt.step(store.params());
    for (std::int64_t i = 0; i < before.size(); ++i) CHECK(p->value[i] == before[i]);
}
