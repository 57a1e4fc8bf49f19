#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "tokencd/autograd.hpp"

namespace tokencd::nn {

using ag::Var;

// Owns every trainable parameter, in registration order. Registration order is
// the checkpoint layout, so module construction order must stay deterministic.
class ParamStore {
public:
    Var make(const std::string& name, Tensor init);
    const std::vector<Var>& params() const { return params_; }
    Var find(const std::string& name) const;

private:
    std::vector<Var> params_;
    std::unordered_map<std::string, Var> by_name_;
};

Tensor uniform_init(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng);
Tensor glorot_init(std::vector<int> shape, int fan_in, int fan_out, std::mt19937_64& rng);

struct Linear {
    Var w;  // out x in
    Var b;  // out
    static Linear create(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng,
                         double init_scale = 1.0);
    Var operator()(const Var& x) const { return ag::linear(x, w, b); }
};

struct LayerNorm {
    Var gain;
    Var bias;
    static LayerNorm create(ParamStore& store, const std::string& name, int width);
    Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gain, bias); }
};

// Two-layer feedforward with GELU.
struct Mlp {
    Linear fc1, fc2;
    static Mlp create(ParamStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng);
    Var operator()(const Var& x) const { return fc2(ag::gelu(fc1(x))); }
};

struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    static MultiheadAttention create(ParamStore& store, const std::string& name, int width, int heads,
                                     std::mt19937_64& rng);
    // q_in: nq x d, k_in/v_in: nk x d. Positional encodings are the caller's
    // job (added to q_in/k_in before the projections). `additive_mask` is an
    // optional nq x nk bias on the attention scores.
    Var operator()(const Var& q_in, const Var& k_in, const Var& v_in, const Tensor* additive_mask = nullptr) const;
};

struct Conv2d {
    Var w;  // Cout x Kh x Kw x Cin
    Var b;
    int stride = 1;
    int pad = 0;
    static Conv2d create(ParamStore& store, const std::string& name, int cin, int cout, int k, int stride, int pad,
                         std::mt19937_64& rng);
    Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct ConvTranspose2x2 {
    Var w;  // Cin x 2 x 2 x Cout
    Var b;
    static ConvTranspose2x2 create(ParamStore& store, const std::string& name, int cin, int cout, std::mt19937_64& rng);
    Var operator()(const Var& x) const { return ag::conv_transpose2x2(x, w, b); }
};

struct Embedding {
    Var table;  // n x d
    static Embedding create(ParamStore& store, const std::string& name, int n, int d, std::mt19937_64& rng);
    Var operator()(const std::vector<int>& idx) const { return ag::gather_rows(table, idx); }
};

// Fixed 2-D sine/cosine positional encoding over an h x w grid, flattened
// row-major to (h*w) x d. First half of the channels encodes y, second half x.
Tensor sinusoidal_pe_2d(int h, int w, int d);

class AdamW {
public:
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void step(const std::vector<Var>& params);

    // Exposed for checkpointing.
    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }
    std::int64_t& step_count() { return t_; }
    const std::vector<Tensor>& moment1_const() const { return m_; }
    const std::vector<Tensor>& moment2_const() const { return v_; }
    std::int64_t step_count_const() const { return t_; }

private:
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace tokencd::nn
