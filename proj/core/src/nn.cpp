#include "tokencd/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tokencd::nn {

Var ParamStore::make(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Var v = ag::leaf(std::move(init), name, true);
    params_.push_back(v);
    by_name_.emplace(name, v);
    return v;
}

Var ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

Tensor uniform_init(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

Tensor glorot_init(std::vector<int> shape, int fan_in, int fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    return uniform_init(std::move(shape), -bound, bound, rng);
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng,
                      double init_scale) {
    Linear l;
    Tensor w = glorot_init({out, in}, in, out, rng);
    if (init_scale != 1.0)
        for (std::int64_t i = 0; i < w.size(); ++i) w[i] *= init_scale;
    l.w = store.make(name + ".w", std::move(w));
    l.b = store.make(name + ".b", Tensor({out}));
    return l;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, int width) {
    LayerNorm ln;
    ln.gain = store.make(name + ".g", Tensor::full({width}, 1.0));
    ln.bias = store.make(name + ".b", Tensor({width}));
    return ln;
}

Mlp Mlp::create(ParamStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng) {
    Mlp m;
    m.fc1 = Linear::create(store, name + ".fc1", in, hidden, rng);
    m.fc2 = Linear::create(store, name + ".fc2", hidden, out, rng);
    return m;
}

MultiheadAttention MultiheadAttention::create(ParamStore& store, const std::string& name, int width, int heads,
                                              std::mt19937_64& rng) {
    if (width % heads != 0) throw std::invalid_argument("attention width must divide by head count");
    MultiheadAttention a;
    a.heads = heads;
    a.wq = Linear::create(store, name + ".q", width, width, rng);
    a.wk = Linear::create(store, name + ".k", width, width, rng);
    a.wv = Linear::create(store, name + ".v", width, width, rng);
    a.wo = Linear::create(store, name + ".o", width, width, rng);
    return a;
}

Var MultiheadAttention::operator()(const Var& q_in, const Var& k_in, const Var& v_in,
                                   const Tensor* additive_mask) const {
    const int d = q_in->value.dim(1);
    const int dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = wq(q_in), k = wk(k_in), v = wv(v_in);
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = ag::slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = ag::slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = ag::slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = ag::scale(ag::matmul_nt(qh, kh), att_scale);
        if (additive_mask) scores = ag::add(scores, ag::constant(*additive_mask));
        Var probs = ag::softmax_rows(scores);
        head_outs.push_back(ag::matmul(probs, vh));
    }
    return wo(ag::concat_cols(head_outs));
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int cin, int cout, int k, int stride, int pad,
                      std::mt19937_64& rng) {
    Conv2d c;
    c.stride = stride;
    c.pad = pad;
    const int fan_in = cin * k * k;
    c.w = store.make(name + ".w", glorot_init({cout, k, k, cin}, fan_in, cout * k * k, rng));
    c.b = store.make(name + ".b", Tensor({cout}));
    return c;
}

ConvTranspose2x2 ConvTranspose2x2::create(ParamStore& store, const std::string& name, int cin, int cout,
                                          std::mt19937_64& rng) {
    ConvTranspose2x2 c;
    c.w = store.make(name + ".w", glorot_init({cin, 2, 2, cout}, cin * 4, cout * 4, rng));
    c.b = store.make(name + ".b", Tensor({cout}));
    return c;
}

Embedding Embedding::create(ParamStore& store, const std::string& name, int n, int d, std::mt19937_64& rng) {
    Embedding e;
    e.table = store.make(name, uniform_init({n, d}, -0.05, 0.05, rng));
    return e;
}

Tensor sinusoidal_pe_2d(int h, int w, int d) {
    if (d % 4 != 0) throw std::invalid_argument("sinusoidal_pe_2d: width must divide by 4");
    Tensor pe({h * w, d});
    const int quarter = d / 4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double* p = pe.data() + (static_cast<std::int64_t>(y) * w + x) * d;
            for (int i = 0; i < quarter; ++i) {
                const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
                p[2 * i] = std::sin(y * freq);
                p[2 * i + 1] = std::cos(y * freq);
                p[d / 2 + 2 * i] = std::sin(x * freq);
                p[d / 2 + 2 * i + 1] = std::cos(x * freq);
            }
        }
    return pe;
}

void AdamW::step(const std::vector<Var>& params) {
    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& p : params) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& theta = params[i]->value;
        const Tensor& g = params[i]->grad;
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        const bool has_grad = !g.empty();
        for (std::int64_t j = 0; j < theta.size(); ++j) {
            const double gj = has_grad ? g[j] : 0.0;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            theta[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * theta[j]);
        }
    }
}

}  // namespace tokencd::nn
