#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tokencd/tensor.hpp"

namespace tokencd::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// Reverse-mode tape node. Ops compute values eagerly and capture a backprop
// closure that scatters the node's gradient into its parents.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad();
    void zero_grad() { grad = Tensor(); }
};

Var leaf(Tensor value, std::string name = "", bool requires_grad = true);
Var constant(Tensor value);

// Backpropagate from a scalar (single-element) root.
void backward(const Var& root);
void zero_grads(const std::vector<Var>& params);

// ---- elementwise ----
Var add(const Var& a, const Var& b);   // same shape, or b scalar
Var sub(const Var& a, const Var& b);   // same shape, or b scalar
Var mul(const Var& a, const Var& b);   // same shape, or b scalar
Var div(const Var& a, const Var& b);   // same shape, or b scalar
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);
Var neg(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);

// ---- linear algebra (2-D) ----
Var matmul(const Var& a, const Var& b);     // (m x k) . (k x n)
Var matmul_nt(const Var& a, const Var& b);  // (m x k) . (n x k)^T -> m x n
Var linear(const Var& x, const Var& w, const Var& b);  // x: n x in, w: out x in, b: out

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var slice_rows(const Var& a, int r0, int r1);
Var slice_cols(const Var& a, int c0, int c1);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var stack_rows(const std::vector<Var>& rows);  // 1-D vars -> matrix
Var row(const Var& a, int r);                  // 2-D -> 1-D
Var gather_rows(const Var& table, const std::vector<int>& idx);

// ---- reductions / normalization ----
Var sum(const Var& a);
Var mean(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- fused losses ----
Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels);
Var bce_with_logits(const Var& logits, const Tensor& target);

// ---- image ops (H x W x C) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);  // w: Cout x Kh x Kw x Cin
Var conv_transpose2x2(const Var& x, const Var& w, const Var& b);            // w: Cin x 2 x 2 x Cout, stride 2
Var maxpool2x2(const Var& x);
Var upsample_bilinear(const Var& x, int out_h, int out_w);
Var cosine_map(const Var& a, const Var& b);  // pair of H x W x C -> H x W, zero norm -> 0

// Additive mask helper for causal attention (0 on allowed, -1e30 on masked).
Tensor causal_mask(int n);

}  // namespace tokencd::ag
