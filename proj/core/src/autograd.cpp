#include "tokencd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace tokencd::ag {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

void check_2d(const Var& a, const char* who) {
    if (a->value.ndim() != 2) throw std::invalid_argument(std::string(who) + ": expected 2-D tensor");
}

void check_3d(const Var& a, const char* who) {
    if (a->value.ndim() != 3) throw std::invalid_argument(std::string(who) + ": expected 3-D tensor");
}

// b may be a single-element tensor broadcast against a.
bool broadcast_ok(const Tensor& a, const Tensor& b) { return a.same_shape(b) || b.size() == 1; }

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.empty() && value.size() > 0) grad = Tensor(value.shape());
    return grad;
}

Var leaf(Tensor value, std::string name, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    n->name = std::move(name);
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), "", false); }

void backward(const Var& root) {
    if (root->value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;
    // Iterative post-order DFS; reverse gives a valid topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf && n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

void zero_grads(const std::vector<Var>& params) {
    for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    if (!broadcast_ok(a->value, b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a->value;
    const bool bs = b->value.size() == 1;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bs ? b->value[0] : b->value[i];
    return make_node(std::move(out), {a, b}, [a, b, bs](Node& n) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            if (bs) {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[0] += n.grad[i];
            } else {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i];
            }
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!broadcast_ok(a->value, b->value)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a->value;
    const bool bs = b->value.size() == 1;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bs ? b->value[0] : b->value[i];
    return make_node(std::move(out), {a, b}, [a, b, bs](Node& n) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            if (bs) {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[0] -= n.grad[i];
            } else {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[i] -= n.grad[i];
            }
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!broadcast_ok(a->value, b->value)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a->value;
    const bool bs = b->value.size() == 1;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bs ? b->value[0] : b->value[i];
    return make_node(std::move(out), {a, b}, [a, b, bs](Node& n) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * (bs ? b->value[0] : b->value[i]);
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            if (bs) {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[0] += n.grad[i] * a->value[i];
            } else {
                for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i] * a->value[i];
            }
        }
    });
}

Var div(const Var& a, const Var& b) {
    if (!broadcast_ok(a->value, b->value)) throw std::invalid_argument("div: shape mismatch");
    Tensor out = a->value;
    const bool bs = b->value.size() == 1;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] /= bs ? b->value[0] : b->value[i];
    return make_node(std::move(out), {a, b}, [a, b, bs](Node& n) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] / (bs ? b->value[0] : b->value[i]);
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) {
                const double bv = bs ? b->value[0] : b->value[i];
                const double g = -n.grad[i] * a->value[i] / (bv * bv);
                gb[bs ? 0 : i] += g;
            }
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * s;
    });
}

Var add_const(const Var& a, double c) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += c;
    return make_node(std::move(out), {a}, [a](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make_node(std::move(out), {a}, [a](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.size(); ++i)
            if (a->value[i] > 0.0) ga[i] += n.grad[i];
    });
}

Var gelu(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) {
            const double x = a->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [a, self](Node& nd) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < nd.grad.size(); ++i) {
                const double s = self->value[i];
                ga[i] += nd.grad[i] * s * (1.0 - s);
            }
        };
    }
    return n;
}

// ---------------------------------------------------------------------------
// raw matmul kernels
// ---------------------------------------------------------------------------

namespace {

// C(m x n) += A(m x k) . B(k x n)
void mm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::int64_t>(i) * k;
        double* c = C + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = a[p];
            if (av == 0.0) continue;
            const double* b = B + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m x n) += A(m x k) . B(n x k)^T
void mm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::int64_t>(i) * k;
        double* c = C + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* b = B + static_cast<std::int64_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C(k x n) += A(m x k)^T . B(m x n)
void mm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<std::int64_t>(i) * k;
        const double* b = B + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = a[p];
            if (av == 0.0) continue;
            double* c = C + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    if (b->value.dim(0) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor out({m, n});
    mm_nn_acc(a->value.data(), b->value.data(), out.data(), m, k, n);
    return make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->requires_grad) mm_nt_acc(nd.grad.data(), b->value.data(), a->ensure_grad().data(), m, n, k);
        if (b->requires_grad) mm_tn_acc(a->value.data(), nd.grad.data(), b->ensure_grad().data(), m, k, n);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(0);
    if (b->value.dim(1) != k) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Tensor out({m, n});
    mm_nt_acc(a->value.data(), b->value.data(), out.data(), m, k, n);
    return make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->requires_grad) mm_nn_acc(nd.grad.data(), b->value.data(), a->ensure_grad().data(), m, n, k);
        if (b->requires_grad) mm_tn_acc(nd.grad.data(), a->value.data(), b->ensure_grad().data(), m, n, k);
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    check_2d(x, "linear");
    check_2d(w, "linear");
    const int n = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
    if (w->value.dim(1) != in) throw std::invalid_argument("linear: weight/input width mismatch");
    if (b->value.size() != out_dim) throw std::invalid_argument("linear: bias width mismatch");
    Tensor out({n, out_dim});
    mm_nt_acc(x->value.data(), w->value.data(), out.data(), n, in, out_dim);
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < out_dim; ++o) out[static_cast<std::int64_t>(i) * out_dim + o] += b->value[o];
    return make_node(std::move(out), {x, w, b}, [x, w, b, n, in, out_dim](Node& nd) {
        if (x->requires_grad) mm_nn_acc(nd.grad.data(), w->value.data(), x->ensure_grad().data(), n, out_dim, in);
        if (w->requires_grad) mm_tn_acc(nd.grad.data(), x->value.data(), w->ensure_grad().data(), n, out_dim, in);
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int o = 0; o < out_dim; ++o) gb[o] += nd.grad[static_cast<std::int64_t>(i) * out_dim + o];
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& a, std::vector<int> shape) {
    if (shape_size(shape) != a->value.size()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(std::move(shape), a->value.raw());
    return make_node(std::move(out), {a}, [a](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

Var slice_rows(const Var& a, int r0, int r1) {
    check_2d(a, "slice_rows");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    if (r0 < 0 || r1 > rows || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Tensor out({r1 - r0, cols});
    std::copy(a->value.data() + static_cast<std::int64_t>(r0) * cols, a->value.data() + static_cast<std::int64_t>(r1) * cols,
              out.data());
    return make_node(std::move(out), {a}, [a, r0, cols](Node& n) {
        auto& ga = a->ensure_grad();
        const std::int64_t off = static_cast<std::int64_t>(r0) * cols;
        for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[off + i] += n.grad[i];
    });
}

Var slice_cols(const Var& a, int c0, int c1) {
    check_2d(a, "slice_cols");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out({rows, w});
    for (int i = 0; i < rows; ++i)
        std::copy(a->value.data() + static_cast<std::int64_t>(i) * cols + c0,
                  a->value.data() + static_cast<std::int64_t>(i) * cols + c1, out.data() + static_cast<std::int64_t>(i) * w);
    return make_node(std::move(out), {a}, [a, c0, cols, w, rows](Node& n) {
        auto& ga = a->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
                ga[static_cast<std::int64_t>(i) * cols + c0 + j] += n.grad[static_cast<std::int64_t>(i) * w + j];
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int cols = parts[0]->value.dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p->value.dim(1) != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p->value.dim(0);
    }
    Tensor out({rows, cols});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.size(), out.data() + off);
        off += p->value.size();
    }
    return make_node(std::move(out), {parts.begin(), parts.end()}, [parts](Node& n) {
        std::int64_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                auto& gp = p->ensure_grad();
                for (std::int64_t i = 0; i < p->value.size(); ++i) gp[i] += n.grad[off + i];
            }
            off += p->value.size();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int rows = parts[0]->value.dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p->value.dim(0) != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p->value.dim(1);
    }
    Tensor out({rows, cols});
    int coff = 0;
    for (const auto& p : parts) {
        const int w = p->value.dim(1);
        for (int i = 0; i < rows; ++i)
            std::copy(p->value.data() + static_cast<std::int64_t>(i) * w, p->value.data() + static_cast<std::int64_t>(i + 1) * w,
                      out.data() + static_cast<std::int64_t>(i) * cols + coff);
        coff += w;
    }
    return make_node(std::move(out), {parts.begin(), parts.end()}, [parts, rows, cols](Node& n) {
        int coff = 0;
        for (const auto& p : parts) {
            const int w = p->value.dim(1);
            if (p->requires_grad) {
                auto& gp = p->ensure_grad();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < w; ++j)
                        gp[static_cast<std::int64_t>(i) * w + j] += n.grad[static_cast<std::int64_t>(i) * cols + coff + j];
            }
            coff += w;
        }
    });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    const std::int64_t d = rows[0]->value.size();
    for (const auto& r : rows)
        if (r->value.ndim() != 1 || r->value.size() != d) throw std::invalid_argument("stack_rows: expects equal 1-D vars");
    Tensor out({static_cast<int>(rows.size()), static_cast<int>(d)});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i]->value.data(), rows[i]->value.data() + d, out.data() + static_cast<std::int64_t>(i) * d);
    return make_node(std::move(out), {rows.begin(), rows.end()}, [rows, d](Node& n) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!rows[i]->requires_grad) continue;
            auto& gr = rows[i]->ensure_grad();
            for (std::int64_t j = 0; j < d; ++j) gr[j] += n.grad[static_cast<std::int64_t>(i) * d + j];
        }
    });
}

Var row(const Var& a, int r) {
    check_2d(a, "row");
    const int cols = a->value.dim(1);
    if (r < 0 || r >= a->value.dim(0)) throw std::invalid_argument("row: index out of range");
    Tensor out({cols});
    std::copy(a->value.data() + static_cast<std::int64_t>(r) * cols, a->value.data() + static_cast<std::int64_t>(r + 1) * cols,
              out.data());
    return make_node(std::move(out), {a}, [a, r, cols](Node& n) {
        auto& ga = a->ensure_grad();
        for (int j = 0; j < cols; ++j) ga[static_cast<std::int64_t>(r) * cols + j] += n.grad[j];
    });
}

Var gather_rows(const Var& table, const std::vector<int>& idx) {
    check_2d(table, "gather_rows");
    const int cols = table->value.dim(1);
    for (int i : idx)
        if (i < 0 || i >= table->value.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
    Tensor out({static_cast<int>(idx.size()), cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(table->value.data() + static_cast<std::int64_t>(idx[r]) * cols,
                  table->value.data() + static_cast<std::int64_t>(idx[r] + 1) * cols,
                  out.data() + static_cast<std::int64_t>(r) * cols);
    return make_node(std::move(out), {table}, [table, idx, cols](Node& n) {
        auto& gt = table->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < cols; ++j)
                gt[static_cast<std::int64_t>(idx[r]) * cols + j] += n.grad[static_cast<std::int64_t>(r) * cols + j];
    });
}

// ---------------------------------------------------------------------------
// reductions / normalization
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    return make_node(Tensor::scalar(s), {a}, [a](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[0];
    });
}

Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->value.size());
    double s = 0.0;
    for (std::int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    return make_node(Tensor::scalar(s * inv), {a}, [a, inv](Node& n) {
        auto& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[0] * inv;
    });
}

Var softmax_rows(const Var& a) {
    check_2d(a, "softmax_rows");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        const double* x = a->value.data() + static_cast<std::int64_t>(i) * cols;
        double* y = out.data() + static_cast<std::int64_t>(i) * cols;
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int j = 0; j < cols; ++j) y[j] /= z;
    }
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [a, self, rows, cols](Node& nd) {
            auto& ga = a->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                const double* s = self->value.data() + static_cast<std::int64_t>(i) * cols;
                const double* g = nd.grad.data() + static_cast<std::int64_t>(i) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += g[j] * s[j];
                double* out_g = ga.data() + static_cast<std::int64_t>(i) * cols;
                for (int j = 0; j < cols; ++j) out_g[j] += s[j] * (g[j] - dot);
            }
        };
    }
    return n;
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
    check_2d(x, "layer_norm_rows");
    const int rows = x->value.dim(0), cols = x->value.dim(1);
    if (gain->value.size() != cols || bias->value.size() != cols)
        throw std::invalid_argument("layer_norm_rows: affine width mismatch");
    Tensor out({rows, cols});
    Tensor xhat({rows, cols});
    Tensor inv_std({rows});
    for (int i = 0; i < rows; ++i) {
        const double* xr = x->value.data() + static_cast<std::int64_t>(i) * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += xr[j];
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < cols; ++j) {
            const double xh = (xr[j] - mu) * is;
            xhat[static_cast<std::int64_t>(i) * cols + j] = xh;
            out[static_cast<std::int64_t>(i) * cols + j] = xh * gain->value[j] + bias->value[j];
        }
    }
    auto xh_keep = std::make_shared<Tensor>(std::move(xhat));
    auto is_keep = std::make_shared<Tensor>(std::move(inv_std));
    return make_node(std::move(out), {x, gain, bias}, [x, gain, bias, xh_keep, is_keep, rows, cols](Node& nd) {
        const Tensor& xh = *xh_keep;
        if (gain->requires_grad || bias->requires_grad) {
            auto& gg = gain->ensure_grad();
            auto& gb = bias->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    const double g = nd.grad[static_cast<std::int64_t>(i) * cols + j];
                    gg[j] += g * xh[static_cast<std::int64_t>(i) * cols + j];
                    gb[j] += g;
                }
        }
        if (x->requires_grad) {
            auto& gx = x->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int j = 0; j < cols; ++j) {
                    const double dxh = nd.grad[static_cast<std::int64_t>(i) * cols + j] * gain->value[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[static_cast<std::int64_t>(i) * cols + j];
                }
                mean_dxh /= cols;
                mean_dxh_xh /= cols;
                const double is = (*is_keep)[i];
                for (int j = 0; j < cols; ++j) {
                    const double dxh = nd.grad[static_cast<std::int64_t>(i) * cols + j] * gain->value[j];
                    gx[static_cast<std::int64_t>(i) * cols + j] +=
                        is * (dxh - mean_dxh - xh[static_cast<std::int64_t>(i) * cols + j] * mean_dxh_xh);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels) {
    check_2d(logits, "cross_entropy_rows");
    const int rows = logits->value.dim(0), cols = logits->value.dim(1);
    if (static_cast<int>(labels.size()) != rows) throw std::invalid_argument("cross_entropy_rows: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= cols) throw std::invalid_argument("cross_entropy_rows: label out of range");
    Tensor probs({rows, cols});
    double loss = 0.0;
    for (int i = 0; i < rows; ++i) {
        const double* x = logits->value.data() + static_cast<std::int64_t>(i) * cols;
        double* p = probs.data() + static_cast<std::int64_t>(i) * cols;
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        const double logz = std::log(z) + mx;
        for (int j = 0; j < cols; ++j) p[j] /= z;
        loss += logz - x[labels[static_cast<std::size_t>(i)]];
    }
    loss /= rows;
    auto probs_keep = std::make_shared<Tensor>(std::move(probs));
    return make_node(Tensor::scalar(loss), {logits}, [logits, labels, probs_keep, rows, cols](Node& nd) {
        auto& gl = logits->ensure_grad();
        const double g = nd.grad[0] / rows;
        for (int i = 0; i < rows; ++i) {
            const double* p = probs_keep->data() + static_cast<std::int64_t>(i) * cols;
            double* out = gl.data() + static_cast<std::int64_t>(i) * cols;
            for (int j = 0; j < cols; ++j) out[j] += g * p[j];
            out[labels[static_cast<std::size_t>(i)]] -= g;
        }
    });
}

Var bce_with_logits(const Var& logits, const Tensor& target) {
    if (!logits->value.same_shape(target)) throw std::invalid_argument("bce_with_logits: shape mismatch");
    const std::int64_t n = logits->value.size();
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = logits->value[i], t = target[i];
        loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    auto t_keep = std::make_shared<Tensor>(target);
    return make_node(Tensor::scalar(loss), {logits}, [logits, t_keep, n](Node& nd) {
        auto& gl = logits->ensure_grad();
        const double g = nd.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-logits->value[i]));
            gl[i] += g * (s - (*t_keep)[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// image ops (H x W x C)
// ---------------------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check_3d(x, "conv2d");
    if (w->value.ndim() != 4) throw std::invalid_argument("conv2d: weight must be Cout x Kh x Kw x Cin");
    const int h = x->value.dim(0), wd = x->value.dim(1), cin = x->value.dim(2);
    const int cout = w->value.dim(0), kh = w->value.dim(1), kw = w->value.dim(2);
    if (w->value.dim(3) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    if (b->value.size() != cout) throw std::invalid_argument("conv2d: bias width mismatch");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
    Tensor out({oh, ow, cout});
    const double* X = x->value.data();
    const double* W = w->value.data();
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            double* o = out.data() + (static_cast<std::int64_t>(oy) * ow + ox) * cout;
            for (int co = 0; co < cout; ++co) o[co] = b->value[co];
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= wd) continue;
                    const double* xin = X + (static_cast<std::int64_t>(iy) * wd + ix) * cin;
                    for (int co = 0; co < cout; ++co) {
                        const double* wk = W + ((static_cast<std::int64_t>(co) * kh + ky) * kw + kx) * cin;
                        double s = 0.0;
                        for (int ci = 0; ci < cin; ++ci) s += xin[ci] * wk[ci];
                        o[co] += s;
                    }
                }
            }
        }
    return make_node(std::move(out), {x, w, b}, [x, w, b, h, wd, cin, cout, kh, kw, oh, ow, stride, pad](Node& nd) {
        const double* G = nd.grad.data();
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
                for (int co = 0; co < cout; ++co) gb[co] += G[i * cout + co];
        }
        const bool need_x = x->requires_grad, need_w = w->requires_grad;
        if (!need_x && !need_w) return;
        double* GX = need_x ? x->ensure_grad().data() : nullptr;
        double* GW = need_w ? w->ensure_grad().data() : nullptr;
        const double* X = x->value.data();
        const double* W = w->value.data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const double* g = G + (static_cast<std::int64_t>(oy) * ow + ox) * cout;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= wd) continue;
                        const std::int64_t xoff = (static_cast<std::int64_t>(iy) * wd + ix) * cin;
                        for (int co = 0; co < cout; ++co) {
                            const double gv = g[co];
                            if (gv == 0.0) continue;
                            const std::int64_t woff = ((static_cast<std::int64_t>(co) * kh + ky) * kw + kx) * cin;
                            if (need_x)
                                for (int ci = 0; ci < cin; ++ci) GX[xoff + ci] += gv * W[woff + ci];
                            if (need_w)
                                for (int ci = 0; ci < cin; ++ci) GW[woff + ci] += gv * X[xoff + ci];
                        }
                    }
                }
            }
    });
}

Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
    check_3d(x, "conv_transpose2x2");
    if (w->value.ndim() != 4 || w->value.dim(1) != 2 || w->value.dim(2) != 2)
        throw std::invalid_argument("conv_transpose2x2: weight must be Cin x 2 x 2 x Cout");
    const int h = x->value.dim(0), wd = x->value.dim(1), cin = x->value.dim(2);
    const int cout = w->value.dim(3);
    if (w->value.dim(0) != cin) throw std::invalid_argument("conv_transpose2x2: channel mismatch");
    if (b->value.size() != cout) throw std::invalid_argument("conv_transpose2x2: bias width mismatch");
    const int oh = h * 2, ow = wd * 2;
    Tensor out({oh, ow, cout});
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
        for (int co = 0; co < cout; ++co) out[i * cout + co] = b->value[co];
    const double* X = x->value.data();
    const double* W = w->value.data();
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx) {
            const double* xin = X + (static_cast<std::int64_t>(y) * wd + xx) * cin;
            for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                    double* o = out.data() + (static_cast<std::int64_t>(2 * y + ky) * ow + (2 * xx + kx)) * cout;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double xv = xin[ci];
                        if (xv == 0.0) continue;
                        const double* wk = W + ((static_cast<std::int64_t>(ci) * 2 + ky) * 2 + kx) * cout;
                        for (int co = 0; co < cout; ++co) o[co] += xv * wk[co];
                    }
                }
        }
    return make_node(std::move(out), {x, w, b}, [x, w, b, h, wd, cin, cout, ow](Node& nd) {
        const double* G = nd.grad.data();
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * 2 * ow; ++i)
                for (int co = 0; co < cout; ++co) gb[co] += G[i * cout + co];
        }
        const bool need_x = x->requires_grad, need_w = w->requires_grad;
        if (!need_x && !need_w) return;
        double* GX = need_x ? x->ensure_grad().data() : nullptr;
        double* GW = need_w ? w->ensure_grad().data() : nullptr;
        const double* X = x->value.data();
        const double* W = w->value.data();
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) {
                const std::int64_t xoff = (static_cast<std::int64_t>(y) * wd + xx) * cin;
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx) {
                        const double* g = G + (static_cast<std::int64_t>(2 * y + ky) * ow + (2 * xx + kx)) * cout;
                        for (int ci = 0; ci < cin; ++ci) {
                            const std::int64_t woff = ((static_cast<std::int64_t>(ci) * 2 + ky) * 2 + kx) * cout;
                            double gx = 0.0;
                            for (int co = 0; co < cout; ++co) {
                                gx += g[co] * W[woff + co];
                                if (need_w) GW[woff + co] += g[co] * X[xoff + ci];
                            }
                            if (need_x) GX[xoff + ci] += gx;
                        }
                    }
            }
    });
}

Var maxpool2x2(const Var& x) {
    check_3d(x, "maxpool2x2");
    const int h = x->value.dim(0), w = x->value.dim(1), c = x->value.dim(2);
    if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("maxpool2x2: odd spatial dims");
    const int oh = h / 2, ow = w / 2;
    Tensor out({oh, ow, c});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.size()));
    const double* X = x->value.data();
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
            for (int ch = 0; ch < c; ++ch) {
                double best = -1e300;
                std::int64_t best_i = -1;
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx) {
                        const std::int64_t i = (static_cast<std::int64_t>(2 * oy + ky) * w + (2 * ox + kx)) * c + ch;
                        if (X[i] > best) {
                            best = X[i];
                            best_i = i;
                        }
                    }
                const std::int64_t o = (static_cast<std::int64_t>(oy) * ow + ox) * c + ch;
                out[o] = best;
                (*argmax)[static_cast<std::size_t>(o)] = best_i;
            }
    return make_node(std::move(out), {x}, [x, argmax](Node& nd) {
        auto& gx = x->ensure_grad();
        for (std::int64_t i = 0; i < nd.grad.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += nd.grad[i];
    });
}

namespace {

struct BilinearTap {
    int i00, i01, i10, i11;
    double w00, w01, w10, w11;
};

// align_corners = false source coordinate mapping with edge clamping.
std::vector<BilinearTap> bilinear_taps(int in_h, int in_w, int out_h, int out_w) {
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out_h) * out_w);
    const double sy = static_cast<double>(in_h) / out_h;
    const double sx = static_cast<double>(in_w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(in_h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, in_h - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(in_w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, in_w - 1);
            const double wx = fx - x0;
            BilinearTap& t = taps[static_cast<std::size_t>(oy) * out_w + ox];
            t.i00 = y0 * in_w + x0;
            t.i01 = y0 * in_w + x1;
            t.i10 = y1 * in_w + x0;
            t.i11 = y1 * in_w + x1;
            t.w00 = (1 - wy) * (1 - wx);
            t.w01 = (1 - wy) * wx;
            t.w10 = wy * (1 - wx);
            t.w11 = wy * wx;
        }
    }
    return taps;
}

}  // namespace

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    check_3d(x, "upsample_bilinear");
    const int h = x->value.dim(0), w = x->value.dim(1), c = x->value.dim(2);
    auto taps = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(h, w, out_h, out_w));
    Tensor out({out_h, out_w, c});
    const double* X = x->value.data();
    for (std::size_t p = 0; p < taps->size(); ++p) {
        const BilinearTap& t = (*taps)[p];
        double* o = out.data() + static_cast<std::int64_t>(p) * c;
        const double *a = X + static_cast<std::int64_t>(t.i00) * c, *bb = X + static_cast<std::int64_t>(t.i01) * c,
                     *cc = X + static_cast<std::int64_t>(t.i10) * c, *d = X + static_cast<std::int64_t>(t.i11) * c;
        for (int ch = 0; ch < c; ++ch) o[ch] = t.w00 * a[ch] + t.w01 * bb[ch] + t.w10 * cc[ch] + t.w11 * d[ch];
    }
    return make_node(std::move(out), {x}, [x, taps, c](Node& nd) {
        auto& gx = x->ensure_grad();
        for (std::size_t p = 0; p < taps->size(); ++p) {
            const BilinearTap& t = (*taps)[p];
            const double* g = nd.grad.data() + static_cast<std::int64_t>(p) * c;
            for (int ch = 0; ch < c; ++ch) {
                gx[static_cast<std::int64_t>(t.i00) * c + ch] += t.w00 * g[ch];
                gx[static_cast<std::int64_t>(t.i01) * c + ch] += t.w01 * g[ch];
                gx[static_cast<std::int64_t>(t.i10) * c + ch] += t.w10 * g[ch];
                gx[static_cast<std::int64_t>(t.i11) * c + ch] += t.w11 * g[ch];
            }
        }
    });
}

Var cosine_map(const Var& a, const Var& b) {
    check_3d(a, "cosine_map");
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("cosine_map: shape mismatch");
    const int h = a->value.dim(0), w = a->value.dim(1), c = a->value.dim(2);
    // Norm floor: keeps the zero-norm convention (s = 0) while bounding the
    // 1/norm gradient factors for near-degenerate cells.
    constexpr double kNormFloor = 1e-6;
    Tensor out({h, w});
    const std::int64_t cells = static_cast<std::int64_t>(h) * w;
    auto na = std::make_shared<Tensor>(Tensor({h, w}));
    auto nb = std::make_shared<Tensor>(Tensor({h, w}));
    for (std::int64_t p = 0; p < cells; ++p) {
        const double* av = a->value.data() + p * c;
        const double* bv = b->value.data() + p * c;
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            dot += av[ch] * bv[ch];
            sa += av[ch] * av[ch];
            sb += bv[ch] * bv[ch];
        }
        const double n1 = std::max(std::sqrt(sa), kNormFloor), n2 = std::max(std::sqrt(sb), kNormFloor);
        (*na)[p] = n1;
        (*nb)[p] = n2;
        out[p] = dot / (n1 * n2);  // exactly 0 for zero-norm inputs
    }
    auto n = make_node(std::move(out), {a, b}, nullptr);
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [a, b, self, na, nb, cells, c](Node& nd) {
            double* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
            double* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
            for (std::int64_t p = 0; p < cells; ++p) {
                const double g = nd.grad[p];
                if (g == 0.0) continue;
                const double n1 = (*na)[p], n2 = (*nb)[p];
                const double s = self->value[p];
                const double* av = a->value.data() + p * c;
                const double* bv = b->value.data() + p * c;
                const double inv = 1.0 / (n1 * n2);
                for (int ch = 0; ch < c; ++ch) {
                    if (ga) ga[p * c + ch] += g * (bv[ch] * inv - s * av[ch] / (n1 * n1));
                    if (gb) gb[p * c + ch] += g * (av[ch] * inv - s * bv[ch] / (n2 * n2));
                }
            }
        };
    }
    return n;
}

Tensor causal_mask(int n) {
    Tensor m({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m[static_cast<std::int64_t>(i) * n + j] = -1e30;
    return m;
}

}  // namespace tokencd::ag
