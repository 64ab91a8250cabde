#include "minidub/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace minidub::ad {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace

void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    op_counter().add(2ull * m * k * n);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (int64_t)i * k;
        double* crow = c + (int64_t)i * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + (int64_t)kk * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    op_counter().add(2ull * m * k * n);
    for (int kk = 0; kk < k; ++kk) {
        const double* arow = a + (int64_t)kk * m;
        const double* brow = b + (int64_t)kk * n;
        for (int i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + (int64_t)i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    op_counter().add(2ull * m * k * n);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (int64_t)i * k;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + (int64_t)j * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            c[(int64_t)i * n + j] += acc;
        }
    }
}

bool Graph::any_needs_grad(const std::vector<int>& parents) const {
    if (!record_) return false;
    for (int p : parents)
        if (nodes_[p]->needs_grad) return true;
    return false;
}

Var Graph::make_node(Tensor value, std::vector<int> parents, std::function<void(Graph&, int)> vjp) {
    auto node = std::make_unique<Node>();
    node->value = std::move(value);
    node->needs_grad = any_needs_grad(parents);
    node->parents = std::move(parents);
    if (node->needs_grad) node->vjp = std::move(vjp);
    nodes_.push_back(std::move(node));
    return Var{(int)nodes_.size() - 1};
}

Tensor& Graph::grad_buf(int id) {
    auto& n = *nodes_[id];
    if (!n.grad) n.grad = std::make_unique<Tensor>(n.value.shape);
    return *n.grad;
}

const Tensor& Graph::grad(Var x) const {
    if (!nodes_[x.id]->grad) throw std::logic_error("grad not computed for node");
    return *nodes_[x.id]->grad;
}

void Graph::backward(Var loss) {
    if (nodes_[loss.id]->value.numel() != 1)
        throw std::invalid_argument("backward expects a scalar loss");
    grad_buf(loss.id).v[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        auto& n = *nodes_[id];
        if (n.grad && n.vjp) n.vjp(*this, id);
    }
}

Var Graph::leaf(const Tensor& t, bool needs_grad) {
    Tensor copy = t;
    return leaf(std::move(copy), needs_grad);
}

Var Graph::leaf(Tensor&& t, bool needs_grad) {
    auto node = std::make_unique<Node>();
    node->value = std::move(t);
    node->needs_grad = needs_grad && record_;
    nodes_.push_back(std::move(node));
    return Var{(int)nodes_.size() - 1};
}

Var Graph::add(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "add");
    Tensor y(av.shape);
    op_counter().add(av.numel());
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] + bv.v[i];
    return make_node(std::move(y), {a.id, b.id}, [a, b](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        for (Var p : {a, b}) {
            if (!g.nodes_[p.id]->needs_grad) continue;
            Tensor& dp = g.grad_buf(p.id);
            for (int64_t i = 0; i < dy.numel(); ++i) dp.v[i] += dy.v[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "sub");
    Tensor y(av.shape);
    op_counter().add(av.numel());
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] - bv.v[i];
    return make_node(std::move(y), {a.id, b.id}, [a, b](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[a.id]->needs_grad) {
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.numel(); ++i) da.v[i] += dy.v[i];
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int64_t i = 0; i < dy.numel(); ++i) db.v[i] -= dy.v[i];
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "mul");
    Tensor y(av.shape);
    op_counter().add(av.numel());
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] * bv.v[i];
    return make_node(std::move(y), {a.id, b.id}, [a, b](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& av = g.val(a);
        const Tensor& bv = g.val(b);
        if (g.nodes_[a.id]->needs_grad) {
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.numel(); ++i) da.v[i] += dy.v[i] * bv.v[i];
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int64_t i = 0; i < dy.numel(); ++i) db.v[i] += dy.v[i] * av.v[i];
        }
    });
}

Var Graph::scale(Var a, double s) {
    const Tensor& av = val(a);
    Tensor y(av.shape);
    op_counter().add(av.numel());
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] * s;
    return make_node(std::move(y), {a.id}, [a, s](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& da = g.grad_buf(a.id);
        for (int64_t i = 0; i < dy.numel(); ++i) da.v[i] += dy.v[i] * s;
    });
}

Var Graph::silu(Var a) {
    const Tensor& av = val(a);
    Tensor y(av.shape);
    op_counter().add(av.numel() * 4);
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] * sigmoid(av.v[i]);
    return make_node(std::move(y), {a.id}, [a](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& av = g.val(a);
        Tensor& da = g.grad_buf(a.id);
        for (int64_t i = 0; i < dy.numel(); ++i) {
            double s = sigmoid(av.v[i]);
            da.v[i] += dy.v[i] * s * (1.0 + av.v[i] * (1.0 - s));
        }
    });
}

Var Graph::softplus(Var a) {
    const Tensor& av = val(a);
    Tensor y(av.shape);
    op_counter().add(av.numel() * 3);
    for (int64_t i = 0; i < y.numel(); ++i) {
        double x = av.v[i];
        y.v[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    return make_node(std::move(y), {a.id}, [a](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& av = g.val(a);
        Tensor& da = g.grad_buf(a.id);
        for (int64_t i = 0; i < dy.numel(); ++i) da.v[i] += dy.v[i] * sigmoid(av.v[i]);
    });
}

Var Graph::mul_mask(Var a, const Tensor& mask) {
    const Tensor& av = val(a);
    check_same_shape(av, mask, "mul_mask");
    Tensor y(av.shape);
    op_counter().add(av.numel());
    for (int64_t i = 0; i < y.numel(); ++i) y.v[i] = av.v[i] * mask.v[i];
    return make_node(std::move(y), {a.id}, [a, mask](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& da = g.grad_buf(a.id);
        for (int64_t i = 0; i < dy.numel(); ++i) da.v[i] += dy.v[i] * mask.v[i];
    });
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + shape_str(av.shape) + " x " +
                                    shape_str(bv.shape));
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor y({m, n});
    mm_nn(av.data(), bv.data(), y.data(), m, k, n);
    return make_node(std::move(y), {a.id, b.id}, [a, b, m, k, n](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[a.id]->needs_grad)
            mm_nt(dy.data(), g.val(b).data(), g.grad_buf(a.id).data(), m, n, k);
        if (g.nodes_[b.id]->needs_grad)
            mm_tn(g.val(a).data(), dy.data(), g.grad_buf(b.id).data(), k, m, n);
    });
}

Var Graph::matmul_nt(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
        throw std::invalid_argument("matmul_nt: bad shapes");
    int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor y({m, n});
    mm_nt(av.data(), bv.data(), y.data(), m, k, n);
    return make_node(std::move(y), {a.id, b.id}, [a, b, m, k, n](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[a.id]->needs_grad)
            mm_nn(dy.data(), g.val(b).data(), g.grad_buf(a.id).data(), m, n, k);
        if (g.nodes_[b.id]->needs_grad)
            mm_tn(dy.data(), g.val(a).data(), g.grad_buf(b.id).data(), n, m, k);
    });
}

Var Graph::linear(Var x, Var w, Var b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0) || bv.dim(0) != wv.dim(1))
        throw std::invalid_argument("linear: bad shapes x" + shape_str(xv.shape) + " w" +
                                    shape_str(wv.shape));
    int r = xv.dim(0), ci = xv.dim(1), co = wv.dim(1);
    Tensor y({r, co});
    for (int i = 0; i < r; ++i) std::memcpy(&y.v[(int64_t)i * co], bv.data(), co * sizeof(double));
    mm_nn(xv.data(), wv.data(), y.data(), r, ci, co);
    op_counter().add((uint64_t)r * co);
    return make_node(std::move(y), {x.id, w.id, b.id}, [x, w, b, r, ci, co](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[x.id]->needs_grad)
            mm_nt(dy.data(), g.val(w).data(), g.grad_buf(x.id).data(), r, co, ci);
        if (g.nodes_[w.id]->needs_grad)
            mm_tn(g.val(x).data(), dy.data(), g.grad_buf(w.id).data(), ci, r, co);
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < co; ++j) db.v[j] += dy.at2(i, j);
        }
    });
}

Var Graph::bias_rows(Var x, Var b) {
    const Tensor& xv = val(x);
    const Tensor& bv = val(b);
    if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
        throw std::invalid_argument("bias_rows: bad shapes");
    int r = xv.dim(0), c = xv.dim(1);
    Tensor y(xv.shape);
    op_counter().add(xv.numel());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) y.at2(i, j) = xv.at2(i, j) + bv.v[j];
    return make_node(std::move(y), {x.id, b.id}, [x, b, r, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[x.id]->needs_grad) {
            Tensor& dx = g.grad_buf(x.id);
            for (int64_t i = 0; i < dy.numel(); ++i) dx.v[i] += dy.v[i];
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) db.v[j] += dy.at2(i, j);
        }
    });
}

Var Graph::mul_rows(Var x, Var s) {
    const Tensor& xv = val(x);
    const Tensor& sv = val(s);
    if (xv.rank() != 2 || sv.rank() != 1 || sv.dim(0) != xv.dim(1))
        throw std::invalid_argument("mul_rows: bad shapes");
    int r = xv.dim(0), c = xv.dim(1);
    Tensor y(xv.shape);
    op_counter().add(xv.numel());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) y.at2(i, j) = xv.at2(i, j) * sv.v[j];
    return make_node(std::move(y), {x.id, s.id}, [x, s, r, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& xv = g.val(x);
        const Tensor& sv = g.val(s);
        if (g.nodes_[x.id]->needs_grad) {
            Tensor& dx = g.grad_buf(x.id);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) dx.at2(i, j) += dy.at2(i, j) * sv.v[j];
        }
        if (g.nodes_[s.id]->needs_grad) {
            Tensor& ds = g.grad_buf(s.id);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ds.v[j] += dy.at2(i, j) * xv.at2(i, j);
        }
    });
}

// im2col layout: col[(ci*kh+ky)*kw+kx][oy*ow+ox]
static void im2col(const double* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int oh, int ow, double* col) {
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* crow = col + (int64_t)((c * kh + ky) * kw + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::memset(crow + (int64_t)oy * ow, 0, ow * sizeof(double));
                        continue;
                    }
                    const double* xrow = x + ((int64_t)c * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        crow[(int64_t)oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : xrow[ix];
                    }
                }
            }
}

static void col2im_acc(const double* col, int ci, int h, int w, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* dx) {
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* crow = col + (int64_t)((c * kh + ky) * kw + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* xrow = dx + ((int64_t)c * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) xrow[ix] += crow[(int64_t)oy * ow + ox];
                    }
                }
            }
}

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
        throw std::invalid_argument("conv2d: bad shapes x" + shape_str(xv.shape) + " w" +
                                    shape_str(wv.shape));
    int f = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (bv.dim(0) != co) throw std::invalid_argument("conv2d: bias mismatch");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    int ck = ci * kh * kw, p = oh * ow;
    Tensor y({f, co, oh, ow});
    auto cols = std::make_shared<std::vector<double>>((size_t)f * ck * p);
    for (int fi = 0; fi < f; ++fi) {
        double* col = cols->data() + (size_t)fi * ck * p;
        im2col(xv.data() + (int64_t)fi * ci * h * wd, ci, h, wd, kh, kw, stride, pad, oh, ow, col);
        double* yf = y.data() + (int64_t)fi * co * p;
        for (int c = 0; c < co; ++c)
            for (int j = 0; j < p; ++j) yf[(int64_t)c * p + j] = bv.v[c];
        mm_nn(wv.data(), col, yf, co, ck, p);
    }
    op_counter().add((uint64_t)f * co * p);
    return make_node(std::move(y), {x.id, w.id, b.id},
                     [x, w, b, cols, f, ci, h, wd, co, kh, kw, stride, pad, oh, ow, ck,
                      p](Graph& g, int self) {
                         const Tensor& dy = *g.nodes_[self]->grad;
                         bool need_x = g.nodes_[x.id]->needs_grad;
                         bool need_w = g.nodes_[w.id]->needs_grad;
                         bool need_b = g.nodes_[b.id]->needs_grad;
                         std::vector<double> dcol;
                         if (need_x) dcol.resize((size_t)ck * p);
                         for (int fi = 0; fi < f; ++fi) {
                             const double* dyf = dy.data() + (int64_t)fi * co * p;
                             const double* col = cols->data() + (size_t)fi * ck * p;
                             if (need_w)
                                 mm_nt(dyf, col, g.grad_buf(w.id).data(), co, p, ck);
                             if (need_b) {
                                 Tensor& db = g.grad_buf(b.id);
                                 for (int c = 0; c < co; ++c)
                                     for (int j = 0; j < p; ++j) db.v[c] += dyf[(int64_t)c * p + j];
                             }
                             if (need_x) {
                                 std::fill(dcol.begin(), dcol.end(), 0.0);
                                 mm_tn(g.val(w).data(), dyf, dcol.data(), ck, co, p);
                                 col2im_acc(dcol.data(), ci, h, wd, kh, kw, stride, pad, oh, ow,
                                            g.grad_buf(x.id).data() + (int64_t)fi * ci * h * wd);
                             }
                         }
                     });
}

Var Graph::conv1d_same(Var x, Var w, Var b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    if (xv.rank() != 2 || wv.rank() != 3 || wv.dim(1) != xv.dim(1))
        throw std::invalid_argument("conv1d_same: bad shapes");
    int t = xv.dim(0), ci = xv.dim(1);
    int co = wv.dim(0), k = wv.dim(2);
    int half = k / 2;
    Tensor y({t, co});
    op_counter().add(2ull * t * co * ci * k);
    for (int i = 0; i < t; ++i)
        for (int c = 0; c < co; ++c) {
            double acc = bv.v[c];
            for (int dk = 0; dk < k; ++dk) {
                int j = std::clamp(i + dk - half, 0, t - 1);  // replicate edge
                for (int cc = 0; cc < ci; ++cc) acc += xv.at2(j, cc) * wv.at3(c, cc, dk);
            }
            y.at2(i, c) = acc;
        }
    return make_node(std::move(y), {x.id, w.id, b.id}, [x, w, b, t, ci, co, k, half](Graph& g,
                                                                                     int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& xv = g.val(x);
        const Tensor& wv = g.val(w);
        bool need_x = g.nodes_[x.id]->needs_grad;
        bool need_w = g.nodes_[w.id]->needs_grad;
        bool need_b = g.nodes_[b.id]->needs_grad;
        for (int i = 0; i < t; ++i)
            for (int c = 0; c < co; ++c) {
                double d = dy.at2(i, c);
                if (need_b) g.grad_buf(b.id).v[c] += d;
                for (int dk = 0; dk < k; ++dk) {
                    int j = std::clamp(i + dk - half, 0, t - 1);
                    for (int cc = 0; cc < ci; ++cc) {
                        if (need_w) g.grad_buf(w.id).at3(c, cc, dk) += d * xv.at2(j, cc);
                        if (need_x) g.grad_buf(x.id).at2(j, cc) += d * wv.at3(c, cc, dk);
                    }
                }
            }
    });
}

Var Graph::upsample2x(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4) throw std::invalid_argument("upsample2x: expects NCHW");
    int f = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor y({f, c, 2 * h, 2 * w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci)
            for (int yy = 0; yy < 2 * h; ++yy)
                for (int xx = 0; xx < 2 * w; ++xx)
                    y.at4(fi, ci, yy, xx) = xv.at4(fi, ci, yy / 2, xx / 2);
    return make_node(std::move(y), {x.id}, [x, f, c, h, w](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci)
                for (int yy = 0; yy < 2 * h; ++yy)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        dx.at4(fi, ci, yy / 2, xx / 2) += dy.at4(fi, ci, yy, xx);
    });
}

Var Graph::global_avg_pool(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4) throw std::invalid_argument("global_avg_pool: expects NCHW");
    int f = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    double inv = 1.0 / (h * w);
    Tensor y({f, c});
    op_counter().add(xv.numel());
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            double acc = 0;
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) acc += xv.at4(fi, ci, yy, xx);
            y.at2(fi, ci) = acc * inv;
        }
    return make_node(std::move(y), {x.id}, [x, f, c, h, w, inv](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                double d = dy.at2(fi, ci) * inv;
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) dx.at4(fi, ci, yy, xx) += d;
            }
    });
}

Var Graph::mean_rows(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2) throw std::invalid_argument("mean_rows: expects [R,C]");
    int r = xv.dim(0), c = xv.dim(1);
    double inv = 1.0 / r;
    Tensor y({c});
    op_counter().add(xv.numel());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) y.v[j] += xv.at2(i, j) * inv;
    return make_node(std::move(y), {x.id}, [x, r, c, inv](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) dx.at2(i, j) += dy.v[j] * inv;
    });
}

Var Graph::mean_rows_invariant(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2) throw std::invalid_argument("mean_rows_invariant: expects [R,C]");
    int r = xv.dim(0), c = xv.dim(1);
    double inv = 1.0 / r;
    Tensor y({c});
    op_counter().add(xv.numel());
    std::vector<double> col(r);
    for (int j = 0; j < c; ++j) {
        for (int i = 0; i < r; ++i) col[i] = xv.at2(i, j);
        std::sort(col.begin(), col.end());
        double acc = 0;
        for (int i = 0; i < r; ++i) acc += col[i];
        y.v[j] = acc * inv;
    }
    return make_node(std::move(y), {x.id}, [x, r, c, inv](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) dx.at2(i, j) += dy.v[j] * inv;
    });
}

Var Graph::group_norm(Var x, int groups, double eps) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4) throw std::invalid_argument("group_norm: expects NCHW");
    int f = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels % groups != 0");
    int gc = c / groups;
    int64_t m = (int64_t)gc * h * w;
    Tensor y(xv.shape);
    auto stats = std::make_shared<std::vector<double>>((size_t)f * groups * 2);  // mu, istd
    op_counter().add(xv.numel() * 4);
    for (int fi = 0; fi < f; ++fi)
        for (int gi = 0; gi < groups; ++gi) {
            const double* xs = xv.data() + ((int64_t)fi * c + gi * gc) * h * w;
            double mu = 0;
            for (int64_t i = 0; i < m; ++i) mu += xs[i];
            mu /= (double)m;
            double var = 0;
            for (int64_t i = 0; i < m; ++i) var += (xs[i] - mu) * (xs[i] - mu);
            var /= (double)m;
            double istd = 1.0 / std::sqrt(var + eps);
            (*stats)[((size_t)fi * groups + gi) * 2] = mu;
            (*stats)[((size_t)fi * groups + gi) * 2 + 1] = istd;
            double* ys = y.data() + ((int64_t)fi * c + gi * gc) * h * w;
            for (int64_t i = 0; i < m; ++i) ys[i] = (xs[i] - mu) * istd;
        }
    return make_node(std::move(y), {x.id}, [x, stats, f, c, groups, gc, h, w, m](Graph& g,
                                                                                 int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& yv = g.val(Var{self});
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int gi = 0; gi < groups; ++gi) {
                double istd = (*stats)[((size_t)fi * groups + gi) * 2 + 1];
                const double* ys = yv.data() + ((int64_t)fi * c + gi * gc) * h * w;
                const double* dys = dy.data() + ((int64_t)fi * c + gi * gc) * h * w;
                double* dxs = dx.data() + ((int64_t)fi * c + gi * gc) * h * w;
                double mean_dy = 0, mean_dyy = 0;
                for (int64_t i = 0; i < m; ++i) {
                    mean_dy += dys[i];
                    mean_dyy += dys[i] * ys[i];
                }
                mean_dy /= (double)m;
                mean_dyy /= (double)m;
                for (int64_t i = 0; i < m; ++i)
                    dxs[i] += istd * (dys[i] - mean_dy - ys[i] * mean_dyy);
            }
    });
}

Var Graph::layer_norm_rows(Var x, double eps) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2) throw std::invalid_argument("layer_norm_rows: expects [R,C]");
    int r = xv.dim(0), c = xv.dim(1);
    Tensor y(xv.shape);
    auto istds = std::make_shared<std::vector<double>>(r);
    op_counter().add(xv.numel() * 4);
    for (int i = 0; i < r; ++i) {
        const double* xs = xv.data() + (int64_t)i * c;
        double mu = 0;
        for (int j = 0; j < c; ++j) mu += xs[j];
        mu /= c;
        double var = 0;
        for (int j = 0; j < c; ++j) var += (xs[j] - mu) * (xs[j] - mu);
        var /= c;
        double istd = 1.0 / std::sqrt(var + eps);
        (*istds)[i] = istd;
        double* ys = y.data() + (int64_t)i * c;
        for (int j = 0; j < c; ++j) ys[j] = (xs[j] - mu) * istd;
    }
    return make_node(std::move(y), {x.id}, [x, istds, r, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& yv = g.val(Var{self});
        Tensor& dx = g.grad_buf(x.id);
        for (int i = 0; i < r; ++i) {
            const double* ys = yv.data() + (int64_t)i * c;
            const double* dys = dy.data() + (int64_t)i * c;
            double* dxs = dx.data() + (int64_t)i * c;
            double mean_dy = 0, mean_dyy = 0;
            for (int j = 0; j < c; ++j) {
                mean_dy += dys[j];
                mean_dyy += dys[j] * ys[j];
            }
            mean_dy /= c;
            mean_dyy /= c;
            double istd = (*istds)[i];
            for (int j = 0; j < c; ++j) dxs[j] += istd * (dys[j] - mean_dy - ys[j] * mean_dyy);
        }
    });
}

Var Graph::softmax_rows(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: expects [R,C]");
    int r = xv.dim(0), c = xv.dim(1);
    Tensor y(xv.shape);
    op_counter().add(xv.numel() * 4);
    for (int i = 0; i < r; ++i) {
        const double* xs = xv.data() + (int64_t)i * c;
        double mx = xs[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xs[j]);
        double sum = 0;
        double* ys = y.data() + (int64_t)i * c;
        for (int j = 0; j < c; ++j) {
            ys[j] = std::exp(xs[j] - mx);
            sum += ys[j];
        }
        double inv = 1.0 / sum;
        for (int j = 0; j < c; ++j) ys[j] *= inv;
    }
    return make_node(std::move(y), {x.id}, [x, r, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& yv = g.val(Var{self});
        Tensor& dx = g.grad_buf(x.id);
        for (int i = 0; i < r; ++i) {
            const double* ys = yv.data() + (int64_t)i * c;
            const double* dys = dy.data() + (int64_t)i * c;
            double* dxs = dx.data() + (int64_t)i * c;
            double dot = 0;
            for (int j = 0; j < c; ++j) dot += dys[j] * ys[j];
            for (int j = 0; j < c; ++j) dxs[j] += ys[j] * (dys[j] - dot);
        }
    });
}

Var Graph::add_channel_bias(Var x, Var b) {
    const Tensor& xv = val(x);
    const Tensor& bv = val(b);
    if (xv.rank() != 4 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
        throw std::invalid_argument("add_channel_bias: bad shapes");
    int f = xv.dim(0), c = xv.dim(1);
    int64_t hw = (int64_t)xv.dim(2) * xv.dim(3);
    Tensor y(xv.shape);
    op_counter().add(xv.numel());
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const double* xs = xv.data() + ((int64_t)fi * c + ci) * hw;
            double* ys = y.data() + ((int64_t)fi * c + ci) * hw;
            double bb = bv.v[ci];
            for (int64_t i = 0; i < hw; ++i) ys[i] = xs[i] + bb;
        }
    return make_node(std::move(y), {x.id, b.id}, [x, b, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[x.id]->needs_grad) {
            Tensor& dx = g.grad_buf(x.id);
            for (int64_t i = 0; i < dy.numel(); ++i) dx.v[i] += dy.v[i];
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int fi = 0; fi < f; ++fi)
                for (int ci = 0; ci < c; ++ci) {
                    const double* dys = dy.data() + ((int64_t)fi * c + ci) * hw;
                    double acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += dys[i];
                    db.v[ci] += acc;
                }
        }
    });
}

Var Graph::scale_channels(Var x, Var s) {
    const Tensor& xv = val(x);
    const Tensor& sv = val(s);
    if (xv.rank() != 4 || sv.rank() != 1 || sv.dim(0) != xv.dim(1))
        throw std::invalid_argument("scale_channels: bad shapes");
    int f = xv.dim(0), c = xv.dim(1);
    int64_t hw = (int64_t)xv.dim(2) * xv.dim(3);
    Tensor y(xv.shape);
    op_counter().add(xv.numel());
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const double* xs = xv.data() + ((int64_t)fi * c + ci) * hw;
            double* ys = y.data() + ((int64_t)fi * c + ci) * hw;
            double ss = sv.v[ci];
            for (int64_t i = 0; i < hw; ++i) ys[i] = xs[i] * ss;
        }
    return make_node(std::move(y), {x.id, s.id}, [x, s, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        const Tensor& xv = g.val(x);
        const Tensor& sv = g.val(s);
        if (g.nodes_[x.id]->needs_grad) {
            Tensor& dx = g.grad_buf(x.id);
            for (int fi = 0; fi < f; ++fi)
                for (int ci = 0; ci < c; ++ci) {
                    const double* dys = dy.data() + ((int64_t)fi * c + ci) * hw;
                    double* dxs = dx.data() + ((int64_t)fi * c + ci) * hw;
                    double ss = sv.v[ci];
                    for (int64_t i = 0; i < hw; ++i) dxs[i] += dys[i] * ss;
                }
        }
        if (g.nodes_[s.id]->needs_grad) {
            Tensor& ds = g.grad_buf(s.id);
            for (int fi = 0; fi < f; ++fi)
                for (int ci = 0; ci < c; ++ci) {
                    const double* dys = dy.data() + ((int64_t)fi * c + ci) * hw;
                    const double* xs = xv.data() + ((int64_t)fi * c + ci) * hw;
                    double acc = 0;
                    for (int64_t i = 0; i < hw; ++i) acc += dys[i] * xs[i];
                    ds.v[ci] += acc;
                }
        }
    });
}

Var Graph::concat_ch(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw std::invalid_argument("concat_ch: bad shapes");
    int f = av.dim(0), c1 = av.dim(1), c2 = bv.dim(1);
    int64_t hw = (int64_t)av.dim(2) * av.dim(3);
    Tensor y({f, c1 + c2, av.dim(2), av.dim(3)});
    for (int fi = 0; fi < f; ++fi) {
        std::memcpy(y.data() + (int64_t)fi * (c1 + c2) * hw, av.data() + (int64_t)fi * c1 * hw,
                    (size_t)c1 * hw * sizeof(double));
        std::memcpy(y.data() + ((int64_t)fi * (c1 + c2) + c1) * hw,
                    bv.data() + (int64_t)fi * c2 * hw, (size_t)c2 * hw * sizeof(double));
    }
    return make_node(std::move(y), {a.id, b.id}, [a, b, f, c1, c2, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        if (g.nodes_[a.id]->needs_grad) {
            Tensor& da = g.grad_buf(a.id);
            for (int fi = 0; fi < f; ++fi) {
                const double* src = dy.data() + (int64_t)fi * (c1 + c2) * hw;
                double* dst = da.data() + (int64_t)fi * c1 * hw;
                for (int64_t i = 0; i < c1 * hw; ++i) dst[i] += src[i];
            }
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int fi = 0; fi < f; ++fi) {
                const double* src = dy.data() + ((int64_t)fi * (c1 + c2) + c1) * hw;
                double* dst = db.data() + (int64_t)fi * c2 * hw;
                for (int64_t i = 0; i < c2 * hw; ++i) dst[i] += src[i];
            }
        }
    });
}

Var Graph::slice_ch(Var x, int c0, int c1) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4 || c0 < 0 || c1 > xv.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_ch: bad range");
    int f = xv.dim(0), c = xv.dim(1), cs = c1 - c0;
    int64_t hw = (int64_t)xv.dim(2) * xv.dim(3);
    Tensor y({f, cs, xv.dim(2), xv.dim(3)});
    for (int fi = 0; fi < f; ++fi)
        std::memcpy(y.data() + (int64_t)fi * cs * hw, xv.data() + ((int64_t)fi * c + c0) * hw,
                    (size_t)cs * hw * sizeof(double));
    return make_node(std::move(y), {x.id}, [x, f, c, c0, cs, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi) {
            const double* src = dy.data() + (int64_t)fi * cs * hw;
            double* dst = dx.data() + ((int64_t)fi * c + c0) * hw;
            for (int64_t i = 0; i < cs * hw; ++i) dst[i] += src[i];
        }
    });
}

Var Graph::reshape(Var x, Shape s) {
    const Tensor& xv = val(x);
    if (numel_of(s) != xv.numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor y(std::move(s));
    y.v = xv.v;
    return make_node(std::move(y), {x.id}, [x](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int64_t i = 0; i < dy.numel(); ++i) dx.v[i] += dy.v[i];
    });
}

Var Graph::seq_from_nchw(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4) throw std::invalid_argument("seq_from_nchw: expects NCHW");
    int f = xv.dim(0), c = xv.dim(1);
    int64_t hw = (int64_t)xv.dim(2) * xv.dim(3);
    Tensor y({f, (int)hw, c});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const double* xs = xv.data() + ((int64_t)fi * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) y.v[((int64_t)fi * hw + i) * c + ci] = xs[i];
        }
    return make_node(std::move(y), {x.id}, [x, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                double* dxs = dx.data() + ((int64_t)fi * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) dxs[i] += dy.v[((int64_t)fi * hw + i) * c + ci];
            }
    });
}

Var Graph::nchw_from_seq(Var x, int h, int w) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3 || xv.dim(1) != h * w)
        throw std::invalid_argument("nchw_from_seq: bad shapes");
    int f = xv.dim(0), c = xv.dim(2);
    int64_t hw = (int64_t)h * w;
    Tensor y({f, c, h, w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            double* ys = y.data() + ((int64_t)fi * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) ys[i] = xv.v[((int64_t)fi * hw + i) * c + ci];
        }
    return make_node(std::move(y), {x.id}, [x, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                const double* dys = dy.data() + ((int64_t)fi * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) dx.v[((int64_t)fi * hw + i) * c + ci] += dys[i];
            }
    });
}

Var Graph::time_seq_from_nchw(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 4) throw std::invalid_argument("time_seq_from_nchw: expects NCHW");
    int f = xv.dim(0), c = xv.dim(1);
    int64_t hw = (int64_t)xv.dim(2) * xv.dim(3);
    Tensor y({(int)hw, f, c});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            const double* xs = xv.data() + ((int64_t)fi * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) y.v[(i * f + fi) * c + ci] = xs[i];
        }
    return make_node(std::move(y), {x.id}, [x, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                double* dxs = dx.data() + ((int64_t)fi * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) dxs[i] += dy.v[(i * f + fi) * c + ci];
            }
    });
}

Var Graph::nchw_from_time_seq(Var x, int h, int w) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3 || xv.dim(0) != h * w)
        throw std::invalid_argument("nchw_from_time_seq: bad shapes");
    int f = xv.dim(1), c = xv.dim(2);
    int64_t hw = (int64_t)h * w;
    Tensor y({f, c, h, w});
    for (int fi = 0; fi < f; ++fi)
        for (int ci = 0; ci < c; ++ci) {
            double* ys = y.data() + ((int64_t)fi * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) ys[i] = xv.v[(i * f + fi) * c + ci];
        }
    return make_node(std::move(y), {x.id}, [x, f, c, hw](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int fi = 0; fi < f; ++fi)
            for (int ci = 0; ci < c; ++ci) {
                const double* dys = dy.data() + ((int64_t)fi * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) dx.v[(i * f + fi) * c + ci] += dys[i];
            }
    });
}

Var Graph::reverse_seq(Var x) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3) throw std::invalid_argument("reverse_seq: expects [B,L,C]");
    int b = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
    Tensor y(xv.shape);
    for (int bi = 0; bi < b; ++bi)
        for (int li = 0; li < l; ++li)
            std::memcpy(y.data() + ((int64_t)bi * l + li) * c,
                        xv.data() + ((int64_t)bi * l + (l - 1 - li)) * c, (size_t)c * sizeof(double));
    return make_node(std::move(y), {x.id}, [x, b, l, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int bi = 0; bi < b; ++bi)
            for (int li = 0; li < l; ++li) {
                const double* src = dy.data() + ((int64_t)bi * l + li) * c;
                double* dst = dx.data() + ((int64_t)bi * l + (l - 1 - li)) * c;
                for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
            }
    });
}

Var Graph::slice_rows(Var x, int r0, int r1) {
    const Tensor& xv = val(x);
    if (xv.rank() != 2 || r0 < 0 || r1 > xv.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    int c = xv.dim(1);
    Tensor y({r1 - r0, c});
    std::memcpy(y.data(), xv.data() + (int64_t)r0 * c, (size_t)(r1 - r0) * c * sizeof(double));
    return make_node(std::move(y), {x.id}, [x, r0, r1, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        for (int i = 0; i < r1 - r0; ++i)
            for (int j = 0; j < c; ++j) dx.at2(r0 + i, j) += dy.at2(i, j);
    });
}

Var Graph::slice_batch(Var x, int b) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3 || b < 0 || b >= xv.dim(0))
        throw std::invalid_argument("slice_batch: bad index");
    int l = xv.dim(1), c = xv.dim(2);
    Tensor y({l, c});
    std::memcpy(y.data(), xv.data() + (int64_t)b * l * c, (size_t)l * c * sizeof(double));
    return make_node(std::move(y), {x.id}, [x, b, l, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        Tensor& dx = g.grad_buf(x.id);
        double* dst = dx.data() + (int64_t)b * l * c;
        for (int64_t i = 0; i < (int64_t)l * c; ++i) dst[i] += dy.v[i];
    });
}

Var Graph::stack_batch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack_batch: empty");
    const Tensor& first = val(xs[0]);
    if (first.rank() != 2) throw std::invalid_argument("stack_batch: expects [L,C] items");
    int l = first.dim(0), c = first.dim(1);
    Tensor y({(int)xs.size(), l, c});
    std::vector<int> parents;
    for (size_t i = 0; i < xs.size(); ++i) {
        const Tensor& t = val(xs[i]);
        check_same_shape(first, t, "stack_batch");
        std::memcpy(y.data() + (int64_t)i * l * c, t.data(), (size_t)l * c * sizeof(double));
        parents.push_back(xs[i].id);
    }
    auto items = xs;
    return make_node(std::move(y), std::move(parents), [items, l, c](Graph& g, int self) {
        const Tensor& dy = *g.nodes_[self]->grad;
        for (size_t i = 0; i < items.size(); ++i) {
            Tensor& dx = g.grad_buf(items[i].id);
            const double* src = dy.data() + (int64_t)i * l * c;
            for (int64_t j = 0; j < (int64_t)l * c; ++j) dx.v[j] += src[j];
        }
    });
}

Var Graph::mse(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "mse");
    int64_t n = av.numel();
    double acc = 0;
    op_counter().add(3ull * n);
    for (int64_t i = 0; i < n; ++i) {
        double d = av.v[i] - bv.v[i];
        acc += d * d;
    }
    Tensor y({1});
    y.v[0] = acc / (double)n;
    return make_node(std::move(y), {a.id, b.id}, [a, b, n](Graph& g, int self) {
        double dy = g.nodes_[self]->grad->v[0];
        const Tensor& av = g.val(a);
        const Tensor& bv = g.val(b);
        double k = 2.0 * dy / (double)n;
        if (g.nodes_[a.id]->needs_grad) {
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < n; ++i) da.v[i] += k * (av.v[i] - bv.v[i]);
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int64_t i = 0; i < n; ++i) db.v[i] -= k * (av.v[i] - bv.v[i]);
        }
    });
}

Var Graph::masked_mse(Var a, Var b, const Tensor& mask, bool normalize_by_mask) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "masked_mse");
    check_same_shape(av, mask, "masked_mse mask");
    int64_t n = av.numel();
    double acc = 0, mass = 0;
    op_counter().add(4ull * n);
    for (int64_t i = 0; i < n; ++i) {
        double d = av.v[i] - bv.v[i];
        acc += d * d * mask.v[i];
        mass += mask.v[i];
    }
    double denom = normalize_by_mask ? mass : (double)n;
    Tensor y({1});
    y.v[0] = denom > 0 ? acc / denom : 0.0;
    return make_node(std::move(y), {a.id, b.id}, [a, b, mask, n, denom](Graph& g, int self) {
        if (denom <= 0) return;
        double dy = g.nodes_[self]->grad->v[0];
        const Tensor& av = g.val(a);
        const Tensor& bv = g.val(b);
        double k = 2.0 * dy / denom;
        if (g.nodes_[a.id]->needs_grad) {
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < n; ++i) da.v[i] += k * (av.v[i] - bv.v[i]) * mask.v[i];
        }
        if (g.nodes_[b.id]->needs_grad) {
            Tensor& db = g.grad_buf(b.id);
            for (int64_t i = 0; i < n; ++i) db.v[i] -= k * (av.v[i] - bv.v[i]) * mask.v[i];
        }
    });
}

Var Graph::add_scalar(Var a, Var b) { return add(a, b); }

}  // namespace minidub::ad
