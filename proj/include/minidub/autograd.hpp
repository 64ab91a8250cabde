#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "minidub/tensor.hpp"

namespace minidub::ad {

using minidub::Shape;
using minidub::Tensor;

// Reverse-mode tape over dense double tensors. Ops evaluate eagerly and
// record a vjp closure; backward() replays the tape in reverse. A fresh
// Graph is built per training step, params enter as leaves.
class Graph;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}

    Var leaf(const Tensor& t, bool needs_grad = false);
    Var leaf(Tensor&& t, bool needs_grad = false);

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var silu(Var a);
    Var softplus(Var a);
    Var mul_mask(Var a, const Tensor& mask);  // constant mask, no grad into it

    // linear algebra
    Var matmul(Var a, Var b);                // [M,K]x[K,N]
    Var matmul_nt(Var a, Var b);             // [M,K]x[N,K]^T -> [M,N]
    Var linear(Var x, Var w, Var b);         // [R,Ci]x[Ci,Co]+b
    Var bias_rows(Var x, Var b);             // [R,C] + b[C]
    Var mul_rows(Var x, Var s);              // [R,C] * s[C]

    // convolution / resampling (NCHW batches)
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var conv1d_same(Var x, Var w, Var b);    // [T,Ci], replicate padding
    Var upsample2x(Var x);
    Var global_avg_pool(Var x);              // [F,C,H,W] -> [F,C]
    Var mean_rows(Var x);                    // [R,C] -> [C]
    // mean over rows summed in value-sorted order, so the result is
    // bit-exactly invariant to row permutations
    Var mean_rows_invariant(Var x);

    // normalization / attention
    Var group_norm(Var x, int groups, double eps);
    Var layer_norm_rows(Var x, double eps);
    Var softmax_rows(Var x);

    // channel helpers on [F,C,H,W]
    Var add_channel_bias(Var x, Var b);
    Var scale_channels(Var x, Var g);
    Var concat_ch(Var a, Var b);
    Var slice_ch(Var x, int c0, int c1);

    // layout
    Var reshape(Var x, Shape s);
    Var seq_from_nchw(Var x);                     // [F,C,H,W] -> [F,HW,C]
    Var nchw_from_seq(Var x, int h, int w);       // [F,HW,C] -> [F,C,H,W]
    Var time_seq_from_nchw(Var x);                // [F,C,H,W] -> [HW,F,C]
    Var nchw_from_time_seq(Var x, int h, int w);  // [HW,F,C] -> [F,C,H,W]
    Var reverse_seq(Var x);                       // [B,L,C] reversed along L
    Var slice_rows(Var x, int r0, int r1);        // [R,C] -> [r1-r0,C]
    Var slice_batch(Var x, int b);                // [B,L,C] -> [L,C]
    Var stack_batch(const std::vector<Var>& xs);  // k x [L,C] -> [k,L,C]

    // input-dependent diagonal state-space scan (see ssm.cpp)
    Var selective_scan(Var x, Var a_log, Var w_dt, Var b_dt, Var w_b, Var w_c, Var d_skip);

    // losses -> scalar shaped [1]
    Var mse(Var a, Var b);
    Var masked_mse(Var a, Var b, const Tensor& mask, bool normalize_by_mask);
    Var add_scalar(Var a, Var b);  // [1]+[1]

    const Tensor& val(Var x) const { return nodes_[x.id]->value; }
    bool has_grad(Var x) const { return nodes_[x.id]->grad != nullptr; }
    const Tensor& grad(Var x) const;
    void backward(Var loss);

    bool recording() const { return record_; }
    size_t num_nodes() const { return nodes_.size(); }

    // extension point for fused ops
    Var make_node(Tensor value, std::vector<int> parents, std::function<void(Graph&, int)> vjp);
    Tensor& grad_buf(int id);  // lazily allocated, zero-filled

private:
    struct Node {
        Tensor value;
        std::unique_ptr<Tensor> grad;
        std::vector<int> parents;
        std::function<void(Graph&, int)> vjp;
        bool needs_grad = false;
    };

    bool record_;
    std::vector<std::unique_ptr<Node>> nodes_;

    bool any_needs_grad(const std::vector<int>& parents) const;
    friend struct GraphAccess;
};

// dense kernels shared with non-graph code paths
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n);  // c += a*b
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n);  // c += a^T*b, a is [k,m]
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n);  // c += a*b^T, b is [n,k]

}  // namespace minidub::ad
