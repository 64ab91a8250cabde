#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "minidub/autograd.hpp"
#include "testutil.hpp"

using namespace minidub;
using namespace minidub::ad;
using testutil::fd_max_rel_err;
using testutil::random_tensor;

namespace {

// one scalar loss per op family, exercising forward + vjp
struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    std::function<double(Graph&, const std::vector<Var>&)> build;
};

double run_case(const Case& c, const std::vector<Tensor>& inputs, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
    double loss = c.build(g, vars);
    if (grads) {
        Var l = Var{(int)g.num_nodes() - 1};
        g.backward(l);
        grads->clear();
        for (Var v : vars) grads->push_back(g.has_grad(v) ? g.grad(v) : Tensor(g.val(v).shape));
    }
    return loss;
}

void check_case(const Case& c, double tol = 2e-5) {
    std::vector<Tensor> grads;
    run_case(c, c.inputs, &grads);
    for (size_t k = 0; k < c.inputs.size(); ++k) {
        double err = fd_max_rel_err(
            [&](const std::vector<Tensor>& in) { return run_case(c, in, nullptr); }, c.inputs, k,
            grads[k], 1e-6, 32);
        INFO(c.name << " input " << k);
        CHECK(err < tol);
    }
}

}  // namespace

TEST_CASE("per-op gradients match central differences") {
    Rng rng(11);
    std::vector<Case> cases;

    cases.push_back({"conv2d_s1",
                     {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng, 0.5),
                      random_tensor({4}, rng, 0.2), random_tensor({2, 4, 5, 5}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.conv2d(v[0], v[1], v[2], 1, 1);
                         Var loss = g.mse(y, v[3]);
                         return g.val(loss).v[0];
                     }});
    cases.push_back({"conv2d_s2",
                     {random_tensor({1, 3, 6, 6}, rng), random_tensor({5, 3, 3, 3}, rng, 0.5),
                      random_tensor({5}, rng, 0.2), random_tensor({1, 5, 3, 3}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.conv2d(v[0], v[1], v[2], 2, 1);
                         return g.val(g.mse(y, v[3])).v[0];
                     }});
    cases.push_back({"conv1d_replicate",
                     {random_tensor({6, 3}, rng), random_tensor({4, 3, 3}, rng, 0.5),
                      random_tensor({4}, rng, 0.2), random_tensor({6, 4}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.conv1d_same(v[0], v[1], v[2]);
                         return g.val(g.mse(y, v[3])).v[0];
                     }});
    cases.push_back({"group_norm_silu",
                     {random_tensor({2, 4, 3, 3}, rng), random_tensor({2, 4, 3, 3}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.silu(g.group_norm(v[0], 2, 1e-5));
                         return g.val(g.mse(y, v[1])).v[0];
                     }});
    cases.push_back({"layer_norm_softmax",
                     {random_tensor({5, 6}, rng), random_tensor({5, 6}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.softmax_rows(g.layer_norm_rows(v[0], 1e-5));
                         return g.val(g.mse(y, v[1])).v[0];
                     }});
    cases.push_back({"attention_shape",
                     {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng),
                      random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var p = g.softmax_rows(g.scale(g.matmul_nt(v[0], v[1]), 0.5));
                         Var y = g.matmul(p, v[2]);
                         return g.val(g.mse(y, v[3])).v[0];
                     }});
    cases.push_back({"upsample_pool",
                     {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.global_avg_pool(g.upsample2x(v[0]));
                         return g.val(g.mse(y, v[1])).v[0];
                     }});
    cases.push_back({"channel_ops",
                     {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng),
                      random_tensor({4}, rng), random_tensor({2, 8, 3, 3}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.scale_channels(g.add_channel_bias(v[0], v[1]), v[2]);
                         Var c = g.concat_ch(y, v[0]);
                         return g.val(g.mse(c, v[3])).v[0];
                     }});
    cases.push_back({"layout_round_trip",
                     {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var s = g.seq_from_nchw(v[0]);
                         Var t = g.nchw_from_seq(g.reverse_seq(s), 4, 4);
                         Var u = g.time_seq_from_nchw(t);
                         Var w = g.nchw_from_time_seq(u, 4, 4);
                         return g.val(g.mse(w, v[1])).v[0];
                     }});
    cases.push_back({"masked_mse",
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Tensor mask({3, 4});
                         for (int i = 0; i < 12; ++i) mask.v[i] = i % 3 == 0 ? 1.0 : 0.25;
                         Var y = g.masked_mse(v[0], v[1], mask, true);
                         return g.val(y).v[0];
                     }});
    cases.push_back({"selective_scan",
                     {random_tensor({2, 5, 4}, rng), random_tensor({4, 3}, rng, 0.5),
                      random_tensor({4, 4}, rng, 0.4), random_tensor({4}, rng, 0.2),
                      random_tensor({4, 3}, rng, 0.5), random_tensor({4, 3}, rng, 0.5),
                      random_tensor({4}, rng, 0.3), random_tensor({2, 5, 4}, rng)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Var y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
                         return g.val(g.mse(y, v[7])).v[0];
                     }});

    for (const auto& c : cases) check_case(c);
}

TEST_CASE("backward accumulates across reuse") {
    Graph g;
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Var v = g.leaf(x, true);
    Var y = g.add(g.mul(v, v), v);  // x^2 + x -> dy/dx = 2x + 1
    Var loss = g.mse(y, g.leaf(Tensor({2, 2})));
    g.backward(loss);
    const Tensor& grad = g.grad(v);
    for (int i = 0; i < 4; ++i) {
        double xi = x.v[i];
        double expected = 2.0 * (xi * xi + xi) * (2.0 * xi + 1.0) / 4.0;
        CHECK(grad.v[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("non-recording graph skips gradient machinery") {
    Graph g(false);
    Var v = g.leaf(Tensor({2, 2}, 1.5), true);
    Var y = g.scale(v, 2.0);
    CHECK(g.val(y).v[0] == 3.0);
    CHECK(!g.has_grad(y));
}
