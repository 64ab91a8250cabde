// Input-dependent diagonal state-space scan. Transition, input and readout
// parameters are linear functions of the current token; the recurrence is
//   h_k = exp(dt_k * A) ⊙ h_{k-1} + dt_k * B_k * x_k
//   y_k = <C_k, h_k> + D ⊙ x_k
// computed in O(L * C * S) time.

#include <cmath>
#include <cstring>
#include <memory>

#include "minidub/autograd.hpp"

namespace minidub::ad {

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Var Graph::selective_scan(Var x, Var a_log, Var w_dt, Var b_dt, Var w_b, Var w_c, Var d_skip) {
    const Tensor& xv = val(x);
    if (xv.rank() != 3) throw std::invalid_argument("selective_scan: x must be [B,L,C]");
    int bsz = xv.dim(0), len = xv.dim(1), ch = xv.dim(2);
    const Tensor& alv = val(a_log);
    if (alv.rank() != 2 || alv.dim(0) != ch)
        throw std::invalid_argument("selective_scan: A_log must be [C,S]");
    int st = alv.dim(1);
    const Tensor& wdtv = val(w_dt);
    const Tensor& bdtv = val(b_dt);
    const Tensor& wbv = val(w_b);
    const Tensor& wcv = val(w_c);
    const Tensor& dv = val(d_skip);
    if (wdtv.dim(0) != ch || wdtv.dim(1) != ch || bdtv.dim(0) != ch || wbv.dim(0) != ch ||
        wbv.dim(1) != st || wcv.dim(0) != ch || wcv.dim(1) != st || dv.dim(0) != ch)
        throw std::invalid_argument("selective_scan: parameter shape mismatch");

    int64_t bl = (int64_t)bsz * len;

    // input-dependent projections
    auto pre = std::make_shared<Tensor>(Shape{(int)bl, ch});   // dt pre-activation
    auto bk = std::make_shared<Tensor>(Shape{(int)bl, st});
    auto ck = std::make_shared<Tensor>(Shape{(int)bl, st});
    for (int64_t i = 0; i < bl; ++i)
        std::memcpy(&pre->v[i * ch], bdtv.data(), ch * sizeof(double));
    mm_nn(xv.data(), wdtv.data(), pre->data(), (int)bl, ch, ch);
    mm_nn(xv.data(), wbv.data(), bk->data(), (int)bl, ch, st);
    mm_nn(xv.data(), wcv.data(), ck->data(), (int)bl, ch, st);

    Tensor a({ch, st});
    for (int64_t i = 0; i < a.numel(); ++i) a.v[i] = -std::exp(alv.v[i]);

    auto hs = std::make_shared<Tensor>(Shape{bsz, len, ch, st});
    Tensor y({bsz, len, ch});
    op_counter().add((uint64_t)bl * ch * (8ull * st + 2ull) + 3ull * bl * ch);

    for (int b = 0; b < bsz; ++b) {
        for (int k = 0; k < len; ++k) {
            int64_t row = (int64_t)b * len + k;
            const double* xr = xv.data() + row * ch;
            const double* bkr = bk->data() + row * st;
            const double* ckr = ck->data() + row * st;
            for (int c = 0; c < ch; ++c) {
                double dt = pre->v[row * ch + c];
                dt = dt > 30.0 ? dt : std::log1p(std::exp(dt));  // softplus keeps dt > 0
                const double* ar = a.data() + (int64_t)c * st;
                const double* hp =
                    k > 0 ? hs->data() + (((int64_t)b * len + k - 1) * ch + c) * st : nullptr;
                double* hc = hs->data() + (row * ch + c) * st;
                double xc = xr[c];
                double acc = 0;
                for (int s = 0; s < st; ++s) {
                    double abar = std::exp(dt * ar[s]);
                    double h = abar * (hp ? hp[s] : 0.0) + dt * bkr[s] * xc;
                    hc[s] = h;
                    acc += ckr[s] * h;
                }
                y.v[row * ch + c] = acc + dv.v[c] * xc;
            }
        }
    }

    return make_node(
        std::move(y), {x.id, a_log.id, w_dt.id, b_dt.id, w_b.id, w_c.id, d_skip.id},
        [x, a_log, w_dt, b_dt, w_b, w_c, d_skip, pre, bk, ck, hs, bsz, len, ch, st,
         bl](Graph& g, int self) {
            const Tensor& dy = *g.nodes_[self]->grad;
            const Tensor& xv = g.val(x);
            const Tensor& alv = g.val(a_log);
            const Tensor& dv = g.val(d_skip);

            Tensor a({ch, st});
            for (int64_t i = 0; i < a.numel(); ++i) a.v[i] = -std::exp(alv.v[i]);

            Tensor dx_local({bsz, len, ch});
            Tensor da({ch, st});
            Tensor ddt({(int)bl, ch});
            Tensor dbk({(int)bl, st});
            Tensor dck({(int)bl, st});
            Tensor dd_local({ch});
            std::vector<double> dh((size_t)ch * st);

            for (int b = 0; b < bsz; ++b) {
                std::fill(dh.begin(), dh.end(), 0.0);
                for (int k = len - 1; k >= 0; --k) {
                    int64_t row = (int64_t)b * len + k;
                    const double* xr = xv.data() + row * ch;
                    const double* dyr = dy.data() + row * ch;
                    const double* bkr = bk->data() + row * st;
                    const double* ckr = ck->data() + row * st;
                    for (int c = 0; c < ch; ++c) {
                        double dyc = dyr[c];
                        double xc = xr[c];
                        dd_local.v[c] += dyc * xc;
                        dx_local.v[row * ch + c] += dyc * dv.v[c];
                        double dt = pre->v[row * ch + c];
                        dt = dt > 30.0 ? dt : std::log1p(std::exp(dt));
                        const double* ar = a.data() + (int64_t)c * st;
                        const double* hc = hs->data() + (row * ch + c) * st;
                        const double* hp =
                            k > 0 ? hs->data() + (((int64_t)b * len + k - 1) * ch + c) * st
                                  : nullptr;
                        double* dhc = dh.data() + (size_t)c * st;
                        double ddt_acc = 0, dxc_acc = 0;
                        for (int s = 0; s < st; ++s) {
                            double dhs = dhc[s] + dyc * ckr[s];
                            dck.v[row * st + s] += dyc * hc[s];
                            double abar = std::exp(dt * ar[s]);
                            double hps = hp ? hp[s] : 0.0;
                            ddt_acc += dhs * (abar * hps * ar[s] + bkr[s] * xc);
                            da.v[(int64_t)c * st + s] += dhs * abar * hps * dt;
                            dbk.v[row * st + s] += dhs * dt * xc;
                            dxc_acc += dhs * dt * bkr[s];
                            dhc[s] = dhs * abar;  // flows to k-1
                        }
                        ddt.v[row * ch + c] = ddt_acc;
                        dx_local.v[row * ch + c] += dxc_acc;
                    }
                }
            }

            // dt through softplus
            for (int64_t i = 0; i < (int64_t)bl * ch; ++i) ddt.v[i] *= sigmoid(pre->v[i]);

            if (g.nodes_[x.id]->needs_grad) {
                Tensor& dx = g.grad_buf(x.id);
                for (int64_t i = 0; i < dx.numel(); ++i) dx.v[i] += dx_local.v[i];
                mm_nt(ddt.data(), g.val(w_dt).data(), dx.data(), (int)bl, ch, ch);
                mm_nt(dbk.data(), g.val(w_b).data(), dx.data(), (int)bl, st, ch);
                mm_nt(dck.data(), g.val(w_c).data(), dx.data(), (int)bl, st, ch);
            }
            if (g.nodes_[w_dt.id]->needs_grad)
                mm_tn(xv.data(), ddt.data(), g.grad_buf(w_dt.id).data(), ch, (int)bl, ch);
            if (g.nodes_[b_dt.id]->needs_grad) {
                Tensor& db = g.grad_buf(b_dt.id);
                for (int64_t i = 0; i < bl; ++i)
                    for (int c = 0; c < ch; ++c) db.v[c] += ddt.v[i * ch + c];
            }
            if (g.nodes_[w_b.id]->needs_grad)
                mm_tn(xv.data(), dbk.data(), g.grad_buf(w_b.id).data(), ch, (int)bl, st);
            if (g.nodes_[w_c.id]->needs_grad)
                mm_tn(xv.data(), dck.data(), g.grad_buf(w_c.id).data(), ch, (int)bl, st);
            if (g.nodes_[a_log.id]->needs_grad) {
                Tensor& dal = g.grad_buf(a_log.id);
                for (int64_t i = 0; i < dal.numel(); ++i) dal.v[i] += da.v[i] * a.v[i];
            }
            if (g.nodes_[d_skip.id]->needs_grad) {
                Tensor& dd = g.grad_buf(d_skip.id);
                for (int c = 0; c < ch; ++c) dd.v[c] += dd_local.v[c];
            }
        });
}

}  // namespace minidub::ad
