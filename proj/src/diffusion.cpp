#include "minidub/diffusion.hpp"

#include <cmath>

#include "minidub/denoiser.hpp"

namespace minidub {

NoiseSchedule make_schedule(int total_steps, NoiseSchedule::Beta tag) {
    if (total_steps < 1) throw std::invalid_argument("make_schedule: total_steps < 1");
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.tag = tag;
    s.alpha_bar.assign(total_steps + 1, 1.0);
    if (tag == NoiseSchedule::Beta::Linear) {
        // sqrt-space linear betas
        double b0 = std::sqrt(0.00085), b1 = std::sqrt(0.012);
        double prod = 1.0;
        for (int t = 1; t <= total_steps; ++t) {
            double beta = b0 + (b1 - b0) * (t - 1) / std::max(1, total_steps - 1);
            prod *= 1.0 - beta * beta;
            s.alpha_bar[t] = prod;
        }
    } else {
        double off = 0.008;
        auto f = [&](double t) {
            double x = (t / total_steps + off) / (1.0 + off) * 1.5707963267948966;
            double c = std::cos(x);
            return c * c;
        };
        double f0 = f(0.0);
        for (int t = 1; t <= total_steps; ++t) {
            // floor keeps the terminal step numerically usable while the
            // taper preserves strict monotonicity
            double floor_t = 4e-5 * (1.0 + 1e-3 * (total_steps - t));
            s.alpha_bar[t] = std::max(f((double)t) / f0, floor_t);
        }
    }
    for (int t = 1; t <= total_steps; ++t)
        if (s.alpha_bar[t] >= s.alpha_bar[t - 1])
            s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - 1e-9);
    return s;
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.total_steps)
        throw std::invalid_argument("forward_noise: t out of [1,T]");
    if (!z0.same_shape(eps)) throw std::invalid_argument("forward_noise: shape mismatch");
    double ab = schedule.at(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out(z0.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = sa * z0.v[i] + sb * eps.v[i];
    return out;
}

Tensor reimpose_known(const Tensor& z_t, const Tensor& z0, const Tensor& mask_latent) {
    if (!z_t.same_shape(z0)) throw std::invalid_argument("reimpose_known: shape mismatch");
    if (z_t.rank() != 4 || mask_latent.rank() != 2 || mask_latent.dim(0) != z_t.dim(2) ||
        mask_latent.dim(1) != z_t.dim(3))
        throw std::invalid_argument("reimpose_known: mask must be [h,w] at latent resolution");
    int n = z_t.dim(0), c = z_t.dim(1), h = z_t.dim(2), w = z_t.dim(3);
    Tensor out(z_t.shape);
    for (int f = 0; f < n; ++f)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double m = mask_latent.at2(y, x);
                    out.at4(f, ci, y, x) =
                        z0.at4(f, ci, y, x) * (1.0 - m) + z_t.at4(f, ci, y, x) * m;
                }
    return out;
}

double ldm_loss(const Tensor& eps_true, const Tensor& eps_pred) {
    if (!eps_true.same_shape(eps_pred)) throw std::invalid_argument("ldm_loss: shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < eps_true.numel(); ++i) {
        double d = eps_true.v[i] - eps_pred.v[i];
        acc += d * d;
    }
    return acc / (double)eps_true.numel();
}

LcfResult lcf_loss(const Tensor& eps_true, const Tensor& eps_pred,
                   const Tensor& coarse_mask_latent, bool normalize_by_mask) {
    if (!eps_true.same_shape(eps_pred)) throw std::invalid_argument("lcf_loss: shape mismatch");
    if (eps_true.rank() != 4 || coarse_mask_latent.rank() != 3 ||
        coarse_mask_latent.dim(0) != eps_true.dim(0) ||
        coarse_mask_latent.dim(1) != eps_true.dim(2) ||
        coarse_mask_latent.dim(2) != eps_true.dim(3))
        throw std::invalid_argument("lcf_loss: masks must be per-frame at latent resolution");
    int n = eps_true.dim(0), c = eps_true.dim(1), h = eps_true.dim(2), w = eps_true.dim(3);
    double acc = 0, mass = 0;
    for (int f = 0; f < n; ++f)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double m = coarse_mask_latent.at3(f, y, x);
                    double d = eps_true.at4(f, ci, y, x) - eps_pred.at4(f, ci, y, x);
                    acc += d * d * m;
                    mass += m;
                }
    LcfResult r;
    if (mass <= 0) {
        r.degenerate_mask = true;
        r.value = 0.0;
        return r;
    }
    r.value = acc / (normalize_by_mask ? mass : (double)eps_true.numel());
    return r;
}

double total_loss(const Tensor& eps_true, const Tensor& eps_pred,
                  const Tensor& coarse_mask_latent, bool normalize_by_mask) {
    return ldm_loss(eps_true, eps_pred) +
           lcf_loss(eps_true, eps_pred, coarse_mask_latent, normalize_by_mask).value;
}

Tensor cfg_predict(const EpsFn& eps_fn, const ConditionBundle& conds, double lambda_a,
                   double lambda_h, int* eval_count) {
    ConditionBundle null_null;
    null_null.audio = Tensor(conds.audio.shape);
    null_null.habit = Tensor(conds.habit.shape);
    null_null.audio_dropped = true;
    null_null.habit_dropped = true;
    ConditionBundle audio_null = conds;
    audio_null.habit = Tensor(conds.habit.shape);
    audio_null.habit_dropped = true;

    Tensor e_uu = eps_fn(null_null);
    Tensor e_au = eps_fn(audio_null);
    Tensor e_ah = eps_fn(conds);
    if (eval_count) *eval_count = 3;

    double w_uu = 1.0 - lambda_a;
    double w_au = lambda_a - lambda_h;
    double w_ah = lambda_h;
    Tensor out(e_uu.shape);
    auto axpy = [&](double wgt, const Tensor& e) {
        if (wgt == 0.0) return;
        for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += wgt * e.v[i];
    };
    axpy(w_uu, e_uu);
    axpy(w_au, e_au);
    axpy(w_ah, e_ah);
    return out;
}

Tensor sample_latents(const NoiseSchedule& schedule, const SamplerConfig& cfg,
                      const Tensor& z0_known, const Tensor& union_mask_latent, const Tensor& z_app,
                      const GuidedEps& guided_eps, const Tensor* init_state) {
    if (cfg.num_steps < 1 || cfg.num_steps > schedule.total_steps)
        throw std::invalid_argument("sample_latents: num_steps out of range");
    int t_max = schedule.total_steps;

    Tensor z(z0_known.shape);
    if (init_state) {
        if (!init_state->same_shape(z0_known))
            throw std::invalid_argument("sample_latents: bad init state shape");
        z = *init_state;
    } else {
        Rng rng(cfg.seed ^ 0x5A3D5A3DULL);
        for (auto& x : z.v) x = rng.gaussian();
    }

    std::vector<int> steps(cfg.num_steps);
    for (int i = 0; i < cfg.num_steps; ++i)
        steps[i] = std::max(1, (int)std::llround((double)t_max * (cfg.num_steps - i) /
                                                 cfg.num_steps));
    for (int i = 0; i < cfg.num_steps; ++i) {
        int t = steps[i];
        int t_prev = i + 1 < cfg.num_steps ? steps[i + 1] : 0;
        Tensor zbar = assemble_input(z, z0_known, union_mask_latent, z_app);
        Tensor eps = guided_eps(zbar, t);
        double ab = schedule.at(t), ab_prev = schedule.at(t_prev);
        double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        double sap = std::sqrt(ab_prev), sbp = std::sqrt(1.0 - ab_prev);
        for (int64_t k = 0; k < z.numel(); ++k) {
            double x0 = (z.v[k] - sb * eps.v[k]) / sa;
            z.v[k] = sap * x0 + sbp * eps.v[k];
        }
    }
    return reimpose_known(z, z0_known, union_mask_latent);
}

}  // namespace minidub
