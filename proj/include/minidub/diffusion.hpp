#pragma once

#include <functional>

#include "minidub/conditioning.hpp"
#include "minidub/rng.hpp"
#include "minidub/tensor.hpp"

namespace minidub {

struct NoiseSchedule {
    enum class Beta { Linear, Cosine };
    int total_steps = 1000;
    Beta tag = Beta::Cosine;
    std::vector<double> alpha_bar;  // alpha_bar[0] = 1 sentinel, then 1..T strictly decreasing

    double at(int t) const {
        if (t < 0 || t > total_steps) throw std::invalid_argument("schedule: t out of range");
        return alpha_bar[t];
    }
};

NoiseSchedule make_schedule(int total_steps, NoiseSchedule::Beta tag);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// known region (mask 0) kept from z0, synthesis region (mask 1) from z_t;
// used by the trainer's input assembly and by every sampler step
Tensor reimpose_known(const Tensor& z_t, const Tensor& z0, const Tensor& mask_latent);

double ldm_loss(const Tensor& eps_true, const Tensor& eps_pred);

struct LcfResult {
    double value = 0;
    bool degenerate_mask = false;  // all-zero mask
};
// masked squared error; per-frame latent masks [N,h,w] broadcast over
// channels. Default denominator is the full element count so the sum with
// the plain loss stays stable as mask area varies; mask-mass normalization
// sits behind the flag.
LcfResult lcf_loss(const Tensor& eps_true, const Tensor& eps_pred, const Tensor& coarse_mask_latent,
                   bool normalize_by_mask = false);

double total_loss(const Tensor& eps_true, const Tensor& eps_pred,
                  const Tensor& coarse_mask_latent, bool normalize_by_mask = false);

// Two-scale guidance combining three predictions:
//   eps(null,null) + la * (eps(a,null) - eps(null,null)) + lh * (eps(a,h) - eps(a,null))
// evaluated as the algebraically identical weighted sum
//   (1-la) eps(null,null) + (la-lh) eps(a,null) + lh eps(a,h)
// with exact-zero weights skipped, so the telescoped special cases hold
// bit-exactly. Always issues exactly three denoiser evaluations.
using EpsFn = std::function<Tensor(const ConditionBundle&)>;
Tensor cfg_predict(const EpsFn& eps_fn, const ConditionBundle& conds, double lambda_a,
                   double lambda_h, int* eval_count = nullptr);

struct SamplerConfig {
    int num_steps = 50;
    double lambda_a = 2.0;
    double lambda_h = 1.5;
    double eta = 0.0;  // deterministic
    uint64_t seed = 0;
};

// Deterministic DDIM-style sampler over a strided subset of timesteps. The
// model callable receives the assembled per-frame input (known region clean,
// synthesis region at the current noise level, appearance concatenated).
using GuidedEps = std::function<Tensor(const Tensor& zbar, int t)>;
Tensor sample_latents(const NoiseSchedule& schedule, const SamplerConfig& cfg,
                      const Tensor& z0_known, const Tensor& union_mask_latent, const Tensor& z_app,
                      const GuidedEps& guided_eps, const Tensor* init_state = nullptr);

}  // namespace minidub
