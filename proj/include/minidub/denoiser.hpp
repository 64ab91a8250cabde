#pragma once

#include <string>
#include <vector>

#include "minidub/autograd.hpp"
#include "minidub/conditioning.hpp"
#include "minidub/params.hpp"

namespace minidub {

struct DenoiserConfig {
    int latent_channels = 4;  // per-frame input is 2x this (noisy mix ++ appearance)
    int latent_size = 16;
    std::vector<int> widths = {64, 128, 256};
    int blocks_per_res = 2;
    int state_dim = 16;
    int cond_channels = 64;  // must match the conditioning module width
    int time_dim = 64;
    int groups = 8;
    int audio_window = 1;    // each frame attends tokens [f-w, f+w]; -1 = all tokens
    int total_timesteps = 1000;
    bool use_temporal = true;
    bool attention_blocks = false;  // ablation: self-attention instead of the scan blocks
    uint64_t init_seed = 1;
};

// noisy-mix latents concatenated with the appearance latent, per frame
Tensor assemble_input(const Tensor& z_t, const Tensor& z0, const Tensor& union_mask_latent,
                      const Tensor& z_app);

// U-Net over per-frame latents. Every block runs, in order, a conv residual
// stage, a bidirectional spatial scan over the h*w tokens of each frame, a
// per-frame audio cross-attention against the modulated audio tokens, and a
// bidirectional temporal scan across frames at each spatial location. The
// cross-attention and scan output projections start at zero, so conditioning
// and sequence mixing are exact no-ops until trained.
class DenoiserNet {
public:
    explicit DenoiserNet(const DenoiserConfig& cfg);

    struct Options {
        bool audio = true;     // no-op skip is exact only while the zero-init
        bool temporal = true;  // projections of those blocks remain untrained
    };

    // zbar [N, 2*c_z, h, w]; f_mod [N, cond_channels] (ignored when !audio)
    ad::Var forward(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var zbar, int timestep,
                    ad::Var f_mod, const Options& opt) const;

    Tensor predict(const Tensor& zbar, int timestep, const Tensor& f_mod,
                   const Options& opt) const;

    // single named stages (block id like "d0.b0"), the same code paths the
    // U-Net composes
    ad::Var spatial_block(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x,
                          const std::string& block) const;
    ad::Var temporal_block(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x,
                           const std::string& block) const;
    ad::Var audio_xattn_block(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x, ad::Var f_mod,
                              const std::string& block) const;

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

private:
    DenoiserConfig cfg_;
    ParamStore store_;

    int p(const std::string& name) const { return store_.index_of(name); }
    ad::Var res_stage(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x, ad::Var temb,
                      const std::string& prefix, int in_ch, int out_ch) const;
    ad::Var seq_mix_stage(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x,
                          const std::string& prefix, bool temporal) const;
    ad::Var xattn_stage(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x, ad::Var f_mod,
                        const std::string& prefix) const;
    ad::Var block(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var x, ad::Var temb,
                  ad::Var f_mod, const std::string& prefix, int in_ch, int out_ch,
                  const Options& opt) const;
    int norm_groups(int ch) const;
};

// denoiser + conditioning glued per the module boundary: the bundle holds
// encoded (or null) conditions, modulation happens here
Tensor denoise_predict(const DenoiserNet& net, const Conditioning& cond, const Tensor& zbar,
                       int timestep, const ConditionBundle& bundle,
                       const DenoiserNet::Options& opt, bool habit_modulation = true);

Tensor sinusoidal_embedding(double t, int dim);

// complexity harness: exact arithmetic-op counts of one sequence-mixing
// block forward at the given token count
uint64_t measure_ssm_block_ops(int tokens, int ch, int state_dim, uint64_t seed);
uint64_t measure_attention_block_ops(int tokens, int ch, uint64_t seed);

}  // namespace minidub
