#pragma once

#include <vector>

#include "minidub/autograd.hpp"
#include "minidub/params.hpp"
#include "minidub/toy_data.hpp"

namespace minidub {

// Audio tokens and the habit vector after encoding; either side may be the
// null embedding (zeros by default) with its flag set.
struct ConditionBundle {
    Tensor audio;  // [N, C] or null embedding of the same shape
    Tensor habit;  // [C]
    bool audio_dropped = false;
    bool habit_dropped = false;
};

ConditionBundle drop_conditions(const ConditionBundle& bundle, double p, uint64_t seed);

// K frame indices outside [exclude_lo, exclude_hi) chosen without
// replacement, shuffled. Embeddings are pooling-invariant to order, so the
// shuffle carries no information; it mirrors how segments are drawn at
// inference time.
std::vector<int> sample_habit_indices(int video_frames, int k, int exclude_lo, int exclude_hi,
                                      uint64_t seed);
Tensor gather_mouth_crops(const ToyClip& clip, const std::vector<int>& indices);

struct ConditioningConfig {
    int audio_feat_dim = kAudioFeatureDim;
    int channels = 24;      // token and habit embedding width
    int crop_size = 32;     // mouth crop side (frame_size / 2)
    int habit_width1 = 12;
    int habit_width2 = 24;
    double adaln_eps = 1e-5;
    uint64_t init_seed = 1;
};

// Temporal-conv audio encoder, conv habit encoder with mean pooling, AdaLN
// modulation with a learnable residual, and the output projection feeding
// the denoiser's cross-attention.
class Conditioning {
public:
    explicit Conditioning(const ConditioningConfig& cfg);

    ad::Var encode_audio(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var features) const;
    ad::Var encode_habit(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var crops) const;
    // AdaLN(a, v) + lambda ⊙ a
    ad::Var modulate(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var audio_tokens,
                     ad::Var habit_vec) const;
    // full module output: out_proj(modulate(a, v)); with habit modulation
    // disabled (ablation) the tokens skip straight to the projection
    ad::Var modulated_audio(ad::Graph& g, const std::vector<ad::Var>& b, ad::Var audio_tokens,
                            ad::Var habit_vec, bool habit_modulation = true) const;

    // convenience non-graph forwards (frozen params)
    Tensor encode_audio_tensor(const Tensor& features) const;
    Tensor encode_habit_tensor(const Tensor& crops) const;

    const ConditioningConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

private:
    ConditioningConfig cfg_;
    ParamStore store_;

    int p(const std::string& name) const { return store_.index_of(name); }
};

}  // namespace minidub
