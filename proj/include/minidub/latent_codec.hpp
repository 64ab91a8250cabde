#pragma once

#include <string>

#include "minidub/autograd.hpp"
#include "minidub/params.hpp"
#include "minidub/tensor.hpp"

namespace minidub {

// Small deterministic convolutional autoencoder: image [0,1] -> latent at
// 1/4 resolution and back. Latents are normalized per channel to roughly
// unit scale after training so the diffusion side sees well-scaled inputs.
struct CodecConfig {
    int image_size = 64;
    int factor = 4;
    int latent_channels = 4;
    int enc_width1 = 16, enc_width2 = 32;
    int dec_width1 = 32, dec_width2 = 12;
    uint64_t init_seed = 1;
};

struct CodecTrainConfig {
    int steps = 2200;
    int batch = 3;
    double lr = 2e-3;
    uint64_t seed = 1;
    double holdout_frac = 0.1;
    double target_mse = 2e-3;  // frozen acceptance threshold on held-out frames
};

struct CodecTrainStats {
    double final_train_loss = 0;
    double holdout_mse = 0;
    int steps = 0;
};

class LatentCodec {
public:
    explicit LatentCodec(const CodecConfig& cfg);

    Tensor encode(const Tensor& image) const;          // [3,h,w] -> [c_z,h/f,w/f]
    Tensor decode(const Tensor& latent) const;         // inverse
    Tensor encode_frames(const Tensor& frames) const;  // [N,3,h,w] -> [N,c_z,h/f,w/f]
    Tensor decode_frames(const Tensor& latents) const;

    ad::Var encode_graph(ad::Graph& g, const std::vector<ad::Var>& bound, ad::Var images) const;
    ad::Var decode_graph(ad::Graph& g, const std::vector<ad::Var>& bound, ad::Var latents) const;

    const CodecConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const CodecTrainStats& stats() const { return stats_; }

    void save(const std::string& path_prefix) const;  // writes .mdub and .json
    static LatentCodec load(const std::string& path_prefix);

    friend CodecTrainStats train_codec(LatentCodec& codec, const Tensor& frames,
                                       const CodecTrainConfig& cfg);

private:
    CodecConfig cfg_;
    ParamStore store_;
    Tensor latent_shift_, latent_scale_;  // per-channel affine applied after the encoder
    CodecTrainStats stats_;

    int p(const std::string& name) const { return store_.index_of(name); }
};

// Reconstruction training on a frame corpus [M,3,h,w]; the last
// holdout_frac of frames is held out for the reconstruction-error gate.
// Throws TrainingFailure (with the final loss) if the gate is missed.
CodecTrainStats train_codec(LatentCodec& codec, const Tensor& frames, const CodecTrainConfig& cfg);

// area-average pooling of a pixel mask to latent resolution
Tensor mask_to_latent(const Tensor& mask, int factor);

}  // namespace minidub
