#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minidub/conditioning.hpp"
#include "minidub/denoiser.hpp"
#include "minidub/diffusion.hpp"
#include "minidub/latent_codec.hpp"
#include "minidub/mask_pipeline.hpp"
#include "minidub/toy_data.hpp"

namespace minidub {

struct CorpusConfig {
    int speakers = 4;
    int pool = 256;           // cached training samples
    bool occluders = false;
    double occluder_prob = 0.7;
    uint64_t seed = 77;
};

struct ModelConfig {
    std::vector<int> widths = {64, 128, 256};
    int blocks_per_res = 2;
    int state_dim = 16;
    int cond_channels = 64;
    int time_dim = 64;
    int audio_window = 1;
    bool use_temporal = true;
    bool attention_blocks = false;
    bool habit_modulation = true;
};

struct RunConfig {
    int stage = 1;
    uint64_t seed = 1234;
    int steps = 10000;
    int batch_size = 1;
    int clip_frames = 8;   // generation segment length N (forced to 1 in stage 1)
    int habit_frames = 8;  // K
    double lr = 1e-4;
    int warmup_steps = 500;
    double dropout_p = 0.1;
    int image_size = 64;
    bool exposure_enabled = true;
    ExposureSchedule exposure;  // total_steps filled from `steps`
    MaskPipelineConfig mask;
    CorpusConfig corpus;
    ModelConfig model;
    int diffusion_steps = 1000;
    std::string beta_schedule = "cosine";
    bool lcf_normalize_by_mask = false;
    std::string codec_path;   // prefix of codec .mdub/.json
    std::string stage1_path;  // stage 2 only
    std::string out_dir = "run_out";
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
uint64_t run_config_hash(const RunConfig& cfg);    // full-run identity (resume check)
uint64_t model_config_hash(const RunConfig& cfg);  // architecture identity (stage handoff)

// deterministic corpus views: pool clips (train) and held-out clips
ToyClip corpus_clip(const CorpusConfig& corpus, int image_size, int frames, int index,
                    bool heldout);

struct TrainSample {
    Tensor z0;           // [N, c_z, hz, wz]
    Tensor z_app;        // [c_z, hz, wz]
    Tensor audio_feats;  // [N, d]
    Tensor habit_crops;  // [K, 3, ch, cw]
    Tensor union_pixel;  // [h, w]
    Tensor coarse_lat;   // [N, hz, wz]
    int speaker = 0;
};

class Trainer {
public:
    Trainer(const RunConfig& cfg);  // loads the codec, builds models and the sample pool
    void init_stage2_from(const std::string& stage1_prefix);
    void resume_from(const std::string& ckpt_prefix);

    // run remaining steps (all of them, or at most max_new_steps), appending
    // metrics to out_dir/metrics.csv
    void train(int max_new_steps = -1);
    void save_checkpoint(const std::string& prefix) const;

    int64_t step() const { return step_; }
    const RunConfig& config() const { return cfg_; }
    DenoiserNet& denoiser() { return *net_; }
    Conditioning& conditioning() { return *cond_; }
    const LatentCodec& codec() const { return *codec_; }
    const std::vector<TrainSample>& pool() const { return pool_; }
    double last_loss() const { return last_loss_; }

private:
    RunConfig cfg_;
    std::unique_ptr<LatentCodec> codec_;
    std::unique_ptr<DenoiserNet> net_;
    std::unique_ptr<Conditioning> cond_;
    NoiseSchedule schedule_;
    std::vector<TrainSample> pool_;
    int64_t step_ = 0;
    double last_loss_ = 0;
    Rng rng_data_, rng_noise_, rng_t_, rng_drop_, rng_expose_;

    void build_pool();
    double train_step(std::string* csv_row);
    bool trainable_param(const Param& p) const;
};

// checkpoint manifest info (group tags, hashes) without loading tensors
struct CheckpointManifest {
    int stage = 0;
    int64_t step = 0;
    uint64_t run_hash = 0, model_hash = 0;
    std::string config_json;
};
CheckpointManifest read_manifest(const std::string& prefix);

// frozen inference bundle: codec + conditioning + denoiser + schedule
class DubPipeline {
public:
    DubPipeline(const std::string& ckpt_prefix, const std::string& codec_prefix);

    struct Result {
        Tensor frames;       // [N,3,h,w] clamped to [0,1]
        Tensor latents;      // [N,c_z,hz,wz]
        Tensor union_pixel;  // inference union mask
        std::string manifest_json;
    };
    Result generate(const ToyClip& input, const AudioTrack& driving, const SamplerConfig& sampler,
                    uint64_t seed, int habit_k) const;

    // habit embedding of a clip (mean-pooled crops), inference sampling
    Tensor habit_embedding(const ToyClip& clip, int k, uint64_t seed) const;

    const RunConfig& run_config() const { return cfg_; }
    const LatentCodec& codec() const { return *codec_; }
    const DenoiserNet& denoiser() const { return *net_; }
    const Conditioning& conditioning() const { return *cond_; }
    DenoiserNet::Options options() const;
    uint64_t checkpoint_hash() const { return ckpt_hash_; }

private:
    RunConfig cfg_;
    std::unique_ptr<LatentCodec> codec_;
    std::unique_ptr<DenoiserNet> net_;
    std::unique_ptr<Conditioning> cond_;
    NoiseSchedule schedule_;
    uint64_t ckpt_hash_ = 0;
};

}  // namespace minidub
