#include "minidub/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace minidub {

namespace fs = std::filesystem;
using ad::Graph;
using ad::Var;
using nlohmann::json;

namespace {

json model_json(const ModelConfig& m) {
    json j;
    j["widths"] = m.widths;
    j["blocks_per_res"] = m.blocks_per_res;
    j["state_dim"] = m.state_dim;
    j["cond_channels"] = m.cond_channels;
    j["time_dim"] = m.time_dim;
    j["audio_window"] = m.audio_window;
    j["use_temporal"] = m.use_temporal;
    j["attention_blocks"] = m.attention_blocks;
    j["habit_modulation"] = m.habit_modulation;
    return j;
}

json config_json(const RunConfig& c) {
    json j;
    j["stage"] = c.stage;
    j["seed"] = c.seed;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["clip_frames"] = c.clip_frames;
    j["habit_frames"] = c.habit_frames;
    j["lr"] = c.lr;
    j["warmup_steps"] = c.warmup_steps;
    j["dropout_p"] = c.dropout_p;
    j["image_size"] = c.image_size;
    j["exposure"] = {{"enabled", c.exposure_enabled},
                     {"start_rate", c.exposure.start_rate},
                     {"end_rate", c.exposure.end_rate},
                     {"shape", c.exposure.shape == ExposureSchedule::Shape::Linear ? "linear"
                                                                                   : "cosine"}};
    j["mask"] = {{"coarsen_radius", c.mask.coarsen_radius},
                 {"expand_frac", c.mask.expand_frac},
                 {"blur_radius", c.mask.blur_radius},
                 {"patch_size", c.mask.patch_size}};
    j["corpus"] = {{"speakers", c.corpus.speakers},
                   {"pool", c.corpus.pool},
                   {"occluders", c.corpus.occluders},
                   {"occluder_prob", c.corpus.occluder_prob},
                   {"seed", c.corpus.seed}};
    j["model"] = model_json(c.model);
    j["diffusion"] = {{"T", c.diffusion_steps}, {"schedule", c.beta_schedule}};
    j["lcf_normalize_by_mask"] = c.lcf_normalize_by_mask;
    j["codec"] = c.codec_path;
    j["stage1"] = c.stage1_path;
    j["out_dir"] = c.out_dir;
    return j;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) { return config_json(cfg).dump(2); }

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("bad run config JSON: ") + e.what());
    }
    RunConfig c;
    try {
        c.stage = j.value("stage", c.stage);
        c.seed = j.value("seed", c.seed);
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.clip_frames = j.value("clip_frames", c.clip_frames);
        c.habit_frames = j.value("habit_frames", c.habit_frames);
        c.lr = j.value("lr", c.lr);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.dropout_p = j.value("dropout_p", c.dropout_p);
        c.image_size = j.value("image_size", c.image_size);
        if (j.contains("exposure")) {
            const json& e = j["exposure"];
            c.exposure_enabled = e.value("enabled", true);
            c.exposure.start_rate = e.value("start_rate", 0.70);
            c.exposure.end_rate = e.value("end_rate", 0.0);
            c.exposure.shape = e.value("shape", "linear") == std::string("cosine")
                                   ? ExposureSchedule::Shape::Cosine
                                   : ExposureSchedule::Shape::Linear;
        }
        if (j.contains("mask")) {
            const json& m = j["mask"];
            c.mask.coarsen_radius = m.value("coarsen_radius", 3);
            c.mask.expand_frac = m.value("expand_frac", 0.25);
            c.mask.blur_radius = m.value("blur_radius", 2);
            c.mask.patch_size = m.value("patch_size", 8);
        }
        if (j.contains("corpus")) {
            const json& k = j["corpus"];
            c.corpus.speakers = k.value("speakers", 4);
            c.corpus.pool = k.value("pool", 256);
            c.corpus.occluders = k.value("occluders", false);
            c.corpus.occluder_prob = k.value("occluder_prob", 0.7);
            c.corpus.seed = k.value("seed", (uint64_t)77);
        }
        if (j.contains("model")) {
            const json& m = j["model"];
            c.model.widths = m.value("widths", c.model.widths);
            c.model.blocks_per_res = m.value("blocks_per_res", c.model.blocks_per_res);
            c.model.state_dim = m.value("state_dim", c.model.state_dim);
            c.model.cond_channels = m.value("cond_channels", c.model.cond_channels);
            c.model.time_dim = m.value("time_dim", c.model.time_dim);
            c.model.audio_window = m.value("audio_window", c.model.audio_window);
            c.model.use_temporal = m.value("use_temporal", true);
            c.model.attention_blocks = m.value("attention_blocks", false);
            c.model.habit_modulation = m.value("habit_modulation", true);
        }
        if (j.contains("diffusion")) {
            c.diffusion_steps = j["diffusion"].value("T", 1000);
            c.beta_schedule = j["diffusion"].value("schedule", "cosine");
        }
        c.lcf_normalize_by_mask = j.value("lcf_normalize_by_mask", false);
        c.codec_path = j.value("codec", std::string());
        c.stage1_path = j.value("stage1", std::string());
        c.out_dir = j.value("out_dir", std::string("run_out"));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad run config value: ") + e.what());
    }
    return c;
}

uint64_t run_config_hash(const RunConfig& cfg) {
    json j = config_json(cfg);
    j.erase("out_dir");  // where outputs land does not change the run identity
    std::string s = j.dump();
    return fnv1a64(s.data(), s.size());
}

uint64_t model_config_hash(const RunConfig& cfg) {
    // architecture identity only: flags that do not change the parameter set
    // (use_temporal, habit_modulation, audio_window) stay out so runtime
    // ablations can share stage-1 checkpoints
    json j;
    j["widths"] = cfg.model.widths;
    j["blocks_per_res"] = cfg.model.blocks_per_res;
    j["state_dim"] = cfg.model.state_dim;
    j["cond_channels"] = cfg.model.cond_channels;
    j["time_dim"] = cfg.model.time_dim;
    j["attention_blocks"] = cfg.model.attention_blocks;
    j["image_size"] = cfg.image_size;
    j["diffusion"] = {{"T", cfg.diffusion_steps}, {"schedule", cfg.beta_schedule}};
    std::string s = j.dump();
    return fnv1a64(s.data(), s.size());
}

ToyClip corpus_clip(const CorpusConfig& corpus, int image_size, int frames, int index,
                    bool heldout) {
    auto bank = default_speaker_bank(corpus.speakers, corpus.seed);
    int speaker = index % corpus.speakers;
    uint64_t base = corpus.seed * 1000003ULL + (uint64_t)index * 101ULL +
                    (heldout ? 0x48454C44ULL : 0);
    AudioTrack audio = synth_audio(frames, (int)(base & 0x7fffffff));
    std::optional<OccluderSpec> occ;
    if (corpus.occluders) {
        Rng orng(base ^ 0x0CCF00DULL);
        if (orng.uniform() < corpus.occluder_prob)
            occ = default_bar_occluder(image_size, frames, orng.next_u64());
    }
    return render_clip(bank[speaker], audio, occ, image_size);
}

Trainer::Trainer(const RunConfig& cfg) : cfg_(cfg) {
    if (cfg_.stage != 1 && cfg_.stage != 2) throw ConfigError("stage must be 1 or 2");
    if (cfg_.stage == 1) cfg_.clip_frames = 1;  // single-frame training
    if (cfg_.codec_path.empty()) throw ConfigError("missing codec checkpoint path");
    if (!fs::exists(cfg_.codec_path + ".mdub"))
        throw ConfigError("codec checkpoint not found: " + cfg_.codec_path);
    codec_ = std::make_unique<LatentCodec>(LatentCodec::load(cfg_.codec_path));

    DenoiserConfig dc;
    dc.latent_channels = codec_->config().latent_channels;
    dc.latent_size = cfg_.image_size / codec_->config().factor;
    dc.widths = cfg_.model.widths;
    dc.blocks_per_res = cfg_.model.blocks_per_res;
    dc.state_dim = cfg_.model.state_dim;
    dc.cond_channels = cfg_.model.cond_channels;
    dc.time_dim = cfg_.model.time_dim;
    dc.audio_window = cfg_.model.audio_window;
    dc.total_timesteps = cfg_.diffusion_steps;
    dc.use_temporal = cfg_.model.use_temporal;
    dc.attention_blocks = cfg_.model.attention_blocks;
    dc.init_seed = cfg_.seed * 7 + 1;
    net_ = std::make_unique<DenoiserNet>(dc);

    ConditioningConfig cc;
    cc.channels = cfg_.model.cond_channels;
    cc.crop_size = cfg_.image_size / 2;
    cc.init_seed = cfg_.seed * 7 + 2;
    cond_ = std::make_unique<Conditioning>(cc);

    schedule_ = make_schedule(cfg_.diffusion_steps, cfg_.beta_schedule == "linear"
                                                        ? NoiseSchedule::Beta::Linear
                                                        : NoiseSchedule::Beta::Cosine);
    cfg_.exposure.total_steps = std::max(1, cfg_.steps - 1);

    rng_data_ = Rng(cfg_.seed).fork(1);
    rng_noise_ = Rng(cfg_.seed).fork(2);
    rng_t_ = Rng(cfg_.seed).fork(3);
    rng_drop_ = Rng(cfg_.seed).fork(4);
    rng_expose_ = Rng(cfg_.seed).fork(5);

    build_pool();
}

void Trainer::build_pool() {
    int n = cfg_.clip_frames;
    int k = cfg_.habit_frames;
    int total_frames = cfg_.stage == 1 ? 2 : n + k;
    int f = codec_->config().factor;
    pool_.reserve(cfg_.corpus.pool);
    for (int i = 0; i < cfg_.corpus.pool; ++i) {
        ToyClip clip = corpus_clip(cfg_.corpus, cfg_.image_size, total_frames, i, false);
        TrainSample s;
        s.speaker = i % cfg_.corpus.speakers;
        int gen0 = cfg_.stage == 1 ? 1 : k;  // generation segment start
        int gen_len = cfg_.stage == 1 ? 1 : n;

        Tensor gen_frames({gen_len, 3, cfg_.image_size, cfg_.image_size});
        Tensor gen_lms({gen_len, kNumLandmarks, 2});
        int64_t fsz = (int64_t)3 * cfg_.image_size * cfg_.image_size;
        for (int t = 0; t < gen_len; ++t) {
            std::copy(clip.frames.v.begin() + (gen0 + t) * fsz,
                      clip.frames.v.begin() + (gen0 + t + 1) * fsz,
                      gen_frames.v.begin() + t * fsz);
            for (int l = 0; l < kNumLandmarks; ++l) {
                gen_lms.at3(t, l, 0) = clip.landmarks.at3(gen0 + t, l, 0);
                gen_lms.at3(t, l, 1) = clip.landmarks.at3(gen0 + t, l, 1);
            }
        }
        s.z0 = codec_->encode_frames(gen_frames);

        Rng pick(cfg_.corpus.seed * 31ULL + (uint64_t)i * 17ULL + 0xA99ULL);
        int app_idx = (int)pick.below((uint64_t)gen0);  // appearance outside the gen segment
        Tensor app({3, cfg_.image_size, cfg_.image_size});
        std::copy(clip.frames.v.begin() + app_idx * fsz, clip.frames.v.begin() + (app_idx + 1) * fsz,
                  app.v.begin());
        s.z_app = codec_->encode(app);

        if (cfg_.stage == 2) {
            s.audio_feats = Tensor({gen_len, kAudioFeatureDim});
            for (int t = 0; t < gen_len; ++t)
                for (int d = 0; d < kAudioFeatureDim; ++d)
                    s.audio_feats.at2(t, d) = clip.audio.features.at2(gen0 + t, d);
            auto habit_idx =
                sample_habit_indices(total_frames, k, gen0, gen0 + gen_len, pick.next_u64());
            s.habit_crops = gather_mouth_crops(clip, habit_idx);
        }

        MaskSet masks = build_mask_set(gen_lms, cfg_.image_size, cfg_.mask);
        s.union_pixel = masks.union_mask.values;
        s.coarse_lat = Tensor({gen_len, cfg_.image_size / f, cfg_.image_size / f});
        for (int t = 0; t < gen_len; ++t) {
            Tensor cl = mask_to_latent(masks.coarse[t].values, f);
            std::copy(cl.v.begin(), cl.v.end(),
                      s.coarse_lat.v.begin() + (int64_t)t * cl.numel());
        }
        pool_.push_back(std::move(s));
    }
}

bool Trainer::trainable_param(const Param& p) const {
    if (cfg_.stage == 1)
        return p.group == ParamGroup::Spatial || p.group == ParamGroup::Shared;
    return p.group == ParamGroup::Temporal || p.group == ParamGroup::AudioXAttn ||
           p.group == ParamGroup::Conditioning;
}

double Trainer::train_step(std::string* csv_row) {
    int f = codec_->config().factor;
    int hz = cfg_.image_size / f;
    int cz = codec_->config().latent_channels;
    int n = cfg_.clip_frames;
    int cond_ch = cfg_.model.cond_channels;
    auto trainable = [this](const Param& p) { return trainable_param(p); };

    double rate = 0.0;
    if (cfg_.exposure_enabled)
        rate = exposure_rate((int)std::min<int64_t>(step_, cfg_.exposure.total_steps),
                             cfg_.exposure);

    std::vector<Tensor> den_acc(net_->params().size());
    std::vector<Tensor> cond_acc(cond_->params().size());
    std::vector<bool> den_has(net_->params().size(), false);
    std::vector<bool> cond_has(cond_->params().size(), false);
    double sum_ldm = 0, sum_lcf = 0, sum_da = 0, sum_dh = 0;
    double inv_b = 1.0 / cfg_.batch_size;

    for (int bi = 0; bi < cfg_.batch_size; ++bi) {
        const TrainSample& s = pool_[rng_data_.below(pool_.size())];
        int t = 1 + (int)rng_t_.below((uint64_t)cfg_.diffusion_steps);
        bool drop_a = rng_drop_.uniform() < cfg_.dropout_p;
        bool drop_h = rng_drop_.uniform() < cfg_.dropout_p;

        MaskFrame umask;
        umask.values = s.union_pixel;
        umask.kind = MaskFrame::Kind::Union;
        ExposurePattern pat = expose(umask, rate, cfg_.mask.patch_size, rng_expose_.next_u64());
        Tensor m_eff = mask_to_latent(apply_exposure(umask, pat).values, f);

        Tensor eps(s.z0.shape);
        for (auto& x : eps.v) x = rng_noise_.gaussian();
        // noise lives only in the working mask; the known region stays clean
        Tensor target(s.z0.shape);
        for (int fr = 0; fr < n; ++fr)
            for (int c = 0; c < cz; ++c)
                for (int y = 0; y < hz; ++y)
                    for (int x = 0; x < hz; ++x)
                        target.at4(fr, c, y, x) = eps.at4(fr, c, y, x) * m_eff.at2(y, x);
        Tensor z_t = forward_noise(s.z0, t, eps, schedule_);
        Tensor zbar = assemble_input(z_t, s.z0, m_eff, s.z_app);

        Graph g;
        auto bd = net_->params().bind(g, trainable);
        auto bc = cond_->params().bind(g, trainable);
        DenoiserNet::Options opt;
        opt.audio = cfg_.stage == 2;
        opt.temporal = cfg_.stage == 2 && cfg_.model.use_temporal;

        Var f_mod;
        if (opt.audio) {
            Var a = drop_a ? g.leaf(Tensor({n, cond_ch}))
                           : cond_->encode_audio(g, bc, g.leaf(s.audio_feats));
            Var v = (drop_h || !cfg_.model.habit_modulation)
                        ? g.leaf(Tensor({cond_ch}))
                        : cond_->encode_habit(g, bc, g.leaf(s.habit_crops));
            f_mod = cond_->modulated_audio(g, bc, a, v, cfg_.model.habit_modulation);
        }
        Var eps_hat = net_->forward(g, bd, g.leaf(zbar), t, f_mod, opt);
        Var target_v = g.leaf(target);
        Var l_ldm = g.mse(eps_hat, target_v);
        Tensor mc4({n, cz, hz, hz});
        for (int fr = 0; fr < n; ++fr)
            for (int c = 0; c < cz; ++c)
                for (int y = 0; y < hz; ++y)
                    for (int x = 0; x < hz; ++x) mc4.at4(fr, c, y, x) = s.coarse_lat.at3(fr, y, x);
        Var l_lcf = g.masked_mse(eps_hat, target_v, mc4, cfg_.lcf_normalize_by_mask);
        Var loss = g.add(l_ldm, l_lcf);
        g.backward(loss);

        sum_ldm += g.val(l_ldm).v[0] * inv_b;
        sum_lcf += g.val(l_lcf).v[0] * inv_b;
        sum_da += (drop_a ? 1.0 : 0.0) * inv_b;
        sum_dh += (drop_h ? 1.0 : 0.0) * inv_b;

        auto accumulate = [&](const ParamStore& store, const std::vector<Var>& bound,
                              std::vector<Tensor>& acc, std::vector<bool>& has) {
            for (size_t i = 0; i < store.size(); ++i) {
                if (!trainable(store.at((int)i)) || !g.has_grad(bound[i])) continue;
                const Tensor& grad = g.grad(bound[i]);
                if (!has[i]) {
                    acc[i] = Tensor(grad.shape);
                    has[i] = true;
                }
                for (int64_t k2 = 0; k2 < grad.numel(); ++k2) acc[i].v[k2] += grad.v[k2] * inv_b;
            }
        };
        accumulate(net_->params(), bd, den_acc, den_has);
        accumulate(cond_->params(), bc, cond_acc, cond_has);
    }

    AdamConfig adam;
    adam.lr = cfg_.lr;
    adam.warmup_steps = cfg_.warmup_steps;
    auto as_ptrs = [](const std::vector<Tensor>& acc, const std::vector<bool>& has) {
        std::vector<const Tensor*> out(acc.size(), nullptr);
        for (size_t i = 0; i < acc.size(); ++i)
            if (has[i]) out[i] = &acc[i];
        return out;
    };
    auto trainable2 = [this](const Param& p) { return trainable_param(p); };
    adam_step_grads(net_->params(), as_ptrs(den_acc, den_has), trainable2, adam, step_ + 1);
    adam_step_grads(cond_->params(), as_ptrs(cond_acc, cond_has), trainable2, adam, step_ + 1);

    if (csv_row) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.8f,%.6f,%.3f,%.3f", (long long)step_, sum_ldm,
                      sum_lcf, rate, sum_da, sum_dh);
        *csv_row = buf;
    }
    return sum_ldm + sum_lcf;
}

void Trainer::train(int max_new_steps) {
    if (cfg_.stage == 2) {
        if (cfg_.stage1_path.empty())
            throw ConfigError("stage 2 requires a stage-1 checkpoint path");
    }
    fs::create_directories(cfg_.out_dir);
    std::string csv_path = cfg_.out_dir + "/metrics.csv";
    bool fresh = !fs::exists(csv_path);
    std::ofstream csv(csv_path, std::ios::app);
    if (fresh) csv << "step,loss_ldm,loss_lcf,exposure_rate,dropped_audio,dropped_habit\n";

    int64_t stop = max_new_steps >= 0 ? std::min<int64_t>(cfg_.steps, step_ + max_new_steps)
                                      : cfg_.steps;
    while (step_ < stop) {
        std::string row;
        last_loss_ = train_step(&row);
        csv << row << "\n";
        ++step_;
        if (step_ % 500 == 0 || step_ == cfg_.steps) {
            std::printf("[stage %d] step %lld/%d loss %.5f\n", cfg_.stage, (long long)step_,
                        cfg_.steps, last_loss_);
            std::fflush(stdout);
            csv.flush();
        }
    }
}

void Trainer::save_checkpoint(const std::string& prefix) const {
    fs::create_directories(fs::path(prefix).parent_path().empty()
                               ? "."
                               : fs::path(prefix).parent_path().string());
    Container c;
    net_->params().save(c, "den/");
    cond_->params().save(c, "cond/");
    c.put_u64("state", {(uint64_t)step_, rng_data_.seed(), rng_data_.counter(), rng_noise_.seed(),
                        rng_noise_.counter(), rng_t_.seed(), rng_t_.counter(), rng_drop_.seed(),
                        rng_drop_.counter(), rng_expose_.seed(), rng_expose_.counter()});
    c.write(prefix + ".mdub");

    json j;
    j["stage"] = cfg_.stage;
    j["step"] = step_;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", (unsigned long long)run_config_hash(cfg_));
    j["run_hash"] = hex;
    std::snprintf(hex, sizeof(hex), "%016llx", (unsigned long long)model_config_hash(cfg_));
    j["model_hash"] = hex;
    j["config"] = json::parse(run_config_to_json(cfg_));
    json groups = json::object();
    json zero_init = json::array();
    for (size_t i = 0; i < net_->params().size(); ++i) {
        const Param& p = net_->params().at((int)i);
        groups[p.name] = group_name(p.group);
        if (p.zero_init) zero_init.push_back(p.name);
    }
    for (size_t i = 0; i < cond_->params().size(); ++i)
        groups[cond_->params().at((int)i).name] = group_name(ParamGroup::Conditioning);
    j["groups"] = groups;
    j["zero_init"] = zero_init;
    std::ofstream f(prefix + ".json");
    f << j.dump(2) << "\n";
}

CheckpointManifest read_manifest(const std::string& prefix) {
    std::ifstream f(prefix + ".json");
    if (!f) throw ConfigError("missing checkpoint manifest: " + prefix + ".json");
    json j = json::parse(f);
    CheckpointManifest m;
    m.stage = j.at("stage");
    m.step = j.at("step");
    m.run_hash = std::stoull(j.at("run_hash").get<std::string>(), nullptr, 16);
    m.model_hash = std::stoull(j.at("model_hash").get<std::string>(), nullptr, 16);
    m.config_json = j.at("config").dump();
    return m;
}

void Trainer::init_stage2_from(const std::string& stage1_prefix) {
    CheckpointManifest m = read_manifest(stage1_prefix);
    if (m.stage != 1) throw ConfigError("stage-2 init needs a stage-1 checkpoint");
    if (m.model_hash != model_config_hash(cfg_))
        throw ConfigError("stage-1 checkpoint was built with a different model config");
    Container c = Container::read(stage1_prefix + ".mdub");
    net_->params().load(c, "den/");
    cond_->params().load(c, "cond/");
}

void Trainer::resume_from(const std::string& ckpt_prefix) {
    CheckpointManifest m = read_manifest(ckpt_prefix);
    if (m.run_hash != run_config_hash(cfg_))
        throw ConfigError("checkpoint config hash does not match this run config");
    Container c = Container::read(ckpt_prefix + ".mdub");
    net_->params().load(c, "den/");
    cond_->params().load(c, "cond/");
    const auto& st = c.u64s("state");
    step_ = (int64_t)st[0];
    rng_data_.restore(st[1], st[2]);
    rng_noise_.restore(st[3], st[4]);
    rng_t_.restore(st[5], st[6]);
    rng_drop_.restore(st[7], st[8]);
    rng_expose_.restore(st[9], st[10]);
}

DubPipeline::DubPipeline(const std::string& ckpt_prefix, const std::string& codec_prefix) {
    CheckpointManifest m = read_manifest(ckpt_prefix);
    cfg_ = run_config_from_json(m.config_json);
    std::string codec_path = codec_prefix.empty() ? cfg_.codec_path : codec_prefix;
    if (!fs::exists(codec_path + ".mdub"))
        throw ConfigError("codec checkpoint not found: " + codec_path);
    codec_ = std::make_unique<LatentCodec>(LatentCodec::load(codec_path));

    DenoiserConfig dc;
    dc.latent_channels = codec_->config().latent_channels;
    dc.latent_size = cfg_.image_size / codec_->config().factor;
    dc.widths = cfg_.model.widths;
    dc.blocks_per_res = cfg_.model.blocks_per_res;
    dc.state_dim = cfg_.model.state_dim;
    dc.cond_channels = cfg_.model.cond_channels;
    dc.time_dim = cfg_.model.time_dim;
    dc.audio_window = cfg_.model.audio_window;
    dc.total_timesteps = cfg_.diffusion_steps;
    dc.use_temporal = cfg_.model.use_temporal;
    dc.attention_blocks = cfg_.model.attention_blocks;
    net_ = std::make_unique<DenoiserNet>(dc);
    ConditioningConfig cc;
    cc.channels = cfg_.model.cond_channels;
    cc.crop_size = cfg_.image_size / 2;
    cond_ = std::make_unique<Conditioning>(cc);
    Container c = Container::read(ckpt_prefix + ".mdub");
    net_->params().load(c, "den/");
    cond_->params().load(c, "cond/");
    schedule_ = make_schedule(cfg_.diffusion_steps, cfg_.beta_schedule == "linear"
                                                        ? NoiseSchedule::Beta::Linear
                                                        : NoiseSchedule::Beta::Cosine);
    ckpt_hash_ = file_hash(ckpt_prefix + ".mdub");
}

DenoiserNet::Options DubPipeline::options() const {
    DenoiserNet::Options opt;
    opt.audio = true;
    opt.temporal = cfg_.model.use_temporal;
    return opt;
}

Tensor DubPipeline::habit_embedding(const ToyClip& clip, int k, uint64_t seed) const {
    auto idx = sample_habit_indices(clip.frame_count(), k, 0, 0, seed);
    return cond_->encode_habit_tensor(gather_mouth_crops(clip, idx));
}

DubPipeline::Result DubPipeline::generate(const ToyClip& input, const AudioTrack& driving,
                                          const SamplerConfig& sampler, uint64_t seed,
                                          int habit_k) const {
    int n = input.frame_count();
    if (driving.frames() != n)
        throw DataError("driving audio length does not match the clip frame count");
    if (n < habit_k + 1) throw DataError("clip too short for the habit segment");

    MaskSet masks = build_mask_set(input.landmarks, input.frame_size(), cfg_.mask);
    Tensor union_lat = mask_to_latent(masks.union_mask.values, codec_->config().factor);
    Tensor z0 = codec_->encode_frames(input.frames);

    Rng rng(seed ^ 0x9E5ULL);
    int app_idx = (int)rng.below((uint64_t)n);
    Tensor z_app({z0.dim(1), z0.dim(2), z0.dim(3)});
    std::copy(z0.v.begin() + (int64_t)app_idx * z_app.numel(),
              z0.v.begin() + (int64_t)(app_idx + 1) * z_app.numel(), z_app.v.begin());

    ConditionBundle bundle;
    bundle.audio = cond_->encode_audio_tensor(driving.features);
    uint64_t habit_seed = rng.next_u64();
    auto habit_idx = sample_habit_indices(n, habit_k, 0, 0, habit_seed);
    bundle.habit = cfg_.model.habit_modulation
                       ? cond_->encode_habit_tensor(gather_mouth_crops(input, habit_idx))
                       : Tensor({cfg_.model.cond_channels});

    DenoiserNet::Options opt = options();
    GuidedEps guided = [&](const Tensor& zbar, int t) {
        return cfg_predict(
            [&](const ConditionBundle& b) {
                return denoise_predict(*net_, *cond_, zbar, t, b, opt,
                                       cfg_.model.habit_modulation);
            },
            bundle, sampler.lambda_a, sampler.lambda_h);
    };
    SamplerConfig sc = sampler;
    sc.seed = seed;
    Result out;
    out.latents = sample_latents(schedule_, sc, z0, union_lat, z_app, guided);
    out.frames = codec_->decode_frames(out.latents);
    for (auto& x : out.frames.v) x = std::clamp(x, 0.0, 1.0);
    out.union_pixel = masks.union_mask.values;

    json manifest;
    manifest["seed"] = seed;
    manifest["habit_seed"] = habit_seed;
    manifest["app_frame"] = app_idx;
    manifest["habit_k"] = habit_k;
    manifest["lambda_a"] = sampler.lambda_a;
    manifest["lambda_h"] = sampler.lambda_h;
    manifest["num_steps"] = sampler.num_steps;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", (unsigned long long)ckpt_hash_);
    manifest["checkpoint_hash"] = hex;
    manifest["frame_count"] = n;
    out.manifest_json = manifest.dump(2);
    return out;
}

}  // namespace minidub
