#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "minidub/trainer.hpp"
#include "testutil.hpp"

using namespace minidub;
namespace fs = std::filesystem;

namespace {

// one tiny codec shared by all trainer tests
const std::string kCodecPath = "tmp_trainer/codec";

void ensure_codec() {
    static bool done = false;
    if (done) return;
    fs::create_directories("tmp_trainer");
    CodecConfig cc;
    cc.image_size = 32;
    cc.enc_width1 = 8;
    cc.enc_width2 = 12;
    cc.dec_width1 = 12;
    cc.dec_width2 = 8;
    LatentCodec codec(cc);
    Tensor corpus({1000, 3, 32, 32});
    int idx = 0;
    for (int c = 0; idx < 1000; ++c) {
        ToyClip clip = render_clip(synth_speaker(c), synth_audio(8, c + 40), std::nullopt, 32);
        for (int f = 0; f < 8 && idx < 1000; ++f, ++idx)
            std::copy(clip.frames.v.begin() + (int64_t)f * 3 * 32 * 32,
                      clip.frames.v.begin() + (int64_t)(f + 1) * 3 * 32 * 32,
                      corpus.v.begin() + (int64_t)idx * 3 * 32 * 32);
    }
    CodecTrainConfig tc;
    tc.steps = 120;
    tc.batch = 2;
    tc.target_mse = 1e9;  // quality is covered elsewhere; trainer tests need a frozen codec
    train_codec(codec, corpus, tc);
    codec.save(kCodecPath);
    done = true;
}

RunConfig micro_cfg(int stage, const std::string& out) {
    RunConfig cfg;
    cfg.stage = stage;
    cfg.seed = 77;
    cfg.steps = 25;
    cfg.image_size = 32;
    cfg.clip_frames = 4;
    cfg.habit_frames = 3;
    cfg.warmup_steps = 10;
    cfg.lr = 3e-4;
    cfg.corpus.pool = 6;
    cfg.corpus.speakers = 2;
    cfg.model.widths = {8};
    cfg.model.blocks_per_res = 1;
    cfg.model.state_dim = 4;
    cfg.model.cond_channels = 8;
    cfg.model.time_dim = 8;
    cfg.diffusion_steps = 50;
    cfg.codec_path = kCodecPath;
    cfg.out_dir = "tmp_trainer/" + out;
    return cfg;
}

std::vector<Tensor> snapshot(const ParamStore& store) {
    std::vector<Tensor> out;
    for (size_t i = 0; i < store.size(); ++i) out.push_back(store.at((int)i).value);
    return out;
}

bool file_equal(const std::string& a, const std::string& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !ba.empty() && ba == bb;
}

// probe loss on a fixed pool sample with fixed noise, stage-1 style
double probe_loss(Trainer& tr, const NoiseSchedule& sched) {
    const TrainSample& s = tr.pool()[0];
    Rng rng(12345);
    Tensor eps(s.z0.shape);
    for (auto& x : eps.v) x = rng.gaussian();
    Tensor m_eff = mask_to_latent(s.union_pixel, tr.codec().config().factor);
    Tensor target(s.z0.shape);
    int n = s.z0.dim(0), cz = s.z0.dim(1), hz = s.z0.dim(2);
    for (int f = 0; f < n; ++f)
        for (int c = 0; c < cz; ++c)
            for (int y = 0; y < hz; ++y)
                for (int x = 0; x < hz; ++x)
                    target.at4(f, c, y, x) = eps.at4(f, c, y, x) * m_eff.at2(y, x);
    int t = 25;
    Tensor zbar = assemble_input(forward_noise(s.z0, t, eps, sched), s.z0, m_eff, s.z_app);
    DenoiserNet::Options opt;
    opt.audio = false;
    opt.temporal = false;
    Tensor pred = tr.denoiser().predict(zbar, t, Tensor(), opt);
    return ldm_loss(target, pred);
}

}  // namespace

TEST_CASE("trainer requires a codec checkpoint") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "no_codec");
    cfg.codec_path = "tmp_trainer/nonexistent";
    CHECK_THROWS_AS(Trainer{cfg}, ConfigError);
    cfg.codec_path = "";
    CHECK_THROWS_AS(Trainer{cfg}, ConfigError);
}

TEST_CASE("stage 1 trains only spatial and shared groups") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "s1_freeze");
    fs::remove_all(cfg.out_dir);
    Trainer fresh(cfg);
    auto init = snapshot(fresh.denoiser().params());
    auto init_cond = snapshot(fresh.conditioning().params());

    Trainer tr(cfg);
    tr.train();
    CHECK(tr.step() == 25);
    bool spatial_moved = false;
    for (size_t i = 0; i < tr.denoiser().params().size(); ++i) {
        const Param& p = tr.denoiser().params().at((int)i);
        if (p.group == ParamGroup::Temporal || p.group == ParamGroup::AudioXAttn)
            CHECK(bit_equal(p.value, init[i]));
        if (p.group == ParamGroup::Spatial && !bit_equal(p.value, init[i])) spatial_moved = true;
    }
    CHECK(spatial_moved);
    for (size_t i = 0; i < tr.conditioning().params().size(); ++i)
        CHECK(bit_equal(tr.conditioning().params().at((int)i).value, init_cond[i]));
}

TEST_CASE("stage-1 loss decreases on a fixed probe batch") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "s1_loss");
    fs::remove_all(cfg.out_dir);
    cfg.steps = 200;
    NoiseSchedule sched = make_schedule(cfg.diffusion_steps, NoiseSchedule::Beta::Cosine);
    Trainer before(cfg);
    double l0 = probe_loss(before, sched);
    Trainer tr(cfg);
    tr.train();
    double l200 = probe_loss(tr, sched);
    INFO("probe loss " << l0 << " -> " << l200);
    CHECK(l200 < l0);
}

TEST_CASE("checkpoints resume bit-exactly and reject mismatched configs") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "s1_resume");
    fs::remove_all(cfg.out_dir);
    cfg.steps = 24;

    Trainer full(cfg);
    full.train();
    full.save_checkpoint(cfg.out_dir + "/full");

    RunConfig cfg_b = cfg;
    cfg_b.out_dir = cfg.out_dir + "_b";
    fs::remove_all(cfg_b.out_dir);
    Trainer half(cfg_b);
    half.train(12);
    half.save_checkpoint(cfg_b.out_dir + "/mid");

    // save -> load -> save produces identical bytes
    Trainer reload(cfg_b);
    reload.resume_from(cfg_b.out_dir + "/mid");
    CHECK(reload.step() == 12);
    reload.save_checkpoint(cfg_b.out_dir + "/mid2");
    CHECK(file_equal(cfg_b.out_dir + "/mid.mdub", cfg_b.out_dir + "/mid2.mdub"));

    // resumed run matches the uninterrupted one bit-exactly
    reload.train();
    CHECK(reload.step() == 24);
    reload.save_checkpoint(cfg_b.out_dir + "/resumed");
    Container a = Container::read(cfg.out_dir + "/full.mdub");
    Container b = Container::read(cfg_b.out_dir + "/resumed.mdub");
    for (const auto& [name, rec] : a.records()) {
        if (rec.dtype == Container::U64) continue;  // rng counters advance identically anyway
        CHECK(bit_equal(a.tensor(name), b.tensor(name)));
    }
    CHECK(a.u64s("state") == b.u64s("state"));

    // wrong config hash is refused
    RunConfig wrong = cfg_b;
    wrong.lr *= 2;
    Trainer rejected(wrong);
    CHECK_THROWS_AS(rejected.resume_from(cfg_b.out_dir + "/mid"), ConfigError);
}

TEST_CASE("deterministic mode: identical configs give identical checkpoints") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "s1_det");
    fs::remove_all(cfg.out_dir);
    cfg.steps = 15;
    Trainer a(cfg);
    a.train();
    a.save_checkpoint(cfg.out_dir + "/a");
    RunConfig cfg2 = cfg;  // out_dir excluded from the hash, runs are the same
    cfg2.out_dir = cfg.out_dir + "_second";
    fs::remove_all(cfg2.out_dir);
    Trainer b(cfg2);
    b.train();
    b.save_checkpoint(cfg.out_dir + "/b");
    CHECK(file_equal(cfg.out_dir + "/a.mdub", cfg.out_dir + "/b.mdub"));
}

TEST_CASE("stage 2 freezes stage-1 weights and trains the rest") {
    ensure_codec();
    RunConfig s1 = micro_cfg(1, "s2_base");
    fs::remove_all(s1.out_dir);
    s1.steps = 12;
    Trainer t1(s1);
    t1.train();
    std::string s1_ckpt = s1.out_dir + "/stage1";
    t1.save_checkpoint(s1_ckpt);
    auto stage1_params = snapshot(t1.denoiser().params());

    RunConfig s2 = micro_cfg(2, "s2_run");
    fs::remove_all(s2.out_dir);
    s2.steps = 20;
    s2.stage1_path = s1_ckpt;

    // stage 2 without a stage-1 checkpoint is a config error
    RunConfig s2_bad = s2;
    s2_bad.stage1_path = "";
    Trainer missing(s2_bad);
    CHECK_THROWS_AS(missing.train(), ConfigError);

    // model-shape mismatch is rejected at handoff
    RunConfig other = s1;
    other.model.widths = {12};
    Trainer incompatible(other);
    CHECK_THROWS_AS(incompatible.init_stage2_from(s1_ckpt), ConfigError);

    Trainer t2(s2);
    t2.init_stage2_from(s1_ckpt);
    t2.train();
    CHECK(t2.step() == 20);
    bool temporal_moved = false, audio_moved = false, cond_moved = false;
    for (size_t i = 0; i < t2.denoiser().params().size(); ++i) {
        const Param& p = t2.denoiser().params().at((int)i);
        if (p.group == ParamGroup::Spatial || p.group == ParamGroup::Shared)
            CHECK(bit_equal(p.value, stage1_params[i]));
        if (p.group == ParamGroup::Temporal && !bit_equal(p.value, stage1_params[i]))
            temporal_moved = true;
        if (p.group == ParamGroup::AudioXAttn && !bit_equal(p.value, stage1_params[i]))
            audio_moved = true;
    }
    Trainer fresh(s2);
    for (size_t i = 0; i < t2.conditioning().params().size(); ++i)
        if (!bit_equal(t2.conditioning().params().at((int)i).value,
                       fresh.conditioning().params().at((int)i).value))
            cond_moved = true;
    CHECK(temporal_moved);
    CHECK(audio_moved);
    CHECK(cond_moved);

    // loading a stage-2 checkpoint as a stage-1 base is refused
    std::string s2_ckpt = s2.out_dir + "/stage2";
    t2.save_checkpoint(s2_ckpt);
    Trainer t3(s2);
    CHECK_THROWS_AS(t3.init_stage2_from(s2_ckpt), ConfigError);
}

TEST_CASE("metrics log carries the exposure schedule endpoints") {
    ensure_codec();
    RunConfig cfg = micro_cfg(1, "s1_csv");
    fs::remove_all(cfg.out_dir);
    cfg.steps = 11;
    Trainer tr(cfg);
    tr.train();
    std::ifstream csv(cfg.out_dir + "/metrics.csv");
    REQUIRE(csv.good());
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,loss_ldm,loss_lcf,exposure_rate,dropped_audio,dropped_habit");
    std::vector<double> rates;
    std::string line;
    while (std::getline(csv, line)) {
        size_t p = 0;
        for (int c = 0; c < 3; ++c) p = line.find(',', p) + 1;
        rates.push_back(std::stod(line.substr(p)));
    }
    REQUIRE(rates.size() == 11);
    CHECK(rates.front() == doctest::Approx(0.70));
    CHECK(rates.back() == doctest::Approx(0.0));
    for (size_t i = 1; i < rates.size(); ++i) CHECK(rates[i] <= rates[i - 1] + 1e-12);
}

TEST_CASE("run config json round trip preserves the hash") {
    RunConfig cfg = micro_cfg(2, "hash");
    cfg.stage1_path = "somewhere/stage1";
    RunConfig back = run_config_from_json(run_config_to_json(cfg));
    CHECK(run_config_hash(back) == run_config_hash(cfg));
    CHECK(model_config_hash(back) == model_config_hash(cfg));
    RunConfig other = cfg;
    other.model.state_dim += 1;
    CHECK(model_config_hash(other) != model_config_hash(cfg));
    CHECK_THROWS_AS(run_config_from_json("{oops"), ConfigError);
}
