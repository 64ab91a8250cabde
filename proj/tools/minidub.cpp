// minidub: train / generate / eval / ablate / synth for the toy visual
// dubbing stack. Exit codes: 0 ok, 2 config error, 3 data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "minidub/container.hpp"
#include "minidub/eval.hpp"
#include "minidub/image_io.hpp"
#include "minidub/trainer.hpp"

namespace fs = std::filesystem;
using namespace minidub;
using nlohmann::json;

namespace {

std::string strip_ckpt_suffix(std::string path) {
    for (const char* suf : {".mdub", ".json"}) {
        size_t n = std::string(suf).size();
        if (path.size() > n && path.substr(path.size() - n) == suf)
            return path.substr(0, path.size() - n);
    }
    return path;
}

AudioTrack load_audio_file(const std::string& path) {
    Container c = Container::read(path);
    AudioTrack t;
    Tensor env = c.tensor("envelope");
    t.envelope.assign(env.v.begin(), env.v.end());
    t.features = c.tensor("features");
    t.frame_rate = c.has("frame_rate") ? c.tensor("frame_rate").v[0] : 25.0;
    return t;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return run_config_from_json(text);
}

void write_frames(const std::string& dir, const Tensor& frames) {
    fs::create_directories(dir);
    int n = frames.dim(0), size = frames.dim(2);
    char name[64];
    for (int i = 0; i < n; ++i) {
        Tensor frame({3, size, size});
        std::copy(frames.v.begin() + (int64_t)i * frame.numel(),
                  frames.v.begin() + (int64_t)(i + 1) * frame.numel(), frame.v.begin());
        std::snprintf(name, sizeof(name), "frame_%04d.png", i);
        write_png_rgb((fs::path(dir) / name).string(), frame);
    }
}

Tensor read_frames(const std::string& dir, int expect_n) {
    std::vector<std::string> files;
    for (auto& e : fs::directory_iterator(dir)) {
        std::string n = e.path().filename().string();
        if (n.rfind("frame_", 0) == 0 && n.size() > 4 && n.substr(n.size() - 4) == ".png")
            files.push_back(e.path().string());
    }
    if (files.empty()) throw DataError("no frame_*.png in " + dir);
    std::sort(files.begin(), files.end());
    if (expect_n > 0 && (int)files.size() != expect_n)
        throw DataError("frame count mismatch in " + dir);
    Tensor first = read_png_rgb(files[0]);
    Tensor out({(int)files.size(), 3, first.dim(1), first.dim(2)});
    for (size_t i = 0; i < files.size(); ++i) {
        Tensor f = i == 0 ? first : read_png_rgb(files[i]);
        std::copy(f.v.begin(), f.v.end(), out.v.begin() + (int64_t)i * f.numel());
    }
    return out;
}

// clip dirs under a root: either the root itself is a clip, or clip_* subdirs
std::vector<std::string> find_clip_dirs(const std::string& root) {
    if (fs::exists(fs::path(root) / "profile.json") || fs::exists(fs::path(root) / "frame_0000.png"))
        return {root};
    std::vector<std::string> dirs;
    for (auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no clips found under " + root);
    return dirs;
}

struct PairEval {
    EvalReport mean;
    double habit_score = 0, habit_shuffled = 0;
    int pairs = 0;
};

PairEval eval_dirs(const DubPipeline& pipe, const std::string& gen_root,
                   const std::string& ref_root, uint64_t seed) {
    auto gen_dirs = find_clip_dirs(gen_root);
    auto ref_dirs = find_clip_dirs(ref_root);
    if (gen_dirs.size() != ref_dirs.size())
        throw DataError("generated and reference clip counts differ");
    PairEval out;
    std::vector<Tensor> embeddings;
    std::vector<int> labels;
    std::map<long long, int> label_of_gain;
    double corr_sum = 0, lmd_sum = 0, occ_sum = 0, un_sum = 0;
    int corr_n = 0, lmd_n = 0;
    for (size_t i = 0; i < gen_dirs.size(); ++i) {
        ToyClip ref = load_clip(ref_dirs[i]);
        Tensor gen = read_frames(gen_dirs[i], ref.frame_count());
        MaskSet masks = build_mask_set(ref.landmarks, ref.frame_size(), pipe.run_config().mask);
        EvalReport rep = eval_clip(gen, ref, ref.audio.envelope, masks.union_mask.values);
        if (!rep.sync_degenerate && std::isfinite(rep.sync_corr)) {
            corr_sum += rep.sync_corr;
            ++corr_n;
        }
        if (rep.lmd_frames > 0) {
            lmd_sum += rep.lmd;
            ++lmd_n;
        }
        occ_sum += rep.occlusion_mse;
        un_sum += rep.unmasked_mse;
        int k = std::min(pipe.run_config().habit_frames, ref.frame_count());
        embeddings.push_back(pipe.habit_embedding(ref, k, seed + i));
        long long gain_key = (long long)std::llround(ref.profile.habit_gain * 1e6);
        auto [it, fresh] = label_of_gain.try_emplace(gain_key, (int)label_of_gain.size());
        (void)fresh;
        labels.push_back(it->second);
    }
    out.pairs = (int)gen_dirs.size();
    out.mean.sync_corr = corr_n ? corr_sum / corr_n : NAN;
    out.mean.sync_degenerate = corr_n == 0;
    out.mean.lmd = lmd_n ? lmd_sum / lmd_n : NAN;
    out.mean.occlusion_mse = occ_sum / out.pairs;
    out.mean.unmasked_mse = un_sum / out.pairs;
    if (label_of_gain.size() >= 2 && embeddings.size() >= 4) {
        out.habit_score = silhouette_score(embeddings, labels);
        out.habit_shuffled = shuffled_silhouette(embeddings, labels, seed + 99);
    } else {
        out.habit_score = NAN;
        out.habit_shuffled = NAN;
    }
    return out;
}

int cmd_train(const std::string& config_path, int stage_override, int steps_override,
              long long seed_override, const std::string& out_override,
              const std::string& resume) {
    RunConfig cfg = load_run_config(config_path);
    if (stage_override > 0) cfg.stage = stage_override;
    if (steps_override > 0) cfg.steps = steps_override;
    if (seed_override >= 0) cfg.seed = (uint64_t)seed_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    Trainer trainer(cfg);
    if (!resume.empty())
        trainer.resume_from(strip_ckpt_suffix(resume));
    else if (cfg.stage == 2)
        trainer.init_stage2_from(strip_ckpt_suffix(cfg.stage1_path));
    trainer.train();
    std::string ckpt = cfg.out_dir + "/stage" + std::to_string(cfg.stage);
    trainer.save_checkpoint(ckpt);
    std::printf("checkpoint: %s.mdub\n", ckpt.c_str());
    return 0;
}

int cmd_generate(const std::string& clip_dir, const std::string& audio_path,
                 const std::string& ckpt, const std::string& codec, double la, double lh,
                 int steps, uint64_t seed, int habit_k, const std::string& out_dir) {
    DubPipeline pipe(strip_ckpt_suffix(ckpt), codec.empty() ? "" : strip_ckpt_suffix(codec));
    ToyClip input = load_clip(clip_dir);
    AudioTrack driving =
        audio_path.empty() ? input.audio : load_audio_file(audio_path);
    SamplerConfig sc;
    sc.lambda_a = la;
    sc.lambda_h = lh;
    sc.num_steps = steps;
    auto result = pipe.generate(input, driving, sc, seed, habit_k);
    write_frames(out_dir, result.frames);
    std::ofstream mf(fs::path(out_dir) / "generation.json");
    mf << result.manifest_json << "\n";
    std::printf("wrote %d frames to %s\n", result.frames.dim(0), out_dir.c_str());
    return 0;
}

int cmd_eval(const std::string& gen_root, const std::string& ref_root, const std::string& ckpt,
             const std::string& codec, const std::string& out_path, uint64_t seed) {
    DubPipeline pipe(strip_ckpt_suffix(ckpt), codec.empty() ? "" : strip_ckpt_suffix(codec));
    PairEval ev = eval_dirs(pipe, gen_root, ref_root, seed);
    json j;
    j["note"] = "desk-scale analytic toy metrics; not comparable to any published "
                "perceptual or sync-expert numbers";
    j["pairs"] = ev.pairs;
    j["sync_corr"] = ev.mean.sync_corr;
    j["sync_degenerate"] = ev.mean.sync_degenerate;
    j["lmd"] = ev.mean.lmd;
    j["habit_score"] = ev.habit_score;
    j["habit_score_shuffled"] = ev.habit_shuffled;
    j["occlusion_mse"] = ev.mean.occlusion_mse;
    j["unmasked_mse"] = ev.mean.unmasked_mse;
    std::string text = j.dump(2);
    if (out_path.empty() || out_path == "-") {
        std::printf("%s\n", text.c_str());
    } else {
        std::ofstream f(out_path);
        f << text << "\n";
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_csv, int eval_clips) {
    RunConfig base = load_run_config(config_path);
    struct Variant {
        const char* name;
        void (*apply)(RunConfig&);
    };
    const Variant variants[] = {
        {"baseline", [](RunConfig&) {}},
        {"no_mask_exposure", [](RunConfig& c) { c.exposure_enabled = false; }},
        {"no_habit_modulation", [](RunConfig& c) { c.model.habit_modulation = false; }},
        {"attention_only", [](RunConfig& c) { c.model.attention_blocks = true; }},
        {"no_temporal", [](RunConfig& c) { c.model.use_temporal = false; }},
    };
    fs::create_directories(fs::path(out_csv).parent_path().empty()
                               ? "."
                               : fs::path(out_csv).parent_path().string());
    std::ofstream csv(out_csv);
    csv << "variant,sync_corr,lmd,habit_score,occlusion_mse,unmasked_mse\n";
    for (const auto& v : variants) {
        RunConfig cfg = base;
        v.apply(cfg);
        cfg.out_dir = base.out_dir + "/" + v.name;
        std::printf("== ablation variant: %s ==\n", v.name);
        cfg.stage = 1;
        Trainer s1(cfg);
        s1.train();
        std::string s1_ckpt = cfg.out_dir + "/stage1";
        s1.save_checkpoint(s1_ckpt);
        cfg.stage = 2;
        cfg.stage1_path = s1_ckpt;
        Trainer s2(cfg);
        s2.init_stage2_from(s1_ckpt);
        s2.train();
        std::string s2_ckpt = cfg.out_dir + "/stage2";
        s2.save_checkpoint(s2_ckpt);

        DubPipeline pipe(s2_ckpt, cfg.codec_path);
        int frames = cfg.habit_frames + cfg.clip_frames;
        std::string gen_root = cfg.out_dir + "/gen";
        std::string ref_root = cfg.out_dir + "/ref";
        for (int i = 0; i < eval_clips; ++i) {
            ToyClip clip = corpus_clip(cfg.corpus, cfg.image_size, frames, i, true);
            char sub[32];
            std::snprintf(sub, sizeof(sub), "/clip_%04d", i);
            save_clip(ref_root + sub, clip);
            SamplerConfig sc;
            auto res = pipe.generate(clip, clip.audio, sc, 1000 + i, cfg.habit_frames);
            write_frames(gen_root + sub, res.frames);
        }
        PairEval ev = eval_dirs(pipe, gen_root, ref_root, 17);
        csv << v.name << "," << ev.mean.sync_corr << "," << ev.mean.lmd << "," << ev.habit_score
            << "," << ev.mean.occlusion_mse << "," << ev.mean.unmasked_mse << "\n";
        csv.flush();
    }
    std::printf("wrote %s\n", out_csv.c_str());
    return 0;
}

int cmd_synth(int speakers, int clips, int frames, uint64_t seed, bool occluders,
              const std::string& out_dir) {
    CorpusConfig corpus;
    corpus.speakers = speakers;
    corpus.seed = seed;
    corpus.occluders = occluders;
    for (int s = 0; s < speakers; ++s)
        for (int m = 0; m < clips; ++m) {
            int index = m * speakers + s;  // index % speakers selects the speaker
            ToyClip clip = corpus_clip(corpus, 64, frames, index, false);
            char sub[64];
            std::snprintf(sub, sizeof(sub), "/speaker%02d_clip%04d", s, m);
            save_clip(out_dir + sub, clip);
        }
    std::printf("wrote %d clips to %s\n", speakers * clips, out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy audio-driven visual dubbing: training, generation, evaluation"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "run one training stage");
    std::string cfg_path, resume, out_dir;
    int stage = 0, steps = 0;
    long long seed_ll = -1;
    train->add_option("--config", cfg_path, "run config JSON")->required();
    train->add_option("--stage", stage, "override stage (1 or 2)");
    train->add_option("--steps", steps, "override step count");
    train->add_option("--seed", seed_ll, "override seed");
    train->add_option("--out", out_dir, "override output directory");
    train->add_option("--resume", resume, "resume from checkpoint prefix");

    auto* gen = app.add_subcommand("generate", "dub a clip with driving audio");
    std::string clip_dir, audio_path, ckpt, codec, gen_out;
    double la = 2.0, lh = 1.5;
    int gen_steps = 50, habit_k = 8;
    uint64_t gen_seed = 0;
    gen->add_option("--clip", clip_dir, "input clip directory")->required();
    gen->add_option("--audio", audio_path, "driving audio container (defaults to the clip's own)");
    gen->add_option("--ckpt", ckpt, "stage-2 checkpoint prefix")->required();
    gen->add_option("--codec", codec, "codec prefix (defaults to the checkpoint's)");
    gen->add_option("--la", la, "audio guidance scale");
    gen->add_option("--lh", lh, "habit guidance scale");
    gen->add_option("--steps", gen_steps, "sampler steps");
    gen->add_option("--seed", gen_seed, "sampler seed");
    gen->add_option("--habit-k", habit_k, "habit segment length");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "score generated clips against references");
    std::string gen_root, ref_root, report_path;
    uint64_t eval_seed = 7;
    ev->add_option("--gen", gen_root, "generated clip dir (or root of clip_* dirs)")->required();
    ev->add_option("--ref", ref_root, "reference clip dir (or root)")->required();
    ev->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
    ev->add_option("--codec", codec, "codec prefix");
    ev->add_option("--out", report_path, "report JSON path (- for stdout)");
    ev->add_option("--seed", eval_seed, "habit sampling seed");

    auto* ab = app.add_subcommand("ablate", "train and score the ablation variants");
    std::string ab_out = "ablation.csv";
    int ab_eval_clips = 6;
    ab->add_option("--config", cfg_path, "run config JSON")->required();
    ab->add_option("--out", ab_out, "output CSV");
    ab->add_option("--eval-clips", ab_eval_clips, "held-out clips per variant");

    auto* sy = app.add_subcommand("synth", "export a synthetic corpus");
    int sy_speakers = 4, sy_clips = 4, sy_frames = 16;
    uint64_t sy_seed = 77;
    bool sy_occ = false;
    std::string sy_out = "corpus";
    sy->add_option("--speakers", sy_speakers, "speaker count");
    sy->add_option("--clips", sy_clips, "clips per speaker");
    sy->add_option("--frames", sy_frames, "frames per clip");
    sy->add_option("--seed", sy_seed, "corpus seed");
    sy->add_flag("--occluders", sy_occ, "add occluders");
    sy->add_option("--out", sy_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed())
            return cmd_train(cfg_path, stage, steps, seed_ll, out_dir, resume);
        if (gen->parsed())
            return cmd_generate(clip_dir, audio_path, ckpt, codec, la, lh, gen_steps, gen_seed,
                                habit_k, gen_out);
        if (ev->parsed())
            return cmd_eval(gen_root, ref_root, ckpt, codec, report_path, eval_seed);
        if (ab->parsed()) return cmd_ablate(cfg_path, ab_out, ab_eval_clips);
        if (sy->parsed())
            return cmd_synth(sy_speakers, sy_clips, sy_frames, sy_seed, sy_occ, sy_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
