#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "minidub/latent_codec.hpp"
#include "minidub/toy_data.hpp"
#include "testutil.hpp"

using namespace minidub;

namespace {

// small frame corpus at 32x32 for quick training checks
Tensor tiny_corpus(int frames, uint64_t seed, bool constant_color = false) {
    Tensor out({frames, 3, 32, 32});
    int per_clip = 8;
    int idx = 0;
    for (int c = 0; idx < frames; ++c) {
        SpeakerProfile p = synth_speaker((int)(seed + c));
        AudioTrack audio = synth_audio(per_clip, (int)(seed * 3 + c));
        ToyClip clip = render_clip(p, audio, std::nullopt, 32);
        for (int f = 0; f < per_clip && idx < frames; ++f, ++idx) {
            if (constant_color) {
                double v = 0.25 + 0.5 * ((c * per_clip + f) % 7) / 7.0;
                for (int64_t i = 0; i < (int64_t)3 * 32 * 32; ++i)
                    out.v[idx * 3 * 32 * 32 + i] = v;
            } else {
                std::copy(clip.frames.v.begin() + (int64_t)f * 3 * 32 * 32,
                          clip.frames.v.begin() + (int64_t)(f + 1) * 3 * 32 * 32,
                          out.v.begin() + (int64_t)idx * 3 * 32 * 32);
            }
        }
    }
    return out;
}

CodecConfig tiny_cfg() {
    CodecConfig cfg;
    cfg.image_size = 32;
    cfg.enc_width1 = 10;
    cfg.enc_width2 = 16;
    cfg.dec_width1 = 16;
    cfg.dec_width2 = 8;
    return cfg;
}

}  // namespace

TEST_CASE("mask_to_latent pools by area") {
    Tensor ones({16, 16}, 1.0);
    Tensor pooled = mask_to_latent(ones, 4);
    CHECK(pooled.shape == Shape({4, 4}));
    for (double v : pooled.v) CHECK(v == doctest::Approx(1.0));

    Tensor zeros({16, 16});
    for (double v : mask_to_latent(zeros, 4).v) CHECK(v == 0.0);

    Tensor block({16, 16});
    for (int y = 4; y < 8; ++y)
        for (int x = 8; x < 12; ++x) block.at2(y, x) = 1.0;
    Tensor p = mask_to_latent(block, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(p.at2(y, x) == doctest::Approx(y == 1 && x == 2 ? 1.0 : 0.0));

    CHECK_THROWS_AS(mask_to_latent(Tensor({15, 16}), 4), std::invalid_argument);

    // monotone and linear
    Rng rng(4);
    Tensor a = testutil::random_tensor({8, 8}, rng);
    for (auto& v : a.v) v = std::fabs(v);
    Tensor b = a;
    for (auto& v : b.v) v *= 1.5;
    Tensor pa = mask_to_latent(a, 2), pb = mask_to_latent(b, 2);
    for (int64_t i = 0; i < pa.numel(); ++i) {
        CHECK(pa.v[i] <= pb.v[i] + 1e-15);
        CHECK(pb.v[i] == doctest::Approx(1.5 * pa.v[i]));
    }
}

TEST_CASE("encode and decode shapes") {
    LatentCodec codec(CodecConfig{});
    Rng rng(1);
    Tensor img = testutil::random_tensor({3, 64, 64}, rng, 0.2);
    Tensor z = codec.encode(img);
    CHECK(z.shape == Shape({4, 16, 16}));
    Tensor x = codec.decode(z);
    CHECK(x.shape == Shape({3, 64, 64}));
    CHECK_THROWS_AS(codec.encode_frames(Tensor({1, 3, 30, 30})), std::invalid_argument);
}

TEST_CASE("encoder is local: patch edits stay in a bounded latent neighborhood") {
    LatentCodec codec(CodecConfig{});
    Rng rng(2);
    Tensor img = testutil::random_tensor({3, 64, 64}, rng, 0.2);
    Tensor edited = img;
    int r0 = 24, c0 = 32;  // 8x8 patch
    for (int ch = 0; ch < 3; ++ch)
        for (int r = r0; r < r0 + 8; ++r)
            for (int c = c0; c < c0 + 8; ++c) edited.at3(ch, r, c) += 0.5;
    Tensor za = codec.encode(img), zb = codec.encode(edited);
    // encoder receptive field radius is 7 input px; affected latent cells
    // satisfy 4*cell - 7 <= patch edge
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            bool may_differ = (4 * y + 10 >= r0 - 4 && 4 * y - 7 <= r0 + 7 + 4) &&
                              (4 * x + 10 >= c0 - 4 && 4 * x - 7 <= c0 + 7 + 4);
            if (!may_differ)
                for (int ch = 0; ch < 4; ++ch) CHECK(za.at3(ch, y, x) == zb.at3(ch, y, x));
        }
}

TEST_CASE("train_codec validates corpus size") {
    CHECK_THROWS_AS(train_codec(*std::make_unique<LatentCodec>(tiny_cfg()),
                                Tensor({10, 3, 32, 32}), CodecTrainConfig{}),
                    std::invalid_argument);
}

TEST_CASE("training is deterministic and reports failure honestly") {
    Tensor corpus = tiny_corpus(1000, 5);
    CodecTrainConfig tc;
    tc.steps = 60;
    tc.batch = 2;
    tc.seed = 9;
    tc.target_mse = 1e9;  // gate off; this case only checks determinism

    LatentCodec a(tiny_cfg());
    LatentCodec b(tiny_cfg());
    train_codec(a, corpus, tc);
    train_codec(b, corpus, tc);
    for (size_t i = 0; i < a.params().size(); ++i)
        CHECK(bit_equal(a.params().at((int)i).value, b.params().at((int)i).value));

    LatentCodec c(tiny_cfg());
    CodecTrainConfig hard = tc;
    hard.steps = 5;
    hard.target_mse = 1e-12;
    CHECK_THROWS_AS(train_codec(c, corpus, hard), TrainingFailure);
    try {
        LatentCodec d(tiny_cfg());
        train_codec(d, corpus, hard);
    } catch (const TrainingFailure& e) {
        CHECK(e.final_loss > 1e-12);
    }
}

TEST_CASE("constant-color corpus reconstructs to near zero error") {
    Tensor corpus = tiny_corpus(1000, 6, /*constant_color=*/true);
    CodecTrainConfig tc;
    tc.steps = 500;
    tc.batch = 2;
    tc.seed = 3;
    tc.lr = 4e-3;
    tc.target_mse = 1e-3;
    LatentCodec codec(tiny_cfg());
    CodecTrainStats stats = train_codec(codec, corpus, tc);
    CHECK(stats.holdout_mse <= 1e-3);
}

TEST_CASE("params round trip through mdub + manifest") {
    LatentCodec codec(tiny_cfg());
    codec.save("tmp_codec_io");
    LatentCodec back = LatentCodec::load("tmp_codec_io");
    for (size_t i = 0; i < codec.params().size(); ++i)
        CHECK(bit_equal(codec.params().at((int)i).value, back.params().at((int)i).value));
    Rng rng(3);
    Tensor img = testutil::random_tensor({3, 32, 32}, rng, 0.3);
    CHECK(bit_equal(codec.encode(img), back.encode(img)));
}
