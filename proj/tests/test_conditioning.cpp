#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "minidub/conditioning.hpp"
#include "testutil.hpp"

using namespace minidub;
using ad::Graph;
using ad::Var;

namespace {

ConditioningConfig small_cfg() {
    ConditioningConfig cfg;
    cfg.channels = 8;
    cfg.crop_size = 16;
    cfg.habit_width1 = 6;
    cfg.habit_width2 = 8;
    cfg.init_seed = 3;
    return cfg;
}

void set_param(Conditioning& cond, const std::string& name, double fill) {
    Param& p = cond.params().at(cond.params().index_of(name));
    std::fill(p.value.v.begin(), p.value.v.end(), fill);
}

}  // namespace

TEST_CASE("audio encoder keeps length and is constant on silence") {
    Conditioning cond(small_cfg());
    AudioTrack audio = synth_audio(12, 4);
    Tensor tokens = cond.encode_audio_tensor(audio.features);
    CHECK(tokens.shape == Shape({12, 8}));

    AudioTrack silence = synth_audio(12, 4);
    std::fill(silence.envelope.begin(), silence.envelope.end(), 0.0);
    for (int i = 0; i < 12; ++i) {
        silence.features.at2(i, 0) = 0.0;
        for (int j = 1; j < kAudioFeatureDim; ++j) silence.features.at2(i, j) = 0.0;
    }
    Tensor flat = cond.encode_audio_tensor(silence.features);
    for (int i = 1; i < 12; ++i)
        for (int c = 0; c < 8; ++c) CHECK(flat.at2(i, c) == flat.at2(0, c));
}

TEST_CASE("audio encoder gradient matches finite differences") {
    Conditioning cond(small_cfg());
    Rng rng(5);
    Tensor feats = testutil::random_tensor({6, kAudioFeatureDim}, rng);
    Tensor target = testutil::random_tensor({6, 8}, rng);

    auto loss_of = [&](const std::vector<Tensor>& inputs) {
        Graph g;
        // inputs[0] = features; the rest override the encoder params
        auto b = cond.params().bind(g, [](const Param&) { return true; });
        Var a = cond.encode_audio(g, b, g.leaf(inputs[0], true));
        return g.val(g.mse(a, g.leaf(target))).v[0];
    };
    Graph g;
    auto b = cond.params().bind(g, [](const Param&) { return true; });
    Var feats_v = g.leaf(feats, true);
    Var a = cond.encode_audio(g, b, feats_v);
    Var loss = g.mse(a, g.leaf(target));
    g.backward(loss);
    double err = testutil::fd_max_rel_err(loss_of, {feats}, 0, g.grad(feats_v), 1e-6, 48);
    CHECK(err < 1e-4);

    // parameter gradients of both conv layers
    for (const char* name : {"audio1.w", "audio2.w", "audio1.b", "audio2.b"}) {
        int idx = cond.params().index_of(name);
        Tensor saved = cond.params().at(idx).value;
        auto param_loss = [&](const std::vector<Tensor>& inputs) {
            cond.params().at(idx).value = inputs[0];
            Graph g2;
            auto b2 = cond.params().bind(g2, [](const Param&) { return true; });
            Var a2 = cond.encode_audio(g2, b2, g2.leaf(feats));
            double out = g2.val(g2.mse(a2, g2.leaf(target))).v[0];
            cond.params().at(idx).value = saved;
            return out;
        };
        double perr =
            testutil::fd_max_rel_err(param_loss, {saved}, 0, g.grad(b[idx]), 1e-6, 32);
        INFO(name);
        CHECK(perr < 1e-4);
    }
}

TEST_CASE("habit embedding is order invariant and reduces to one frame") {
    Conditioning cond(small_cfg());
    Rng rng(6);
    Tensor crops = testutil::random_tensor({5, 3, 16, 16}, rng, 0.3);
    Tensor emb = cond.encode_habit_tensor(crops);
    CHECK(emb.shape == Shape({8}));

    Tensor shuffled({5, 3, 16, 16});
    int order[5] = {3, 0, 4, 2, 1};
    int64_t sz = 3 * 16 * 16;
    for (int i = 0; i < 5; ++i)
        std::copy(crops.v.begin() + order[i] * sz, crops.v.begin() + (order[i] + 1) * sz,
                  shuffled.v.begin() + i * sz);
    CHECK(bit_equal(cond.encode_habit_tensor(shuffled), emb));

    Tensor one({1, 3, 16, 16});
    std::copy(crops.v.begin(), crops.v.begin() + sz, one.v.begin());
    Tensor emb_one = cond.encode_habit_tensor(one);
    CHECK(emb_one.shape == Shape({8}));

    CHECK_THROWS_AS(cond.encode_habit_tensor(Tensor({0, 3, 16, 16})), std::invalid_argument);
}

TEST_CASE("adaln identity and pure-shift modes") {
    ConditioningConfig cfg = small_cfg();
    Conditioning cond(cfg);
    set_param(cond, "adaln_scale.w", 0.0);
    set_param(cond, "adaln_shift.w", 0.0);
    set_param(cond, "lambda", 0.0);
    Rng rng(7);
    Tensor a = testutil::random_tensor({6, 8}, rng);
    Tensor v = testutil::random_tensor({8}, rng);

    // scale = 1, shift = 0: output is exactly the per-step layer norm
    set_param(cond, "adaln_scale.b", 1.0);
    set_param(cond, "adaln_shift.b", 0.0);
    {
        Graph g;
        auto b = cond.params().bind(g, [](const Param&) { return false; });
        Var out = cond.modulate(g, b, g.leaf(a), g.leaf(v));
        Var ref = g.layer_norm_rows(g.leaf(a), cfg.adaln_eps);
        CHECK(bit_equal(g.val(out), g.val(ref)));
    }

    // scale = 0, shift = b: output is the constant b at every step
    set_param(cond, "adaln_scale.b", 0.0);
    set_param(cond, "adaln_shift.b", 0.37);
    {
        Graph g;
        auto b = cond.params().bind(g, [](const Param&) { return false; });
        Var out = cond.modulate(g, b, g.leaf(a), g.leaf(v));
        for (int i = 0; i < 6; ++i)
            for (int c = 0; c < 8; ++c) CHECK(g.val(out).at2(i, c) == doctest::Approx(0.37));
    }

    // zero-variance step stays finite thanks to the epsilon guard
    set_param(cond, "adaln_scale.b", 1.0);
    Tensor flat_a({3, 8}, 0.42);
    {
        Graph g;
        auto b = cond.params().bind(g, [](const Param&) { return false; });
        Var out = cond.modulate(g, b, g.leaf(flat_a), g.leaf(v));
        for (double x : g.val(out).v) CHECK(std::isfinite(x));
    }
}

TEST_CASE("adaln gradients match finite differences") {
    Conditioning cond(small_cfg());
    Rng rng(8);
    Tensor a = testutil::random_tensor({5, 8}, rng);
    Tensor v = testutil::random_tensor({8}, rng);
    Tensor target = testutil::random_tensor({5, 8}, rng);

    auto loss_of = [&](const std::vector<Tensor>& in) {
        Graph g;
        auto b = cond.params().bind(g, [](const Param&) { return false; });
        Var out = cond.modulate(g, b, g.leaf(in[0], true), g.leaf(in[1], true));
        return g.val(g.mse(out, g.leaf(target))).v[0];
    };
    Graph g;
    auto b = cond.params().bind(g, [](const Param&) { return false; });
    Var av = g.leaf(a, true);
    Var vv = g.leaf(v, true);
    Var out = cond.modulate(g, b, av, vv);
    g.backward(g.mse(out, g.leaf(target)));
    CHECK(testutil::fd_max_rel_err(loss_of, {a, v}, 0, g.grad(av), 1e-6, 40) < 1e-4);
    CHECK(testutil::fd_max_rel_err(loss_of, {a, v}, 1, g.grad(vv), 1e-6, -1) < 1e-4);
}

TEST_CASE("adaln is equivariant under joint channel relabeling") {
    ConditioningConfig cfg = small_cfg();
    Conditioning cond(cfg);
    Rng rng(9);
    // give the MLPs structure
    for (const char* n : {"adaln_scale.w", "adaln_shift.w"}) {
        Param& p = cond.params().at(cond.params().index_of(n));
        p.value = testutil::random_tensor(p.value.shape, rng, 0.4);
    }
    Tensor a = testutil::random_tensor({4, 8}, rng);
    Tensor v = testutil::random_tensor({8}, rng);

    int perm[8] = {5, 2, 7, 0, 3, 6, 1, 4};
    Conditioning permuted(cfg);
    for (const char* n : {"adaln_scale", "adaln_shift"}) {
        const Tensor& w = cond.params().at(cond.params().index_of(std::string(n) + ".w")).value;
        const Tensor& bb = cond.params().at(cond.params().index_of(std::string(n) + ".b")).value;
        Param& wp = permuted.params().at(permuted.params().index_of(std::string(n) + ".w"));
        Param& bp = permuted.params().at(permuted.params().index_of(std::string(n) + ".b"));
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) wp.value.at2(i, j) = w.at2(perm[i], perm[j]);
        for (int j = 0; j < 8; ++j) bp.value.v[j] = bb.v[perm[j]];
    }
    {
        const Tensor& lam = cond.params().at(cond.params().index_of("lambda")).value;
        Param& lp = permuted.params().at(permuted.params().index_of("lambda"));
        for (int j = 0; j < 8; ++j) lp.value.v[j] = lam.v[perm[j]];
    }
    Tensor a_p({4, 8}), v_p({8});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j) a_p.at2(i, j) = a.at2(i, perm[j]);
    for (int j = 0; j < 8; ++j) v_p.v[j] = v.v[perm[j]];

    Graph g;
    auto b0 = cond.params().bind(g, [](const Param&) { return false; });
    auto b1 = permuted.params().bind(g, [](const Param&) { return false; });
    Tensor out = g.val(cond.modulate(g, b0, g.leaf(a), g.leaf(v)));
    Tensor out_p = g.val(permuted.modulate(g, b1, g.leaf(a_p), g.leaf(v_p)));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(out_p.at2(i, j) == doctest::Approx(out.at2(i, perm[j])).epsilon(1e-12));
}

TEST_CASE("drop_conditions endpoints and statistics") {
    Rng rng(10);
    ConditionBundle bundle;
    bundle.audio = testutil::random_tensor({6, 8}, rng);
    bundle.habit = testutil::random_tensor({8}, rng);

    ConditionBundle keep = drop_conditions(bundle, 0.0, 1);
    CHECK(!keep.audio_dropped);
    CHECK(!keep.habit_dropped);
    CHECK(bit_equal(keep.audio, bundle.audio));

    ConditionBundle gone = drop_conditions(bundle, 1.0, 1);
    CHECK(gone.audio_dropped);
    CHECK(gone.habit_dropped);
    for (double x : gone.audio.v) CHECK(x == 0.0);
    for (double x : gone.habit.v) CHECK(x == 0.0);

    CHECK_THROWS_AS(drop_conditions(bundle, 1.5, 1), std::invalid_argument);

    int n = 10000;
    int na = 0, nh = 0, nboth = 0;
    for (int i = 0; i < n; ++i) {
        ConditionBundle d = drop_conditions(bundle, 0.1, 1000 + i);
        na += d.audio_dropped;
        nh += d.habit_dropped;
        nboth += d.audio_dropped && d.habit_dropped;
    }
    double fa = na / (double)n, fh = nh / (double)n;
    CHECK(std::fabs(fa - 0.1) <= 0.01);
    CHECK(std::fabs(fh - 0.1) <= 0.01);
    // 2x2 chi-square independence check, alpha = 0.01 -> 6.635
    double o[2][2] = {{(double)(n - na - nh + nboth), (double)(nh - nboth)},
                      {(double)(na - nboth), (double)nboth}};
    double chi2 = 0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double pi = i == 0 ? 1.0 - fa : fa;
            double pj = j == 0 ? 1.0 - fh : fh;
            double e = pi * pj * n;
            chi2 += (o[i][j] - e) * (o[i][j] - e) / e;
        }
    CHECK(chi2 < 6.635);
}

TEST_CASE("habit segment sampling avoids the excluded range") {
    auto forced = sample_habit_indices(10, 3, 0, 7, 5);  // only frames 7,8,9 remain
    std::set<int> got(forced.begin(), forced.end());
    CHECK(got == std::set<int>({7, 8, 9}));

    CHECK_THROWS_AS(sample_habit_indices(10, 4, 0, 7, 5), std::invalid_argument);

    for (uint64_t seed = 0; seed < 1000; ++seed) {
        auto idx = sample_habit_indices(16, 6, 4, 12, seed);
        CHECK(idx.size() == 6);
        std::set<int> uniq(idx.begin(), idx.end());
        CHECK(uniq.size() == 6);
        for (int i : idx) CHECK((i < 4 || i >= 12));
    }
    CHECK(sample_habit_indices(16, 6, 4, 12, 77) == sample_habit_indices(16, 6, 4, 12, 77));
}
