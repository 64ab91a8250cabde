#include "minidub/conditioning.hpp"

#include <algorithm>

namespace minidub {

using ad::Graph;
using ad::Var;

ConditionBundle drop_conditions(const ConditionBundle& bundle, double p, uint64_t seed) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("drop_conditions: p out of [0,1]");
    Rng rng(seed);
    ConditionBundle out = bundle;
    bool drop_audio = rng.uniform() < p;  // two independent draws
    bool drop_habit = rng.uniform() < p;
    if (drop_audio) {
        out.audio = Tensor(bundle.audio.shape);
        out.audio_dropped = true;
    }
    if (drop_habit) {
        out.habit = Tensor(bundle.habit.shape);
        out.habit_dropped = true;
    }
    return out;
}

std::vector<int> sample_habit_indices(int video_frames, int k, int exclude_lo, int exclude_hi,
                                      uint64_t seed) {
    if (k < 1) throw std::invalid_argument("sample_habit_indices: k < 1");
    std::vector<int> candidates;
    for (int i = 0; i < video_frames; ++i)
        if (i < exclude_lo || i >= exclude_hi) candidates.push_back(i);
    if ((int)candidates.size() < k)
        throw std::invalid_argument("sample_habit_indices: not enough frames outside the "
                                    "excluded range");
    Rng rng(seed);
    for (int i = 0; i < k; ++i) {
        int j = i + (int)rng.below((uint64_t)(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(k);
    return candidates;
}

Tensor gather_mouth_crops(const ToyClip& clip, const std::vector<int>& indices) {
    if (indices.empty()) throw std::invalid_argument("gather_mouth_crops: empty index list");
    CropBox box = mouth_crop_box(clip.frame_size());
    int ch = box.r1 - box.r0, cw = box.c1 - box.c0;
    Tensor out({(int)indices.size(), 3, ch, cw});
    int size = clip.frame_size();
    for (size_t i = 0; i < indices.size(); ++i) {
        int f = indices[i];
        if (f < 0 || f >= clip.frame_count())
            throw std::invalid_argument("gather_mouth_crops: frame index out of range");
        for (int c = 0; c < 3; ++c)
            for (int r = box.r0; r < box.r1; ++r)
                for (int col = box.c0; col < box.c1; ++col)
                    out.at4((int)i, c, r - box.r0, col - box.c0) =
                        clip.frames.v[(((int64_t)f * 3 + c) * size + r) * size + col];
    }
    return out;
}

Conditioning::Conditioning(const ConditioningConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed * 0xC09DULL + 5);
    int c = cfg.channels;
    store_.add("audio1.w", ParamGroup::Conditioning, init_fanin({c, cfg.audio_feat_dim, 3}, rng));
    store_.add("audio1.b", ParamGroup::Conditioning, Tensor({c}));
    store_.add("audio2.w", ParamGroup::Conditioning, init_fanin({c, c, 3}, rng));
    store_.add("audio2.b", ParamGroup::Conditioning, Tensor({c}));

    store_.add("habit1.w", ParamGroup::Conditioning, init_fanin({cfg.habit_width1, 3, 3, 3}, rng));
    store_.add("habit1.b", ParamGroup::Conditioning, Tensor({cfg.habit_width1}));
    store_.add("habit2.w", ParamGroup::Conditioning,
               init_fanin({cfg.habit_width2, cfg.habit_width1, 3, 3}, rng));
    store_.add("habit2.b", ParamGroup::Conditioning, Tensor({cfg.habit_width2}));
    store_.add("habit3.w", ParamGroup::Conditioning, init_fanin({cfg.habit_width2, c}, rng));
    store_.add("habit3.b", ParamGroup::Conditioning, Tensor({c}));

    // scale MLP starts at 1, shift at 0: modulation is plain layer norm at init
    store_.add("adaln_scale.w", ParamGroup::Conditioning, Tensor({c, c}));
    store_.add("adaln_scale.b", ParamGroup::Conditioning, Tensor({c}, 1.0));
    store_.add("adaln_shift.w", ParamGroup::Conditioning, Tensor({c, c}));
    store_.add("adaln_shift.b", ParamGroup::Conditioning, Tensor({c}));
    store_.add("lambda", ParamGroup::Conditioning, Tensor({c}, 1.0));

    // small-random output projection; the zero-init barrier lives in the
    // denoiser's cross-attention so this path keeps nonzero gradients
    store_.add("out_proj.w", ParamGroup::Conditioning, init_normal({c, c}, 0.3 / std::sqrt(c), rng));
    store_.add("out_proj.b", ParamGroup::Conditioning, Tensor({c}));
}

Var Conditioning::encode_audio(Graph& g, const std::vector<Var>& b, Var features) const {
    Var h = g.conv1d_same(features, b[p("audio1.w")], b[p("audio1.b")]);
    h = g.silu(h);
    return g.conv1d_same(h, b[p("audio2.w")], b[p("audio2.b")]);
}

Var Conditioning::encode_habit(Graph& g, const std::vector<Var>& b, Var crops) const {
    if (g.val(crops).rank() != 4) throw std::invalid_argument("encode_habit: expects [K,3,h,w]");
    if (g.val(crops).dim(0) < 1) throw std::invalid_argument("encode_habit: empty crop list");
    Var h = g.conv2d(crops, b[p("habit1.w")], b[p("habit1.b")], 2, 1);
    h = g.silu(h);
    h = g.conv2d(h, b[p("habit2.w")], b[p("habit2.b")], 2, 1);
    h = g.silu(h);
    Var pooled = g.global_avg_pool(h);                             // [K, w2]
    Var feats = g.linear(pooled, b[p("habit3.w")], b[p("habit3.b")]);  // [K, C]
    return g.mean_rows_invariant(feats);  // pooling is exactly order-invariant
}

Var Conditioning::modulate(Graph& g, const std::vector<Var>& b, Var audio_tokens,
                           Var habit_vec) const {
    int c = cfg_.channels;
    Var v_row = g.reshape(habit_vec, {1, c});
    Var scale = g.reshape(g.linear(v_row, b[p("adaln_scale.w")], b[p("adaln_scale.b")]), {c});
    Var shift = g.reshape(g.linear(v_row, b[p("adaln_shift.w")], b[p("adaln_shift.b")]), {c});
    Var normed = g.layer_norm_rows(audio_tokens, cfg_.adaln_eps);
    Var modulated = g.bias_rows(g.mul_rows(normed, scale), shift);
    Var residual = g.mul_rows(audio_tokens, b[p("lambda")]);
    return g.add(modulated, residual);
}

Var Conditioning::modulated_audio(Graph& g, const std::vector<Var>& b, Var audio_tokens,
                                  Var habit_vec, bool habit_modulation) const {
    Var m = habit_modulation ? modulate(g, b, audio_tokens, habit_vec) : audio_tokens;
    return g.linear(m, b[p("out_proj.w")], b[p("out_proj.b")]);
}

Tensor Conditioning::encode_audio_tensor(const Tensor& features) const {
    Graph g(false);
    auto b = store_.bind(g, [](const Param&) { return false; });
    return g.val(encode_audio(g, b, g.leaf(features)));
}

Tensor Conditioning::encode_habit_tensor(const Tensor& crops) const {
    Graph g(false);
    auto b = store_.bind(g, [](const Param&) { return false; });
    return g.val(encode_habit(g, b, g.leaf(crops)));
}

}  // namespace minidub
