#include "minidub/denoiser.hpp"

#include <cmath>

namespace minidub {

using ad::Graph;
using ad::Var;

Tensor assemble_input(const Tensor& z_t, const Tensor& z0, const Tensor& union_mask_latent,
                      const Tensor& z_app) {
    if (z_t.rank() != 4) throw std::invalid_argument("assemble_input: z_t must be [N,c,h,w]");
    if (!z_t.same_shape(z0)) throw std::invalid_argument("assemble_input: z_t/z0 shape mismatch");
    int n = z_t.dim(0), cz = z_t.dim(1), h = z_t.dim(2), w = z_t.dim(3);
    if (z_app.rank() != 3 || z_app.dim(0) != cz || z_app.dim(1) != h || z_app.dim(2) != w)
        throw std::invalid_argument("assemble_input: appearance latent shape mismatch");
    if (union_mask_latent.rank() != 2 || union_mask_latent.dim(0) != h ||
        union_mask_latent.dim(1) != w)
        throw std::invalid_argument("assemble_input: mask must be [h,w] at latent resolution");
    Tensor out({n, 2 * cz, h, w});
    for (int f = 0; f < n; ++f)
        for (int c = 0; c < cz; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double m = union_mask_latent.at2(y, x);
                    // synthesis region carries the diffused latent, the known
                    // region stays on the clean signal
                    out.at4(f, c, y, x) = z0.at4(f, c, y, x) * (1.0 - m) + z_t.at4(f, c, y, x) * m;
                    out.at4(f, cz + c, y, x) = z_app.at3(c, y, x);
                }
    return out;
}

Tensor sinusoidal_embedding(double t, int dim) {
    Tensor emb({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        emb.at2(0, i) = std::sin(t * freq);
        emb.at2(0, half + i) = std::cos(t * freq);
    }
    return emb;
}

int DenoiserNet::norm_groups(int ch) const {
    int g = std::min(cfg_.groups, ch);
    while (ch % g != 0) --g;
    return g;
}

DenoiserNet::DenoiserNet(const DenoiserConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed * 0xD0E5ULL + 11);
    int cz2 = 2 * cfg.latent_channels;
    int levels = (int)cfg.widths.size();
    auto conv = [&](const std::string& name, ParamGroup grp, int co, int ci, int k,
                    bool zero = false) {
        store_.add(name + ".w", grp, init_fanin({co, ci, k, k}, rng), zero);
        store_.add(name + ".b", grp, Tensor({co}));
    };
    auto lin = [&](const std::string& name, ParamGroup grp, int ci, int co, bool zero = false,
                   bool bias = true) {
        store_.add(name + ".w", grp, init_fanin({ci, co}, rng), zero);
        if (bias) store_.add(name + ".b", grp, Tensor({co}));
    };
    auto scan_params = [&](const std::string& pre, ParamGroup grp, int ch) {
        Tensor a_log({ch, cfg.state_dim});
        for (int c = 0; c < ch; ++c)
            for (int s = 0; s < cfg.state_dim; ++s) a_log.at2(c, s) = std::log(1.0 + s);
        store_.add(pre + ".a_log", grp, std::move(a_log));
        store_.add(pre + ".dt.w", grp, init_normal({ch, ch}, 0.1 / std::sqrt((double)ch), rng));
        Tensor bdt({ch});
        for (int c = 0; c < ch; ++c) {
            double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            bdt.v[c] = std::log(std::expm1(dt));  // inverse softplus
        }
        store_.add(pre + ".dt.b", grp, std::move(bdt));
        store_.add(pre + ".wb", grp, init_fanin({ch, cfg.state_dim}, rng));
        store_.add(pre + ".wc", grp, init_fanin({ch, cfg.state_dim}, rng));
        store_.add(pre + ".d", grp, Tensor({ch}, 1.0));
    };
    auto seq_mix = [&](const std::string& pre, ParamGroup grp, int ch) {
        lin(pre + ".in", grp, ch, ch);
        lin(pre + ".out", grp, ch, ch, /*zero=*/true);
        if (cfg.attention_blocks) {
            lin(pre + ".q", grp, ch, ch, false, /*bias=*/false);
            lin(pre + ".k", grp, ch, ch, false, false);
            lin(pre + ".v", grp, ch, ch, false, false);
        } else {
            scan_params(pre + ".scan", grp, ch);
        }
    };
    auto unet_block = [&](const std::string& pre, int in_ch, int ch) {
        conv(pre + ".res.conv1", ParamGroup::Spatial, ch, in_ch, 3);
        conv(pre + ".res.conv2", ParamGroup::Spatial, ch, ch, 3);
        if (in_ch != ch) conv(pre + ".res.skip", ParamGroup::Spatial, ch, in_ch, 1);
        lin(pre + ".res.time", ParamGroup::Shared, cfg.time_dim, ch);
        seq_mix(pre + ".sp", ParamGroup::Spatial, ch);
        int dk = cfg.cond_channels;
        lin(pre + ".xa.q", ParamGroup::AudioXAttn, ch, dk, false, false);
        lin(pre + ".xa.k", ParamGroup::AudioXAttn, cfg.cond_channels, dk, false, false);
        lin(pre + ".xa.v", ParamGroup::AudioXAttn, cfg.cond_channels, dk, false, false);
        lin(pre + ".xa.out", ParamGroup::AudioXAttn, dk, ch, /*zero=*/true);
        seq_mix(pre + ".tm", ParamGroup::Temporal, ch);
    };

    lin("time_mlp1", ParamGroup::Shared, cfg.time_dim, cfg.time_dim);
    lin("time_mlp2", ParamGroup::Shared, cfg.time_dim, cfg.time_dim);
    conv("conv_in", ParamGroup::Spatial, cfg.widths[0], cz2, 3);
    for (int lvl = 0; lvl < levels; ++lvl) {
        for (int i = 0; i < cfg.blocks_per_res; ++i)
            unet_block("d" + std::to_string(lvl) + ".b" + std::to_string(i), cfg.widths[lvl],
                       cfg.widths[lvl]);
        if (lvl + 1 < levels)
            conv("down" + std::to_string(lvl), ParamGroup::Spatial, cfg.widths[lvl + 1],
                 cfg.widths[lvl], 3);
    }
    unet_block("mid.b0", cfg.widths[levels - 1], cfg.widths[levels - 1]);
    for (int lvl = levels - 2; lvl >= 0; --lvl) {
        conv("up" + std::to_string(lvl), ParamGroup::Spatial, cfg.widths[lvl], cfg.widths[lvl + 1],
             3);
        for (int i = 0; i < cfg.blocks_per_res; ++i)
            unet_block("u" + std::to_string(lvl) + ".b" + std::to_string(i),
                       i == 0 ? 2 * cfg.widths[lvl] : cfg.widths[lvl], cfg.widths[lvl]);
    }
    conv("conv_out", ParamGroup::Spatial, cfg.latent_channels, cfg.widths[0], 3, /*zero=*/true);
}

Var DenoiserNet::res_stage(Graph& g, const std::vector<Var>& b, Var x, Var temb,
                           const std::string& pre, int in_ch, int out_ch) const {
    Var h = g.group_norm(x, norm_groups(in_ch), 1e-5);
    h = g.silu(h);
    h = g.conv2d(h, b[p(pre + ".conv1.w")], b[p(pre + ".conv1.b")], 1, 1);
    Var tb = g.linear(temb, b[p(pre + ".time.w")], b[p(pre + ".time.b")]);  // [1, out_ch]
    h = g.add_channel_bias(h, g.reshape(tb, {out_ch}));
    h = g.group_norm(h, norm_groups(out_ch), 1e-5);
    h = g.silu(h);
    h = g.conv2d(h, b[p(pre + ".conv2.w")], b[p(pre + ".conv2.b")], 1, 1);
    Var skip = in_ch == out_ch ? x : g.conv2d(x, b[p(pre + ".skip.w")], b[p(pre + ".skip.b")], 1, 0);
    return g.add(h, skip);
}

// shared sequence-mixing core on [B,L,C]: pre-norm, in-proj, bidirectional
// scan (or self-attention for the ablation variant), zero-init out-proj
Var DenoiserNet::seq_mix_stage(Graph& g, const std::vector<Var>& b, Var x,
                               const std::string& pre, bool temporal) const {
    const Tensor& xv = g.val(x);
    int f = xv.dim(0), h = xv.dim(2), w = xv.dim(3);
    int ch = xv.dim(1);
    Var seq = temporal ? g.time_seq_from_nchw(x) : g.seq_from_nchw(x);
    int bsz = seq.valid() ? g.val(seq).dim(0) : 0;
    int len = g.val(seq).dim(1);
    Var flat = g.reshape(seq, {bsz * len, ch});
    flat = g.layer_norm_rows(flat, 1e-5);
    flat = g.linear(flat, b[p(pre + ".in.w")], b[p(pre + ".in.b")]);
    Var mixed;
    if (cfg_.attention_blocks) {
        // per sequence: softmax(QK^T/sqrt(C)) V
        Var q = g.linear(flat, b[p(pre + ".q.w")], g.leaf(Tensor({ch})));
        Var k = g.linear(flat, b[p(pre + ".k.w")], g.leaf(Tensor({ch})));
        Var v = g.linear(flat, b[p(pre + ".v.w")], g.leaf(Tensor({ch})));
        double inv = 1.0 / std::sqrt((double)ch);
        std::vector<Var> outs;
        Var q3 = g.reshape(q, {bsz, len, ch});
        Var k3 = g.reshape(k, {bsz, len, ch});
        Var v3 = g.reshape(v, {bsz, len, ch});
        for (int i = 0; i < bsz; ++i) {
            Var scores = g.scale(g.matmul_nt(g.slice_batch(q3, i), g.slice_batch(k3, i)), inv);
            Var probs = g.softmax_rows(scores);
            outs.push_back(g.matmul(probs, g.slice_batch(v3, i)));
        }
        mixed = g.reshape(g.stack_batch(outs), {bsz * len, ch});
    } else {
        Var seq_in = g.reshape(flat, {bsz, len, ch});
        Var fwd = g.selective_scan(seq_in, b[p(pre + ".scan.a_log")], b[p(pre + ".scan.dt.w")],
                                   b[p(pre + ".scan.dt.b")], b[p(pre + ".scan.wb")],
                                   b[p(pre + ".scan.wc")], b[p(pre + ".scan.d")]);
        Var rev = g.reverse_seq(g.selective_scan(
            g.reverse_seq(seq_in), b[p(pre + ".scan.a_log")], b[p(pre + ".scan.dt.w")],
            b[p(pre + ".scan.dt.b")], b[p(pre + ".scan.wb")], b[p(pre + ".scan.wc")],
            b[p(pre + ".scan.d")]));
        mixed = g.reshape(g.scale(g.add(fwd, rev), 0.5), {bsz * len, ch});
    }
    Var out = g.linear(mixed, b[p(pre + ".out.w")], b[p(pre + ".out.b")]);
    Var out_seq = g.reshape(out, {bsz, len, ch});
    Var back = temporal ? g.nchw_from_time_seq(out_seq, h, w) : g.nchw_from_seq(out_seq, h, w);
    (void)f;
    return g.add(x, back);
}

Var DenoiserNet::xattn_stage(Graph& g, const std::vector<Var>& b, Var x, Var f_mod,
                             const std::string& pre) const {
    const Tensor& xv = g.val(x);
    int f = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    int n_tok = g.val(f_mod).dim(0);
    int dk = cfg_.cond_channels;
    double inv = 1.0 / std::sqrt((double)dk);
    Var seq = g.seq_from_nchw(x);  // [F, HW, C]
    std::vector<Var> outs;
    for (int i = 0; i < f; ++i) {
        int w0 = 0, w1 = n_tok;
        if (cfg_.audio_window >= 0) {
            w0 = std::max(0, i - cfg_.audio_window);
            w1 = std::min(n_tok, i + cfg_.audio_window + 1);
        }
        Var tokens = g.slice_rows(f_mod, w0, w1);  // [W, cond]
        Var frame = g.layer_norm_rows(g.slice_batch(seq, i), 1e-5);
        Var q = g.linear(frame, b[p(pre + ".q.w")], g.leaf(Tensor({dk})));
        Var k = g.linear(tokens, b[p(pre + ".k.w")], g.leaf(Tensor({dk})));
        Var v = g.linear(tokens, b[p(pre + ".v.w")], g.leaf(Tensor({dk})));
        Var probs = g.softmax_rows(g.scale(g.matmul_nt(q, k), inv));
        Var attended = g.matmul(probs, v);  // [HW, dk]
        outs.push_back(g.linear(attended, b[p(pre + ".out.w")], b[p(pre + ".out.b")]));
    }
    (void)ch;
    Var stacked = g.stack_batch(outs);  // [F, HW, C]
    return g.add(x, g.nchw_from_seq(stacked, h, w));
}

Var DenoiserNet::spatial_block(Graph& g, const std::vector<Var>& b, Var x,
                               const std::string& block) const {
    return seq_mix_stage(g, b, x, block + ".sp", false);
}

Var DenoiserNet::temporal_block(Graph& g, const std::vector<Var>& b, Var x,
                                const std::string& block) const {
    return seq_mix_stage(g, b, x, block + ".tm", true);
}

Var DenoiserNet::audio_xattn_block(Graph& g, const std::vector<Var>& b, Var x, Var f_mod,
                                   const std::string& block) const {
    return xattn_stage(g, b, x, f_mod, block + ".xa");
}

Var DenoiserNet::block(Graph& g, const std::vector<Var>& b, Var x, Var temb, Var f_mod,
                       const std::string& pre, int in_ch, int out_ch, const Options& opt) const {
    Var h = res_stage(g, b, x, temb, pre + ".res", in_ch, out_ch);
    h = seq_mix_stage(g, b, h, pre + ".sp", /*temporal=*/false);
    if (opt.audio) h = xattn_stage(g, b, h, f_mod, pre + ".xa");
    if (opt.temporal && cfg_.use_temporal) h = seq_mix_stage(g, b, h, pre + ".tm", true);
    return h;
}

Var DenoiserNet::forward(Graph& g, const std::vector<Var>& b, Var zbar, int timestep, Var f_mod,
                         const Options& opt) const {
    const Tensor& zv = g.val(zbar);
    if (zv.rank() != 4 || zv.dim(1) != 2 * cfg_.latent_channels)
        throw std::invalid_argument("denoiser: zbar must be [N, 2*c_z, h, w]");
    if (timestep < 1 || timestep > cfg_.total_timesteps)
        throw std::invalid_argument("denoiser: timestep out of schedule range");
    if (opt.audio && (!f_mod.valid() || g.val(f_mod).dim(0) != zv.dim(0)))
        throw std::invalid_argument("denoiser: need one audio token per frame");

    Var temb = g.leaf(sinusoidal_embedding((double)timestep, cfg_.time_dim));
    temb = g.silu(g.linear(temb, b[p("time_mlp1.w")], b[p("time_mlp1.b")]));
    temb = g.linear(temb, b[p("time_mlp2.w")], b[p("time_mlp2.b")]);

    int levels = (int)cfg_.widths.size();
    Var h = g.conv2d(zbar, b[p("conv_in.w")], b[p("conv_in.b")], 1, 1);
    std::vector<Var> skips;
    for (int lvl = 0; lvl < levels; ++lvl) {
        for (int i = 0; i < cfg_.blocks_per_res; ++i)
            h = block(g, b, h, temb, f_mod, "d" + std::to_string(lvl) + ".b" + std::to_string(i),
                      cfg_.widths[lvl], cfg_.widths[lvl], opt);
        skips.push_back(h);
        if (lvl + 1 < levels)
            h = g.conv2d(h, b[p("down" + std::to_string(lvl) + ".w")],
                         b[p("down" + std::to_string(lvl) + ".b")], 2, 1);
    }
    h = block(g, b, h, temb, f_mod, "mid.b0", cfg_.widths[levels - 1], cfg_.widths[levels - 1],
              opt);
    for (int lvl = levels - 2; lvl >= 0; --lvl) {
        h = g.upsample2x(h);
        h = g.conv2d(h, b[p("up" + std::to_string(lvl) + ".w")],
                     b[p("up" + std::to_string(lvl) + ".b")], 1, 1);
        h = g.concat_ch(h, skips[lvl]);
        for (int i = 0; i < cfg_.blocks_per_res; ++i)
            h = block(g, b, h, temb, f_mod, "u" + std::to_string(lvl) + ".b" + std::to_string(i),
                      i == 0 ? 2 * cfg_.widths[lvl] : cfg_.widths[lvl], cfg_.widths[lvl], opt);
    }
    h = g.silu(g.group_norm(h, norm_groups(cfg_.widths[0]), 1e-5));
    return g.conv2d(h, b[p("conv_out.w")], b[p("conv_out.b")], 1, 1);
}

Tensor DenoiserNet::predict(const Tensor& zbar, int timestep, const Tensor& f_mod,
                            const Options& opt) const {
    Graph g(false);
    auto b = store_.bind(g, [](const Param&) { return false; });
    Var fm = opt.audio ? g.leaf(f_mod) : Var{};
    return g.val(forward(g, b, g.leaf(zbar), timestep, fm, opt));
}

Tensor denoise_predict(const DenoiserNet& net, const Conditioning& cond, const Tensor& zbar,
                       int timestep, const ConditionBundle& bundle,
                       const DenoiserNet::Options& opt, bool habit_modulation) {
    Graph g(false);
    auto bn = net.params().bind(g, [](const Param&) { return false; });
    auto bc = cond.params().bind(g, [](const Param&) { return false; });
    Var f_mod;
    if (opt.audio)
        f_mod = cond.modulated_audio(g, bc, g.leaf(bundle.audio), g.leaf(bundle.habit),
                                     habit_modulation);
    return g.val(net.forward(g, bn, g.leaf(zbar), timestep, f_mod, opt));
}

namespace {

// standalone single-sequence mixing cores used by the complexity check;
// same kernel path as the U-Net blocks
uint64_t measure_core(int tokens, int ch, int state_dim, bool attention, uint64_t seed) {
    Rng rng(seed);
    Graph g(false);
    Tensor x({1, tokens, ch});
    for (auto& v : x.v) v = rng.gaussian();
    Var in = g.leaf(std::move(x));
    Var win = g.leaf(init_fanin({ch, ch}, rng));
    Var bin = g.leaf(Tensor({ch}));
    Var wout = g.leaf(init_fanin({ch, ch}, rng));
    Var bout = g.leaf(Tensor({ch}));

    op_counter().enabled = true;
    op_counter().reset();
    Var flat = g.layer_norm_rows(g.reshape(in, {tokens, ch}), 1e-5);
    flat = g.linear(flat, win, bin);
    Var mixed;
    if (attention) {
        Var wq = g.leaf(init_fanin({ch, ch}, rng));
        Var wk = g.leaf(init_fanin({ch, ch}, rng));
        Var wv = g.leaf(init_fanin({ch, ch}, rng));
        Var q = g.linear(flat, wq, g.leaf(Tensor({ch})));
        Var k = g.linear(flat, wk, g.leaf(Tensor({ch})));
        Var v = g.linear(flat, wv, g.leaf(Tensor({ch})));
        Var probs = g.softmax_rows(g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt((double)ch)));
        mixed = g.matmul(probs, v);
    } else {
        Var a_log = g.leaf(init_fanin({ch, state_dim}, rng));
        Var wdt = g.leaf(init_fanin({ch, ch}, rng));
        Var bdt = g.leaf(Tensor({ch}));
        Var wb = g.leaf(init_fanin({ch, state_dim}, rng));
        Var wc = g.leaf(init_fanin({ch, state_dim}, rng));
        Var d = g.leaf(Tensor({ch}, 1.0));
        Var s3 = g.reshape(flat, {1, tokens, ch});
        Var fwd = g.selective_scan(s3, a_log, wdt, bdt, wb, wc, d);
        Var rev = g.reverse_seq(g.selective_scan(g.reverse_seq(s3), a_log, wdt, bdt, wb, wc, d));
        mixed = g.reshape(g.scale(g.add(fwd, rev), 0.5), {tokens, ch});
    }
    Var out = g.linear(mixed, wout, bout);
    (void)out;
    uint64_t ops = op_counter().ops;
    op_counter().enabled = false;
    return ops;
}

}  // namespace

uint64_t measure_ssm_block_ops(int tokens, int ch, int state_dim, uint64_t seed) {
    return measure_core(tokens, ch, state_dim, false, seed);
}

uint64_t measure_attention_block_ops(int tokens, int ch, uint64_t seed) {
    return measure_core(tokens, ch, 0, true, seed);
}

}  // namespace minidub
