#include "minidub/latent_codec.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace minidub {

using ad::Graph;
using ad::Var;

LatentCodec::LatentCodec(const CodecConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed * 0xC0DECULL + 17);
    auto conv = [&](const std::string& name, int co, int ci) {
        store_.add(name + ".w", ParamGroup::Codec, init_fanin({co, ci, 3, 3}, rng));
        store_.add(name + ".b", ParamGroup::Codec, Tensor({co}));
    };
    conv("enc1", cfg.enc_width1, 3);
    conv("enc2", cfg.enc_width2, cfg.enc_width1);
    conv("enc3", cfg.latent_channels, cfg.enc_width2);
    conv("dec1", cfg.dec_width1, cfg.latent_channels);
    conv("dec2", cfg.dec_width2, cfg.dec_width1);
    conv("dec3", 3, cfg.dec_width2);
    latent_shift_ = Tensor({cfg.latent_channels});
    latent_scale_ = Tensor({cfg.latent_channels}, 1.0);
}

Var LatentCodec::encode_graph(Graph& g, const std::vector<Var>& b, Var images) const {
    Var h = g.conv2d(images, b[p("enc1.w")], b[p("enc1.b")], 2, 1);
    h = g.silu(h);
    h = g.conv2d(h, b[p("enc2.w")], b[p("enc2.b")], 2, 1);
    h = g.silu(h);
    return g.conv2d(h, b[p("enc3.w")], b[p("enc3.b")], 1, 1);
}

Var LatentCodec::decode_graph(Graph& g, const std::vector<Var>& b, Var latents) const {
    Var h = g.conv2d(latents, b[p("dec1.w")], b[p("dec1.b")], 1, 1);
    h = g.silu(h);
    h = g.upsample2x(h);
    h = g.conv2d(h, b[p("dec2.w")], b[p("dec2.b")], 1, 1);
    h = g.silu(h);
    h = g.upsample2x(h);
    return g.conv2d(h, b[p("dec3.w")], b[p("dec3.b")], 1, 1);
}

Tensor LatentCodec::encode_frames(const Tensor& frames) const {
    if (frames.rank() != 4 || frames.dim(1) != 3)
        throw std::invalid_argument("encode: expects [N,3,h,w]");
    if (frames.dim(2) % cfg_.factor != 0 || frames.dim(3) % cfg_.factor != 0)
        throw std::invalid_argument("encode: dims must be divisible by the downsample factor");
    Graph g(false);
    auto b = store_.bind(g, [](const Param&) { return false; });
    Var z = encode_graph(g, b, g.leaf(frames));
    Tensor out = g.val(z);
    int cz = cfg_.latent_channels;
    int64_t hw = (int64_t)out.dim(2) * out.dim(3);
    for (int f = 0; f < out.dim(0); ++f)
        for (int c = 0; c < cz; ++c) {
            double* zs = out.data() + ((int64_t)f * cz + c) * hw;
            for (int64_t i = 0; i < hw; ++i)
                zs[i] = (zs[i] - latent_shift_.v[c]) * latent_scale_.v[c];
        }
    return out;
}

Tensor LatentCodec::decode_frames(const Tensor& latents) const {
    if (latents.rank() != 4 || latents.dim(1) != cfg_.latent_channels)
        throw std::invalid_argument("decode: expects [N,c_z,h,w]");
    Tensor raw = latents;
    int cz = cfg_.latent_channels;
    int64_t hw = (int64_t)raw.dim(2) * raw.dim(3);
    for (int f = 0; f < raw.dim(0); ++f)
        for (int c = 0; c < cz; ++c) {
            double* zs = raw.data() + ((int64_t)f * cz + c) * hw;
            for (int64_t i = 0; i < hw; ++i)
                zs[i] = zs[i] / latent_scale_.v[c] + latent_shift_.v[c];
        }
    Graph g(false);
    auto b = store_.bind(g, [](const Param&) { return false; });
    Var x = decode_graph(g, b, g.leaf(std::move(raw)));
    return g.val(x);
}

Tensor LatentCodec::encode(const Tensor& image) const {
    Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)});
    batch.v = image.v;
    Tensor z = encode_frames(batch);
    Tensor out({z.dim(1), z.dim(2), z.dim(3)});
    out.v = z.v;
    return out;
}

Tensor LatentCodec::decode(const Tensor& latent) const {
    Tensor batch({1, latent.dim(0), latent.dim(1), latent.dim(2)});
    batch.v = latent.v;
    Tensor x = decode_frames(batch);
    Tensor out({x.dim(1), x.dim(2), x.dim(3)});
    out.v = x.v;
    return out;
}

CodecTrainStats train_codec(LatentCodec& codec, const Tensor& frames, const CodecTrainConfig& cfg) {
    if (frames.rank() != 4 || frames.dim(0) < 1000)
        throw std::invalid_argument("train_codec: need a [M>=1000,3,h,w] frame corpus");
    int m = frames.dim(0);
    int holdout = std::max(1, (int)(m * cfg.holdout_frac));
    int train_n = m - holdout;
    int c3 = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
    int64_t fsz = (int64_t)c3 * h * w;

    Rng rng(cfg.seed * 0x7A1Full + 3);
    auto trainable = [](const Param&) { return true; };
    AdamConfig adam;
    adam.lr = cfg.lr;
    adam.warmup_steps = 100;

    double last_loss = 0;
    for (int step = 1; step <= cfg.steps; ++step) {
        Tensor batch({cfg.batch, c3, h, w});
        for (int i = 0; i < cfg.batch; ++i) {
            int idx = (int)rng.below((uint64_t)train_n);
            std::copy(frames.v.begin() + idx * fsz, frames.v.begin() + (idx + 1) * fsz,
                      batch.v.begin() + i * fsz);
        }
        Graph g;
        auto b = codec.store_.bind(g, trainable);
        Var x = g.leaf(std::move(batch));
        Var z = codec.encode_graph(g, b, x);
        Var y = codec.decode_graph(g, b, z);
        Var loss = g.mse(y, x);
        g.backward(loss);
        adam_step(codec.store_, g, b, trainable, adam, step);
        last_loss = g.val(loss).v[0];
    }

    // per-channel latent normalization from the training set
    int probe = std::min(train_n, 256);
    Tensor sample({probe, c3, h, w});
    for (int i = 0; i < probe; ++i) {
        int idx = (int)((int64_t)i * train_n / probe);
        std::copy(frames.v.begin() + idx * fsz, frames.v.begin() + (idx + 1) * fsz,
                  sample.v.begin() + i * fsz);
    }
    {
        Graph g(false);
        auto b = codec.store_.bind(g, [](const Param&) { return false; });
        Tensor z = g.val(codec.encode_graph(g, b, g.leaf(std::move(sample))));
        int cz = z.dim(1);
        int64_t per = z.numel() / cz;
        for (int c = 0; c < cz; ++c) {
            double mu = 0, var = 0;
            for (int f = 0; f < z.dim(0); ++f) {
                const double* zs = z.data() + ((int64_t)f * cz + c) * z.dim(2) * z.dim(3);
                for (int64_t i = 0; i < (int64_t)z.dim(2) * z.dim(3); ++i) mu += zs[i];
            }
            mu /= (double)per;
            for (int f = 0; f < z.dim(0); ++f) {
                const double* zs = z.data() + ((int64_t)f * cz + c) * z.dim(2) * z.dim(3);
                for (int64_t i = 0; i < (int64_t)z.dim(2) * z.dim(3); ++i)
                    var += (zs[i] - mu) * (zs[i] - mu);
            }
            var /= (double)per;
            codec.latent_shift_.v[c] = mu;
            codec.latent_scale_.v[c] = 1.0 / std::sqrt(var + 1e-8);
        }
    }

    // held-out reconstruction gate
    double mse = 0;
    for (int i = train_n; i < m; ++i) {
        Tensor img({c3, h, w});
        std::copy(frames.v.begin() + i * fsz, frames.v.begin() + (i + 1) * fsz, img.v.begin());
        Tensor rec = codec.decode(codec.encode(img));
        for (int64_t k = 0; k < fsz; ++k) mse += (rec.v[k] - img.v[k]) * (rec.v[k] - img.v[k]);
    }
    mse /= (double)holdout * fsz;

    codec.stats_.final_train_loss = last_loss;
    codec.stats_.holdout_mse = mse;
    codec.stats_.steps = cfg.steps;
    if (mse > cfg.target_mse)
        throw TrainingFailure("codec reconstruction gate missed: held-out MSE " +
                                  std::to_string(mse) + " > " + std::to_string(cfg.target_mse),
                              mse);
    return codec.stats_;
}

Tensor mask_to_latent(const Tensor& mask, int factor) {
    if (mask.rank() != 2) throw std::invalid_argument("mask_to_latent: expects [h,w]");
    int h = mask.dim(0), w = mask.dim(1);
    if (h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("mask_to_latent: dims not divisible by factor");
    Tensor out({h / factor, w / factor});
    double inv = 1.0 / (factor * factor);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at2(y / factor, x / factor) += mask.at2(y, x) * inv;
    return out;
}

void LatentCodec::save(const std::string& path_prefix) const {
    Container c;
    store_.save(c);
    c.put_f64("latent_shift", latent_shift_);
    c.put_f64("latent_scale", latent_scale_);
    c.write(path_prefix + ".mdub");
    nlohmann::json j;
    j["image_size"] = cfg_.image_size;
    j["factor"] = cfg_.factor;
    j["latent_channels"] = cfg_.latent_channels;
    j["enc_width1"] = cfg_.enc_width1;
    j["enc_width2"] = cfg_.enc_width2;
    j["dec_width1"] = cfg_.dec_width1;
    j["dec_width2"] = cfg_.dec_width2;
    j["init_seed"] = cfg_.init_seed;
    j["holdout_mse"] = stats_.holdout_mse;
    j["final_train_loss"] = stats_.final_train_loss;
    j["train_steps"] = stats_.steps;
    auto shapes = nlohmann::json::object();
    for (size_t i = 0; i < store_.size(); ++i) shapes[store_.at((int)i).name] = store_.at((int)i).value.shape;
    j["layer_shapes"] = shapes;
    std::ofstream f(path_prefix + ".json");
    f << j.dump(2) << "\n";
}

LatentCodec LatentCodec::load(const std::string& path_prefix) {
    std::ifstream f(path_prefix + ".json");
    if (!f) throw ConfigError("missing codec manifest " + path_prefix + ".json");
    nlohmann::json j = nlohmann::json::parse(f);
    CodecConfig cfg;
    cfg.image_size = j.at("image_size");
    cfg.factor = j.at("factor");
    cfg.latent_channels = j.at("latent_channels");
    cfg.enc_width1 = j.at("enc_width1");
    cfg.enc_width2 = j.at("enc_width2");
    cfg.dec_width1 = j.at("dec_width1");
    cfg.dec_width2 = j.at("dec_width2");
    cfg.init_seed = j.at("init_seed");
    LatentCodec codec(cfg);
    Container c = Container::read(path_prefix + ".mdub");
    codec.store_.load(c);
    codec.latent_shift_ = c.tensor("latent_shift");
    codec.latent_scale_ = c.tensor("latent_scale");
    codec.stats_.holdout_mse = j.value("holdout_mse", 0.0);
    codec.stats_.final_train_loss = j.value("final_train_loss", 0.0);
    codec.stats_.steps = j.value("train_steps", 0);
    return codec;
}

}  // namespace minidub
