#include "minidub/params.hpp"

#include <cmath>

namespace minidub {

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Spatial: return "spatial";
        case ParamGroup::Temporal: return "temporal";
        case ParamGroup::AudioXAttn: return "audio_xattn";
        case ParamGroup::Shared: return "shared";
        case ParamGroup::Conditioning: return "conditioning";
        case ParamGroup::Codec: return "codec";
    }
    return "?";
}

ParamGroup group_from_name(const std::string& s) {
    if (s == "spatial") return ParamGroup::Spatial;
    if (s == "temporal") return ParamGroup::Temporal;
    if (s == "audio_xattn") return ParamGroup::AudioXAttn;
    if (s == "shared") return ParamGroup::Shared;
    if (s == "conditioning") return ParamGroup::Conditioning;
    if (s == "codec") return ParamGroup::Codec;
    throw ConfigError("unknown param group: " + s);
}

int ParamStore::add(const std::string& name, ParamGroup group, Tensor init, bool zero_init) {
    if (by_name_.count(name)) throw std::logic_error("duplicate param name: " + name);
    Param p;
    p.name = name;
    p.group = group;
    p.zero_init = zero_init;
    if (zero_init) std::fill(init.v.begin(), init.v.end(), 0.0);
    p.m = Tensor(init.shape);
    p.v = Tensor(init.shape);
    p.value = std::move(init);
    items_.push_back(std::move(p));
    by_name_[name] = (int)items_.size() - 1;
    return (int)items_.size() - 1;
}

int ParamStore::index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::logic_error("unknown param: " + name);
    return it->second;
}

int64_t ParamStore::total_scalars() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
}

std::vector<ad::Var> ParamStore::bind(ad::Graph& g,
                                      const std::function<bool(const Param&)>& needs_grad) const {
    std::vector<ad::Var> vars;
    vars.reserve(items_.size());
    for (const auto& p : items_) vars.push_back(g.leaf(p.value, needs_grad(p)));
    return vars;
}

void ParamStore::save(Container& c, const std::string& prefix) const {
    for (const auto& p : items_) {
        c.put_f64(prefix + "p/" + p.name, p.value);
        c.put_f64(prefix + "m/" + p.name, p.m);
        c.put_f64(prefix + "v/" + p.name, p.v);
    }
}

void ParamStore::load(const Container& c, const std::string& prefix) {
    for (auto& p : items_) {
        Tensor value = c.tensor(prefix + "p/" + p.name);
        if (!(value.shape == p.value.shape))
            throw ConfigError("checkpoint shape mismatch for " + p.name + ": " +
                              shape_str(value.shape) + " vs " + shape_str(p.value.shape));
        p.value = std::move(value);
        p.m = c.tensor(prefix + "m/" + p.name);
        p.v = c.tensor(prefix + "v/" + p.name);
    }
}

static void adam_update(Param& p, const Tensor& grad, const AdamConfig& cfg, double lr,
                        double bc1, double bc2) {
    for (int64_t k = 0; k < p.value.numel(); ++k) {
        double gk = grad.v[k];
        p.m.v[k] = cfg.beta1 * p.m.v[k] + (1.0 - cfg.beta1) * gk;
        p.v.v[k] = cfg.beta2 * p.v.v[k] + (1.0 - cfg.beta2) * gk * gk;
        double mhat = p.m.v[k] / bc1;
        double vhat = p.v.v[k] / bc2;
        p.value.v[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

void adam_step(ParamStore& store, const ad::Graph& g, const std::vector<ad::Var>& bound,
               const std::function<bool(const Param&)>& trainable, const AdamConfig& cfg,
               int64_t step) {
    double ramp = cfg.warmup_steps > 0 ? std::min(1.0, (double)step / cfg.warmup_steps) : 1.0;
    double lr = cfg.lr * ramp;
    double bc1 = 1.0 - std::pow(cfg.beta1, (double)step);
    double bc2 = 1.0 - std::pow(cfg.beta2, (double)step);
    for (size_t i = 0; i < store.size(); ++i) {
        Param& p = store.at((int)i);
        if (!trainable(p)) continue;
        if (!g.has_grad(bound[i])) continue;  // unreached this step (e.g. dropped condition)
        adam_update(p, g.grad(bound[i]), cfg, lr, bc1, bc2);
    }
}

void adam_step_grads(ParamStore& store, const std::vector<const Tensor*>& grads,
                     const std::function<bool(const Param&)>& trainable, const AdamConfig& cfg,
                     int64_t step) {
    double ramp = cfg.warmup_steps > 0 ? std::min(1.0, (double)step / cfg.warmup_steps) : 1.0;
    double lr = cfg.lr * ramp;
    double bc1 = 1.0 - std::pow(cfg.beta1, (double)step);
    double bc2 = 1.0 - std::pow(cfg.beta2, (double)step);
    for (size_t i = 0; i < store.size(); ++i) {
        Param& p = store.at((int)i);
        if (!trainable(p) || !grads[i]) continue;
        adam_update(p, *grads[i], cfg, lr, bc1, bc2);
    }
}

Tensor init_normal(Shape s, double stddev, Rng& rng) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = rng.gaussian() * stddev;
    return t;
}

Tensor init_fanin(Shape s, Rng& rng) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
    if (s.size() == 2) fan_in = s[0];  // linear weights are [Cin, Cout]
    return init_normal(std::move(s), 1.0 / std::sqrt((double)std::max<int64_t>(fan_in, 1)), rng);
}

}  // namespace minidub
