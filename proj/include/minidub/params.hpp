#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "minidub/autograd.hpp"
#include "minidub/container.hpp"
#include "minidub/rng.hpp"
#include "minidub/tensor.hpp"

namespace minidub {

// Group tags drive stage-wise freezing: stage 1 trains Spatial+Shared,
// stage 2 trains Temporal+AudioXAttn+Conditioning. Codec params are owned
// by the codec trainer and frozen everywhere else.
enum class ParamGroup { Spatial, Temporal, AudioXAttn, Shared, Conditioning, Codec };

const char* group_name(ParamGroup g);
ParamGroup group_from_name(const std::string& s);

struct Param {
    std::string name;
    ParamGroup group;
    Tensor value;
    Tensor m, v;  // Adam moments
    bool zero_init = false;
};

class ParamStore {
public:
    int add(const std::string& name, ParamGroup group, Tensor init, bool zero_init = false);
    int index_of(const std::string& name) const;

    Param& at(int i) { return items_[i]; }
    const Param& at(int i) const { return items_[i]; }
    size_t size() const { return items_.size(); }
    int64_t total_scalars() const;

    // bind all params as graph leaves; grad tracking per-param via predicate
    std::vector<ad::Var> bind(ad::Graph& g,
                              const std::function<bool(const Param&)>& needs_grad) const;

    void save(Container& c, const std::string& prefix = "") const;
    void load(const Container& c, const std::string& prefix = "");

private:
    std::vector<Param> items_;
    std::map<std::string, int> by_name_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int warmup_steps = 500;  // linear ramp from 0
};

// apply one update from gradients accumulated in `g`; `step` is 1-based
void adam_step(ParamStore& store, const ad::Graph& g, const std::vector<ad::Var>& bound,
               const std::function<bool(const Param&)>& trainable, const AdamConfig& cfg,
               int64_t step);

// same update from externally accumulated gradients (nullptr = no gradient)
void adam_step_grads(ParamStore& store, const std::vector<const Tensor*>& grads,
                     const std::function<bool(const Param&)>& trainable, const AdamConfig& cfg,
                     int64_t step);

// init helpers
Tensor init_normal(Shape s, double stddev, Rng& rng);
Tensor init_fanin(Shape s, Rng& rng);  // N(0, 1/sqrt(fan_in))

}  // namespace minidub
