#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "minidub/rng.hpp"
#include "minidub/tensor.hpp"

namespace minidub::testutil {

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = rng.gaussian() * scale;
    return t;
}

// Central-difference check. `f` maps the full input set to a scalar loss;
// `which` selects the tensor being perturbed. Checks `samples` random
// coordinates (all coordinates if samples <= 0) against `analytic`.
inline double fd_max_rel_err(const std::function<double(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, size_t which, const Tensor& analytic,
                             double h = 1e-5, int samples = -1, uint64_t seed = 99) {
    Rng rng(seed);
    int64_t n = inputs[which].numel();
    std::vector<int64_t> idx;
    if (samples <= 0 || samples >= n) {
        idx.resize(n);
        for (int64_t i = 0; i < n; ++i) idx[i] = i;
    } else {
        for (int s = 0; s < samples; ++s) idx.push_back((int64_t)rng.below((uint64_t)n));
    }
    double worst = 0.0;
    for (int64_t i : idx) {
        double keep = inputs[which].v[i];
        inputs[which].v[i] = keep + h;
        double up = f(inputs);
        inputs[which].v[i] = keep - h;
        double dn = f(inputs);
        inputs[which].v[i] = keep;
        double fd = (up - dn) / (2.0 * h);
        double an = analytic.v[i];
        double rel = std::fabs(fd - an) / std::max({1e-6, std::fabs(fd), std::fabs(an)});
        worst = std::max(worst, rel);
    }
    return worst;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= (double)n;
    mb /= (double)n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return NAN;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace minidub::testutil
