#pragma once

#include <array>
#include <vector>

#include "minidub/tensor.hpp"
#include "minidub/toy_data.hpp"

namespace minidub {

// Desk-scale analytic metrics. These are deliberate stand-ins computed on
// the toy face geometry, not the perceptual metrics reported elsewhere.

struct ApertureSeries {
    std::vector<double> values;  // estimated vertical mouth opening, px
    bool constant = false;       // zero variance: correlations are undefined
};

// intensity-valley estimate inside the mouth search box
ApertureSeries aperture_from_frames(const Tensor& frames);

// detected extrema (corner_l, corner_r, top_mid, bottom_mid) as (x, y)
using MouthExtrema = std::array<std::array<double, 2>, 4>;
bool detect_mouth_extrema(const Tensor& frames, int frame, MouthExtrema& out);

struct EvalReport {
    double sync_corr = 0;      // Pearson(aperture, driving envelope)
    double lmd = 0;            // mean detected-extrema distance vs reference frames, px
    double habit_score = 0;    // silhouette of habit embeddings by speaker (multi-clip)
    double occlusion_mse = 0;  // inside the occluder footprint
    double unmasked_mse = 0;   // outside the union mask
    bool sync_degenerate = false;
    int lmd_frames = 0;  // frames where both detectors fired
};

// single-pair metrics (habit_score is a multi-clip quantity, see below)
EvalReport eval_clip(const Tensor& gen_frames, const ToyClip& reference,
                     const std::vector<double>& driving_envelope, const Tensor& union_pixel);

double silhouette_score(const std::vector<Tensor>& points, const std::vector<int>& labels);
double shuffled_silhouette(const std::vector<Tensor>& points, const std::vector<int>& labels,
                           uint64_t seed);

// two-class linear probe (fit on one half, scored on the other)
double linear_probe_accuracy(const std::vector<Tensor>& points, const std::vector<int>& labels);

double pearson_corr(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace minidub
