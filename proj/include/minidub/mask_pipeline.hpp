#pragma once

#include <string>
#include <vector>

#include "minidub/tensor.hpp"

namespace minidub {

// Masks use 1 = region to inpaint. Detailed and coarse masks are binary;
// the union mask has soft (blurred) boundaries and is shared by every frame
// of a segment so the denoiser sees a temporally continuous input.
struct MaskFrame {
    enum class Kind { Detailed, Coarse, Union };
    Tensor values;  // [h, w] in [0,1]
    Kind kind = Kind::Detailed;
    bool degenerate = false;  // set when a hull collapses to zero area

    int height() const { return values.dim(0); }
    int width() const { return values.dim(1); }
};

struct MaskSet {
    std::vector<MaskFrame> detailed;
    std::vector<MaskFrame> coarse;
    MaskFrame union_mask;
};

struct ExposureSchedule {
    double start_rate = 0.70;
    double end_rate = 0.0;
    int total_steps = 1;
    enum class Shape { Linear, Cosine } shape = Shape::Linear;
};

struct ExposurePattern {
    int patch_size = 8;
    int grid_rows = 0, grid_cols = 0;
    std::vector<uint8_t> exposed;  // grid_rows * grid_cols
    double rate_achieved = 0.0;
    bool zero_patches = false;  // no patch center fell inside the union footprint

    bool is_exposed(int pr, int pc) const { return exposed[(size_t)pr * grid_cols + pc] != 0; }
};

// filled convex hull of the mouth+jaw landmarks ([L,2] (x,y) rows)
MaskFrame detailed_mask(const Tensor& landmarks, int frame_size);

// Chebyshev dilation by `radius` (square structuring element). Negative
// radius erodes instead, kept for schedule experiments.
MaskFrame coarsen(const MaskFrame& detailed, int radius);

// bounding rectangle over all coarse footprints, expanded per side, then
// boundary-blurred with a triangular kernel of half-width blur_radius;
// interior stays exactly 1
MaskFrame union_mask(const std::vector<MaskFrame>& coarse, int expand, int blur_radius);

double exposure_rate(int step, const ExposureSchedule& schedule);

// choose floor(rate * eligible) patches uniformly without replacement among
// patches whose center lies in the thresholded union footprint
ExposurePattern expose(const MaskFrame& union_mask, double rate, int patch_size, uint64_t seed);

// zero out mask values inside exposed patches (never increases any value)
MaskFrame apply_exposure(const MaskFrame& mask, const ExposurePattern& pattern);

// full hierarchy for one segment of per-frame landmarks ([N,L,2])
struct MaskPipelineConfig {
    int coarsen_radius = 3;
    double expand_frac = 0.25;  // union box expansion per side, fraction of box extent
    int blur_radius = 2;
    int patch_size = 8;
};
MaskSet build_mask_set(const Tensor& landmarks, int frame_size, const MaskPipelineConfig& cfg);

std::string exposure_pattern_to_json(const ExposurePattern& p);
ExposurePattern exposure_pattern_from_json(const std::string& text);

}  // namespace minidub
