#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "minidub/tensor.hpp"

namespace minidub {

// Speaker-specific articulation style. habit_gain scales mouth aperture per
// unit audio energy, pucker_bias narrows/widens the mouth.
struct SpeakerProfile {
    double habit_gain = 1.0;   // in [0.5, 2.0]
    double pucker_bias = 0.0;  // in [-0.5, 0.5]
    double face_hue = 0.0;     // color seed in [0,1)
    double jaw_scale = 1.0;
};

struct AudioTrack {
    std::vector<double> envelope;  // per-frame energy in [0,1]
    Tensor features;               // [N, d]: envelope + harmonic expansion
    double frame_rate = 25.0;
    int frames() const { return (int)envelope.size(); }
};

constexpr int kAudioFeatureDim = 8;

struct OccluderSpec {
    enum class Shape { Bar, Disc };
    Shape shape = Shape::Bar;
    double size = 10.0;                                  // bar width / disc diameter, px
    std::vector<std::array<double, 2>> trajectory;       // per-frame (x, y) centers
    std::array<double, 3> color = {0.55, 0.55, 0.60};
};

// Synthetic talking-face clip with analytic ground truth. Landmarks are
// (x, y) pixel coordinates, 8 per frame: mouth corners, upper/lower lip
// midpoints, two upper-lip quarter points, two jaw points.
struct ToyClip {
    Tensor frames;     // [N, 3, h, w] in [0,1]
    Tensor landmarks;  // [N, 8, 2]
    AudioTrack audio;
    SpeakerProfile profile;
    std::optional<OccluderSpec> occluder;

    int frame_count() const { return frames.dim(0); }
    int frame_size() const { return frames.dim(2); }
};

constexpr int kNumLandmarks = 8;
enum LandmarkIndex {
    kLmCornerL = 0,
    kLmCornerR = 1,
    kLmTopMid = 2,
    kLmBottomMid = 3,
    kLmTopQuarterL = 4,
    kLmTopQuarterR = 5,
    kLmJawL = 6,
    kLmJawR = 7,
};

// Face geometry shared by the renderer, the mask pipeline and the eval
// measurement code. All quantities in pixels for a given frame size.
struct FaceLayout {
    double cx, cy_face, rx_face, ry_face;
    double eye_y, eye_dx, eye_r;
    double mouth_cx, mouth_cy;
    double aperture_max;    // full vertical opening at gain 1, envelope 1
    double halfwidth_base;  // mouth half-width before pucker modulation
};
FaceLayout face_layout(int size);
double mouth_halfwidth(const FaceLayout& fl, const SpeakerProfile& p);

// fixed crop used for habit embeddings; square, side = size/2
struct CropBox {
    int r0, r1, c0, c1;
};
CropBox mouth_crop_box(int size);
Tensor crop_frame(const Tensor& frame, const CropBox& box);

SpeakerProfile synth_speaker(int seed);
AudioTrack synth_audio(int num_frames, int seed);

// Mouth aperture is habit_gain * envelope * aperture_max by construction;
// the occluder, when given, is composited last with hard edges.
ToyClip render_clip(const SpeakerProfile& profile, const AudioTrack& audio,
                    const std::optional<OccluderSpec>& occluder, int size);

double analytic_aperture(const SpeakerProfile& p, double envelope_value, int size);
// aperture implied by the landmark rows of frame i
double landmark_aperture(const ToyClip& clip, int frame);

// occluder footprint (1 inside) for frame i; zeros when the clip has none
Tensor occluder_footprint(const ToyClip& clip, int frame);

// speakers with evenly spaced habit gains over [0.5, 2.0]; hue/pucker/jaw
// seeded per speaker
std::vector<SpeakerProfile> default_speaker_bank(int count, uint64_t seed);

// a centered static bar that overlaps the mouth box
OccluderSpec default_bar_occluder(int size, int num_frames, uint64_t seed);

void save_clip(const std::string& dir, const ToyClip& clip);
ToyClip load_clip(const std::string& dir);

}  // namespace minidub
