#include "minidub/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "minidub/image_io.hpp"
#include "minidub/container.hpp"
#include "minidub/rng.hpp"

namespace minidub {

namespace fs = std::filesystem;
using nlohmann::json;

FaceLayout face_layout(int size) {
    double s = (double)size;
    FaceLayout fl;
    fl.cx = 0.5 * s;
    fl.cy_face = 0.47 * s;
    fl.rx_face = 0.42 * s;
    fl.ry_face = 0.48 * s;
    fl.eye_y = 0.34 * s;
    fl.eye_dx = 0.17 * s;
    fl.eye_r = 0.055 * s;
    fl.mouth_cx = 0.5 * s;
    fl.mouth_cy = 0.70 * s;
    fl.aperture_max = 0.20 * s;
    fl.halfwidth_base = 0.17 * s;
    return fl;
}

double mouth_halfwidth(const FaceLayout& fl, const SpeakerProfile& p) {
    // positive pucker narrows the mouth
    return fl.halfwidth_base * (1.0 - 0.55 * p.pucker_bias);
}

CropBox mouth_crop_box(int size) {
    int half = size / 4;
    FaceLayout fl = face_layout(size);
    int cr = (int)std::lround(fl.mouth_cy);
    int cc = (int)std::lround(fl.mouth_cx);
    CropBox box{cr - half, cr + half, cc - half, cc + half};
    box.r0 = std::clamp(box.r0, 0, size);
    box.r1 = std::clamp(box.r1, 0, size);
    box.c0 = std::clamp(box.c0, 0, size);
    box.c1 = std::clamp(box.c1, 0, size);
    return box;
}

Tensor crop_frame(const Tensor& frame, const CropBox& box) {
    Tensor out({frame.dim(0), box.r1 - box.r0, box.c1 - box.c0});
    for (int c = 0; c < frame.dim(0); ++c)
        for (int r = box.r0; r < box.r1; ++r)
            for (int col = box.c0; col < box.c1; ++col)
                out.at3(c, r - box.r0, col - box.c0) = frame.at3(c, r, col);
    return out;
}

SpeakerProfile synth_speaker(int seed) {
    Rng rng(0x53504B52ULL + (uint64_t)(uint32_t)seed * 0x9E3779B97F4A7C15ULL);
    SpeakerProfile p;
    p.habit_gain = 0.5 + 1.5 * rng.uniform();
    p.pucker_bias = -0.5 + rng.uniform();
    p.face_hue = rng.uniform();
    p.jaw_scale = 0.8 + 0.4 * rng.uniform();
    return p;
}

AudioTrack synth_audio(int num_frames, int seed) {
    if (num_frames < 1) throw std::invalid_argument("synth_audio: num_frames must be >= 1");
    Rng rng(0x41554449ULL + (uint64_t)(uint32_t)seed * 0x9E3779B97F4A7C15ULL);
    AudioTrack track;
    track.envelope.resize(num_frames);
    double e = 0.2 + 0.6 * rng.uniform();
    double step = 0.0;
    for (int i = 0; i < num_frames; ++i) {
        track.envelope[i] = e;
        // band-limited walk: AR(1)-smoothed gaussian increments
        step = 0.5 * step + 0.5 * rng.gaussian() * 0.45;
        e = std::clamp(e + step, 0.0, 1.0);
    }
    track.features = Tensor({num_frames, kAudioFeatureDim});
    for (int i = 0; i < num_frames; ++i) {
        track.features.at2(i, 0) = track.envelope[i];
        for (int j = 1; j < kAudioFeatureDim; ++j)
            track.features.at2(i, j) =
                std::sin(3.141592653589793 * j * track.envelope[i]) / std::sqrt((double)j);
    }
    return track;
}

double analytic_aperture(const SpeakerProfile& p, double envelope_value, int size) {
    return p.habit_gain * envelope_value * face_layout(size).aperture_max;
}

double landmark_aperture(const ToyClip& clip, int frame) {
    return clip.landmarks.at3(frame, kLmBottomMid, 1) - clip.landmarks.at3(frame, kLmTopMid, 1);
}

namespace {

// approximate signed distance to an axis-aligned ellipse, negative inside
double ellipse_dist(double dx, double dy, double rx, double ry) {
    double qx = dx / rx, qy = dy / ry;
    double q = std::sqrt(qx * qx + qy * qy);
    if (q < 1e-12) return -std::min(rx, ry);
    double grad = std::sqrt(qx * qx / (rx * rx) + qy * qy / (ry * ry)) / q;
    return (q - 1.0) / std::max(grad, 1e-9);
}

double coverage(double dist, double edge = 1.0) {
    return std::clamp(0.5 - dist / edge, 0.0, 1.0);
}

void blend(Tensor& frame, int r, int c, const std::array<double, 3>& color, double alpha) {
    if (alpha <= 0) return;
    for (int ch = 0; ch < 3; ++ch)
        frame.at3(ch, r, c) = frame.at3(ch, r, c) * (1.0 - alpha) + color[ch] * alpha;
}

void fill_ellipse(Tensor& frame, double cx, double cy, double rx, double ry,
                  const std::array<double, 3>& color) {
    int size = frame.dim(1);
    int r0 = std::max(0, (int)std::floor(cy - ry - 2));
    int r1 = std::min(size - 1, (int)std::ceil(cy + ry + 2));
    int c0 = std::max(0, (int)std::floor(cx - rx - 2));
    int c1 = std::min(size - 1, (int)std::ceil(cx + rx + 2));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c)
            blend(frame, r, c, color, coverage(ellipse_dist(c - cx, r - cy, rx, ry)));
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch ((int)i % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

struct OccBounds {
    int r0, r1, c0, c1;  // half-open pixel ranges
    bool disc;
    double cx, cy, rad;
};

OccBounds occ_bounds(const OccluderSpec& occ, int frame, int size) {
    OccBounds b{};
    double x = occ.trajectory[frame][0], y = occ.trajectory[frame][1];
    if (occ.shape == OccluderSpec::Shape::Bar) {
        b.disc = false;
        b.c0 = (int)std::lround(x - occ.size / 2);
        b.c1 = (int)std::lround(x + occ.size / 2);
        b.r0 = (int)std::lround(y);
        b.r1 = size;
    } else {
        b.disc = true;
        b.cx = x;
        b.cy = y;
        b.rad = occ.size / 2;
        b.r0 = (int)std::floor(y - b.rad);
        b.r1 = (int)std::ceil(y + b.rad) + 1;
        b.c0 = (int)std::floor(x - b.rad);
        b.c1 = (int)std::ceil(x + b.rad) + 1;
    }
    b.r0 = std::clamp(b.r0, 0, size);
    b.r1 = std::clamp(b.r1, 0, size);
    b.c0 = std::clamp(b.c0, 0, size);
    b.c1 = std::clamp(b.c1, 0, size);
    return b;
}

bool occ_hit(const OccBounds& b, int r, int c) {
    if (r < b.r0 || r >= b.r1 || c < b.c0 || c >= b.c1) return false;
    if (!b.disc) return true;
    double dr = r - b.cy, dc = c - b.cx;
    return dr * dr + dc * dc <= b.rad * b.rad;
}

}  // namespace

Tensor occluder_footprint(const ToyClip& clip, int frame) {
    int size = clip.frame_size();
    Tensor fp({size, size});
    if (!clip.occluder) return fp;
    OccBounds b = occ_bounds(*clip.occluder, frame, size);
    for (int r = b.r0; r < b.r1; ++r)
        for (int c = b.c0; c < b.c1; ++c)
            if (occ_hit(b, r, c)) fp.at2(r, c) = 1.0;
    return fp;
}

ToyClip render_clip(const SpeakerProfile& profile, const AudioTrack& audio,
                    const std::optional<OccluderSpec>& occluder, int size) {
    if (size < 32 || size % 4 != 0)
        throw std::invalid_argument("render_clip: size must be >= 32 and divisible by 4");
    int n = audio.frames();
    if (n < 2) throw std::invalid_argument("render_clip: clips need at least 2 frames");
    if (occluder && (int)occluder->trajectory.size() != n)
        throw std::invalid_argument("render_clip: occluder trajectory length mismatch");

    FaceLayout fl = face_layout(size);
    double w = mouth_halfwidth(fl, profile);
    std::array<double, 3> bg = hsv_to_rgb(profile.face_hue, 0.45, 0.30);
    Rng tint(0x54494E54ULL + (uint64_t)(profile.face_hue * 4096.0));
    std::array<double, 3> skin = {0.80 + 0.10 * tint.uniform(), 0.66 + 0.10 * tint.uniform(),
                                  0.55 + 0.10 * tint.uniform()};
    std::array<double, 3> eye = {0.10, 0.10, 0.12};
    std::array<double, 3> mouth = {0.24, 0.05, 0.08};

    ToyClip clip;
    clip.profile = profile;
    clip.audio = audio;
    clip.occluder = occluder;
    clip.frames = Tensor({n, 3, size, size});
    clip.landmarks = Tensor({n, kNumLandmarks, 2});

    Tensor base({3, size, size});
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) base.at3(ch, r, c) = bg[ch];
    fill_ellipse(base, fl.cx, fl.cy_face, fl.rx_face, fl.ry_face, skin);
    fill_ellipse(base, fl.cx - fl.eye_dx, fl.eye_y, fl.eye_r, fl.eye_r, eye);
    fill_ellipse(base, fl.cx + fl.eye_dx, fl.eye_y, fl.eye_r, fl.eye_r, eye);

    bool occ_hits_mouth = false;
    double mouth_r0 = fl.mouth_cy - fl.aperture_max, mouth_r1 = fl.mouth_cy + fl.aperture_max;
    double mouth_c0 = fl.cx - 1.3 * fl.halfwidth_base, mouth_c1 = fl.cx + 1.3 * fl.halfwidth_base;

    for (int i = 0; i < n; ++i) {
        Tensor frame = base;
        double ap = analytic_aperture(profile, audio.envelope[i], size);
        double hh = std::max(ap / 2.0, 0.35 * size / 64.0);  // thin lip line when closed
        fill_ellipse(frame, fl.mouth_cx, fl.mouth_cy, w, hh, mouth);
        if (occluder) {
            OccBounds b = occ_bounds(*occluder, i, size);
            for (int r = b.r0; r < b.r1; ++r)
                for (int c = b.c0; c < b.c1; ++c)
                    if (occ_hit(b, r, c)) {
                        blend(frame, r, c, occluder->color, 1.0);
                        if (r >= mouth_r0 && r <= mouth_r1 && c >= mouth_c0 && c <= mouth_c1)
                            occ_hits_mouth = true;
                    }
        }
        std::copy(frame.v.begin(), frame.v.end(),
                  clip.frames.v.begin() + (int64_t)i * 3 * size * size);

        double half_ap = ap / 2.0;
        double jaw_y = fl.mouth_cy + half_ap + 0.06 * size * profile.jaw_scale;
        auto set_lm = [&](int idx, double x, double y) {
            clip.landmarks.at3(i, idx, 0) = x;
            clip.landmarks.at3(i, idx, 1) = y;
        };
        set_lm(kLmCornerL, fl.mouth_cx - w, fl.mouth_cy);
        set_lm(kLmCornerR, fl.mouth_cx + w, fl.mouth_cy);
        set_lm(kLmTopMid, fl.mouth_cx, fl.mouth_cy - half_ap);
        set_lm(kLmBottomMid, fl.mouth_cx, fl.mouth_cy + half_ap);
        set_lm(kLmTopQuarterL, fl.mouth_cx - w / 2, fl.mouth_cy - half_ap * 0.8660254037844386);
        set_lm(kLmTopQuarterR, fl.mouth_cx + w / 2, fl.mouth_cy - half_ap * 0.8660254037844386);
        set_lm(kLmJawL, fl.mouth_cx - 0.75 * w, jaw_y);
        set_lm(kLmJawR, fl.mouth_cx + 0.75 * w, jaw_y);
    }

    if (occluder && !occ_hits_mouth)
        throw std::invalid_argument("render_clip: occluder never intersects the mouth region");
    return clip;
}

std::vector<SpeakerProfile> default_speaker_bank(int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("default_speaker_bank: count must be >= 1");
    std::vector<SpeakerProfile> bank;
    for (int i = 0; i < count; ++i) {
        Rng rng(seed + 0xBA5EULL + (uint64_t)i * 0x9E3779B97F4A7C15ULL);
        SpeakerProfile p;
        p.habit_gain = count == 1 ? 1.0 : 0.5 + 1.5 * i / (double)(count - 1);
        p.pucker_bias = -0.4 + 0.8 * rng.uniform();
        p.face_hue = rng.uniform();
        p.jaw_scale = 0.8 + 0.4 * rng.uniform();
        bank.push_back(p);
    }
    return bank;
}

OccluderSpec default_bar_occluder(int size, int num_frames, uint64_t seed) {
    Rng rng(seed + 0x0CCULL);
    FaceLayout fl = face_layout(size);
    OccluderSpec occ;
    occ.shape = OccluderSpec::Shape::Bar;
    occ.size = 0.16 * size;
    double x = fl.mouth_cx + (rng.uniform() - 0.5) * 0.22 * size;
    double y = fl.mouth_cy - 0.04 * size + rng.uniform() * 0.06 * size;
    occ.trajectory.assign(num_frames, {x, y});
    return occ;
}

void save_clip(const std::string& dir, const ToyClip& clip) {
    fs::create_directories(dir);
    int n = clip.frame_count();
    int size = clip.frame_size();
    char name[64];
    for (int i = 0; i < n; ++i) {
        std::snprintf(name, sizeof(name), "frame_%04d.png", i);
        Tensor frame({3, size, size});
        std::copy(clip.frames.v.begin() + (int64_t)i * 3 * size * size,
                  clip.frames.v.begin() + (int64_t)(i + 1) * 3 * size * size, frame.v.begin());
        write_png_rgb((fs::path(dir) / name).string(), frame);
    }
    Container c;
    c.put_f32("landmarks", clip.landmarks);
    Tensor env({n});
    for (int i = 0; i < n; ++i) env.v[i] = clip.audio.envelope[i];
    c.put_f32("envelope", env);
    c.put_f32("features", clip.audio.features);
    c.put_f32("frame_rate", Tensor({1}, {clip.audio.frame_rate}));
    c.write((fs::path(dir) / "clip.mdub").string());

    json j;
    j["habit_gain"] = clip.profile.habit_gain;
    j["pucker_bias"] = clip.profile.pucker_bias;
    j["face_hue"] = clip.profile.face_hue;
    j["jaw_scale"] = clip.profile.jaw_scale;
    j["frame_count"] = n;
    j["frame_size"] = size;
    if (clip.occluder) {
        json o;
        o["shape"] = clip.occluder->shape == OccluderSpec::Shape::Bar ? "bar" : "disc";
        o["size"] = clip.occluder->size;
        o["color"] = clip.occluder->color;
        o["trajectory"] = json::array();
        for (auto& p : clip.occluder->trajectory) o["trajectory"].push_back({p[0], p[1]});
        j["occluder"] = o;
    }
    std::ofstream f(fs::path(dir) / "profile.json");
    f << j.dump(2) << "\n";
}

ToyClip load_clip(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "profile.json");
    if (!f) throw DataError("missing profile.json in " + dir);
    json j = json::parse(f);
    ToyClip clip;
    clip.profile.habit_gain = j.at("habit_gain");
    clip.profile.pucker_bias = j.at("pucker_bias");
    clip.profile.face_hue = j.at("face_hue");
    clip.profile.jaw_scale = j.at("jaw_scale");
    int n = j.at("frame_count");
    int size = j.at("frame_size");
    if (j.contains("occluder")) {
        OccluderSpec occ;
        const json& o = j["occluder"];
        occ.shape = o.at("shape") == "bar" ? OccluderSpec::Shape::Bar : OccluderSpec::Shape::Disc;
        occ.size = o.at("size");
        occ.color = o.at("color");
        for (auto& p : o.at("trajectory")) occ.trajectory.push_back({p[0], p[1]});
        clip.occluder = occ;
    }
    Container c = Container::read((fs::path(dir) / "clip.mdub").string());
    clip.landmarks = c.tensor("landmarks");
    Tensor env = c.tensor("envelope");
    clip.audio.envelope.assign(env.v.begin(), env.v.end());
    clip.audio.features = c.tensor("features");
    clip.audio.frame_rate = c.tensor("frame_rate").v[0];
    clip.frames = Tensor({n, 3, size, size});
    char name[64];
    for (int i = 0; i < n; ++i) {
        std::snprintf(name, sizeof(name), "frame_%04d.png", i);
        Tensor frame = read_png_rgb((fs::path(dir) / name).string());
        if (frame.dim(1) != size || frame.dim(2) != size)
            throw DataError("frame size mismatch in " + dir);
        std::copy(frame.v.begin(), frame.v.end(),
                  clip.frames.v.begin() + (int64_t)i * 3 * size * size);
    }
    return clip;
}

}  // namespace minidub
