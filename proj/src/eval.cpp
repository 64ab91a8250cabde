#include "minidub/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "minidub/rng.hpp"

namespace minidub {

namespace {

constexpr double kDarkThreshold = 0.33;
constexpr double kDarkRamp = 0.21;  // soft count ramp below the threshold

double luma(const Tensor& frames, int f, int r, int c) {
    int size = frames.dim(2);
    int64_t base = (((int64_t)f * 3) * size + r) * size + c;
    int64_t plane = (int64_t)size * size;
    return 0.299 * frames.v[base] + 0.587 * frames.v[base + plane] +
           0.114 * frames.v[base + 2 * plane];
}

double darkness(double l) { return std::clamp((kDarkThreshold - l) / kDarkRamp, 0.0, 1.0); }

struct SearchBox {
    int r0, r1, c0, c1, cx;
};

SearchBox mouth_search_box(int size) {
    FaceLayout fl = face_layout(size);
    SearchBox b;
    b.cx = (int)std::lround(fl.mouth_cx);
    b.r0 = std::max(0, (int)std::lround(fl.mouth_cy - 0.26 * size));
    b.r1 = std::min(size - 1, (int)std::lround(fl.mouth_cy + 0.26 * size));
    b.c0 = std::max(0, (int)std::lround(fl.mouth_cx - 0.30 * size));
    b.c1 = std::min(size - 1, (int)std::lround(fl.mouth_cx + 0.30 * size));
    return b;
}

}  // namespace

ApertureSeries aperture_from_frames(const Tensor& frames) {
    if (frames.rank() != 4 || frames.dim(1) != 3)
        throw std::invalid_argument("aperture_from_frames: expects [N,3,h,w]");
    int n = frames.dim(0), size = frames.dim(2);
    SearchBox box = mouth_search_box(size);
    ApertureSeries out;
    out.values.resize(n);
    for (int f = 0; f < n; ++f) {
        double acc = 0;
        int cols = 0;
        for (int c = box.cx - 1; c <= box.cx + 1; ++c) {
            if (c < box.c0 || c > box.c1) continue;
            for (int r = box.r0; r <= box.r1; ++r) acc += darkness(luma(frames, f, r, c));
            ++cols;
        }
        out.values[f] = cols > 0 ? acc / cols : 0.0;
    }
    double mn = out.values[0], mx = out.values[0];
    for (double v : out.values) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    out.constant = (mx - mn) < 1e-9;
    return out;
}

bool detect_mouth_extrema(const Tensor& frames, int frame, MouthExtrema& out) {
    int size = frames.dim(2);
    SearchBox box = mouth_search_box(size);
    int left = -1, right = -1;
    double left_y = 0, right_y = 0;
    for (int c = box.c0; c <= box.c1; ++c) {
        double mass = 0, wy = 0;
        for (int r = box.r0; r <= box.r1; ++r) {
            double d = darkness(luma(frames, frame, r, c));
            mass += d;
            wy += d * r;
        }
        if (mass >= 0.5) {
            if (left < 0) {
                left = c;
                left_y = wy / mass;
            }
            right = c;
            right_y = wy / mass;
        }
    }
    if (left < 0) return false;
    int top = -1, bottom = -1;
    for (int r = box.r0; r <= box.r1; ++r) {
        double s = 0;
        for (int c = box.cx - 1; c <= box.cx + 1; ++c)
            if (c >= box.c0 && c <= box.c1) s += darkness(luma(frames, frame, r, c)) / 3.0;
        if (s >= 0.3) {
            if (top < 0) top = r;
            bottom = r;
        }
    }
    if (top < 0) {  // mouth off the center column (heavy occlusion)
        top = (int)std::lround(left_y);
        bottom = top;
    }
    out[0] = {(double)left, left_y};
    out[1] = {(double)right, right_y};
    out[2] = {(double)box.cx, (double)top};
    out[3] = {(double)box.cx, (double)bottom};
    return true;
}

double pearson_corr(const std::vector<double>& a, const std::vector<double>& b) {
    size_t n = std::min(a.size(), b.size());
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
    if (saa <= 1e-18 || sbb <= 1e-18) return NAN;
    return sab / std::sqrt(saa * sbb);
}

EvalReport eval_clip(const Tensor& gen_frames, const ToyClip& reference,
                     const std::vector<double>& driving_envelope, const Tensor& union_pixel) {
    if (gen_frames.dim(0) != reference.frame_count())
        throw DataError("eval_clip: frame count mismatch");
    int n = gen_frames.dim(0), size = gen_frames.dim(2);
    EvalReport rep;

    ApertureSeries ap = aperture_from_frames(gen_frames);
    rep.sync_degenerate = ap.constant;
    rep.sync_corr = ap.constant ? NAN : pearson_corr(ap.values, driving_envelope);

    double lmd_acc = 0;
    int lmd_n = 0;
    for (int f = 0; f < n; ++f) {
        MouthExtrema gen_pts, ref_pts;
        if (!detect_mouth_extrema(gen_frames, f, gen_pts)) continue;
        if (!detect_mouth_extrema(reference.frames, f, ref_pts)) continue;
        double d = 0;
        for (int k = 0; k < 4; ++k) {
            double dx = gen_pts[k][0] - ref_pts[k][0];
            double dy = gen_pts[k][1] - ref_pts[k][1];
            d += std::sqrt(dx * dx + dy * dy);
        }
        lmd_acc += d / 4.0;
        ++lmd_n;
    }
    rep.lmd = lmd_n > 0 ? lmd_acc / lmd_n : NAN;
    rep.lmd_frames = lmd_n;

    double occ_acc = 0;
    int64_t occ_n = 0;
    double un_acc = 0;
    int64_t un_n = 0;
    int64_t plane = (int64_t)size * size;
    for (int f = 0; f < n; ++f) {
        Tensor fp = occluder_footprint(reference, f);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                bool occluded = fp.at2(r, c) > 0.5;
                bool masked = union_pixel.at2(r, c) >= 0.5;
                for (int ch = 0; ch < 3; ++ch) {
                    int64_t i = (((int64_t)f * 3 + ch) * size + r) * size + c;
                    double d = gen_frames.v[i] - reference.frames.v[i];
                    if (occluded) {
                        occ_acc += d * d;
                        ++occ_n;
                    }
                    if (!masked) {
                        un_acc += d * d;
                        ++un_n;
                    }
                }
            }
    }
    (void)plane;
    rep.occlusion_mse = occ_n > 0 ? occ_acc / (double)occ_n : 0.0;
    rep.unmasked_mse = un_n > 0 ? un_acc / (double)un_n : 0.0;
    return rep;
}

namespace {

double point_dist(const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
    return std::sqrt(acc);
}

}  // namespace

double silhouette_score(const std::vector<Tensor>& points, const std::vector<int>& labels) {
    size_t n = points.size();
    if (n < 3) throw std::invalid_argument("silhouette_score: need at least 3 points");
    double total = 0;
    int counted = 0;
    for (size_t i = 0; i < n; ++i) {
        std::map<int, std::pair<double, int>> by_label;  // sum dist, count
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            auto& e = by_label[labels[j]];
            e.first += point_dist(points[i], points[j]);
            e.second += 1;
        }
        auto own = by_label.find(labels[i]);
        if (own == by_label.end() || own->second.second == 0) continue;  // singleton cluster
        double a = own->second.first / own->second.second;
        double b = INFINITY;
        for (auto& [lab, e] : by_label)
            if (lab != labels[i]) b = std::min(b, e.first / e.second);
        if (!std::isfinite(b)) continue;  // single cluster overall
        total += (b - a) / std::max(a, b);
        ++counted;
    }
    return counted > 0 ? total / counted : 0.0;
}

double shuffled_silhouette(const std::vector<Tensor>& points, const std::vector<int>& labels,
                           uint64_t seed) {
    std::vector<int> shuffled = labels;
    Rng rng(seed);
    for (size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    return silhouette_score(points, shuffled);
}

double linear_probe_accuracy(const std::vector<Tensor>& points, const std::vector<int>& labels) {
    size_t n = points.size();
    if (n < 4) throw std::invalid_argument("linear_probe_accuracy: need at least 4 points");
    int64_t dim = points[0].numel();
    // fit on even indices: projection onto the class-mean difference
    Tensor mu0({(int)dim}), mu1({(int)dim});
    int n0 = 0, n1 = 0;
    for (size_t i = 0; i < n; i += 2) {
        if (labels[i] == 0) {
            for (int64_t d = 0; d < dim; ++d) mu0.v[d] += points[i].v[d];
            ++n0;
        } else {
            for (int64_t d = 0; d < dim; ++d) mu1.v[d] += points[i].v[d];
            ++n1;
        }
    }
    if (n0 == 0 || n1 == 0) throw std::invalid_argument("linear_probe_accuracy: need both classes");
    for (int64_t d = 0; d < dim; ++d) {
        mu0.v[d] /= n0;
        mu1.v[d] /= n1;
    }
    double bias = 0;
    for (int64_t d = 0; d < dim; ++d) {
        double w = mu1.v[d] - mu0.v[d];
        bias += w * 0.5 * (mu1.v[d] + mu0.v[d]);
    }
    int correct = 0, total = 0;
    for (size_t i = 1; i < n; i += 2) {
        double score = -bias;
        for (int64_t d = 0; d < dim; ++d) score += (mu1.v[d] - mu0.v[d]) * points[i].v[d];
        int pred = score > 0 ? 1 : 0;
        correct += pred == labels[i] ? 1 : 0;
        ++total;
    }
    return total > 0 ? (double)correct / total : 0.0;
}

}  // namespace minidub
