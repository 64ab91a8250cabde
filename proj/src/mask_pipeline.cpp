#include "minidub/mask_pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "minidub/rng.hpp"

namespace minidub {

namespace {

struct Pt {
    double x, y;
};

double cross(const Pt& o, const Pt& a, const Pt& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew monotone chain; returns CCW hull without repeated endpoint
std::vector<Pt> convex_hull(std::vector<Pt> pts) {
    std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Pt& a, const Pt& b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    int n = (int)pts.size();
    if (n < 3) return pts;
    std::vector<Pt> hull(2 * n);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    for (int i = n - 2, lower = k + 1; i >= 0; --i) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double polygon_area2(const std::vector<Pt>& poly) {
    double a = 0;
    int n = (int)poly.size();
    for (int i = 0; i < n; ++i) {
        const Pt& p = poly[i];
        const Pt& q = poly[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return std::fabs(a);
}

bool point_in_hull(const std::vector<Pt>& hull, double x, double y) {
    int n = (int)hull.size();
    for (int i = 0; i < n; ++i) {
        const Pt& p = hull[i];
        const Pt& q = hull[(i + 1) % n];
        if (cross(p, q, Pt{x, y}) < -1e-9) return false;
    }
    return true;
}

// separable running max/min filter with half-width r
void cheb_filter(Tensor& m, int r, bool dilate) {
    int h = m.dim(0), w = m.dim(1);
    Tensor tmp({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = dilate ? 0.0 : 1.0;
            for (int d = -r; d <= r; ++d) {
                int xx = x + d;
                if (xx < 0 || xx >= w) {
                    if (!dilate) v = 0.0;  // erosion treats outside as background
                    continue;
                }
                v = dilate ? std::max(v, m.at2(y, xx)) : std::min(v, m.at2(y, xx));
            }
            tmp.at2(y, x) = v;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = dilate ? 0.0 : 1.0;
            for (int d = -r; d <= r; ++d) {
                int yy = y + d;
                if (yy < 0 || yy >= h) {
                    if (!dilate) v = 0.0;
                    continue;
                }
                v = dilate ? std::max(v, tmp.at2(yy, x)) : std::min(v, tmp.at2(yy, x));
            }
            m.at2(y, x) = v;
        }
}

}  // namespace

MaskFrame detailed_mask(const Tensor& landmarks, int frame_size) {
    if (landmarks.rank() != 2 || landmarks.dim(1) != 2)
        throw std::invalid_argument("detailed_mask: landmarks must be [L,2]");
    int l = landmarks.dim(0);
    if (l < 3) throw std::invalid_argument("detailed_mask: need at least 3 landmarks");
    std::vector<Pt> pts;
    for (int i = 0; i < l; ++i) {
        double x = landmarks.at2(i, 0), y = landmarks.at2(i, 1);
        if (x < 0 || x > frame_size - 1 || y < 0 || y > frame_size - 1)
            throw std::invalid_argument("detailed_mask: landmark outside frame bounds");
        pts.push_back({x, y});
    }
    MaskFrame out;
    out.kind = MaskFrame::Kind::Detailed;
    out.values = Tensor({frame_size, frame_size});
    auto hull = convex_hull(pts);
    if (hull.size() < 3 || polygon_area2(hull) <= 0) {
        out.degenerate = true;  // collinear input: empty mask
        return out;
    }
    int x0 = frame_size - 1, x1 = 0, y0 = frame_size - 1, y1 = 0;
    for (auto& p : hull) {
        x0 = std::min(x0, (int)std::floor(p.x));
        x1 = std::max(x1, (int)std::ceil(p.x));
        y0 = std::min(y0, (int)std::floor(p.y));
        y1 = std::max(y1, (int)std::ceil(p.y));
    }
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, frame_size - 1);
    y1 = std::min(y1, frame_size - 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (point_in_hull(hull, x, y)) out.values.at2(y, x) = 1.0;
    return out;
}

MaskFrame coarsen(const MaskFrame& detailed, int radius) {
    MaskFrame out = detailed;
    out.kind = MaskFrame::Kind::Coarse;
    if (radius != 0) cheb_filter(out.values, std::abs(radius), radius > 0);
    return out;
}

MaskFrame union_mask(const std::vector<MaskFrame>& coarse, int expand, int blur_radius) {
    if (coarse.empty()) throw std::invalid_argument("union_mask: need at least one coarse mask");
    int h = coarse[0].height(), w = coarse[0].width();
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (const auto& m : coarse) {
        if (m.height() != h || m.width() != w)
            throw std::invalid_argument("union_mask: mask shapes differ");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (m.values.at2(y, x) > 0.5) {
                    r0 = std::min(r0, y);
                    r1 = std::max(r1, y);
                    c0 = std::min(c0, x);
                    c1 = std::max(c1, x);
                }
    }
    if (r1 < 0) throw DataError("union_mask: all coarse masks are empty");
    r0 = std::max(0, r0 - expand);
    r1 = std::min(h - 1, r1 + expand);
    c0 = std::max(0, c0 - expand);
    c1 = std::min(w - 1, c1 + expand);

    MaskFrame out;
    out.kind = MaskFrame::Kind::Union;
    out.values = Tensor({h, w});
    for (int y = r0; y <= r1; ++y)
        for (int x = c0; x <= c1; ++x) out.values.at2(y, x) = 1.0;

    if (blur_radius > 0) {
        // triangular kernel of half-width blur_radius; all-ones neighborhoods
        // stay exactly 1, so only the boundary softens
        int r = blur_radius;
        std::vector<double> k(2 * r + 1);
        double sum = 0;
        for (int i = -r; i <= r; ++i) {
            k[i + r] = r + 1 - std::abs(i);
            sum += k[i + r];
        }
        for (auto& x : k) x /= sum;
        Tensor tmp({h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0;
                for (int d = -r; d <= r; ++d) {
                    int xx = std::clamp(x + d, 0, w - 1);
                    acc += k[d + r] * out.values.at2(y, xx);
                }
                tmp.at2(y, x) = acc;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0;
                for (int d = -r; d <= r; ++d) {
                    int yy = std::clamp(y + d, 0, h - 1);
                    acc += k[d + r] * tmp.at2(yy, x);
                }
                out.values.at2(y, x) = acc;
            }
        // snap near-1 interior back to exactly 1
        for (auto& v : out.values.v)
            if (v > 1.0 - 1e-12) v = 1.0;
    }
    return out;
}

double exposure_rate(int step, const ExposureSchedule& schedule) {
    if (schedule.total_steps < 1) throw std::invalid_argument("exposure_rate: total_steps < 1");
    if (step < 0 || step > schedule.total_steps)
        throw std::invalid_argument("exposure_rate: step out of range");
    double t = (double)step / schedule.total_steps;
    if (schedule.shape == ExposureSchedule::Shape::Linear)
        return schedule.start_rate + (schedule.end_rate - schedule.start_rate) * t;
    double c = 0.5 * (1.0 + std::cos(3.141592653589793 * t));
    return schedule.end_rate + (schedule.start_rate - schedule.end_rate) * c;
}

ExposurePattern expose(const MaskFrame& umask, double rate, int patch_size, uint64_t seed) {
    if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("expose: rate out of [0,1]");
    if (patch_size < 1) throw std::invalid_argument("expose: patch_size < 1");
    int h = umask.height(), w = umask.width();
    ExposurePattern p;
    p.patch_size = patch_size;
    p.grid_rows = (h + patch_size - 1) / patch_size;
    p.grid_cols = (w + patch_size - 1) / patch_size;
    p.exposed.assign((size_t)p.grid_rows * p.grid_cols, 0);

    std::vector<int> eligible;
    for (int pr = 0; pr < p.grid_rows; ++pr)
        for (int pc = 0; pc < p.grid_cols; ++pc) {
            int cy = std::min(pr * patch_size + patch_size / 2, h - 1);
            int cx = std::min(pc * patch_size + patch_size / 2, w - 1);
            if (umask.values.at2(cy, cx) >= 0.5) eligible.push_back(pr * p.grid_cols + pc);
        }
    if (eligible.empty()) {
        p.zero_patches = true;
        return p;
    }
    int want = (int)std::floor(rate * (double)eligible.size());
    Rng rng(seed);
    for (int i = 0; i < want; ++i) {  // partial Fisher-Yates
        int j = i + (int)rng.below((uint64_t)(eligible.size() - i));
        std::swap(eligible[i], eligible[j]);
        p.exposed[eligible[i]] = 1;
    }
    p.rate_achieved = (double)want / (double)eligible.size();
    return p;
}

MaskFrame apply_exposure(const MaskFrame& mask, const ExposurePattern& pattern) {
    MaskFrame out = mask;
    int h = mask.height(), w = mask.width();
    int ps = pattern.patch_size;
    for (int pr = 0; pr < pattern.grid_rows; ++pr)
        for (int pc = 0; pc < pattern.grid_cols; ++pc) {
            if (!pattern.is_exposed(pr, pc)) continue;
            for (int y = pr * ps; y < std::min((pr + 1) * ps, h); ++y)
                for (int x = pc * ps; x < std::min((pc + 1) * ps, w); ++x)
                    out.values.at2(y, x) = 0.0;
        }
    return out;
}

MaskSet build_mask_set(const Tensor& landmarks, int frame_size, const MaskPipelineConfig& cfg) {
    if (landmarks.rank() != 3 || landmarks.dim(2) != 2)
        throw std::invalid_argument("build_mask_set: landmarks must be [N,L,2]");
    int n = landmarks.dim(0), l = landmarks.dim(1);
    MaskSet set;
    for (int i = 0; i < n; ++i) {
        Tensor lm({l, 2});
        for (int j = 0; j < l; ++j) {
            lm.at2(j, 0) = landmarks.at3(i, j, 0);
            lm.at2(j, 1) = landmarks.at3(i, j, 1);
        }
        set.detailed.push_back(detailed_mask(lm, frame_size));
        set.coarse.push_back(coarsen(set.detailed.back(), cfg.coarsen_radius));
    }
    // expansion in pixels from the configured fraction of the raw box extent
    int r0 = frame_size, r1 = -1, c0 = frame_size, c1 = -1;
    for (const auto& m : set.coarse)
        for (int y = 0; y < frame_size; ++y)
            for (int x = 0; x < frame_size; ++x)
                if (m.values.at2(y, x) > 0.5) {
                    r0 = std::min(r0, y);
                    r1 = std::max(r1, y);
                    c0 = std::min(c0, x);
                    c1 = std::max(c1, x);
                }
    int extent = std::max(r1 - r0 + 1, c1 - c0 + 1);
    int expand = (int)std::lround(cfg.expand_frac * std::max(extent, 0));
    set.union_mask = union_mask(set.coarse, expand, cfg.blur_radius);
    return set;
}

std::string exposure_pattern_to_json(const ExposurePattern& p) {
    nlohmann::json j;
    j["patch_size"] = p.patch_size;
    j["grid_rows"] = p.grid_rows;
    j["grid_cols"] = p.grid_cols;
    j["rate_achieved"] = p.rate_achieved;
    auto idx = nlohmann::json::array();
    for (size_t i = 0; i < p.exposed.size(); ++i)
        if (p.exposed[i]) idx.push_back((int)i);
    j["exposed"] = idx;
    return j.dump(2);
}

ExposurePattern exposure_pattern_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ExposurePattern p;
    p.patch_size = j.at("patch_size");
    p.grid_rows = j.at("grid_rows");
    p.grid_cols = j.at("grid_cols");
    p.rate_achieved = j.at("rate_achieved");
    p.exposed.assign((size_t)p.grid_rows * p.grid_cols, 0);
    for (int i : j.at("exposed")) p.exposed.at(i) = 1;
    return p;
}

}  // namespace minidub
