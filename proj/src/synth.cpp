#include "cstn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <json.hpp>

#include "cstn/io.hpp"

namespace cstn {

namespace {

using json = nlohmann::json;

constexpr double kPi = 3.14159265358979323846;
constexpr int kLShape = 6; // distractor-only shape id, never a class label

// All canonical shapes live in [-1,1]^2. Membership runs in canonical
// coordinates; bounding geometry is computed analytically per family so
// the requested scale bounds the axis-aligned extent exactly.
bool inside_canonical(int shape, double qx, double qy) {
    switch (shape) {
        case 0: return qx * qx + qy * qy <= 1.0;                          // disk
        case 1: return std::fabs(qx) <= 1.0 && std::fabs(qy) <= 1.0;     // square
        case 2: {                                                         // triangle
            // vertices A(0,-1), B(0.9,0.8), C(-0.9,0.8); same-side test
            double d1 = (qx - 0.0) * (0.8 - (-1.0)) - (qy - (-1.0)) * (0.9 - 0.0);
            double d2 = (qx - 0.9) * (0.8 - 0.8) - (qy - 0.8) * (-0.9 - 0.9);
            double d3 = (qx - (-0.9)) * (-1.0 - 0.8) - (qy - 0.8) * (0.0 - (-0.9));
            bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
            bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
            return !(neg && pos);
        }
        case 3: // cross
            return (std::fabs(qx) <= 1.0 && std::fabs(qy) <= 0.35) ||
                   (std::fabs(qx) <= 0.35 && std::fabs(qy) <= 1.0);
        case 4: { // ring
            double r2 = qx * qx + qy * qy;
            return r2 >= 0.3025 && r2 <= 1.0; // inner radius 0.55
        }
        case 5: return std::fabs(qx) <= 1.0 && std::fabs(qy) <= 1.0 / 3.0; // bar
        case kLShape:
            return (std::fabs(qx) <= 1.0 && qy >= 0.4 && qy <= 1.0) ||
                   (qx >= -1.0 && qx <= -0.4 && std::fabs(qy) <= 1.0);
        default: throw ValueError("unknown shape id " + std::to_string(shape));
    }
}

struct Rect {
    double cx, cy; // canonical center
    double hw, hh; // canonical half extents
};

// Resolved world-space geometry of one object.
struct Pose {
    int shape = 0;
    double cx = 0, cy = 0;       // world AABB center
    double sx = 1, sy = 1;       // canonical -> world scaling
    double cosr = 1, sinr = 0;
    double mx = 0, my = 0;       // AABB center of the scaled+rotated shape
    double hx = 0, hy = 0;       // world AABB half extents
    double color[3] = {1, 1, 1};

    bool contains(double px, double py) const {
        double dx = px - cx + mx, dy = py - cy + my;
        double rx = cosr * dx + sinr * dy;
        double ry = -sinr * dx + cosr * dy;
        return inside_canonical(shape, rx / sx, ry / sy);
    }
};

// AABB of the scaled-then-rotated canonical shape, about the canonical
// origin: half extents (hx,hy) and center (mx,my).
void shape_aabb(int shape, double sx, double sy, double cosr, double sinr, double& hx, double& hy,
                double& mx, double& my) {
    mx = my = 0.0;
    auto rect_minmax = [&](const Rect& r, double& mnx, double& mxx, double& mny, double& mxy) {
        double wx = cosr * (r.cx * sx) - sinr * (r.cy * sy);
        double wy = sinr * (r.cx * sx) + cosr * (r.cy * sy);
        double ex = r.hw * sx * std::fabs(cosr) + r.hh * sy * std::fabs(sinr);
        double ey = r.hw * sx * std::fabs(sinr) + r.hh * sy * std::fabs(cosr);
        mnx = wx - ex;
        mxx = wx + ex;
        mny = wy - ey;
        mxy = wy + ey;
    };
    auto from_rects = [&](std::initializer_list<Rect> rects) {
        double mnx = 1e18, mxx = -1e18, mny = 1e18, mxy = -1e18;
        for (const Rect& r : rects) {
            double a, b, c, d;
            rect_minmax(r, a, b, c, d);
            mnx = std::min(mnx, a);
            mxx = std::max(mxx, b);
            mny = std::min(mny, c);
            mxy = std::max(mxy, d);
        }
        hx = 0.5 * (mxx - mnx);
        hy = 0.5 * (mxy - mny);
        mx = 0.5 * (mxx + mnx);
        my = 0.5 * (mxy + mny);
    };
    auto from_polygon = [&](std::initializer_list<std::pair<double, double>> verts) {
        double mnx = 1e18, mxx = -1e18, mny = 1e18, mxy = -1e18;
        for (auto [vx, vy] : verts) {
            double wx = cosr * (vx * sx) - sinr * (vy * sy);
            double wy = sinr * (vx * sx) + cosr * (vy * sy);
            mnx = std::min(mnx, wx);
            mxx = std::max(mxx, wx);
            mny = std::min(mny, wy);
            mxy = std::max(mxy, wy);
        }
        hx = 0.5 * (mxx - mnx);
        hy = 0.5 * (mxy - mny);
        mx = 0.5 * (mxx + mnx);
        my = 0.5 * (mxy + mny);
    };
    switch (shape) {
        case 0:
        case 4: // circle of radius 1 under scaling+rotation = ellipse
            hx = std::hypot(sx * cosr, sy * sinr);
            hy = std::hypot(sx * sinr, sy * cosr);
            break;
        case 1: from_polygon({{1, 1}, {1, -1}, {-1, 1}, {-1, -1}}); break;
        case 2: from_polygon({{0, -1}, {0.9, 0.8}, {-0.9, 0.8}}); break;
        case 3: from_rects({{0, 0, 1, 0.35}, {0, 0, 0.35, 1}}); break;
        case 5: from_rects({{0, 0, 1, 1.0 / 3.0}}); break;
        case kLShape: from_rects({{0, 0.7, 1, 0.3}, {-0.7, 0, 0.3, 1}}); break;
        default: throw ValueError("unknown shape id " + std::to_string(shape));
    }
}

// Builds a pose whose world AABB has max side exactly target_side.
Pose make_pose(int shape, double cx, double cy, double target_side, double aspect, double rotation,
               const double color[3]) {
    Pose p;
    p.shape = shape;
    p.cx = cx;
    p.cy = cy;
    p.cosr = std::cos(rotation);
    p.sinr = std::sin(rotation);
    double hx0, hy0, mx0, my0;
    shape_aabb(shape, aspect, 1.0, p.cosr, p.sinr, hx0, hy0, mx0, my0);
    double f = (0.5 * target_side) / std::max(hx0, hy0);
    p.sx = f * aspect;
    p.sy = f;
    p.hx = f * hx0;
    p.hy = f * hy0;
    p.mx = f * mx0;
    p.my = f * my0;
    for (int i = 0; i < 3; ++i) p.color[i] = color[i];
    return p;
}

// 2x2 supersampled coverage of pixel (ix,iy), in {0, .25, .5, .75, 1}.
double pixel_coverage(const Pose& p, int ix, int iy) {
    static const double off[2] = {0.25, 0.75};
    int hits = 0;
    for (double oy : off)
        for (double ox : off)
            if (p.contains(ix + ox, iy + oy)) ++hits;
    return 0.25 * hits;
}

// Alpha-composites the pose onto img [3,S,S]; optionally records coverage.
void paint(Tensor& img, const Pose& p, int S, std::vector<double>* coverage) {
    int x0 = std::max(0, static_cast<int>(std::floor(p.cx - p.hx - 1)));
    int x1 = std::min(S - 1, static_cast<int>(std::ceil(p.cx + p.hx + 1)));
    int y0 = std::max(0, static_cast<int>(std::floor(p.cy - p.hy - 1)));
    int y1 = std::min(S - 1, static_cast<int>(std::ceil(p.cy + p.hy + 1)));
    double* d = img.data();
    std::int64_t plane = static_cast<std::int64_t>(S) * S;
    for (int iy = y0; iy <= y1; ++iy) {
        for (int ix = x0; ix <= x1; ++ix) {
            double cov = pixel_coverage(p, ix, iy);
            if (cov <= 0.0) continue;
            std::int64_t at = static_cast<std::int64_t>(iy) * S + ix;
            for (int ch = 0; ch < 3; ++ch)
                d[ch * plane + at] = d[ch * plane + at] * (1.0 - cov) + p.color[ch] * cov;
            if (coverage) (*coverage)[static_cast<size_t>(at)] = cov;
        }
    }
}

void draw_color(Rng& rng, double out[3]) {
    double mx = 0.0;
    for (int i = 0; i < 3; ++i) {
        out[i] = rng.uniform(0.25, 1.0);
        mx = std::max(mx, out[i]);
    }
    double peak = rng.uniform(0.7, 1.0);
    for (int i = 0; i < 3; ++i) out[i] *= peak / mx;
}

void validate_spec(const DatasetSpec& s) {
    if (s.num_classes < 1 || s.num_classes > max_classes())
        throw ValueError("num_classes must be in [1," + std::to_string(max_classes()) + "]");
    if (s.n_train < 0 || s.n_val < 0) throw ValueError("negative split size");
    if (s.image_size < 8) throw ValueError("image_size too small");
    if (!(s.scale_min > 0.0) || !(s.scale_max >= s.scale_min))
        throw ValueError("degenerate scale range");
    if (!(s.aspect_min > 0.0) || !(s.aspect_max >= s.aspect_min))
        throw ValueError("degenerate aspect range");
    if (s.clutter < 0.0 || s.clutter > 1.0) throw ValueError("clutter must be in [0,1]");
}

void assign_area_bins(std::vector<WeakSample>& split) {
    double max_area = 0.0;
    for (const WeakSample& s : split) max_area = std::max(max_area, s.gt_box.area());
    if (max_area <= 0.0) return;
    for (WeakSample& s : split) {
        int bin = static_cast<int>(10.0 * s.gt_box.area() / max_area);
        s.area_bin = std::min(9, bin);
    }
}

json box_to_json(const BoxXYXY& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoxXYXY box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) throw ParseError("gt_box must be a 4-array");
    BoxXYXY b;
    b.x1 = j[0].get<double>();
    b.y1 = j[1].get<double>();
    b.x2 = j[2].get<double>();
    b.y2 = j[3].get<double>();
    return b;
}

} // namespace

int max_classes() { return 6; }

const char* class_name(int label) {
    static const char* names[6] = {"disk", "square", "triangle", "cross", "ring", "bar"};
    if (label < 0 || label >= 6) throw ValueError("label out of range: " + std::to_string(label));
    return names[label];
}

WeakSample render_sample(const DatasetSpec& spec, const ObjectParams& obj, Rng& rng) {
    int S = spec.image_size;
    WeakSample out;
    out.label = obj.label;
    out.image = Tensor(Shape{3, S, S});

    // Low-frequency background: per-channel base plus a bilinearly
    // upsampled coarse noise grid, bounded well below object brightness.
    constexpr int G = 8;
    double base[3], amp[3];
    double grid[3][(G + 1) * (G + 1)];
    for (int ch = 0; ch < 3; ++ch) {
        base[ch] = rng.uniform(0.05, 0.2);
        amp[ch] = spec.clutter * rng.uniform(0.1, 0.25);
        for (int i = 0; i < (G + 1) * (G + 1); ++i) grid[ch][i] = rng.uniform();
    }
    double* d = out.image.data();
    std::int64_t plane = static_cast<std::int64_t>(S) * S;
    for (int iy = 0; iy < S; ++iy) {
        double v = (iy + 0.5) / S * G;
        int gy = std::min(G - 1, static_cast<int>(v));
        double fy = v - gy;
        for (int ix = 0; ix < S; ++ix) {
            double u = (ix + 0.5) / S * G;
            int gx = std::min(G - 1, static_cast<int>(u));
            double fx = u - gx;
            for (int ch = 0; ch < 3; ++ch) {
                const double* g = grid[ch];
                double n00 = g[gy * (G + 1) + gx], n01 = g[gy * (G + 1) + gx + 1];
                double n10 = g[(gy + 1) * (G + 1) + gx], n11 = g[(gy + 1) * (G + 1) + gx + 1];
                double n = (n00 * (1 - fx) + n01 * fx) * (1 - fy) + (n10 * (1 - fx) + n11 * fx) * fy;
                d[ch * plane + iy * S + ix] = base[ch] + amp[ch] * n;
            }
        }
    }

    // Small L-shaped distractors, drawn beneath the object.
    int n_distract = static_cast<int>(std::floor(spec.clutter * rng.uniform(2.0, 5.0) + 0.5));
    for (int k = 0; k < n_distract; ++k) {
        double side = rng.uniform(0.04, 0.095) * S;
        double rot = rng.uniform(0.0, 2.0 * kPi);
        double color[3];
        draw_color(rng, color);
        Pose probe = make_pose(kLShape, 0, 0, side, 1.0, rot, color);
        if (2.0 * probe.hx > S - 2.0 || 2.0 * probe.hy > S - 2.0) continue;
        double px = rng.uniform(probe.hx + 1.0, S - probe.hx - 1.0);
        double py = rng.uniform(probe.hy + 1.0, S - probe.hy - 1.0);
        probe.cx = px;
        probe.cy = py;
        paint(out.image, probe, S, nullptr);
    }

    // Foreground object, painted last so it is never occluded.
    Pose fg = make_pose(obj.label, obj.cx, obj.cy, obj.scale * S, obj.aspect, obj.rotation,
                        obj.color);
    std::vector<double> coverage(static_cast<size_t>(plane), 0.0);
    paint(out.image, fg, S, &coverage);

    int mnx = S, mxx = -1, mny = S, mxy = -1;
    for (int iy = 0; iy < S; ++iy)
        for (int ix = 0; ix < S; ++ix)
            if (coverage[static_cast<size_t>(iy) * S + ix] >= 0.5) {
                mnx = std::min(mnx, ix);
                mxx = std::max(mxx, ix);
                mny = std::min(mny, iy);
                mxy = std::max(mxy, iy);
            }
    if (mxx < 0) throw ValueError("rendered object covered no pixel");
    out.gt_box = BoxXYXY{static_cast<double>(mnx), static_cast<double>(mny),
                         static_cast<double>(mxx + 1), static_cast<double>(mxy + 1)};

    for (auto& v : out.image.values()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

Dataset generate(const DatasetSpec& spec) {
    validate_spec(spec);
    Dataset ds;
    ds.spec = spec;
    int S = spec.image_size;
    for (int split = 0; split < 2; ++split) {
        std::vector<WeakSample>& out = split == 0 ? ds.train : ds.val;
        int count = split == 0 ? spec.n_train : spec.n_val;
        out.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            Rng rng = Rng::child(spec.seed, static_cast<std::uint64_t>(split + 1),
                                 static_cast<std::uint64_t>(i));
            bool placed = false;
            for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
                ObjectParams obj;
                obj.label = static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(spec.num_classes)));
                double s2min = spec.scale_min * spec.scale_min;
                double s2max = spec.scale_max * spec.scale_max;
                obj.scale = std::sqrt(rng.uniform(s2min, s2max)); // area-uniform
                obj.aspect = rng.uniform(spec.aspect_min, spec.aspect_max);
                obj.rotation = rng.uniform(0.0, 2.0 * kPi);
                draw_color(rng, obj.color);
                Pose probe = make_pose(obj.label, 0, 0, obj.scale * S, obj.aspect, obj.rotation,
                                       obj.color);
                if (2.0 * probe.hx > S - 2.0 || 2.0 * probe.hy > S - 2.0) continue;
                obj.cx = rng.uniform(probe.hx + 1.0, S - probe.hx - 1.0);
                obj.cy = rng.uniform(probe.hy + 1.0, S - probe.hy - 1.0);
                out.push_back(render_sample(spec, obj, rng));
                placed = true;
            }
            if (!placed)
                throw ValueError("object larger than the image after 64 rescale attempts "
                                 "(scale range incompatible with image size)");
        }
        assign_area_bins(out);
    }
    return ds;
}

namespace {

json spec_to_json(const DatasetSpec& s) {
    return json{{"seed", s.seed},           {"num_classes", s.num_classes},
                {"n_train", s.n_train},     {"n_val", s.n_val},
                {"image_size", s.image_size}, {"scale_min", s.scale_min},
                {"scale_max", s.scale_max}, {"aspect_min", s.aspect_min},
                {"aspect_max", s.aspect_max}, {"clutter", s.clutter}};
}

DatasetSpec spec_from_json(const json& j) {
    DatasetSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.num_classes = j.at("num_classes").get<int>();
    s.n_train = j.at("n_train").get<int>();
    s.n_val = j.at("n_val").get<int>();
    s.image_size = j.at("image_size").get<int>();
    s.scale_min = j.at("scale_min").get<double>();
    s.scale_max = j.at("scale_max").get<double>();
    s.aspect_min = j.at("aspect_min").get<double>();
    s.aspect_max = j.at("aspect_max").get<double>();
    s.clutter = j.at("clutter").get<double>();
    return s;
}

std::string sample_file_name(const char* split, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%s_%05d.f64", split, index);
    return buf;
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string manifest;
    bool first = true;
    for (int split = 0; split < 2; ++split) {
        const auto& samples = split == 0 ? ds.train : ds.val;
        const char* name = split == 0 ? "train" : "val";
        for (size_t i = 0; i < samples.size(); ++i) {
            const WeakSample& s = samples[i];
            std::string file = sample_file_name(name, static_cast<int>(i));
            json j{{"split", name},
                   {"index", i},
                   {"file", file},
                   {"label", s.label},
                   {"gt_box", box_to_json(s.gt_box)},
                   {"area_bin", s.area_bin}};
            if (first) {
                j["spec"] = spec_to_json(ds.spec);
                first = false;
            }
            manifest += j.dump();
            manifest += '\n';
            write_image_file(dir + "/" + file, s.image);
        }
    }
    write_text_file(dir + "/manifest.json", manifest);
}

Dataset load_dataset(const std::string& dir) {
    std::string text = read_text_file(dir + "/manifest.json");
    Dataset ds;
    bool have_spec = false;
    std::int64_t line_start = 0;
    size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        line_start = static_cast<std::int64_t>(pos);
        pos = eol + 1;
        if (line.empty()) continue;
        ++line_no;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what(),
                             line_start + static_cast<std::int64_t>(e.byte) - 1);
        }
        try {
            if (line_no == 1) {
                if (!j.contains("spec"))
                    throw ParseError("manifest line 1 missing generation spec", line_start);
                ds.spec = spec_from_json(j.at("spec"));
                have_spec = true;
            }
            WeakSample s;
            s.label = j.at("label").get<int>();
            s.gt_box = box_from_json(j.at("gt_box"));
            s.area_bin = j.at("area_bin").get<int>();
            s.image = read_image_file(dir + "/" + j.at("file").get<std::string>());
            if (s.image.dim(0) != 3 || s.image.dim(1) != ds.spec.image_size ||
                s.image.dim(2) != ds.spec.image_size)
                throw ParseError("image dims disagree with dataset spec", line_start);
            if (s.label < 0 || s.label >= ds.spec.num_classes)
                throw ParseError("label out of range in manifest", line_start);
            std::string split = j.at("split").get<std::string>();
            if (split != "train" && split != "val")
                throw ParseError("unknown split '" + split + "'", line_start);
            auto& vec = split == "train" ? ds.train : ds.val;
            if (j.at("index").get<int>() != static_cast<int>(vec.size()))
                throw ParseError("out-of-order sample index in manifest", line_start);
            vec.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what(),
                             line_start);
        }
    }
    if (!have_spec) throw ParseError("empty manifest", 0);
    if (static_cast<int>(ds.train.size()) != ds.spec.n_train ||
        static_cast<int>(ds.val.size()) != ds.spec.n_val)
        throw ParseError("manifest sample count disagrees with its spec", 0);
    return ds;
}

} // namespace cstn
