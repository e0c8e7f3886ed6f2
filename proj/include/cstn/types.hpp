#pragma once

#include <algorithm>

namespace cstn {

/// Geometry of one pyramid level. Stride is pixels per feature cell; the
/// default box at cell (y,x) is a square of side base_size*stride centered
/// at ((x+0.5)*stride, (y+0.5)*stride).
struct ScaleInfo {
    int level = 0;
    int stride = 1;
    int h = 0;
    int w = 0;
    double base_size = 8.0;

    double box_side() const { return base_size * static_cast<double>(stride); }
};

/// Axis-aligned box in continuous pixel coordinates, half-open on the
/// max edges. degenerate marks zero-area results of clipping.
struct BoxXYXY {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
    double score = 0.0;
    bool degenerate = false;

    double area() const {
        double w = x2 - x1, h = y2 - y1;
        return (w > 0.0 && h > 0.0) ? w * h : 0.0;
    }
};

inline double box_iou(const BoxXYXY& a, const BoxXYXY& b) {
    double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    double iw = ix2 - ix1, ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    double inter = iw * ih;
    double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

} // namespace cstn
