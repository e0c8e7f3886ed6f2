#include "cstn/stn.hpp"

#include <cmath>
#include <string>

namespace cstn {

namespace {

// Untransformed lattice coordinates: K points evenly spaced over [-1,1],
// single point at 0 for K=1.
std::vector<double> lattice_coords(int K) {
    std::vector<double> c(static_cast<size_t>(K), 0.0);
    if (K >= 2)
        for (int k = 0; k < K; ++k)
            c[static_cast<size_t>(k)] = -1.0 + 2.0 * k / static_cast<double>(K - 1);
    return c;
}

// One normalized unit in feature cells. Spacing of the identity lattice is
// one cell, so (K-1)/2 cells per unit; K=1 has no spacing to pin this down
// and uses half a cell per unit.
double cells_per_unit_for(int K) { return K >= 2 ? (K - 1) / 2.0 : 0.5; }

} // namespace

Tensor identity_theta(int N, int H, int W) {
    Tensor t(Shape{N, 6, H, W});
    static const double id[6] = {1, 0, 0, 0, 1, 0};
    double* p = t.data();
    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < 6; ++c) {
            double* q = p + (static_cast<std::int64_t>(n) * 6 + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) q[i] = id[c];
        }
    return t;
}

SamplingGrid affine_grid(const Tensor& theta, int K) {
    if (theta.ndim() != 4 || theta.dim(1) != 6)
        throw ShapeError("affine_grid: theta must be [N,6,H,W], got " + shape_str(theta.shape()));
    if (K < 1) throw ValueError("affine_grid: K must be >= 1");
    int N = theta.dim(0), H = theta.dim(2), W = theta.dim(3);
    std::vector<double> lat = lattice_coords(K);
    std::int64_t plane = static_cast<std::int64_t>(H) * W;

    Shape out_shape{N, H, W, K, K, 2};
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    const double* th = theta.data();
    double* o = out.data();
    for (int n = 0; n < N; ++n) {
        const double* tb = th + static_cast<std::int64_t>(n) * 6 * plane;
        for (std::int64_t yx = 0; yx < plane; ++yx) {
            double a11 = tb[yx], a12 = tb[plane + yx], t1 = tb[2 * plane + yx];
            double a21 = tb[3 * plane + yx], a22 = tb[4 * plane + yx], t2 = tb[5 * plane + yx];
            double* cell = o + (static_cast<std::int64_t>(n) * plane + yx) *
                               static_cast<std::int64_t>(K) * K * 2;
            for (int ky = 0; ky < K; ++ky) {
                double v = lat[static_cast<size_t>(ky)];
                for (int kx = 0; kx < K; ++kx) {
                    double u = lat[static_cast<size_t>(kx)];
                    cell[0] = a11 * u + a12 * v + t1;
                    cell[1] = a21 * u + a22 * v + t2;
                    cell += 2;
                }
            }
        }
    }

    Tensor grid = detail::make_op(
        "affine_grid", out_shape, std::move(out), {theta},
        [N, K, plane, lat](Node& nd) {
            double* gt = nd.inputs[0]->grad_acc();
            const double* g = nd.grad.data();
            for (int n = 0; n < N; ++n) {
                double* gb = gt + static_cast<std::int64_t>(n) * 6 * plane;
                for (std::int64_t yx = 0; yx < plane; ++yx) {
                    const double* cell = g + (static_cast<std::int64_t>(n) * plane + yx) *
                                             static_cast<std::int64_t>(K) * K * 2;
                    double da11 = 0, da12 = 0, dt1 = 0, da21 = 0, da22 = 0, dt2 = 0;
                    for (int ky = 0; ky < K; ++ky) {
                        double v = lat[static_cast<size_t>(ky)];
                        for (int kx = 0; kx < K; ++kx) {
                            double u = lat[static_cast<size_t>(kx)];
                            double gu = cell[0], gv = cell[1];
                            da11 += gu * u;
                            da12 += gu * v;
                            dt1 += gu;
                            da21 += gv * u;
                            da22 += gv * v;
                            dt2 += gv;
                            cell += 2;
                        }
                    }
                    gb[yx] += da11;
                    gb[plane + yx] += da12;
                    gb[2 * plane + yx] += dt1;
                    gb[3 * plane + yx] += da21;
                    gb[4 * plane + yx] += da22;
                    gb[5 * plane + yx] += dt2;
                }
            }
        });
    return SamplingGrid{grid, K, cells_per_unit_for(K)};
}

Tensor bilinear_sample(const Tensor& fmap, const SamplingGrid& sg) {
    const Tensor& grid = sg.grid;
    if (fmap.ndim() != 4)
        throw ShapeError("bilinear_sample: fmap must be [N,P,H,W], got " + shape_str(fmap.shape()));
    if (grid.ndim() != 6 || grid.dim(5) != 2)
        throw ShapeError("bilinear_sample: grid must be [N,H,W,K,K,2], got " +
                         shape_str(grid.shape()));
    int N = fmap.dim(0), P = fmap.dim(1), H = fmap.dim(2), W = fmap.dim(3);
    int K = grid.dim(3);
    if (grid.dim(0) != N || grid.dim(1) != H || grid.dim(2) != W || grid.dim(4) != K)
        throw ShapeError("bilinear_sample: grid " + shape_str(grid.shape()) +
                         " does not match fmap " + shape_str(fmap.shape()));
    double cpu = sg.cells_per_unit;

    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::int64_t KK = static_cast<std::int64_t>(K) * K;
    Shape out_shape{N, P, H, W, K, K};
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    const double* f = fmap.data();
    const double* g = grid.data();

    for (int n = 0; n < N; ++n) {
        const double* fb = f + static_cast<std::int64_t>(n) * P * plane;
        double* ob = out.data() + static_cast<std::int64_t>(n) * P * plane * KK;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                std::int64_t yx = static_cast<std::int64_t>(y) * W + x;
                const double* cell = g + (static_cast<std::int64_t>(n) * plane + yx) * KK * 2;
                for (std::int64_t t = 0; t < KK; ++t) {
                    double gx = x + cpu * cell[2 * t];
                    double gy = y + cpu * cell[2 * t + 1];
                    double fx = std::floor(gx), fy = std::floor(gy);
                    int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
                    double wx = gx - fx, wy = gy - fy;
                    bool x0v = x0 >= 0 && x0 < W, x1v = x0 + 1 >= 0 && x0 + 1 < W;
                    bool y0v = y0 >= 0 && y0 < H, y1v = y0 + 1 >= 0 && y0 + 1 < H;
                    std::int64_t r0 = static_cast<std::int64_t>(y0) * W;
                    std::int64_t r1 = r0 + W;
                    for (int p = 0; p < P; ++p) {
                        const double* fp = fb + static_cast<std::int64_t>(p) * plane;
                        double f00 = (x0v && y0v) ? fp[r0 + x0] : 0.0;
                        double f10 = (x1v && y0v) ? fp[r0 + x0 + 1] : 0.0;
                        double f01 = (x0v && y1v) ? fp[r1 + x0] : 0.0;
                        double f11 = (x1v && y1v) ? fp[r1 + x0 + 1] : 0.0;
                        ob[(static_cast<std::int64_t>(p) * plane + yx) * KK + t] =
                            f00 * (1 - wx) * (1 - wy) + f10 * wx * (1 - wy) +
                            f01 * (1 - wx) * wy + f11 * wx * wy;
                    }
                }
            }
    }

    return detail::make_op(
        "bilinear_sample", out_shape, std::move(out), {fmap, grid},
        [N, P, H, W, K, KK, plane, cpu](Node& nd) {
            const double* f = nd.inputs[0]->values.data();
            const double* g = nd.inputs[1]->values.data();
            bool need_f = nd.inputs[0]->requires_grad;
            bool need_g = nd.inputs[1]->requires_grad;
            double* gf = need_f ? nd.inputs[0]->grad_acc() : nullptr;
            double* gg = need_g ? nd.inputs[1]->grad_acc() : nullptr;
            const double* go = nd.grad.data();

            for (int n = 0; n < N; ++n) {
                const double* fb = f + static_cast<std::int64_t>(n) * P * plane;
                double* gfb = need_f ? gf + static_cast<std::int64_t>(n) * P * plane : nullptr;
                const double* gob = go + static_cast<std::int64_t>(n) * P * plane * KK;
                for (std::int64_t yx = 0; yx < plane; ++yx) {
                    int y = static_cast<int>(yx / W), x = static_cast<int>(yx % W);
                    std::int64_t goff = (static_cast<std::int64_t>(n) * plane + yx) * KK * 2;
                    const double* cell = g + goff;
                    for (std::int64_t t = 0; t < KK; ++t) {
                        double gx = x + cpu * cell[2 * t];
                        double gy = y + cpu * cell[2 * t + 1];
                        double fx = std::floor(gx), fy = std::floor(gy);
                        int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
                        double wx = gx - fx, wy = gy - fy;
                        bool x0v = x0 >= 0 && x0 < W, x1v = x0 + 1 >= 0 && x0 + 1 < W;
                        bool y0v = y0 >= 0 && y0 < H, y1v = y0 + 1 >= 0 && y0 + 1 < H;
                        std::int64_t r0 = static_cast<std::int64_t>(y0) * W;
                        std::int64_t r1 = r0 + W;
                        double du = 0.0, dv = 0.0;
                        for (int p = 0; p < P; ++p) {
                            double gv = gob[(static_cast<std::int64_t>(p) * plane + yx) * KK + t];
                            if (gv == 0.0) continue;
                            const double* fp = fb + static_cast<std::int64_t>(p) * plane;
                            double f00 = (x0v && y0v) ? fp[r0 + x0] : 0.0;
                            double f10 = (x1v && y0v) ? fp[r0 + x0 + 1] : 0.0;
                            double f01 = (x0v && y1v) ? fp[r1 + x0] : 0.0;
                            double f11 = (x1v && y1v) ? fp[r1 + x0 + 1] : 0.0;
                            if (need_f) {
                                double* gfp = gfb + static_cast<std::int64_t>(p) * plane;
                                if (x0v && y0v) gfp[r0 + x0] += gv * (1 - wx) * (1 - wy);
                                if (x1v && y0v) gfp[r0 + x0 + 1] += gv * wx * (1 - wy);
                                if (x0v && y1v) gfp[r1 + x0] += gv * (1 - wx) * wy;
                                if (x1v && y1v) gfp[r1 + x0 + 1] += gv * wx * wy;
                            }
                            du += gv * ((f10 - f00) * (1 - wy) + (f11 - f01) * wy);
                            dv += gv * ((f01 - f00) * (1 - wx) + (f11 - f10) * wx);
                        }
                        if (need_g) {
                            gg[goff + 2 * t] += cpu * du;
                            gg[goff + 2 * t + 1] += cpu * dv;
                        }
                    }
                }
            }
        });
}

Tensor cstn_conv(const Tensor& f, const Tensor& theta, const Tensor& weight, const Tensor& bias) {
    if (f.ndim() != 4) throw ShapeError("cstn_conv: f must be [N,P,H,W], got " + shape_str(f.shape()));
    if (theta.ndim() != 4 || theta.dim(1) != 6)
        throw ShapeError("cstn_conv: theta must be [N,6,H,W], got " + shape_str(theta.shape()));
    if (theta.dim(0) != f.dim(0) || theta.dim(2) != f.dim(2) || theta.dim(3) != f.dim(3))
        throw ShapeError("cstn_conv: theta " + shape_str(theta.shape()) + " does not match f " +
                         shape_str(f.shape()));
    if (weight.ndim() != 4 || weight.dim(1) != f.dim(1))
        throw ShapeError("cstn_conv: weight " + shape_str(weight.shape()) +
                         " incompatible with f " + shape_str(f.shape()));
    int K = weight.dim(2);
    if (weight.dim(3) != K || K % 2 == 0)
        throw ShapeError("cstn_conv: kernel must be square with odd size");
    SamplingGrid grid = affine_grid(theta, K);
    Tensor samples = bilinear_sample(f, grid);
    return kernel_contract(samples, weight, bias);
}

LocNet LocNet::init(int in_channels, int hidden, Rng& rng) {
    LocNet p;
    double std1 = std::sqrt(2.0 / (static_cast<double>(in_channels) * 9.0));
    p.w1 = Tensor::randn(Shape{hidden, in_channels, 3, 3}, rng, std1, true);
    p.b1 = Tensor::zeros(Shape{hidden}, true);
    p.w2 = Tensor::zeros(Shape{6, hidden, 1, 1}, true);
    p.b2 = Tensor(Shape{6}, {1, 0, 0, 0, 1, 0}, true);
    return p;
}

Tensor loc_net_forward(const Tensor& f, const LocNet& params) {
    Tensor h = relu(conv2d(f, params.w1, params.b1, 1, 1));
    return conv2d(h, params.w2, params.b2, 1, 0);
}

BoxXYXY theta_to_box(const double* theta6, int y, int x, const ScaleInfo& scale,
                     int image_h, int image_w) {
    double a11 = theta6[0], a12 = theta6[1], t1 = theta6[2];
    double a21 = theta6[3], a22 = theta6[4], t2 = theta6[5];
    double half = 0.5 * scale.box_side();
    double cx = (x + 0.5) * scale.stride;
    double cy = (y + 0.5) * scale.stride;

    double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
    bool first = true;
    for (int cu = -1; cu <= 1; cu += 2)
        for (int cv = -1; cv <= 1; cv += 2) {
            double u = a11 * cu + a12 * cv + t1;
            double v = a21 * cu + a22 * cv + t2;
            double px = cx + half * u;
            double py = cy + half * v;
            if (first) {
                lo_x = hi_x = px;
                lo_y = hi_y = py;
                first = false;
            } else {
                lo_x = std::min(lo_x, px);
                hi_x = std::max(hi_x, px);
                lo_y = std::min(lo_y, py);
                hi_y = std::max(hi_y, py);
            }
        }

    BoxXYXY box;
    box.x1 = std::clamp(lo_x, 0.0, static_cast<double>(image_w));
    box.x2 = std::clamp(hi_x, 0.0, static_cast<double>(image_w));
    box.y1 = std::clamp(lo_y, 0.0, static_cast<double>(image_h));
    box.y2 = std::clamp(hi_y, 0.0, static_cast<double>(image_h));
    if (box.x2 <= box.x1 || box.y2 <= box.y1) {
        box.x2 = box.x1;
        box.y2 = box.y1;
        box.degenerate = true;
    }
    return box;
}

} // namespace cstn
