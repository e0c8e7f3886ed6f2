#pragma once

#include "cstn/ops.hpp"
#include "cstn/tensor.hpp"
#include "cstn/types.hpp"

namespace cstn {

// Per-location affine parameters are a Tensor[N,6,H,W] with channel order
// [a11, a12, t1, a21, a22, t2]; identity is [1,0,0,0,1,0]. A transform maps
// a point (u,v) of the local normalized frame (untransformed K x K lattice
// evenly spaced over [-1,1]^2) to (a11*u + a12*v + t1, a21*u + a22*v + t2).

/// Identity transform at every location, no grad.
Tensor identity_theta(int N, int H, int W);

/// Sampling positions produced from per-location transforms. Values are
/// local normalized offsets around each cell center, last axis (u,v);
/// cells_per_unit converts normalized units to feature cells.
struct SamplingGrid {
    Tensor grid; // [N,H,W,K,K,2]
    int K = 0;
    double cells_per_unit = 1.0;
};

/// Maps the regular K x K lattice through each location's transform.
/// Identity theta reproduces the lattice itself (spacing one feature cell).
SamplingGrid affine_grid(const Tensor& theta, int K);

/// Bilinear interpolation of fmap [N,P,H,W] at the grid positions,
/// zero outside; returns [N,P,H,W,K,K]. Differentiable in both fmap and
/// the grid coordinates.
Tensor bilinear_sample(const Tensor& fmap, const SamplingGrid& grid);

/// Convolution over the transformed sampling grid: with identity theta this
/// equals conv2d(f, weight, bias, stride 1, same padding).
Tensor cstn_conv(const Tensor& f, const Tensor& theta, const Tensor& weight, const Tensor& bias);

/// Transform estimator: 3x3 conv (same padding) to hidden channels + ReLU,
/// then 1x1 conv to 6 channels. Final layer starts at exact identity
/// (zero weights, identity bias).
struct LocNet {
    Tensor w1, b1; // [hidden, P, 3, 3], [hidden]
    Tensor w2, b2; // [6, hidden, 1, 1], [6]

    static LocNet init(int in_channels, int hidden, Rng& rng);
};

/// Predicts one transform per feature location: Tensor[N,6,H,W].
Tensor loc_net_forward(const Tensor& f, const LocNet& params);

/// Decodes one location's transform into an image-space box: the default
/// box corners (+-1,+-1) are mapped through theta, scaled by half the
/// default side, re-anchored at the cell center, and the axis-aligned hull
/// is clipped to the image. Zero-area results come back flagged.
BoxXYXY theta_to_box(const double* theta6, int y, int x, const ScaleInfo& scale,
                     int image_h, int image_w);

} // namespace cstn
