#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cstn/ops.hpp"
#include "cstn/tensor.hpp"

namespace cstn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;
using NamedBuffers = std::vector<std::pair<std::string, std::vector<double>*>>;

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1;
    int padding = 0;

    static Conv2dLayer init(int cin, int cout, int k, int stride, int padding, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, padding); }
    void collect(const std::string& prefix, NamedParams& out);
};

struct BatchNorm2dLayer {
    Tensor gamma, beta;
    RunningStats stats;

    static BatchNorm2dLayer init(int c);
    Tensor forward(const Tensor& x, BnMode mode) { return batchnorm2d(x, gamma, beta, stats, mode); }
    void collect(const std::string& prefix, NamedParams& out);
    void collect_buffers(const std::string& prefix, NamedBuffers& out);
};

/// conv3x3 (same) + batchnorm + ReLU + stride-2 conv3x3; halves resolution.
struct ConvBlock {
    Conv2dLayer conv;
    BatchNorm2dLayer bn;
    Conv2dLayer down;

    static ConvBlock init(int cin, int cout, Rng& rng);
    Tensor forward(const Tensor& x, BnMode mode);
    void collect(const std::string& prefix, NamedParams& out);
    void collect_buffers(const std::string& prefix, NamedBuffers& out);
};

/// Four blocks, channels 3 -> 16 -> 32 -> 64 -> 64. C4 is the block-3
/// output (stride 8), C5 the block-4 output (stride 16).
struct Backbone {
    ConvBlock b1, b2, b3, b4;

    static Backbone init(Rng& rng);
    /// Input [N,3,H,W] with H, W divisible by 32 (checked before compute).
    std::pair<Tensor, Tensor> forward(const Tensor& image, BnMode mode);
    void collect(const std::string& prefix, NamedParams& out);
    void collect_buffers(const std::string& prefix, NamedBuffers& out);

    static constexpr int c4_channels = 64;
    static constexpr int c5_channels = 64;
};

/// Two-level merge. C5 first passes the additional conv + batchnorm, then
/// P5 = 1x1 lateral, P4 = 1x1 lateral(C4) + upsampled P5 followed by a 3x3
/// smoothing conv. Both outputs have d channels.
struct Fpn {
    Conv2dLayer extra;
    BatchNorm2dLayer extra_bn;
    Conv2dLayer lat4, lat5;
    Conv2dLayer smooth4;

    static Fpn init(int c4_channels, int c5_channels, int d, Rng& rng);
    std::pair<Tensor, Tensor> forward(const Tensor& c4, const Tensor& c5, BnMode mode);
    void collect(const std::string& prefix, NamedParams& out);
    void collect_buffers(const std::string& prefix, NamedBuffers& out);
};

} // namespace cstn
