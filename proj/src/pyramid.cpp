#include "cstn/pyramid.hpp"

#include <cmath>

namespace cstn {

Conv2dLayer Conv2dLayer::init(int cin, int cout, int k, int stride, int padding, Rng& rng) {
    Conv2dLayer layer;
    double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    layer.w = Tensor::randn(Shape{cout, cin, k, k}, rng, stddev, true);
    layer.b = Tensor::zeros(Shape{cout}, true);
    layer.stride = stride;
    layer.padding = padding;
    return layer;
}

void Conv2dLayer::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

BatchNorm2dLayer BatchNorm2dLayer::init(int c) {
    BatchNorm2dLayer layer;
    layer.gamma = Tensor::full(Shape{c}, 1.0, true);
    layer.beta = Tensor::zeros(Shape{c}, true);
    layer.stats = RunningStats(c);
    return layer;
}

void BatchNorm2dLayer::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

void BatchNorm2dLayer::collect_buffers(const std::string& prefix, NamedBuffers& out) {
    out.emplace_back(prefix + ".running_mean", &stats.mean);
    out.emplace_back(prefix + ".running_var", &stats.var);
}

ConvBlock ConvBlock::init(int cin, int cout, Rng& rng) {
    ConvBlock block;
    block.conv = Conv2dLayer::init(cin, cout, 3, 1, 1, rng);
    block.bn = BatchNorm2dLayer::init(cout);
    block.down = Conv2dLayer::init(cout, cout, 3, 2, 1, rng);
    return block;
}

Tensor ConvBlock::forward(const Tensor& x, BnMode mode) {
    return down.forward(relu(bn.forward(conv.forward(x), mode)));
}

void ConvBlock::collect(const std::string& prefix, NamedParams& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
    down.collect(prefix + ".down", out);
}

void ConvBlock::collect_buffers(const std::string& prefix, NamedBuffers& out) {
    bn.collect_buffers(prefix + ".bn", out);
}

Backbone Backbone::init(Rng& rng) {
    Backbone bb;
    bb.b1 = ConvBlock::init(3, 16, rng);
    bb.b2 = ConvBlock::init(16, 32, rng);
    bb.b3 = ConvBlock::init(32, 64, rng);
    bb.b4 = ConvBlock::init(64, 64, rng);
    return bb;
}

std::pair<Tensor, Tensor> Backbone::forward(const Tensor& image, BnMode mode) {
    if (image.ndim() != 4 || image.dim(1) != 3)
        throw ShapeError("backbone: input must be [N,3,H,W], got " + shape_str(image.shape()));
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
        throw ShapeError("backbone: spatial dims " + std::to_string(image.dim(2)) + "x" +
                         std::to_string(image.dim(3)) + " not divisible by 32");
    Tensor x = b1.forward(image, mode);
    x = b2.forward(x, mode);
    Tensor c4 = b3.forward(x, mode);
    Tensor c5 = b4.forward(c4, mode);
    return {c4, c5};
}

void Backbone::collect(const std::string& prefix, NamedParams& out) {
    b1.collect(prefix + ".block1", out);
    b2.collect(prefix + ".block2", out);
    b3.collect(prefix + ".block3", out);
    b4.collect(prefix + ".block4", out);
}

void Backbone::collect_buffers(const std::string& prefix, NamedBuffers& out) {
    b1.collect_buffers(prefix + ".block1", out);
    b2.collect_buffers(prefix + ".block2", out);
    b3.collect_buffers(prefix + ".block3", out);
    b4.collect_buffers(prefix + ".block4", out);
}

Fpn Fpn::init(int c4_channels, int c5_channels, int d, Rng& rng) {
    Fpn fpn;
    fpn.extra = Conv2dLayer::init(c5_channels, c5_channels, 3, 1, 1, rng);
    fpn.extra_bn = BatchNorm2dLayer::init(c5_channels);
    fpn.lat4 = Conv2dLayer::init(c4_channels, d, 1, 1, 0, rng);
    fpn.lat5 = Conv2dLayer::init(c5_channels, d, 1, 1, 0, rng);
    fpn.smooth4 = Conv2dLayer::init(d, d, 3, 1, 1, rng);
    return fpn;
}

std::pair<Tensor, Tensor> Fpn::forward(const Tensor& c4, const Tensor& c5, BnMode mode) {
    if (c4.ndim() != 4 || c5.ndim() != 4)
        throw ShapeError("fpn: inputs must be [N,C,H,W]");
    if (c5.dim(2) * 2 != c4.dim(2) || c5.dim(3) * 2 != c4.dim(3))
        throw ShapeError("fpn: C5 " + shape_str(c5.shape()) + " must be half of C4 " +
                         shape_str(c4.shape()));
    Tensor c5e = extra_bn.forward(extra.forward(c5), mode);
    Tensor p5 = lat5.forward(c5e);
    Tensor p4 = smooth4.forward(add(lat4.forward(c4), upsample_nearest2x(p5)));
    return {p4, p5};
}

void Fpn::collect(const std::string& prefix, NamedParams& out) {
    extra.collect(prefix + ".extra", out);
    extra_bn.collect(prefix + ".extra_bn", out);
    lat4.collect(prefix + ".lat4", out);
    lat5.collect(prefix + ".lat5", out);
    smooth4.collect(prefix + ".smooth4", out);
}

void Fpn::collect_buffers(const std::string& prefix, NamedBuffers& out) {
    extra_bn.collect_buffers(prefix + ".extra_bn", out);
}

} // namespace cstn
