#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cstn/model.hpp"
#include "cstn/ops.hpp"
#include "cstn/pyramid.hpp"
#include "cstn/rng.hpp"
#include "cstn/stn.hpp"

using namespace cstn;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

} // namespace

TEST_CASE("backbone strides: 64x64 gives 8x8 and 4x4 levels") {
    Rng rng(3);
    Backbone bb = Backbone::init(rng);
    Tensor img = Tensor::randn({1, 3, 64, 64}, rng, 1.0, false);
    auto [c4, c5] = bb.forward(img, BnMode::train);
    CHECK(c4.dim(2) == 8);
    CHECK(c4.dim(3) == 8);
    CHECK(c4.dim(1) == Backbone::c4_channels);
    CHECK(c5.dim(2) == 4);
    CHECK(c5.dim(3) == 4);
    CHECK(c5.dim(1) == Backbone::c5_channels);
}

TEST_CASE("backbone carries the batch dimension through") {
    Rng rng(4);
    Backbone bb = Backbone::init(rng);
    Tensor img = Tensor::randn({2, 3, 32, 32}, rng, 1.0, false);
    auto [c4, c5] = bb.forward(img, BnMode::train);
    CHECK(c4.dim(0) == 2);
    CHECK(c5.dim(0) == 2);
}

TEST_CASE("backbone rejects sizes not divisible by 32") {
    Rng rng(5);
    Backbone bb = Backbone::init(rng);
    Tensor img = Tensor::randn({1, 3, 48, 48}, rng, 1.0, false);
    CHECK_THROWS_AS(bb.forward(img, BnMode::train), ShapeError);
    Tensor img2 = Tensor::randn({1, 3, 16, 16}, rng, 1.0, false);
    CHECK_THROWS_AS(bb.forward(img2, BnMode::train), ShapeError);
}

TEST_CASE("fpn merge recomposes from its parts") {
    Rng rng(6);
    Fpn fpn = Fpn::init(64, 64, 32, rng);
    Tensor c4 = Tensor::randn({1, 64, 8, 8}, rng, 1.0, false);
    Tensor c5 = Tensor::randn({1, 64, 4, 4}, rng, 1.0, false);

    auto recompose = [&](const Tensor& a4, const Tensor& a5) {
        Tensor t = fpn.extra_bn.forward(fpn.extra.forward(a5), BnMode::eval);
        Tensor p5 = fpn.lat5.forward(t);
        Tensor p4 = fpn.smooth4.forward(add(fpn.lat4.forward(a4), upsample_nearest2x(p5)));
        return std::make_pair(p4, p5);
    };

    auto [p4, p5] = fpn.forward(c4, c5, BnMode::eval);
    auto [r4, r5] = recompose(c4, c5);
    CHECK(max_abs_diff(p4, r4) == 0.0);
    CHECK(max_abs_diff(p5, r5) == 0.0);

    // zero C4: the lateral path contributes only its bias and P4 is the
    // upsampled-and-smoothed P5 branch
    Tensor z4 = Tensor::zeros(c4.shape(), false);
    auto [p4z, p5z] = fpn.forward(z4, c5, BnMode::eval);
    auto [r4z, r5z] = recompose(z4, c5);
    CHECK(max_abs_diff(p4z, r4z) == 0.0);
    CHECK(max_abs_diff(p5z, p5) == 0.0); // P5 never sees C4

    // zero C5: P4 varies only through the lateral path
    Tensor z5 = Tensor::zeros(c5.shape(), false);
    auto [p4a, u1] = fpn.forward(c4, z5, BnMode::eval);
    Tensor c4b = Tensor::randn({1, 64, 8, 8}, rng, 1.0, false);
    auto [p4b, u2] = fpn.forward(c4b, z5, BnMode::eval);
    Tensor lat_a = fpn.lat4.forward(c4);
    Tensor lat_b = fpn.lat4.forward(c4b);
    // difference of the two P4s equals the smoothing conv applied to the
    // lateral difference (bias and P5 terms cancel); conv is linear in its
    // input up to the shared bias
    Tensor lhs = sub(p4a, p4b);
    Tensor zb = Tensor::zeros(Shape{32}, false);
    Tensor rhs = conv2d(sub(lat_a, lat_b), fpn.smooth4.w, zb, 1, 1);
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("fpn rejects level dims that are not a 2x pair") {
    Rng rng(7);
    Fpn fpn = Fpn::init(64, 64, 32, rng);
    Tensor c4 = Tensor::randn({1, 64, 8, 8}, rng, 1.0, false);
    Tensor c5 = Tensor::randn({1, 64, 3, 3}, rng, 1.0, false);
    CHECK_THROWS_AS(fpn.forward(c4, c5, BnMode::eval), ShapeError);
}

TEST_CASE("identity-initialized head equals a plain convolution") {
    Rng rng(8);
    Head head = Head::init(16, 4, 8, true, rng);
    Tensor p = Tensor::randn({2, 16, 6, 6}, rng, 1.0, false);
    auto [logits, theta] = head.forward(p);
    Tensor plain = conv2d(p, head.cls_w, head.cls_b, 1, 1);
    CHECK(max_abs_diff(logits, plain) < 1e-9);
    // and the returned transforms are exactly the identity
    for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const double id[6] = {1, 0, 0, 0, 1, 0};
                for (int k = 0; k < 6; ++k)
                    CHECK(theta.at({n, k, y, x}) == doctest::Approx(id[k]).epsilon(1e-12));
            }
}

TEST_CASE("shared head gives equal logits on equal local content across scales") {
    Rng rng(9);
    Head head = Head::init(8, 3, 6, true, rng);
    // push the loc net off identity so the transform path is exercised
    for (auto& v : head.loc.w2.values()) v += 0.05 * rng.normal();
    for (auto& v : head.loc.b2.values()) v += 0.05 * rng.normal();
    // per-channel-constant maps are their own nearest-neighbor upsampling,
    // so the two levels carry identical local content at every site
    std::vector<double> vf(8 * 16 * 16), vc(8 * 8 * 8);
    for (int c = 0; c < 8; ++c) {
        double v = 0.3 + 0.1 * static_cast<double>(c);
        std::fill(vf.begin() + c * 256, vf.begin() + (c + 1) * 256, v);
        std::fill(vc.begin() + c * 64, vc.begin() + (c + 1) * 64, v);
    }
    Tensor fine(Shape{1, 8, 16, 16}, vf);
    Tensor coarse(Shape{1, 8, 8, 8}, vc);
    auto [lf, tf] = head.forward(fine);
    auto [lc, tc] = head.forward(coarse);
    // sites two cells from the border keep all wiggled sampling positions
    // inside the map, so corresponding sites (2y,2x) <-> (y,x) see the
    // same constant window and must agree
    for (int c = 0; c < 3; ++c)
        for (int y = 2; y < 6; ++y)
            for (int x = 2; x < 6; ++x)
                CHECK(lf.at({0, c, 2 * y, 2 * x}) ==
                      doctest::Approx(lc.at({0, c, y, x})).epsilon(1e-12));
}

TEST_CASE("default box centers tile the image at the stride") {
    ScaleInfo s;
    s.level = 0;
    s.stride = 8;
    s.h = 8;
    s.w = 8;
    s.base_size = 1.0; // small boxes stay unclipped
    const double id[6] = {1, 0, 0, 0, 1, 0};
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            BoxXYXY b = theta_to_box(id, y, x, s, 64, 64);
            double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
            CHECK(cx == doctest::Approx((x + 0.5) * 8).epsilon(1e-12));
            CHECK(cy == doctest::Approx((y + 0.5) * 8).epsilon(1e-12));
        }
}

TEST_CASE("parameter set has one shared head and optional loc net") {
    ModelConfig cfg;
    cfg.num_classes = 4;
    cfg.image_size = 32;
    CstnModel with = CstnModel::init(cfg, 1);
    int head_cls = 0, head_loc = 0;
    for (auto& [name, t] : with.parameters()) {
        if (name.rfind("head.cls", 0) == 0) ++head_cls;
        if (name.rfind("head.loc", 0) == 0) ++head_loc;
    }
    // one weight + one bias for the class conv; two conv layers for loc
    CHECK(head_cls == 2);
    CHECK(head_loc == 4);

    cfg.use_cstn = false;
    CstnModel without = CstnModel::init(cfg, 1);
    for (auto& [name, t] : without.parameters()) CHECK(name.find(".loc.") == std::string::npos);
}

TEST_CASE("untrained loc net reduces the model to a plain classifier") {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.image_size = 32;
    cfg.fpn_channels = 16;
    CstnModel a = CstnModel::init(cfg, 11);
    cfg.use_cstn = false;
    CstnModel b = CstnModel::init(cfg, 12);
    // align every shared weight; a's loc net keeps its identity init
    for (auto& [name, dst] : b.parameters()) {
        for (auto& [src_name, src] : a.parameters())
            if (src_name == name) std::copy(src.values().begin(), src.values().end(), dst.values().begin());
    }
    Rng rng(13);
    Tensor img = Tensor::randn({2, 3, 32, 32}, rng, 1.0, false);
    NoGradGuard ng;
    ModelOutput oa = a.forward(img, BnMode::eval);
    ModelOutput ob = b.forward(img, BnMode::eval);
    REQUIRE(oa.logits.size() == ob.logits.size());
    for (size_t s = 0; s < oa.logits.size(); ++s)
        CHECK(max_abs_diff(oa.logits[s], ob.logits[s]) < 1e-9);
}
