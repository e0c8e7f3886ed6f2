#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cstn/gradcheck.hpp"
#include "cstn/ops.hpp"
#include "cstn/rng.hpp"
#include "cstn/stn.hpp"
#include "cstn/wsol.hpp"

using namespace cstn;

namespace {

std::vector<ScaleInfo> two_scales(int hf, int wf, int hc, int wc) {
    ScaleInfo fine{0, 8, hf, wf, 2.0};
    ScaleInfo coarse{1, 16, hc, wc, 2.0};
    return {fine, coarse};
}

/// Random logits for a batch over the given scales.
std::vector<Tensor> random_logits(Rng& rng, int n, int c, const std::vector<ScaleInfo>& scales,
                                  bool rg = false) {
    std::vector<Tensor> out;
    for (const ScaleInfo& s : scales) out.push_back(Tensor::randn({n, c, s.h, s.w}, rng, 1.5, rg));
    return out;
}

std::vector<Tensor> random_thetas(Rng& rng, int n, const std::vector<ScaleInfo>& scales) {
    std::vector<Tensor> out;
    for (const ScaleInfo& s : scales) {
        Tensor t = identity_theta(n, s.h, s.w);
        for (auto& v : t.values()) v += 0.1 * rng.normal();
        out.push_back(t);
    }
    return out;
}

/// Hand-built distribution over C=2 with a 2x2 fine and 1x1 coarse level;
/// probs set directly so hinge cases use exact values.
JointDistribution hand_jd(double fine_max, double coarse_max) {
    JointDistribution jd;
    jd.layout.C = 2;
    jd.layout.scales = two_scales(2, 2, 1, 1);
    jd.layout.scale_offset = {0, 8};
    jd.layout.total = 10;
    std::vector<double> v(10, 0.0);
    v[jd.layout.flat_index(0, 0, 0)] = fine_max;  // class 0, fine level
    v[jd.layout.flat_index(0, 0, 1)] = coarse_max; // class 0, coarse level
    v[jd.layout.flat_index(1, 1, 0)] = 1.0 - fine_max - coarse_max;
    jd.probs = Tensor(Shape{1, 10}, v);
    jd.flat_logits = jd.probs;
    return jd;
}

} // namespace

TEST_CASE("joint softmax over a single 1x1 two-class table is uniform") {
    ScaleInfo s{0, 8, 1, 1, 2.0};
    Tensor logits = Tensor::zeros(Shape{1, 2, 1, 1});
    JointDistribution jd = joint_softmax({logits}, {s});
    REQUIRE(jd.layout.total == 2);
    CHECK(jd.probs.at({0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(jd.probs.at({0, 1}) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("equal logits across scales spread mass uniformly") {
    // 4 + 16 locations, 3 classes -> 60 entries of 1/60 each
    auto scales = two_scales(4, 4, 2, 2);
    Tensor fine = Tensor::full(Shape{2, 3, 4, 4}, 0.7);
    Tensor coarse = Tensor::full(Shape{2, 3, 2, 2}, 0.7);
    JointDistribution jd = joint_softmax({fine, coarse}, scales);
    REQUIRE(jd.layout.total == 60);
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 60; ++i)
            CHECK(jd.probs.at({n, i}) == doctest::Approx(1.0 / 60.0).epsilon(1e-12));
}

TEST_CASE("joint softmax matches the brute-force flattened oracle") {
    Rng rng(21);
    auto scales = two_scales(3, 4, 2, 2);
    for (int trial = 0; trial < 5; ++trial) {
        auto logits = random_logits(rng, 2, 3, scales);
        JointDistribution jd = joint_softmax(logits, scales);
        // oracle: exp over the explicitly flattened list / sum
        for (int n = 0; n < 2; ++n) {
            std::vector<double> flat;
            for (size_t s = 0; s < scales.size(); ++s)
                for (int l = 0; l < scales[s].h * scales[s].w; ++l)
                    for (int c = 0; c < 3; ++c) {
                        int y = l / scales[s].w, x = l % scales[s].w;
                        flat.push_back(logits[s].at({n, c, y, x}));
                    }
            double total = 0.0;
            for (double v : flat) total += std::exp(v);
            for (size_t i = 0; i < flat.size(); ++i)
                CHECK(jd.probs.at({n, static_cast<int>(i)}) ==
                      doctest::Approx(std::exp(flat[i]) / total).epsilon(1e-12));
            // distribution invariants
            double sum = 0.0;
            for (size_t i = 0; i < flat.size(); ++i) {
                double p = jd.probs.at({n, static_cast<int>(i)});
                CHECK(p >= 0.0);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("joint softmax rejects an empty scale list") {
    CHECK_THROWS_AS(joint_softmax({}, {}), ValueError);
}

TEST_CASE("adding a constant to every logit leaves the table unchanged") {
    Rng rng(22);
    auto scales = two_scales(2, 3, 1, 1);
    auto logits = random_logits(rng, 1, 4, scales);
    JointDistribution a = joint_softmax(logits, scales);
    std::vector<Tensor> shifted;
    for (const Tensor& t : logits) {
        Tensor u(t.shape(), t.values());
        for (auto& v : u.values()) v += 173.25;
        shifted.push_back(u);
    }
    JointDistribution b = joint_softmax(shifted, scales);
    for (int i = 0; i < a.layout.total; ++i)
        CHECK(a.probs.at({0, i}) == doctest::Approx(b.probs.at({0, i})).epsilon(1e-12));
}

TEST_CASE("class marginal sums the table and stays a distribution") {
    Rng rng(23);
    auto scales = two_scales(4, 4, 2, 2);

    // uniform table -> uniform marginal
    Tensor zf = Tensor::zeros(Shape{1, 3, 4, 4});
    Tensor zc = Tensor::zeros(Shape{1, 3, 2, 2});
    JointDistribution uni = joint_softmax({zf, zc}, scales);
    Tensor mu = marginalize_classes(uni);
    for (int c = 0; c < 3; ++c) CHECK(mu.at({0, c}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // concentrated table -> one-hot marginal
    Tensor hf = Tensor::zeros(Shape{1, 3, 4, 4});
    hf.values()[static_cast<size_t>((1 * 4 + 2) * 4 + 3)] = 60.0; // class 1, site (2,3)
    JointDistribution hot = joint_softmax({hf, zc}, scales);
    Tensor mh = marginalize_classes(hot);
    CHECK(mh.at({0, 1}) == doctest::Approx(1.0).epsilon(1e-9));

    // random tables match the explicit triple loop
    for (int trial = 0; trial < 5; ++trial) {
        auto logits = random_logits(rng, 2, 3, scales);
        JointDistribution jd = joint_softmax(logits, scales);
        Tensor m = marginalize_classes(jd);
        for (int n = 0; n < 2; ++n) {
            double sum = 0.0;
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int s = 0; s < 2; ++s)
                    for (int l = 0; l < jd.layout.locations(s); ++l)
                        acc += jd.probs.at({n, jd.layout.flat_index(c, l, s)});
                CHECK(m.at({n, c}) == doctest::Approx(acc).epsilon(1e-12));
                CHECK(m.at({n, c}) >= 0.0);
                sum += m.at({n, c});
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("map inference finds the dominant entry and decodes its box") {
    auto scales = two_scales(2, 2, 1, 1);
    Tensor fine = Tensor::zeros(Shape{1, 2, 2, 2});
    Tensor coarse = Tensor::zeros(Shape{1, 2, 1, 1});
    // class 1 at fine site (1,0) dominates
    fine.values()[static_cast<size_t>((1 * 2 + 1) * 2 + 0)] = 40.0;
    JointDistribution jd = joint_softmax({fine, coarse}, scales);
    Rng rng(31);
    auto thetas = random_thetas(rng, 1, scales);
    Prediction p = map_inference(jd, thetas, 0, 64, 64);
    CHECK(p.c == 1);
    CHECK(p.l == 2); // site (1,0) row-major
    CHECK(p.s == 0);
    CHECK(p.score == doctest::Approx(1.0).epsilon(1e-9));
    double th[6];
    for (int k = 0; k < 6; ++k) th[k] = thetas[0].at({0, k, 1, 0});
    BoxXYXY want = theta_to_box(th, 1, 0, scales[0], 64, 64);
    CHECK(p.box.x1 == doctest::Approx(want.x1).epsilon(1e-12));
    CHECK(p.box.y1 == doctest::Approx(want.y1).epsilon(1e-12));
    CHECK(p.box.x2 == doctest::Approx(want.x2).epsilon(1e-12));
    CHECK(p.box.y2 == doctest::Approx(want.y2).epsilon(1e-12));
}

TEST_CASE("map inference breaks exact ties by lowest flattened index") {
    auto scales = two_scales(2, 2, 1, 1);
    Tensor fine = Tensor::zeros(Shape{1, 2, 2, 2});
    Tensor coarse = Tensor::zeros(Shape{1, 2, 1, 1});
    // identical peaks at flat (c=1,l=1,s=0) and (c=0,l=3,s=0)
    fine.values()[static_cast<size_t>((1 * 2 + 0) * 2 + 1)] = 9.0; // c=1, site (0,1) = l 1
    fine.values()[static_cast<size_t>((0 * 2 + 1) * 2 + 1)] = 9.0; // c=0, site (1,1) = l 3
    JointDistribution jd = joint_softmax({fine, coarse}, scales);
    int flat_a = jd.layout.flat_index(1, 1, 0), flat_b = jd.layout.flat_index(0, 3, 0);
    REQUIRE(jd.probs.at({0, flat_a}) == jd.probs.at({0, flat_b}));
    Rng rng(32);
    auto thetas = random_thetas(rng, 1, scales);
    Prediction p = map_inference(jd, thetas, 0, 64, 64);
    int got = jd.layout.flat_index(p.c, p.l, p.s);
    CHECK(got == std::min(flat_a, flat_b));
}

TEST_CASE("map inference matches an exhaustive scan on 200 random tables") {
    Rng rng(33);
    auto scales = two_scales(3, 3, 2, 2);
    for (int trial = 0; trial < 200; ++trial) {
        auto logits = random_logits(rng, 1, 3, scales);
        JointDistribution jd = joint_softmax(logits, scales);
        auto thetas = random_thetas(rng, 1, scales);
        Prediction p = map_inference(jd, thetas, 0, 64, 64);
        // oracle: first strict max over the flat table
        int best = 0;
        for (int i = 1; i < jd.layout.total; ++i)
            if (jd.probs.at({0, i}) > jd.probs.at({0, best})) best = i;
        CHECK(jd.layout.flat_index(p.c, p.l, p.s) == best);
        CHECK(p.score == doctest::Approx(jd.probs.at({0, best})).epsilon(1e-12));
    }
}

TEST_CASE("map inference is invariant under monotone logit transforms") {
    Rng rng(34);
    auto scales = two_scales(2, 3, 1, 1);
    auto logits = random_logits(rng, 1, 3, scales);
    auto thetas = random_thetas(rng, 1, scales);
    JointDistribution jd = joint_softmax(logits, scales);
    Prediction base = map_inference(jd, thetas, 0, 64, 64);
    auto apply = [&](double (*f)(double)) {
        std::vector<Tensor> out;
        for (const Tensor& t : logits) {
            Tensor u(t.shape(), t.values());
            for (auto& v : u.values()) v = f(v);
            out.push_back(u);
        }
        return joint_softmax(out, scales);
    };
    for (auto f : {+[](double x) { return 3.0 * x - 1.0; }, +[](double x) { return std::atan(x); },
                   +[](double x) { return x * x * x; }}) {
        Prediction p = map_inference(apply(f), thetas, 0, 64, 64);
        CHECK(p.c == base.c);
        CHECK(p.l == base.l);
        CHECK(p.s == base.s);
    }
}

TEST_CASE("top-k boxes agree with a sort oracle and with map inference") {
    Rng rng(35);
    auto scales = two_scales(4, 4, 2, 2); // 20 sites per class
    for (int trial = 0; trial < 200; ++trial) {
        auto logits = random_logits(rng, 1, 3, scales);
        JointDistribution jd = joint_softmax(logits, scales);
        auto thetas = random_thetas(rng, 1, scales);
        int cls = static_cast<int>(rng.uniform_int(3));

        // oracle: all (l,s) entries of the class, sorted by prob descending,
        // flat index ascending on ties
        std::vector<std::pair<double, int>> entries; // (-prob, flat)
        for (int s = 0; s < 2; ++s)
            for (int l = 0; l < jd.layout.locations(s); ++l) {
                int flat = jd.layout.flat_index(cls, l, s);
                entries.push_back({-jd.probs.at({0, flat}), flat});
            }
        std::sort(entries.begin(), entries.end());

        std::vector<BoxXYXY> top = topk_boxes(jd, thetas, 0, cls, 5, 64, 64);
        REQUIRE(top.size() == 5);
        for (int i = 0; i < 5; ++i)
            CHECK(top[static_cast<size_t>(i)].score ==
                  doctest::Approx(-entries[static_cast<size_t>(i)].first).epsilon(1e-12));
        for (int i = 1; i < 5; ++i)
            CHECK(top[static_cast<size_t>(i)].score <= top[static_cast<size_t>(i - 1)].score);

        // k = table size returns everything, sorted
        std::vector<BoxXYXY> all = topk_boxes(jd, thetas, 0, cls, 20, 64, 64);
        CHECK(all.size() == 20);
        // k beyond the table truncates
        CHECK(topk_boxes(jd, thetas, 0, cls, 99, 64, 64).size() == 20);

        // k=1 for the MAP class reproduces the MAP box
        Prediction p = map_inference(jd, thetas, 0, 64, 64);
        std::vector<BoxXYXY> one = topk_boxes(jd, thetas, 0, p.c, 1, 64, 64);
        REQUIRE(one.size() == 1);
        CHECK(one[0].x1 == doctest::Approx(p.box.x1).epsilon(1e-12));
        CHECK(one[0].y2 == doctest::Approx(p.box.y2).epsilon(1e-12));
        CHECK(one[0].score == doctest::Approx(p.score).epsilon(1e-12));
    }
}

TEST_CASE("classification loss hits its analytic values") {
    // certain prediction -> zero loss
    ScaleInfo s{0, 8, 1, 1, 2.0};
    Tensor sure = Tensor::zeros(Shape{1, 2, 1, 1});
    sure.values()[0] = 50.0;
    JointDistribution jd = joint_softmax({sure}, {s});
    CHECK(loss_cls(jd, {0}).item() == doctest::Approx(0.0).epsilon(1e-9));

    // uniform over 10 classes -> ln 10
    Tensor flat = Tensor::zeros(Shape{1, 10, 1, 1});
    JointDistribution uni = joint_softmax({flat}, {s});
    CHECK(loss_cls(uni, {3}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    // out-of-range label
    CHECK_THROWS_AS(loss_cls(uni, {10}), ValueError);
}

TEST_CASE("classification loss gradient matches finite differences") {
    Rng rng(36);
    auto scales = two_scales(2, 2, 1, 1);
    std::vector<int> labels = {1, 2};
    auto fn = [&](const std::vector<Tensor>& in) {
        JointDistribution jd = joint_softmax({in[0], in[1]}, scales);
        return loss_cls(jd, labels);
    };
    auto logits = random_logits(rng, 2, 3, scales, true);
    GradCheckReport rep = gradcheck(fn, {logits[0], logits[1]}, 1e-5, 1e-5);
    CHECK(rep.pass);
}

TEST_CASE("transform loss: identity zero, single-term case, loop oracle") {
    auto scales = two_scales(2, 2, 1, 1);
    std::vector<Tensor> id = {identity_theta(2, 2, 2), identity_theta(2, 1, 1)};
    CHECK(loss_theta(id).item() == 0.0);

    // one location translated by t1 = 0.5 -> single squared term 0.25,
    // batch mean over N=1
    Tensor t = identity_theta(1, 2, 2);
    t.values()[static_cast<size_t>((2 * 2 + 1) * 2 + 0)] = 0.5; // channel 2 (t1), site (1,0)
    CHECK(loss_theta({t}).item() == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(37);
    auto thetas = random_thetas(rng, 2, scales);
    double want = 0.0;
    const double ref[6] = {1, 0, 0, 0, 1, 0};
    for (const Tensor& th : thetas)
        for (int n = 0; n < 2; ++n)
            for (int k = 0; k < 6; ++k)
                for (int y = 0; y < th.dim(2); ++y)
                    for (int x = 0; x < th.dim(3); ++x) {
                        double d = th.at({n, k, y, x}) - ref[k];
                        want += d * d;
                    }
    want /= 2.0;
    CHECK(loss_theta(thetas).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("scale hinge hits its analytic values") {
    // equal maxima -> zero (boundary)
    CHECK(loss_scale(hand_jd(0.3, 0.3), {0}).item() == 0.0);
    // coarse above fine -> clamped to zero
    CHECK(loss_scale(hand_jd(0.4, 0.6), {0}).item() == 0.0);
    // fine above coarse -> the difference
    CHECK(loss_scale(hand_jd(0.6, 0.4), {0}).item() == doctest::Approx(0.2).epsilon(1e-12));
    // hinge needs exactly two scales
    JointDistribution one;
    one.layout.C = 2;
    one.layout.scales = {ScaleInfo{0, 8, 1, 1, 2.0}};
    one.layout.scale_offset = {0};
    one.layout.total = 2;
    one.probs = Tensor(Shape{1, 2}, std::vector<double>{0.5, 0.5});
    CHECK_THROWS_AS(loss_scale(one, {0}), ValueError);
}

TEST_CASE("total loss recomposes from its parts") {
    Rng rng(38);
    auto scales = two_scales(3, 3, 2, 2);
    for (int trial = 0; trial < 20; ++trial) {
        auto logits = random_logits(rng, 2, 3, scales);
        auto thetas = random_thetas(rng, 2, scales);
        JointDistribution jd = joint_softmax(logits, scales);
        std::vector<int> labels = {static_cast<int>(rng.uniform_int(3)),
                                   static_cast<int>(rng.uniform_int(3))};
        Tensor c = loss_cls(jd, labels);
        Tensor t = loss_theta(thetas);
        Tensor h = loss_scale(jd, labels);
        double lambda = rng.uniform(0, 0.01), alpha = rng.uniform(0, 0.5);
        LossParts parts = combine_losses(c, t, h, lambda, alpha);
        double want = c.item() + lambda * t.item() + alpha * h.item();
        CHECK(parts.total.item() == doctest::Approx(want).epsilon(1e-12));
        CHECK(parts.cls.item() == c.item());
        CHECK(parts.lambda == lambda);
    }

    // lambda = alpha = 0 reduces to the classification loss alone
    auto logits = random_logits(rng, 1, 3, scales);
    auto thetas = random_thetas(rng, 1, scales);
    JointDistribution jd = joint_softmax(logits, scales);
    Tensor c = loss_cls(jd, {1});
    LossParts bare =
        combine_losses(c, loss_theta(thetas), loss_scale(jd, {1}), 0.0, 0.0);
    CHECK(bare.total.item() == c.item());

    // identity transforms and balanced scales add nothing either
    std::vector<Tensor> id = {identity_theta(1, 3, 3), identity_theta(1, 2, 2)};
    JointDistribution balanced = hand_jd(0.3, 0.3);
    Tensor c2 = Tensor::scalar(0.7);
    LossParts calm = combine_losses(c2, loss_theta(id), loss_scale(balanced, {0}), 0.3, 0.7);
    CHECK(calm.total.item() == doctest::Approx(0.7).epsilon(1e-12));

    CHECK_THROWS_AS(combine_losses(c, c, c, -1.0, 0.0), ValueError);
}
