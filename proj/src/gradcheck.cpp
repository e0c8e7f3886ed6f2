#include "cstn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "cstn/model.hpp"
#include "cstn/ops.hpp"
#include "cstn/pyramid.hpp"
#include "cstn/stn.hpp"
#include "cstn/wsol.hpp"

namespace cstn {

GradCheckReport gradcheck(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                          double epsilon, double tolerance,
                          int sample_elems, std::uint64_t sample_seed) {
    if (epsilon <= 0.0) throw ValueError("gradcheck: epsilon must be positive");
    // The analytic side needs graph recording even if a caller holds a
    // no-grad guard; restore their setting on exit.
    struct GradOn {
        bool prev = grad_enabled();
        GradOn() { set_grad_enabled(true); }
        ~GradOn() { set_grad_enabled(prev); }
    } grad_on;
    for (const Tensor& t : inputs) {
        if (!t.defined()) throw ValueError("gradcheck: undefined input");
        check_finite(t.values(), "gradcheck input");
    }

    for (const Tensor& t : inputs)
        if (t.requires_grad()) t.node()->grad.clear();
    Tensor y = fn(inputs);
    if (y.numel() != 1) throw ShapeError("gradcheck: fn must return a scalar");
    y.backward();

    std::vector<std::vector<double>> analytic(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        analytic[i] = inputs[i].has_grad()
                          ? inputs[i].grad()
                          : std::vector<double>(inputs[i].values().size(), 0.0);
    }

    // candidate (input, element) pairs
    std::vector<std::pair<int, std::int64_t>> probes;
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        for (std::int64_t j = 0; j < inputs[i].numel(); ++j)
            probes.emplace_back(static_cast<int>(i), j);
    }
    if (sample_elems > 0 && sample_elems < static_cast<int>(probes.size())) {
        Rng rng(sample_seed);
        std::unordered_set<size_t> chosen;
        while (static_cast<int>(chosen.size()) < sample_elems)
            chosen.insert(static_cast<size_t>(rng.uniform_int(probes.size())));
        std::vector<std::pair<int, std::int64_t>> picked;
        picked.reserve(chosen.size());
        for (size_t idx : chosen) picked.push_back(probes[idx]);
        std::sort(picked.begin(), picked.end());
        probes = std::move(picked);
    }

    GradCheckReport report;
    NoGradGuard ng;
    for (auto [i, j] : probes) {
        double* slot = const_cast<Tensor&>(inputs[static_cast<size_t>(i)]).data() + j;
        double saved = *slot;
        *slot = saved + epsilon;
        double fp = fn(inputs).item();
        *slot = saved - epsilon;
        double fm = fn(inputs).item();
        *slot = saved;
        double numeric = (fp - fm) / (2.0 * epsilon);
        double a = analytic[static_cast<size_t>(i)][static_cast<size_t>(j)];
        double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a) + std::fabs(numeric));
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_input = i;
            report.worst_element = j;
        }
        ++report.checked;
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

namespace {

ScalarFn project(std::function<Tensor(const std::vector<Tensor>&)> raw, Tensor proj) {
    return [raw = std::move(raw), proj](const std::vector<Tensor>& in) {
        return sum_all(mul(raw(in), proj));
    };
}

Tensor rand_t(const Shape& s, Rng& rng, double stddev = 1.0, bool rg = true) {
    return Tensor::randn(s, rng, stddev, rg);
}

Tensor proj_for(const Shape& s, Rng& rng) { return Tensor::randn(s, rng, 1.0, false); }

Shape rand_shape2(Rng& rng) {
    return Shape{2 + static_cast<int>(rng.uniform_int(3)), 2 + static_cast<int>(rng.uniform_int(4))};
}

// ---- case builders ----

GradCase case_binary(Rng& rng, Tensor (*op)(const Tensor&, const Tensor&)) {
    Shape s = rand_shape2(rng);
    Tensor a = rand_t(s, rng), b = rand_t(s, rng);
    Tensor proj = proj_for(s, rng);
    return {project([op](const std::vector<Tensor>& in) { return op(in[0], in[1]); }, proj),
            {a, b}};
}

GradCase case_scale(Rng& rng) {
    Shape s = rand_shape2(rng);
    double c = rng.uniform(-2.0, 2.0);
    Tensor proj = proj_for(s, rng);
    return {project([c](const std::vector<Tensor>& in) { return scale(in[0], c); }, proj),
            {rand_t(s, rng)}};
}

GradCase case_add_scalar(Rng& rng) {
    Shape s = rand_shape2(rng);
    double c = rng.uniform(-2.0, 2.0);
    Tensor proj = proj_for(s, rng);
    return {project([c](const std::vector<Tensor>& in) { return add_scalar(in[0], c); }, proj),
            {rand_t(s, rng)}};
}

GradCase case_relu(Rng& rng) {
    Shape s = rand_shape2(rng);
    Tensor x(s, true);
    for (auto& v : x.values()) {
        double mag = 0.2 + 1.3 * rng.uniform();
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    Tensor proj = proj_for(s, rng);
    return {project([](const std::vector<Tensor>& in) { return relu(in[0]); }, proj), {x}};
}

GradCase case_sum_all(Rng& rng) {
    return {[](const std::vector<Tensor>& in) { return sum_all(in[0]); },
            {rand_t(rand_shape2(rng), rng)}};
}

GradCase case_mean_all(Rng& rng) {
    return {[](const std::vector<Tensor>& in) { return mean_all(in[0]); },
            {rand_t(rand_shape2(rng), rng)}};
}

GradCase case_reduce_max_rows(Rng& rng) {
    int N = 2 + static_cast<int>(rng.uniform_int(3));
    int M = 3 + static_cast<int>(rng.uniform_int(4));
    Tensor x(Shape{N, M}, true);
    for (auto& v : x.values()) v = rng.uniform();
    // keep the argmax isolated so finite differences stay on one branch
    for (int n = 0; n < N; ++n) {
        double* row = x.data() + static_cast<std::int64_t>(n) * M;
        int best = 0;
        for (int j = 1; j < M; ++j)
            if (row[j] > row[best]) best = j;
        row[best] += 0.2;
    }
    Tensor proj = proj_for(Shape{N}, rng);
    return {project([](const std::vector<Tensor>& in) { return reduce_max_rows(in[0]); }, proj),
            {x}};
}

GradCase case_logsumexp_rows(Rng& rng) {
    Shape s = rand_shape2(rng);
    Tensor proj = proj_for(Shape{s[0]}, rng);
    return {project([](const std::vector<Tensor>& in) { return logsumexp_rows(in[0]); }, proj),
            {rand_t(s, rng)}};
}

GradCase case_reshape(Rng& rng) {
    int a = 2 + static_cast<int>(rng.uniform_int(2));
    int b = 2 + static_cast<int>(rng.uniform_int(3));
    int c = 2 + static_cast<int>(rng.uniform_int(2));
    Tensor x = rand_t(Shape{a, b, c}, rng);
    Shape target{c, a * b};
    Tensor proj = proj_for(target, rng);
    return {project([target](const std::vector<Tensor>& in) { return reshape(in[0], target); },
                    proj),
            {x}};
}

GradCase case_permute(Rng& rng) {
    Shape s{2 + static_cast<int>(rng.uniform_int(2)), 2 + static_cast<int>(rng.uniform_int(3)),
            2 + static_cast<int>(rng.uniform_int(2)), 2};
    std::vector<int> perm{0, 1, 2, 3};
    for (int i = 3; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)],
                  perm[static_cast<size_t>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1))]);
    Shape out(4);
    for (int k = 0; k < 4; ++k) out[static_cast<size_t>(k)] = s[static_cast<size_t>(perm[static_cast<size_t>(k)])];
    Tensor proj = proj_for(out, rng);
    return {project([perm](const std::vector<Tensor>& in) { return permute(in[0], perm); }, proj),
            {rand_t(s, rng)}};
}

GradCase case_concat(Rng& rng) {
    int axis = static_cast<int>(rng.uniform_int(2));
    Shape s = rand_shape2(rng);
    Shape s2 = s;
    s2[static_cast<size_t>(axis)] = 1 + static_cast<int>(rng.uniform_int(3));
    Shape out = s;
    out[static_cast<size_t>(axis)] += s2[static_cast<size_t>(axis)];
    Tensor proj = proj_for(out, rng);
    return {project(
                [axis](const std::vector<Tensor>& in) {
                    return concat({in[0], in[1]}, axis);
                },
                proj),
            {rand_t(s, rng), rand_t(s2, rng)}};
}

GradCase case_gather_strided(Rng& rng) {
    int N = 2 + static_cast<int>(rng.uniform_int(2));
    int stride = 3, count = 4;
    int M = stride * count + 3;
    std::vector<int> starts(static_cast<size_t>(N));
    for (auto& v : starts) v = static_cast<int>(rng.uniform_int(3));
    Tensor proj = proj_for(Shape{N, count}, rng);
    return {project(
                [starts, stride, count](const std::vector<Tensor>& in) {
                    return gather_strided(in[0], starts, stride, count);
                },
                proj),
            {rand_t(Shape{N, M}, rng)}};
}

GradCase case_sum_mod_groups(Rng& rng) {
    int N = 2 + static_cast<int>(rng.uniform_int(2));
    int groups = 2 + static_cast<int>(rng.uniform_int(3));
    int M = groups * (2 + static_cast<int>(rng.uniform_int(3)));
    Tensor proj = proj_for(Shape{N, groups}, rng);
    return {project(
                [groups](const std::vector<Tensor>& in) { return sum_mod_groups(in[0], groups); },
                proj),
            {rand_t(Shape{N, M}, rng)}};
}

GradCase case_sub_channel(Rng& rng) {
    Shape s{2, 3, 2, 2};
    Tensor proj = proj_for(s, rng);
    return {project([](const std::vector<Tensor>& in) { return sub_channel(in[0], in[1]); }, proj),
            {rand_t(s, rng), rand_t(Shape{3}, rng)}};
}

GradCase case_conv2d(Rng& rng) {
    int N = 1 + static_cast<int>(rng.uniform_int(2));
    int cin = 1 + static_cast<int>(rng.uniform_int(2));
    int cout = 1 + static_cast<int>(rng.uniform_int(2));
    int H = 4 + static_cast<int>(rng.uniform_int(3));
    int W = 4 + static_cast<int>(rng.uniform_int(3));
    int K = rng.uniform_int(2) ? 3 : 1;
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    int padding = static_cast<int>(rng.uniform_int(2));
    Tensor x = rand_t(Shape{N, cin, H, W}, rng);
    Tensor w = rand_t(Shape{cout, cin, K, K}, rng, 0.5);
    Tensor b = rand_t(Shape{cout}, rng, 0.2);
    int Hp = (H + 2 * padding - K) / stride + 1;
    int Wp = (W + 2 * padding - K) / stride + 1;
    Tensor proj = proj_for(Shape{N, cout, Hp, Wp}, rng);
    return {project(
                [stride, padding](const std::vector<Tensor>& in) {
                    return conv2d(in[0], in[1], in[2], stride, padding);
                },
                proj),
            {x, w, b}};
}

GradCase case_batchnorm(Rng& rng, BnMode mode) {
    int C = 1 + static_cast<int>(rng.uniform_int(3));
    Shape s{2, C, 3, 3};
    Tensor x = rand_t(s, rng);
    Tensor gamma(Shape{C}, true), beta(Shape{C}, true);
    for (auto& v : gamma.values()) v = 1.0 + 0.3 * rng.normal();
    for (auto& v : beta.values()) v = 0.2 * rng.normal();
    std::vector<double> mean0(static_cast<size_t>(C)), var0(static_cast<size_t>(C));
    for (auto& v : mean0) v = 0.2 * rng.normal();
    for (auto& v : var0) v = 0.5 + rng.uniform();
    Tensor proj = proj_for(s, rng);
    // fresh stats per evaluation keep finite differences pure
    return {project(
                [mean0, var0, C, mode](const std::vector<Tensor>& in) {
                    RunningStats st(C);
                    st.mean = mean0;
                    st.var = var0;
                    return batchnorm2d(in[0], in[1], in[2], st, mode);
                },
                proj),
            {x, gamma, beta}};
}

GradCase case_upsample(Rng& rng) {
    Shape s{2, 2, 3, 3};
    Tensor proj = proj_for(Shape{2, 2, 6, 6}, rng);
    return {project([](const std::vector<Tensor>& in) { return upsample_nearest2x(in[0]); }, proj),
            {rand_t(s, rng)}};
}

GradCase case_softmax_flat(Rng& rng) {
    Shape s{2 + static_cast<int>(rng.uniform_int(2)), 2 + static_cast<int>(rng.uniform_int(3)),
            2 + static_cast<int>(rng.uniform_int(2))};
    std::set<int> axes;
    int mask = 1 + static_cast<int>(rng.uniform_int(7));
    for (int d = 0; d < 3; ++d)
        if (mask & (1 << d)) axes.insert(d);
    Tensor proj = proj_for(s, rng);
    return {project([axes](const std::vector<Tensor>& in) { return softmax_flat(in[0], axes); },
                    proj),
            {rand_t(s, rng)}};
}

GradCase case_kernel_contract(Rng& rng) {
    int N = 1, P = 2, H = 2, W = 3, K = 3, Q = 2;
    Tensor s = rand_t(Shape{N, P, H, W, K, K}, rng);
    Tensor w = rand_t(Shape{Q, P, K, K}, rng, 0.5);
    Tensor b = rand_t(Shape{Q}, rng, 0.2);
    Tensor proj = proj_for(Shape{N, Q, H, W}, rng);
    return {project(
                [](const std::vector<Tensor>& in) { return kernel_contract(in[0], in[1], in[2]); },
                proj),
            {s, w, b}};
}

GradCase case_affine_grid(Rng& rng) {
    int K = rng.uniform_int(2) ? 3 : 1;
    Tensor theta = rand_t(Shape{1, 6, 2, 2}, rng, 0.5);
    Tensor proj = proj_for(Shape{1, 2, 2, K, K, 2}, rng);
    return {project([K](const std::vector<Tensor>& in) { return affine_grid(in[0], K).grid; },
                    proj),
            {theta}};
}

// grid entries land at fractional cell positions away from interpolation
// knots, where the coordinate gradient is smooth
double offgrid_coord(Rng& rng) {
    return (static_cast<double>(rng.uniform_int(3)) - 1.0) + rng.uniform(0.2, 0.8);
}

GradCase case_bilinear_sample(Rng& rng) {
    int N = 1, P = 2, H = 4, W = 4, K = 3;
    Tensor fmap = rand_t(Shape{N, P, H, W}, rng);
    Tensor grid(Shape{N, H, W, K, K, 2}, true);
    for (auto& v : grid.values()) v = offgrid_coord(rng);
    Tensor proj = proj_for(Shape{N, P, H, W, K, K}, rng);
    return {project(
                [K](const std::vector<Tensor>& in) {
                    SamplingGrid sg{in[1], K, 1.0};
                    return bilinear_sample(in[0], sg);
                },
                proj),
            {fmap, grid}};
}

// identity plus a safe offset: all sampled positions stay 0.15+ cells away
// from integer coordinates
Tensor offgrid_theta(int N, int H, int W, Rng& rng) {
    Tensor theta(Shape{N, 6, H, W}, true);
    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    double* p = theta.data();
    for (int n = 0; n < N; ++n) {
        double* tb = p + static_cast<std::int64_t>(n) * 6 * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            double s1 = rng.uniform_int(2) ? 1.0 : -1.0;
            double s2 = rng.uniform_int(2) ? 1.0 : -1.0;
            tb[i] = 1.0 + rng.uniform(-0.05, 0.05);
            tb[plane + i] = rng.uniform(-0.05, 0.05);
            tb[2 * plane + i] = s1 * rng.uniform(0.25, 0.45);
            tb[3 * plane + i] = rng.uniform(-0.05, 0.05);
            tb[4 * plane + i] = 1.0 + rng.uniform(-0.05, 0.05);
            tb[5 * plane + i] = s2 * rng.uniform(0.25, 0.45);
        }
    }
    return theta;
}

GradCase case_cstn_conv(Rng& rng) {
    int N = 1, P = 2, H = 4, W = 4, Q = 2;
    Tensor f = rand_t(Shape{N, P, H, W}, rng);
    Tensor theta = offgrid_theta(N, H, W, rng);
    Tensor w = rand_t(Shape{Q, P, 3, 3}, rng, 0.5);
    Tensor b = rand_t(Shape{Q}, rng, 0.2);
    Tensor proj = proj_for(Shape{N, Q, H, W}, rng);
    return {project(
                [](const std::vector<Tensor>& in) {
                    return cstn_conv(in[0], in[1], in[2], in[3]);
                },
                proj),
            {f, theta, w, b}};
}

GradCase case_loc_net(Rng& rng) {
    int P = 3, hidden = 4, H = 4, W = 4;
    Tensor f = rand_t(Shape{1, P, H, W}, rng);
    LocNet net = LocNet::init(P, hidden, rng);
    for (auto& v : net.w2.values()) v = 0.1 * rng.normal();
    for (auto& v : net.b2.values()) v += 0.1 * rng.normal();
    // keep ReLU pre-activations away from the kink
    for (int tries = 0; tries < 50; ++tries) {
        NoGradGuard ng;
        Tensor h = conv2d(f, net.w1, net.b1, 1, 1);
        double m = 1e9;
        for (double v : h.values()) m = std::min(m, std::fabs(v));
        if (m > 1e-3) break;
        for (auto& v : net.b1.values()) v += 0.011;
    }
    Tensor proj = proj_for(Shape{1, 6, H, W}, rng);
    return {project(
                [](const std::vector<Tensor>& in) {
                    LocNet p;
                    p.w1 = in[1];
                    p.b1 = in[2];
                    p.w2 = in[3];
                    p.b2 = in[4];
                    return loc_net_forward(in[0], p);
                },
                proj),
            {f, net.w1, net.b1, net.w2, net.b2}};
}

GradCase case_backbone(Rng& rng) {
    Backbone bb = Backbone::init(rng);
    Tensor img(Shape{1, 3, 32, 32}, true);
    for (auto& v : img.values()) v = rng.uniform();
    std::vector<Tensor> inputs{img};
    NamedParams params;
    bb.collect("bb", params);
    for (auto& [name, t] : params) inputs.push_back(t);
    Tensor proj4 = proj_for(Shape{1, 64, 4, 4}, rng);
    Tensor proj5 = proj_for(Shape{1, 64, 2, 2}, rng);
    GradCase gc;
    gc.fn = [bb, proj4, proj5](const std::vector<Tensor>& in) mutable {
        auto [c4, c5] = bb.forward(in[0], BnMode::train);
        return add(sum_all(mul(c4, proj4)), sum_all(mul(c5, proj5)));
    };
    gc.inputs = std::move(inputs);
    gc.sample_elems = 8;
    return gc;
}

GradCase case_fpn_merge(Rng& rng) {
    Fpn fpn = Fpn::init(4, 4, 4, rng);
    Tensor c4 = rand_t(Shape{1, 4, 8, 8}, rng);
    Tensor c5 = rand_t(Shape{1, 4, 4, 4}, rng);
    std::vector<Tensor> inputs{c4, c5};
    NamedParams params;
    fpn.collect("fpn", params);
    for (auto& [name, t] : params) inputs.push_back(t);
    Tensor proj4 = proj_for(Shape{1, 4, 8, 8}, rng);
    Tensor proj5 = proj_for(Shape{1, 4, 4, 4}, rng);
    GradCase gc;
    gc.fn = [fpn, proj4, proj5](const std::vector<Tensor>& in) mutable {
        auto [p4, p5] = fpn.forward(in[0], in[1], BnMode::train);
        return add(sum_all(mul(p4, proj4)), sum_all(mul(p5, proj5)));
    };
    gc.inputs = std::move(inputs);
    gc.sample_elems = 12;
    return gc;
}

// Pushes the loc net off the exact identity while keeping every sampled
// position well away from integer feature coordinates (bilinear kinks):
// large fixed translations, only tiny per-location wiggle from w2.
void offgrid_loc(LocNet& loc, Rng& rng) {
    for (auto& v : loc.w2.values()) v = 0.01 * rng.normal();
    double s1 = rng.uniform_int(2) ? 1.0 : -1.0;
    double s2 = rng.uniform_int(2) ? 1.0 : -1.0;
    loc.b2.values()[2] += s1 * rng.uniform(0.30, 0.45);
    loc.b2.values()[5] += s2 * rng.uniform(0.30, 0.45);
}

// Nudges b1 until no hidden ReLU pre-activation sits near its kink.
void nudge_hidden(const Tensor& f, LocNet& loc) {
    for (int tries = 0; tries < 50; ++tries) {
        NoGradGuard ng;
        Tensor h = conv2d(f, loc.w1, loc.b1, 1, 1);
        double m = 1e9;
        for (double v : h.values()) m = std::min(m, std::fabs(v));
        if (m > 1e-3) break;
        for (auto& v : loc.b1.values()) v += 0.011;
    }
}

GradCase case_head_forward(Rng& rng) {
    Head head = Head::init(4, 3, 4, true, rng);
    offgrid_loc(head.loc, rng);
    Tensor p = rand_t(Shape{1, 4, 4, 4}, rng);
    nudge_hidden(p, head.loc);
    std::vector<Tensor> inputs{p};
    NamedParams params;
    head.collect("head", params);
    for (auto& [name, t] : params) inputs.push_back(t);
    Tensor proj_l = proj_for(Shape{1, 3, 4, 4}, rng);
    Tensor proj_t = proj_for(Shape{1, 6, 4, 4}, rng);
    GradCase gc;
    gc.fn = [head, proj_l, proj_t](const std::vector<Tensor>& in) {
        auto [logits, theta] = head.forward(in[0]);
        return add(sum_all(mul(logits, proj_l)), sum_all(mul(theta, proj_t)));
    };
    gc.inputs = std::move(inputs);
    gc.sample_elems = 12;
    return gc;
}

std::vector<ScaleInfo> tiny_scales() {
    return {ScaleInfo{0, 8, 2, 2, 8.0}, ScaleInfo{1, 16, 1, 1, 8.0}};
}

GradCase case_joint_softmax(Rng& rng) {
    Tensor l0 = rand_t(Shape{2, 3, 2, 2}, rng);
    Tensor l1 = rand_t(Shape{2, 3, 1, 1}, rng);
    Tensor proj = proj_for(Shape{2, 15}, rng);
    auto scales = tiny_scales();
    return {project(
                [scales](const std::vector<Tensor>& in) {
                    return joint_softmax({in[0], in[1]}, scales).probs;
                },
                proj),
            {l0, l1}};
}

std::vector<int> rand_labels(Rng& rng, int n, int c) {
    std::vector<int> out(static_cast<size_t>(n));
    for (auto& v : out) v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c)));
    return out;
}

GradCase case_loss_cls(Rng& rng) {
    Tensor l0 = rand_t(Shape{2, 3, 2, 2}, rng);
    Tensor l1 = rand_t(Shape{2, 3, 1, 1}, rng);
    auto labels = rand_labels(rng, 2, 3);
    auto scales = tiny_scales();
    return {[labels, scales](const std::vector<Tensor>& in) {
                return loss_cls(joint_softmax({in[0], in[1]}, scales), labels);
            },
            {l0, l1}};
}

GradCase case_loss_theta(Rng& rng) {
    Tensor t0 = rand_t(Shape{2, 6, 2, 2}, rng, 0.5);
    Tensor t1 = rand_t(Shape{2, 6, 1, 1}, rng, 0.5);
    return {[](const std::vector<Tensor>& in) { return loss_theta({in[0], in[1]}); }, {t0, t1}};
}

GradCase case_loss_scale(Rng& rng) {
    auto scales = tiny_scales();
    auto labels = rand_labels(rng, 2, 3);
    for (int tries = 0; tries < 40; ++tries) {
        Tensor l0 = rand_t(Shape{2, 3, 2, 2}, rng);
        Tensor l1 = rand_t(Shape{2, 3, 1, 1}, rng);
        // keep both the hinge and each row max away from ties so the
        // subgradient matches finite differences
        bool ok = true;
        {
            NoGradGuard ng;
            JointDistribution jd = joint_softmax({l0, l1}, scales);
            for (int n = 0; n < 2 && ok; ++n) {
                const double* row = jd.probs.data() + n * jd.layout.total;
                double m0 = -1, m0b = -1, m1 = -1;
                for (int l = 0; l < 4; ++l) {
                    double v = row[jd.layout.flat_index(labels[static_cast<size_t>(n)], l, 0)];
                    if (v > m0) {
                        m0b = m0;
                        m0 = v;
                    } else if (v > m0b) {
                        m0b = v;
                    }
                }
                m1 = row[jd.layout.flat_index(labels[static_cast<size_t>(n)], 0, 1)];
                if (m0 - m0b < 1e-3 || std::fabs(m0 - m1) < 1e-3) ok = false;
            }
        }
        if (!ok) continue;
        return {[labels, scales](const std::vector<Tensor>& in) {
                    return loss_scale(joint_softmax({in[0], in[1]}, scales), labels);
                },
                {l0, l1}};
    }
    throw ValueError("case_loss_scale: could not build a well-separated case");
}

GradCase case_model_loss(Rng& rng) {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.image_size = 32;
    cfg.fpn_channels = 8;
    cfg.loc_hidden = 4;
    CstnModel model = CstnModel::init(cfg, rng.next_u64());
    // off-identity loc output exercises the sampling-grid gradients
    offgrid_loc(model.head.loc, rng);
    Tensor images(Shape{2, 3, 32, 32}, true);
    for (auto& v : images.values()) v = rng.uniform();
    auto labels = rand_labels(rng, 2, cfg.num_classes);
    std::vector<Tensor> inputs{images};
    for (auto& [name, t] : model.parameters()) inputs.push_back(t);
    GradCase gc;
    gc.fn = [model, labels](const std::vector<Tensor>& in) mutable {
        return batch_loss(model, in[0], labels, 0.5, 0.3, BnMode::train).parts.total;
    };
    gc.inputs = std::move(inputs);
    gc.sample_elems = 5;
    return gc;
}

} // namespace

const std::vector<GradCheckEntry>& gradcheck_registry() {
    static const std::vector<GradCheckEntry> registry = {
        {"add", 1e-6, [](Rng& r) { return case_binary(r, &add); }},
        {"sub", 1e-6, [](Rng& r) { return case_binary(r, &sub); }},
        {"mul", 1e-6, [](Rng& r) { return case_binary(r, &mul); }},
        {"scale", 1e-6, case_scale},
        {"add_scalar", 1e-6, case_add_scalar},
        {"relu", 1e-6, case_relu},
        {"sum_all", 1e-6, case_sum_all},
        {"mean_all", 1e-6, case_mean_all},
        {"reduce_max_rows", 1e-6, case_reduce_max_rows},
        {"logsumexp_rows", 1e-6, case_logsumexp_rows},
        {"reshape", 1e-6, case_reshape},
        {"permute", 1e-6, case_permute},
        {"concat", 1e-6, case_concat},
        {"gather_strided", 1e-6, case_gather_strided},
        {"sum_mod_groups", 1e-6, case_sum_mod_groups},
        {"sub_channel", 1e-6, case_sub_channel},
        {"conv2d", 1e-6, case_conv2d},
        {"batchnorm2d_train", 1e-5, [](Rng& r) { return case_batchnorm(r, BnMode::train); }},
        {"batchnorm2d_eval", 1e-6, [](Rng& r) { return case_batchnorm(r, BnMode::eval); }},
        {"upsample_nearest2x", 1e-8, case_upsample},
        {"softmax_flat", 1e-6, case_softmax_flat},
        {"kernel_contract", 1e-6, case_kernel_contract},
        {"affine_grid", 1e-6, case_affine_grid},
        {"bilinear_sample", 1e-4, case_bilinear_sample},
        {"cstn_conv", 1e-4, case_cstn_conv},
        {"loc_net", 1e-4, case_loc_net},
        {"backbone", 1e-4, case_backbone},
        {"fpn_merge", 1e-4, case_fpn_merge},
        {"head_forward", 1e-4, case_head_forward},
        {"joint_softmax", 1e-6, case_joint_softmax},
        {"loss_cls", 1e-5, case_loss_cls},
        {"loss_theta", 1e-6, case_loss_theta},
        {"loss_scale", 1e-4, case_loss_scale},
        {"model_loss", 1e-4, case_model_loss},
    };
    return registry;
}

GradCheckReport run_gradcheck_entry(const GradCheckEntry& entry, std::uint64_t seed,
                                    double epsilon) {
    std::uint64_t salt = 1469598103934665603ULL;
    for (char c : entry.name) salt = (salt ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    Rng rng = Rng::child(seed, salt);
    GradCase gc = entry.make_case(rng);
    return gradcheck(gc.fn, gc.inputs, epsilon, entry.tolerance, gc.sample_elems, rng.next_u64());
}

GradCase corrupted_backward_case(Rng& rng) {
    Shape s = rand_shape2(rng);
    Tensor x = rand_t(s, rng);
    Tensor proj = proj_for(s, rng);
    // doubles values forward but claims an identity backward rule
    auto bad_double = [](const Tensor& a) {
        std::vector<double> out(a.values());
        for (double& v : out) v *= 2.0;
        return detail::make_op("bad_double", a.shape(), std::move(out), {a}, [](Node& n) {
            double* ga = n.inputs[0]->grad_acc();
            for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
        });
    };
    return {project([bad_double](const std::vector<Tensor>& in) { return bad_double(in[0]); },
                    proj),
            {x}};
}

} // namespace cstn
