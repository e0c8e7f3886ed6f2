#include "cstn/wsol.hpp"

#include <algorithm>
#include <string>

#include "cstn/stn.hpp"

namespace cstn {

namespace {

void gather_theta(const Tensor& theta_s, int n, int y, int x, double out[6]) {
    int H = theta_s.dim(2), W = theta_s.dim(3);
    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const double* base = theta_s.data() + static_cast<std::int64_t>(n) * 6 * plane +
                         static_cast<std::int64_t>(y) * W + x;
    for (int c = 0; c < 6; ++c) out[c] = base[c * plane];
}

void check_thetas(const JointLayout& layout, const std::vector<Tensor>& thetas) {
    if (thetas.size() != layout.scales.size())
        throw ShapeError("theta list size " + std::to_string(thetas.size()) + " vs " +
                         std::to_string(layout.scales.size()) + " scales");
    for (size_t s = 0; s < thetas.size(); ++s) {
        const ScaleInfo& sc = layout.scales[s];
        if (thetas[s].ndim() != 4 || thetas[s].dim(1) != 6 || thetas[s].dim(2) != sc.h ||
            thetas[s].dim(3) != sc.w)
            throw ShapeError("theta tensor " + shape_str(thetas[s].shape()) +
                             " does not match scale " + std::to_string(s));
    }
}

} // namespace

JointDistribution joint_softmax(const std::vector<Tensor>& logits,
                                const std::vector<ScaleInfo>& scales) {
    if (logits.empty()) throw ValueError("joint_softmax: empty scale list");
    if (logits.size() != scales.size())
        throw ShapeError("joint_softmax: " + std::to_string(logits.size()) + " logit maps vs " +
                         std::to_string(scales.size()) + " scale infos");
    int N = logits[0].dim(0), C = logits[0].dim(1);

    JointDistribution jd;
    jd.layout.C = C;
    jd.layout.scales = scales;
    std::vector<Tensor> rows;
    int off = 0;
    for (size_t s = 0; s < logits.size(); ++s) {
        const Tensor& t = logits[s];
        if (t.ndim() != 4 || t.dim(0) != N || t.dim(1) != C)
            throw ShapeError("joint_softmax: logits " + shape_str(t.shape()) +
                             " inconsistent at scale " + std::to_string(s));
        if (t.dim(2) != scales[s].h || t.dim(3) != scales[s].w)
            throw ShapeError("joint_softmax: logits spatial dims vs scale info at scale " +
                             std::to_string(s));
        jd.layout.scale_offset.push_back(off);
        int L = t.dim(2) * t.dim(3);
        off += L * C;
        // [N,C,h,w] -> [N,h,w,C] -> [N, L*C]: location-major, class innermost.
        rows.push_back(reshape(permute(t, {0, 2, 3, 1}), Shape{N, L * C}));
    }
    jd.layout.total = off;
    jd.flat_logits = rows.size() == 1 ? rows[0] : concat(rows, 1);
    jd.probs = softmax_flat(jd.flat_logits, {1});
    return jd;
}

Tensor marginalize_classes(const JointDistribution& jd) {
    return sum_mod_groups(jd.probs, jd.layout.C);
}

Prediction map_inference(const JointDistribution& jd, const std::vector<Tensor>& thetas,
                         int n, int image_h, int image_w) {
    check_thetas(jd.layout, thetas);
    const JointLayout& lay = jd.layout;
    const double* row = jd.probs.data() + static_cast<std::int64_t>(n) * lay.total;
    int best = 0;
    for (int i = 1; i < lay.total; ++i)
        if (row[i] > row[best]) best = i;

    Prediction pred;
    pred.score = row[best];
    int s = 0;
    while (s + 1 < lay.num_scales() && best >= lay.scale_offset[static_cast<size_t>(s + 1)]) ++s;
    int rem = best - lay.scale_offset[static_cast<size_t>(s)];
    pred.s = s;
    pred.l = rem / lay.C;
    pred.c = rem % lay.C;

    const ScaleInfo& sc = lay.scales[static_cast<size_t>(s)];
    int y = pred.l / sc.w, x = pred.l % sc.w;
    gather_theta(thetas[static_cast<size_t>(s)], n, y, x, pred.theta);
    pred.box = theta_to_box(pred.theta, y, x, sc, image_h, image_w);
    pred.box.score = pred.score;
    pred.top5 = topk_boxes(jd, thetas, n, pred.c, 5, image_h, image_w);
    return pred;
}

std::vector<BoxXYXY> topk_boxes(const JointDistribution& jd, const std::vector<Tensor>& thetas,
                                int n, int cls, int k, int image_h, int image_w) {
    check_thetas(jd.layout, thetas);
    if (k < 1) throw ValueError("topk_boxes: k must be >= 1");
    const JointLayout& lay = jd.layout;
    if (cls < 0 || cls >= lay.C) throw ValueError("topk_boxes: class out of range");
    const double* row = jd.probs.data() + static_cast<std::int64_t>(n) * lay.total;

    // candidates: (probability, flat index) for the fixed class
    std::vector<std::pair<double, int>> cand;
    cand.reserve(static_cast<size_t>(lay.total / lay.C));
    for (int s = 0; s < lay.num_scales(); ++s) {
        int L = lay.locations(s);
        for (int l = 0; l < L; ++l) {
            int idx = lay.flat_index(cls, l, s);
            cand.emplace_back(row[idx], idx);
        }
    }
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (k > static_cast<int>(cand.size())) k = static_cast<int>(cand.size());

    std::vector<BoxXYXY> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        int idx = cand[static_cast<size_t>(i)].second;
        int s = 0;
        while (s + 1 < lay.num_scales() && idx >= lay.scale_offset[static_cast<size_t>(s + 1)]) ++s;
        int l = (idx - lay.scale_offset[static_cast<size_t>(s)]) / lay.C;
        const ScaleInfo& sc = lay.scales[static_cast<size_t>(s)];
        int y = l / sc.w, x = l % sc.w;
        double th[6];
        gather_theta(thetas[static_cast<size_t>(s)], n, y, x, th);
        BoxXYXY box = theta_to_box(th, y, x, sc, image_h, image_w);
        box.score = cand[static_cast<size_t>(i)].first;
        out.push_back(box);
    }
    return out;
}

Tensor loss_cls(const JointDistribution& jd, const std::vector<int>& labels) {
    const JointLayout& lay = jd.layout;
    int N = jd.flat_logits.dim(0);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("loss_cls: " + std::to_string(labels.size()) + " labels vs batch " +
                         std::to_string(N));
    for (int y : labels)
        if (y < 0 || y >= lay.C)
            throw ValueError("loss_cls: label " + std::to_string(y) + " out of range [0," +
                             std::to_string(lay.C) + ")");
    // -log p(y) = logsumexp(all entries) - logsumexp(entries of class y)
    Tensor lse_all = logsumexp_rows(jd.flat_logits);
    Tensor cls_rows = gather_strided(jd.flat_logits, labels, lay.C, lay.total / lay.C);
    Tensor lse_cls = logsumexp_rows(cls_rows);
    return mean_all(sub(lse_all, lse_cls));
}

Tensor loss_theta(const std::vector<Tensor>& thetas) {
    if (thetas.empty()) throw ValueError("loss_theta: empty theta list");
    int N = thetas[0].dim(0);
    Tensor acc;
    for (const Tensor& t : thetas) {
        if (t.ndim() != 4 || t.dim(1) != 6)
            throw ShapeError("loss_theta: theta must be [N,6,H,W], got " + shape_str(t.shape()));
        Tensor d = sub(t, identity_theta(t.dim(0), t.dim(2), t.dim(3)));
        Tensor s = sum_all(mul(d, d));
        acc = acc.defined() ? add(acc, s) : s;
    }
    return scale(acc, 1.0 / static_cast<double>(N));
}

Tensor loss_scale(const JointDistribution& jd, const std::vector<int>& labels) {
    const JointLayout& lay = jd.layout;
    if (lay.num_scales() != 2)
        throw ValueError("loss_scale: needs exactly 2 scales, got " +
                         std::to_string(lay.num_scales()));
    int N = jd.probs.dim(0);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("loss_scale: " + std::to_string(labels.size()) + " labels vs batch " +
                         std::to_string(N));
    for (int y : labels)
        if (y < 0 || y >= lay.C) throw ValueError("loss_scale: label out of range");

    int fine = lay.locations(0) >= lay.locations(1) ? 0 : 1;
    int coarse = 1 - fine;
    auto class_max = [&](int s) {
        std::vector<int> starts(static_cast<size_t>(N));
        for (int n = 0; n < N; ++n)
            starts[static_cast<size_t>(n)] =
                lay.scale_offset[static_cast<size_t>(s)] + labels[static_cast<size_t>(n)];
        Tensor rows = gather_strided(jd.probs, starts, lay.C, lay.locations(s));
        return reduce_max_rows(rows);
    };
    Tensor hinge = relu(sub(class_max(fine), class_max(coarse)));
    return mean_all(hinge);
}

LossParts combine_losses(const Tensor& cls, const Tensor& theta, const Tensor& scale_hinge,
                         double lambda, double alpha) {
    if (lambda < 0.0 || alpha < 0.0)
        throw ValueError("combine_losses: lambda and alpha must be >= 0");
    LossParts parts;
    parts.cls = cls;
    parts.theta = theta;
    parts.scale_hinge = scale_hinge;
    parts.lambda = lambda;
    parts.alpha = alpha;
    Tensor t = cls;
    if (lambda != 0.0) t = add(t, scale(theta, lambda));
    if (alpha != 0.0) t = add(t, scale(scale_hinge, alpha));
    parts.total = t;
    return parts;
}

} // namespace cstn
