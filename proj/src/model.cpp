#include "cstn/model.hpp"

#include <cmath>

namespace cstn {

Head Head::init(int d, int num_classes, int loc_hidden, bool use_cstn, Rng& rng) {
    Head head;
    double stddev = std::sqrt(2.0 / (static_cast<double>(d) * 9.0));
    head.cls_w = Tensor::randn(Shape{num_classes, d, 3, 3}, rng, stddev, true);
    head.cls_b = Tensor::zeros(Shape{num_classes}, true);
    head.use_cstn = use_cstn;
    if (use_cstn) head.loc = LocNet::init(d, loc_hidden, rng);
    return head;
}

std::pair<Tensor, Tensor> Head::forward(const Tensor& p) const {
    if (use_cstn) {
        Tensor theta = loc_net_forward(p, loc);
        Tensor logits = cstn_conv(p, theta, cls_w, cls_b);
        return {logits, theta};
    }
    Tensor logits = conv2d(p, cls_w, cls_b, 1, 1);
    Tensor theta;
    {
        NoGradGuard ng;
        theta = identity_theta(p.dim(0), p.dim(2), p.dim(3));
    }
    return {logits, theta};
}

void Head::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".cls.w", cls_w);
    out.emplace_back(prefix + ".cls.b", cls_b);
    if (use_cstn) {
        out.emplace_back(prefix + ".loc.w1", loc.w1);
        out.emplace_back(prefix + ".loc.b1", loc.b1);
        out.emplace_back(prefix + ".loc.w2", loc.w2);
        out.emplace_back(prefix + ".loc.b2", loc.b2);
    }
}

CstnModel CstnModel::init(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.num_classes < 1) throw ValueError("model: num_classes must be >= 1");
    if (cfg.image_size % 32 != 0) throw ValueError("model: image_size must be divisible by 32");
    CstnModel m;
    m.cfg = cfg;
    Rng rng = Rng::child(seed, 7001);
    m.backbone = Backbone::init(rng);
    m.fpn = Fpn::init(Backbone::c4_channels, Backbone::c5_channels, cfg.fpn_channels, rng);
    m.head = Head::init(cfg.fpn_channels, cfg.num_classes, cfg.loc_hidden, cfg.use_cstn, rng);
    return m;
}

ModelOutput CstnModel::forward(const Tensor& images, BnMode mode) {
    auto [c4, c5] = backbone.forward(images, mode);
    auto [p4, p5] = fpn.forward(c4, c5, mode);

    ModelOutput out;
    auto run_level = [&](const Tensor& p, int level, int stride) {
        auto [logits, theta] = head.forward(p);
        out.logits.push_back(logits);
        out.thetas.push_back(theta);
        out.scales.push_back(ScaleInfo{level, stride, p.dim(2), p.dim(3), cfg.base_size});
    };
    run_level(p4, 0, 8);
    run_level(p5, 1, 16);
    return out;
}

NamedParams CstnModel::parameters() {
    NamedParams out;
    backbone.collect("backbone", out);
    fpn.collect("fpn", out);
    head.collect("head", out);
    return out;
}

NamedBuffers CstnModel::buffers() {
    NamedBuffers out;
    backbone.collect_buffers("backbone", out);
    fpn.collect_buffers("fpn", out);
    return out;
}

BatchLoss batch_loss(CstnModel& model, const Tensor& images, const std::vector<int>& labels,
                     double lambda, double alpha, BnMode mode) {
    BatchLoss bl;
    bl.out = model.forward(images, mode);
    bl.jd = joint_softmax(bl.out.logits, bl.out.scales);
    Tensor l_cls = loss_cls(bl.jd, labels);
    Tensor l_theta = loss_theta(bl.out.thetas);
    Tensor l_scale = loss_scale(bl.jd, labels);
    bl.parts = combine_losses(l_cls, l_theta, l_scale, lambda, alpha);
    return bl;
}

} // namespace cstn
