#include "cstn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <utility>

namespace cstn {

namespace {

ModelConfig model_config(const TrainConfig& cfg) {
    ModelConfig mc;
    mc.num_classes = cfg.data.num_classes;
    mc.image_size = cfg.data.image_size;
    mc.base_size = cfg.base_size;
    mc.use_cstn = cfg.use_cstn;
    mc.fpn_channels = cfg.fpn_channels;
    mc.loc_hidden = cfg.loc_hidden;
    return mc;
}

// Stacks samples[order[lo..hi)] (or samples[lo..hi) when order is null)
// into one [N,3,H,W] batch.
Tensor stack_batch(const std::vector<WeakSample>& samples, const std::vector<int>* order,
                   size_t lo, size_t hi) {
    const WeakSample& first = samples[order ? static_cast<size_t>((*order)[lo]) : lo];
    Shape s = first.image.shape();
    std::int64_t stride = first.image.numel();
    Tensor out = Tensor::zeros(Shape{static_cast<int>(hi - lo), s[0], s[1], s[2]});
    for (size_t i = lo; i < hi; ++i) {
        const WeakSample& w = samples[order ? static_cast<size_t>((*order)[i]) : i];
        if (w.image.numel() != stride) throw ShapeError("batch: sample images differ in shape");
        std::copy(w.image.values().begin(), w.image.values().end(),
                  out.values().begin() + static_cast<std::int64_t>(i - lo) * stride);
    }
    return out;
}

// [N,6,h,w] identity transform at every location.
Tensor identity_thetas(const Shape& s) {
    Tensor t = Tensor::zeros(s);
    std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int n = 0; n < s[0]; ++n) {
        double* base = t.data() + n * 6 * hw;
        std::fill(base, base + hw, 1.0);              // a11
        std::fill(base + 4 * hw, base + 5 * hw, 1.0); // a22
    }
    return t;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace

Adam::Slot& Adam::slot(const std::string& name, size_t n) {
    for (Slot& s : slots_)
        if (s.name == name) return s;
    slots_.push_back(Slot{name, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
    return slots_.back();
}

void Adam::step(NamedParams& params) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        const size_t n = p.values().size();
        Slot& s = slot(name, n);
        if (s.m.size() != n)
            throw ShapeError("optimizer slot for " + name + " holds " + std::to_string(s.m.size()) +
                             " values, parameter has " + std::to_string(n));
        const std::vector<double>* g = p.has_grad() ? &p.grad() : nullptr;
        double* val = p.data();
        for (size_t i = 0; i < n; ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
            val[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
        }
    }
}

std::vector<std::pair<std::string, Tensor>> Adam::state() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("opt/t", Tensor(Shape{1}, std::vector<double>{static_cast<double>(t_)}));
    for (const Slot& s : slots_) {
        out.emplace_back("opt/m/" + s.name, Tensor(Shape{static_cast<int>(s.m.size())}, s.m));
        out.emplace_back("opt/v/" + s.name, Tensor(Shape{static_cast<int>(s.v.size())}, s.v));
    }
    return out;
}

void Adam::load_state(const Checkpoint& c) {
    t_ = 0;
    slots_.clear();
    for (const auto& [name, t] : c.tensors) {
        if (name == "opt/t") {
            t_ = static_cast<std::int64_t>(std::llround(t.values()[0]));
        } else if (name.rfind("opt/m/", 0) == 0) {
            slot(name.substr(6), t.values().size()).m = t.values();
        } else if (name.rfind("opt/v/", 0) == 0) {
            slot(name.substr(6), t.values().size()).v = t.values();
        }
    }
}

void Sgd::step(NamedParams& params) {
    for (auto& [name, p] : params) {
        (void)name;
        if (!p.has_grad()) continue;
        const std::vector<double>& g = p.grad();
        double* val = p.data();
        for (size_t i = 0; i < g.size(); ++i) val[i] -= lr_ * g[i];
    }
}

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr) {
    if (name == "adam") return std::make_unique<Adam>(lr);
    if (name == "sgd") return std::make_unique<Sgd>(lr);
    throw ValueError("unknown optimizer '" + name + "' (valid: adam, sgd)");
}

EvalResult evaluate(CstnModel& model, const std::vector<WeakSample>& samples,
                    const EvalOptions& opts, int batch) {
    if (batch < 1) throw ValueError("evaluate: batch must be >= 1");
    NoGradGuard ng;
    const int H = model.cfg.image_size, W = model.cfg.image_size;
    std::vector<EvalRecord> records;
    records.reserve(samples.size());
    for (size_t lo = 0; lo < samples.size(); lo += static_cast<size_t>(batch)) {
        const size_t hi = std::min(samples.size(), lo + static_cast<size_t>(batch));
        Tensor images = stack_batch(samples, nullptr, lo, hi);
        ModelOutput out = model.forward(images, BnMode::eval);

        std::vector<Tensor> logits, thetas;
        std::vector<ScaleInfo> scales;
        for (size_t i = 0; i < out.scales.size(); ++i) {
            if (opts.single_scale_level >= 0 && out.scales[i].level != opts.single_scale_level)
                continue;
            logits.push_back(out.logits[i]);
            thetas.push_back(opts.use_transform ? out.thetas[i]
                                                : identity_thetas(out.thetas[i].shape()));
            scales.push_back(out.scales[i]);
        }
        if (logits.empty())
            throw ValueError("no pyramid level has level index " +
                             std::to_string(opts.single_scale_level));

        JointDistribution jd = joint_softmax(logits, scales);
        Tensor marg = marginalize_classes(jd);
        const int C = marg.dim(1);
        for (size_t n = lo; n < hi; ++n) {
            const WeakSample& s = samples[n];
            const int bn = static_cast<int>(n - lo);
            EvalRecord r;
            r.id = static_cast<int>(n);
            r.gt_label = s.label;
            r.gt_box = s.gt_box;
            Prediction p = map_inference(jd, thetas, bn, H, W);
            r.pred_class = p.c;
            int best = 0;
            double best_v = marg.at({bn, 0});
            for (int c = 1; c < C; ++c) {
                const double v = marg.at({bn, c});
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            r.marginal_class = best;
            for (const BoxXYXY& b : topk_boxes(jd, thetas, bn, s.label, 5, H, W))
                r.boxes.push_back(ScoredBox{b, iou(b, s.gt_box)});
            records.push_back(std::move(r));
        }
    }
    EvalResult res;
    res.metrics = compute_metrics(records);
    res.records = std::move(records);
    return res;
}

Checkpoint make_checkpoint(const TrainConfig& cfg, CstnModel& model, const Optimizer& opt,
                           std::uint64_t epoch, std::uint64_t data_rng_state) {
    Checkpoint c;
    c.version = kCheckpointVersion;
    c.config_text = config_to_text(cfg);
    c.epoch = epoch;
    c.rng_state = data_rng_state;
    for (auto& [name, p] : model.parameters())
        c.tensors.emplace_back("param/" + name, Tensor(p.shape(), p.values()));
    for (auto& [name, buf] : model.buffers())
        c.tensors.emplace_back("buffer/" + name,
                               Tensor(Shape{static_cast<int>(buf->size())}, *buf));
    for (auto& [name, t] : opt.state()) c.tensors.emplace_back(name, t);
    return c;
}

void load_model_state(CstnModel& model, const Checkpoint& c) {
    std::set<std::string> used;
    for (auto& [name, p] : model.parameters()) {
        const Tensor& src = c.tensor("param/" + name);
        if (src.shape() != p.shape())
            throw ShapeError("checkpoint tensor param/" + name + " is " + shape_str(src.shape()) +
                             ", model expects " + shape_str(p.shape()));
        p.values() = src.values();
        used.insert("param/" + name);
    }
    for (auto& [name, buf] : model.buffers()) {
        const Tensor& src = c.tensor("buffer/" + name);
        if (static_cast<size_t>(src.numel()) != buf->size())
            throw ShapeError("checkpoint tensor buffer/" + name + " holds " +
                             std::to_string(src.numel()) + " values, model expects " +
                             std::to_string(buf->size()));
        *buf = src.values();
        used.insert("buffer/" + name);
    }
    for (const auto& [name, t] : c.tensors) {
        (void)t;
        const bool model_state = name.rfind("param/", 0) == 0 || name.rfind("buffer/", 0) == 0;
        if (model_state && !used.count(name))
            throw ValueError("checkpoint tensor " + name +
                             " does not match any model parameter or buffer");
    }
}

CstnModel model_from_checkpoint(const Checkpoint& c) {
    TrainConfig cfg = parse_config_text(c.config_text);
    CstnModel model = CstnModel::init(model_config(cfg), cfg.seed);
    load_model_state(model, c);
    return model;
}

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const Checkpoint* resume,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    validate_config(cfg);
    if (ds.train.size() < 2) throw ValueError("train: need at least 2 training samples");

    CstnModel model = CstnModel::init(model_config(cfg), cfg.seed);
    std::unique_ptr<Optimizer> opt = make_optimizer(cfg.optimizer, cfg.lr);
    Rng data_rng = Rng::child(cfg.seed, 9001);
    std::uint64_t start_epoch = 0;
    if (resume) {
        if (resume->version != kCheckpointVersion)
            throw ValueError("checkpoint has format version " + std::to_string(resume->version) +
                             ", this build reads version " + std::to_string(kCheckpointVersion));
        load_model_state(model, *resume);
        opt->load_state(*resume);
        data_rng.set_state(resume->rng_state);
        start_epoch = resume->epoch;
    }

    NamedParams params = model.parameters();
    EvalOptions eo;
    eo.use_transform = cfg.use_transform_at_eval;
    eo.single_scale_level = cfg.single_scale_level;

    TrainResult res;
    for (std::uint64_t epoch = start_epoch; epoch < static_cast<std::uint64_t>(cfg.epochs);
         ++epoch) {
        std::vector<int> order(ds.train.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(data_rng.uniform_int(i))]);

        double sum_total = 0.0, sum_cls = 0.0, sum_theta = 0.0, sum_scale = 0.0;
        std::int64_t seen = 0;
        int batch_id = 0;
        for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.batch), ++batch_id) {
            const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch));
            if (hi - lo < 2) break; // a trailing stub has no batch statistics

            Tensor images = stack_batch(ds.train, &order, lo, hi);
            std::vector<int> labels;
            labels.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i)
                labels.push_back(ds.train[static_cast<size_t>(order[i])].label);

            BatchLoss bl = batch_loss(model, images, labels, cfg.lambda, cfg.alpha, BnMode::train);
            const double lt = bl.parts.total.item(), lc = bl.parts.cls.item(),
                         lth = bl.parts.theta.item(), lsc = bl.parts.scale_hinge.item();
            if (!std::isfinite(lt) || !std::isfinite(lc) || !std::isfinite(lth) ||
                !std::isfinite(lsc))
                throw Error("non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                            std::to_string(batch_id) + ": total=" + fmt(lt) + " cls=" + fmt(lc) +
                            " theta=" + fmt(lth) + " scale=" + fmt(lsc));

            bl.parts.total.backward();
            opt->step(params);
            for (auto& [name, p] : params) {
                (void)name;
                p.zero_grad();
            }

            const double bn = static_cast<double>(hi - lo);
            sum_total += lt * bn;
            sum_cls += lc * bn;
            sum_theta += lth * bn;
            sum_scale += lsc * bn;
            seen += static_cast<std::int64_t>(hi - lo);
        }

        EvalResult ev = evaluate(model, ds.val, eo, cfg.batch);
        EpochLog el;
        el.epoch = static_cast<int>(epoch) + 1;
        const double d = seen ? static_cast<double>(seen) : 1.0;
        el.loss = sum_total / d;
        el.loss_cls = sum_cls / d;
        el.loss_theta = sum_theta / d;
        el.loss_scale = sum_scale / d;
        el.top1_class = ev.metrics.top1_class;
        el.top1_loc = ev.metrics.top1_loc;
        res.log.push_back(el);
        if (on_epoch) on_epoch(el);
    }

    const std::uint64_t final_epoch =
        std::max<std::uint64_t>(start_epoch, static_cast<std::uint64_t>(cfg.epochs));
    res.checkpoint = make_checkpoint(cfg, model, *opt, final_epoch, data_rng.state());
    return res;
}

} // namespace cstn
