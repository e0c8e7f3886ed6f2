#pragma once

#include <cstdint>

#include "cstn/pyramid.hpp"
#include "cstn/stn.hpp"
#include "cstn/types.hpp"
#include "cstn/wsol.hpp"

namespace cstn {

struct ModelConfig {
    int num_classes = 6;
    int image_size = 64;
    double base_size = 8.0;
    bool use_cstn = true;
    int fpn_channels = 64;
    int loc_hidden = 32;
};

/// Per-scale raw model outputs; scales[i] describes logits[i]/thetas[i].
struct ModelOutput {
    std::vector<Tensor> logits; // [N,C,h_s,w_s]
    std::vector<Tensor> thetas; // [N,6,h_s,w_s]
    std::vector<ScaleInfo> scales;
};

/// Detection head shared across pyramid levels. With use_cstn the class
/// logits come from the transformed convolution driven by the predicted
/// transforms; without it the head is a plain convolution and thetas stay
/// identity (so decoded boxes are the default boxes).
struct Head {
    Tensor cls_w, cls_b;
    LocNet loc;
    bool use_cstn = true;

    static Head init(int d, int num_classes, int loc_hidden, bool use_cstn, Rng& rng);
    /// Returns (logits, theta) for one level.
    std::pair<Tensor, Tensor> forward(const Tensor& p) const;
    void collect(const std::string& prefix, NamedParams& out);
};

struct CstnModel {
    ModelConfig cfg;
    Backbone backbone;
    Fpn fpn;
    Head head;

    static CstnModel init(const ModelConfig& cfg, std::uint64_t seed);
    ModelOutput forward(const Tensor& images, BnMode mode);

    NamedParams parameters();
    NamedBuffers buffers();
};

/// Full training loss for one batch (images [N,3,H,W], labels in [0,C)).
/// Returns the weighted total plus each part; the joint distribution and
/// raw outputs ride along for callers that inspect them.
struct BatchLoss {
    LossParts parts;
    ModelOutput out;
    JointDistribution jd;
};

BatchLoss batch_loss(CstnModel& model, const Tensor& images, const std::vector<int>& labels,
                     double lambda, double alpha, BnMode mode);

} // namespace cstn
