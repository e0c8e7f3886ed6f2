#pragma once

#include <vector>

#include "cstn/ops.hpp"
#include "cstn/tensor.hpp"
#include "cstn/types.hpp"

namespace cstn {

/// Index bookkeeping for the flattened (s, l, c) table. Flat index
/// = scale_offset[s] + l*C + c, so s is most significant and c least;
/// ties in any argmax resolve to the lowest flat index.
struct JointLayout {
    int C = 0;
    std::vector<ScaleInfo> scales;
    std::vector<int> scale_offset; // in flat entries, multiples of C
    int total = 0;

    int locations(int s) const { return scales[static_cast<size_t>(s)].h * scales[static_cast<size_t>(s)].w; }
    int flat_index(int c, int l, int s) const { return scale_offset[static_cast<size_t>(s)] + l * C + c; }
    int num_scales() const { return static_cast<int>(scales.size()); }
};

/// One softmax over every (class, location, scale) triple per sample.
/// flat_logits is kept alongside probs so losses can run on the
/// log-sum-exp path instead of the normalized table.
struct JointDistribution {
    Tensor flat_logits; // [N, total]
    Tensor probs;       // [N, total]
    JointLayout layout;
};

/// MAP decode of one sample plus its box and the top-k list for the
/// predicted class.
struct Prediction {
    int c = 0, l = 0, s = 0;
    double score = 0.0;
    double theta[6] = {1, 0, 0, 0, 1, 0};
    BoxXYXY box;
    std::vector<BoxXYXY> top5; // scored, for the MAP class
};

/// Builds the joint distribution from per-scale logits [N,C,h_s,w_s].
JointDistribution joint_softmax(const std::vector<Tensor>& logits,
                                const std::vector<ScaleInfo>& scales);

/// p(c) = sum over locations and scales; [N,C].
Tensor marginalize_classes(const JointDistribution& jd);

/// Joint argmax for sample n, decoded to a box via the theta map at
/// (l*, s*); thetas are the per-scale [N,6,h,w] transform tensors.
Prediction map_inference(const JointDistribution& jd, const std::vector<Tensor>& thetas,
                         int n, int image_h, int image_w);

/// Top-k (location, scale) boxes for a fixed class, sorted by joint
/// probability descending (ties: lowest flat index). k larger than the
/// table truncates.
std::vector<BoxXYXY> topk_boxes(const JointDistribution& jd, const std::vector<Tensor>& thetas,
                                int n, int cls, int k, int image_h, int image_w);

/// Mean over the batch of -log p(y | x), evaluated from the flat logits
/// as logsumexp(all) - logsumexp(label class entries).
Tensor loss_cls(const JointDistribution& jd, const std::vector<int>& labels);

/// Squared deviation from the identity transform, summed over all
/// locations and scales, averaged over the batch.
Tensor loss_theta(const std::vector<Tensor>& thetas);

/// Hinge between the two levels' per-class maxima on the joint table:
/// mean over batch of max(0, max_l p(s_fine,l,y) - max_l p(s_coarse,l,y)).
/// Requires exactly two scales; the finer level is the one with more
/// locations.
Tensor loss_scale(const JointDistribution& jd, const std::vector<int>& labels);

/// Weighted combination with per-part values retained for logging.
struct LossParts {
    Tensor total;
    Tensor cls;
    Tensor theta;
    Tensor scale_hinge;
    double lambda = 0.0;
    double alpha = 0.0;
};

LossParts combine_losses(const Tensor& cls, const Tensor& theta, const Tensor& scale_hinge,
                         double lambda, double alpha);

} // namespace cstn
