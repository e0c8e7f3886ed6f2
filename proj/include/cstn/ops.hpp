#pragma once

#include <set>
#include <vector>

#include "cstn/tensor.hpp"

namespace cstn {

// ---- elementwise / arithmetic ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a); // subgradient at 0 is 0

// ---- reductions ----

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Row-wise max of a [N,M] tensor -> [N]. Backward routes to the first
/// argmax in each row (deterministic tie rule).
Tensor reduce_max_rows(const Tensor& a);
/// Row-wise log(sum(exp(x))) of [N,M] -> [N], max-subtracted.
Tensor logsumexp_rows(const Tensor& a);

// ---- structure (all copying; no view aliasing) ----

Tensor reshape(const Tensor& a, Shape new_shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// out[n, j] = x[n, starts[n] + j*stride], j in [0, count). Bounds-checked.
Tensor gather_strided(const Tensor& x, const std::vector<int>& starts, int stride, int count);
/// out[n, g] = sum_{j mod groups == g} x[n, j] for a [N,M] tensor.
Tensor sum_mod_groups(const Tensor& x, int groups);
/// out = x - v[c] broadcast over [N,C,H,W] channels; v may require grad.
Tensor sub_channel(const Tensor& x, const Tensor& v);

// ---- neural-net kernels ----

/// Standard 2-D convolution: input [N,Cin,H,W], weight [Cout,Cin,K,K],
/// bias [Cout]; K odd; zero padding. Output [N,Cout,H',W'] with
/// H' = floor((H + 2*padding - K)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

enum class BnMode { train, eval };

/// Per-channel running statistics for batch norm.
struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit RunningStats(int channels = 0, double momentum_ = 0.1, double eps_ = 1e-5)
        : mean(static_cast<size_t>(channels), 0.0),
          var(static_cast<size_t>(channels), 1.0),
          momentum(momentum_),
          eps(eps_) {}
};

/// Batch normalization over [N,C,H,W]. Train mode normalizes by batch
/// statistics (and updates running stats in place); eval mode uses the
/// running statistics. Requires N*H*W >= 2 in train mode.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   RunningStats& stats, BnMode mode);

/// Nearest-neighbor 2x upsampling of [N,C,H,W] -> [N,C,2H,2W].
Tensor upsample_nearest2x(const Tensor& input);

/// Softmax jointly over the flattened set of `axes`, independently for each
/// index of the remaining axes. Max-subtracted for stability.
Tensor softmax_flat(const Tensor& logits, const std::set<int>& axes);

/// Contraction used by the transformed convolution: samples [N,P,H,W,K,K]
/// against weight [Q,P,K,K] plus bias [Q] -> [N,Q,H,W].
Tensor kernel_contract(const Tensor& samples, const Tensor& weight, const Tensor& bias);

} // namespace cstn
