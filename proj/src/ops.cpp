#include "cstn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace cstn {

namespace {

int floor_div(int a, int b) {
    int q = a / b;
    return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

int ceil_div(int a, int b) { return -floor_div(-a, b); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operands " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::vector<std::int64_t> row_major_strides(const Shape& dims) {
    std::vector<std::int64_t> st(dims.size(), 1);
    for (int i = static_cast<int>(dims.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] =
            st[static_cast<size_t>(i + 1)] * dims[static_cast<size_t>(i + 1)];
    return st;
}

// All flat offsets reachable by sweeping the given axes, other axes fixed at 0.
std::vector<std::int64_t> axis_offsets(const Shape& dims, const std::vector<std::int64_t>& strides,
                                       const std::vector<int>& axes_list) {
    std::vector<std::int64_t> offs{0};
    for (int a : axes_list) {
        std::vector<std::int64_t> next;
        next.reserve(offs.size() * static_cast<size_t>(dims[static_cast<size_t>(a)]));
        for (std::int64_t base : offs)
            for (int i = 0; i < dims[static_cast<size_t>(a)]; ++i)
                next.push_back(base + i * strides[static_cast<size_t>(a)]);
        offs = std::move(next);
    }
    return offs;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.values());
    const double* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    return detail::make_op("add", a.shape(), std::move(out), {a, b}, [](Node& n) {
        const std::vector<double>& g = n.grad;
        for (int k = 0; k < 2; ++k) {
            if (!n.inputs[static_cast<size_t>(k)]->requires_grad) continue;
            double* gi = n.inputs[static_cast<size_t>(k)]->grad_acc();
            for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.values());
    const double* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
    return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [](Node& n) {
        const std::vector<double>& g = n.grad;
        if (n.inputs[0]->requires_grad) {
            double* ga = n.inputs[0]->grad_acc();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (n.inputs[1]->requires_grad) {
            double* gb = n.inputs[1]->grad_acc();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.values());
    const double* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
    return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [](Node& n) {
        const std::vector<double>& g = n.grad;
        const std::vector<double>& va = n.inputs[0]->values;
        const std::vector<double>& vb = n.inputs[1]->values;
        if (n.inputs[0]->requires_grad) {
            double* ga = n.inputs[0]->grad_acc();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (n.inputs[1]->requires_grad) {
            double* gb = n.inputs[1]->grad_acc();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& x : out) x *= c;
    return detail::make_op("scale", a.shape(), std::move(out), {a}, [c](Node& n) {
        double* ga = n.inputs[0]->grad_acc();
        for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += c * n.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& x : out) x += c;
    return detail::make_op("add_scalar", a.shape(), std::move(out), {a}, [](Node& n) {
        double* ga = n.inputs[0]->grad_acc();
        for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (double& x : out) x = x > 0.0 ? x : 0.0;
    return detail::make_op("relu", a.shape(), std::move(out), {a}, [](Node& n) {
        const std::vector<double>& x = n.inputs[0]->values;
        double* ga = n.inputs[0]->grad_acc();
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (x[i] > 0.0) ga[i] += n.grad[i];
    });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_op("sum_all", Shape{1}, {s}, {a}, [](Node& n) {
        double g = n.grad[0];
        double* ga = n.inputs[0]->grad_acc();
        size_t m = n.inputs[0]->values.size();
        for (size_t i = 0; i < m; ++i) ga[i] += g;
    });
}

Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    double s = 0.0;
    for (double x : a.values()) s += x;
    double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_op("mean_all", Shape{1}, {s * inv}, {a}, [inv](Node& n) {
        double g = n.grad[0] * inv;
        double* ga = n.inputs[0]->grad_acc();
        size_t m = n.inputs[0]->values.size();
        for (size_t i = 0; i < m; ++i) ga[i] += g;
    });
}

Tensor reduce_max_rows(const Tensor& a) {
    if (a.ndim() != 2 || a.dim(1) < 1)
        throw ShapeError("reduce_max_rows: need [N,M] with M >= 1, got " + shape_str(a.shape()));
    int N = a.dim(0), M = a.dim(1);
    std::vector<double> out(static_cast<size_t>(N));
    std::vector<int> argmax(static_cast<size_t>(N));
    const double* x = a.data();
    for (int n = 0; n < N; ++n) {
        const double* row = x + static_cast<std::int64_t>(n) * M;
        int best = 0;
        for (int j = 1; j < M; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<size_t>(n)] = row[best];
        argmax[static_cast<size_t>(n)] = best;
    }
    return detail::make_op("reduce_max_rows", Shape{N}, std::move(out), {a},
                           [M, argmax = std::move(argmax)](Node& n) {
                               double* ga = n.inputs[0]->grad_acc();
                               for (size_t i = 0; i < n.grad.size(); ++i)
                                   ga[i * static_cast<size_t>(M) +
                                      static_cast<size_t>(argmax[i])] += n.grad[i];
                           });
}

Tensor logsumexp_rows(const Tensor& a) {
    if (a.ndim() != 2 || a.dim(1) < 1)
        throw ShapeError("logsumexp_rows: need [N,M] with M >= 1, got " + shape_str(a.shape()));
    int N = a.dim(0), M = a.dim(1);
    std::vector<double> out(static_cast<size_t>(N));
    const double* x = a.data();
    for (int n = 0; n < N; ++n) {
        const double* row = x + static_cast<std::int64_t>(n) * M;
        double m = row[0];
        for (int j = 1; j < M; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < M; ++j) s += std::exp(row[j] - m);
        out[static_cast<size_t>(n)] = m + std::log(s);
    }
    return detail::make_op("logsumexp_rows", Shape{N}, std::move(out), {a}, [M](Node& n) {
        // d/dx_j = softmax(x)_j = exp(x_j - lse)
        const std::vector<double>& x = n.inputs[0]->values;
        double* ga = n.inputs[0]->grad_acc();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double lse = n.values[i];
            double g = n.grad[i];
            const double* row = x.data() + i * static_cast<size_t>(M);
            double* grow = ga + i * static_cast<size_t>(M);
            for (int j = 0; j < M; ++j) grow[j] += g * std::exp(row[j] - lse);
        }
    });
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape));
    std::vector<double> out(a.values());
    return detail::make_op("reshape", std::move(new_shape), std::move(out), {a}, [](Node& n) {
        double* ga = n.inputs[0]->grad_acc();
        for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    int r = a.ndim();
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("permute: perm rank " + std::to_string(perm.size()) + " vs tensor rank " +
                         std::to_string(r));
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
            throw ShapeError("permute: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape in_shape = a.shape();
    Shape out_shape(static_cast<size_t>(r));
    for (int k = 0; k < r; ++k)
        out_shape[static_cast<size_t>(k)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(k)])];
    auto in_strides = row_major_strides(in_shape);
    // Stride of output axis k in the input buffer.
    std::vector<std::int64_t> map_strides(static_cast<size_t>(r));
    for (int k = 0; k < r; ++k)
        map_strides[static_cast<size_t>(k)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(k)])];

    std::int64_t total = a.numel();
    std::vector<double> out(static_cast<size_t>(total));
    const double* x = a.data();
    std::vector<int> idx(static_cast<size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t of = 0; of < total; ++of) {
        out[static_cast<size_t>(of)] = x[static_cast<size_t>(src)];
        for (int k = r - 1; k >= 0; --k) {
            idx[static_cast<size_t>(k)]++;
            src += map_strides[static_cast<size_t>(k)];
            if (idx[static_cast<size_t>(k)] < out_shape[static_cast<size_t>(k)]) break;
            src -= map_strides[static_cast<size_t>(k)] * out_shape[static_cast<size_t>(k)];
            idx[static_cast<size_t>(k)] = 0;
        }
    }
    return detail::make_op(
        "permute", out_shape, std::move(out), {a},
        [out_shape, map_strides, r](Node& n) {
            double* ga = n.inputs[0]->grad_acc();
            std::vector<int> idx(static_cast<size_t>(r), 0);
            std::int64_t src = 0;
            for (size_t of = 0; of < n.grad.size(); ++of) {
                ga[static_cast<size_t>(src)] += n.grad[of];
                for (int k = r - 1; k >= 0; --k) {
                    idx[static_cast<size_t>(k)]++;
                    src += map_strides[static_cast<size_t>(k)];
                    if (idx[static_cast<size_t>(k)] < out_shape[static_cast<size_t>(k)]) break;
                    src -= map_strides[static_cast<size_t>(k)] * out_shape[static_cast<size_t>(k)];
                    idx[static_cast<size_t>(k)] = 0;
                }
            }
        });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int r = parts[0].ndim();
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int total_axis = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != r) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)])
                throw ShapeError("concat: shape mismatch on axis " + std::to_string(d));
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];

    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int> axis_sizes;
    std::int64_t base = 0;
    for (const Tensor& p : parts) {
        int ap = p.dim(axis);
        axis_sizes.push_back(ap);
        const double* src = p.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total_axis + base) * inner,
                        src + o * ap * inner,
                        static_cast<size_t>(ap * inner) * sizeof(double));
        }
        base += ap;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_op(
        "concat", out_shape, std::move(out), std::move(inputs),
        [outer, inner, total_axis, axis_sizes](Node& n) {
            std::int64_t base = 0;
            for (size_t k = 0; k < n.inputs.size(); ++k) {
                int ap = axis_sizes[k];
                if (n.inputs[k]->requires_grad) {
                    double* gp = n.inputs[k]->grad_acc();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* gsrc = n.grad.data() + (o * total_axis + base) * inner;
                        double* gdst = gp + o * ap * inner;
                        for (std::int64_t i = 0; i < ap * inner; ++i) gdst[i] += gsrc[i];
                    }
                }
                base += ap;
            }
        });
}

Tensor gather_strided(const Tensor& x, const std::vector<int>& starts, int stride, int count) {
    if (x.ndim() != 2) throw ShapeError("gather_strided: need [N,M], got " + shape_str(x.shape()));
    int N = x.dim(0), M = x.dim(1);
    if (static_cast<int>(starts.size()) != N)
        throw ShapeError("gather_strided: starts size " + std::to_string(starts.size()) +
                         " vs batch " + std::to_string(N));
    if (stride < 1 || count < 1) throw ValueError("gather_strided: stride and count must be >= 1");
    for (int n = 0; n < N; ++n) {
        std::int64_t last = starts[static_cast<size_t>(n)] +
                            static_cast<std::int64_t>(count - 1) * stride;
        if (starts[static_cast<size_t>(n)] < 0 || last >= M)
            throw ShapeError("gather_strided: row " + std::to_string(n) + " start " +
                             std::to_string(starts[static_cast<size_t>(n)]) + " out of range for M=" +
                             std::to_string(M));
    }
    std::vector<double> out(static_cast<size_t>(N) * static_cast<size_t>(count));
    const double* px = x.data();
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < count; ++j)
            out[static_cast<size_t>(n * count + j)] =
                px[static_cast<std::int64_t>(n) * M + starts[static_cast<size_t>(n)] +
                   static_cast<std::int64_t>(j) * stride];
    return detail::make_op("gather_strided", Shape{N, count}, std::move(out), {x},
                           [starts, stride, count, M](Node& n) {
                               double* ga = n.inputs[0]->grad_acc();
                               int N = static_cast<int>(starts.size());
                               for (int b = 0; b < N; ++b)
                                   for (int j = 0; j < count; ++j)
                                       ga[static_cast<std::int64_t>(b) * M +
                                          starts[static_cast<size_t>(b)] +
                                          static_cast<std::int64_t>(j) * stride] +=
                                           n.grad[static_cast<size_t>(b * count + j)];
                           });
}

Tensor sum_mod_groups(const Tensor& x, int groups) {
    if (x.ndim() != 2) throw ShapeError("sum_mod_groups: need [N,M], got " + shape_str(x.shape()));
    int N = x.dim(0), M = x.dim(1);
    if (groups < 1 || M % groups != 0)
        throw ShapeError("sum_mod_groups: M=" + std::to_string(M) + " not divisible by groups=" +
                         std::to_string(groups));
    std::vector<double> out(static_cast<size_t>(N) * static_cast<size_t>(groups), 0.0);
    const double* px = x.data();
    for (int n = 0; n < N; ++n) {
        const double* row = px + static_cast<std::int64_t>(n) * M;
        double* orow = out.data() + static_cast<std::int64_t>(n) * groups;
        for (int j = 0; j < M; ++j) orow[j % groups] += row[j];
    }
    return detail::make_op("sum_mod_groups", Shape{N, groups}, std::move(out), {x},
                           [groups, M](Node& n) {
                               double* ga = n.inputs[0]->grad_acc();
                               int N = n.shape[0];
                               for (int b = 0; b < N; ++b) {
                                   const double* grow =
                                       n.grad.data() + static_cast<std::int64_t>(b) * groups;
                                   double* garow = ga + static_cast<std::int64_t>(b) * M;
                                   for (int j = 0; j < M; ++j) garow[j] += grow[j % groups];
                               }
                           });
}

Tensor sub_channel(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 4) throw ShapeError("sub_channel: need [N,C,H,W], got " + shape_str(x.shape()));
    if (v.ndim() != 1 || v.dim(0) != x.dim(1))
        throw ShapeError("sub_channel: channel vector " + shape_str(v.shape()) + " vs input " +
                         shape_str(x.shape()));
    int N = x.dim(0), C = x.dim(1);
    std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    std::vector<double> out(x.values());
    const double* pv = v.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) p[i] -= pv[static_cast<size_t>(c)];
        }
    return detail::make_op("sub_channel", x.shape(), std::move(out), {x, v},
                           [N, C, plane](Node& n) {
                               if (n.inputs[0]->requires_grad) {
                                   double* gx = n.inputs[0]->grad_acc();
                                   for (size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
                               }
                               if (n.inputs[1]->requires_grad) {
                                   double* gv = n.inputs[1]->grad_acc();
                                   for (int b = 0; b < N; ++b)
                                       for (int c = 0; c < C; ++c) {
                                           const double* g = n.grad.data() +
                                                             (static_cast<std::int64_t>(b) * C + c) * plane;
                                           double s = 0.0;
                                           for (std::int64_t i = 0; i < plane; ++i) s += g[i];
                                           gv[static_cast<size_t>(c)] -= s;
                                       }
                               }
                           });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
    if (input.ndim() != 4) throw ShapeError("conv2d: input must be [N,Cin,H,W], got " +
                                            shape_str(input.shape()));
    if (weight.ndim() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,K,K], got " +
                                             shape_str(weight.shape()));
    if (bias.ndim() != 1) throw ShapeError("conv2d: bias must be [Cout], got " +
                                           shape_str(bias.shape()));
    int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    int Cout = weight.dim(0), K = weight.dim(2);
    if (weight.dim(2) != weight.dim(3) || K % 2 == 0)
        throw ShapeError("conv2d: kernel must be square with odd size, got " +
                         shape_str(weight.shape()));
    if (weight.dim(1) != Cin)
        throw ShapeError("conv2d: input channels " + std::to_string(Cin) +
                         " do not match weight channels " + std::to_string(weight.dim(1)));
    if (bias.dim(0) != Cout)
        throw ShapeError("conv2d: bias size " + std::to_string(bias.dim(0)) + " vs Cout " +
                         std::to_string(Cout));
    if (stride < 1 || padding < 0) throw ValueError("conv2d: stride must be >= 1, padding >= 0");
    if (H + 2 * padding < K || W + 2 * padding < K)
        throw ShapeError("conv2d: padded input " + std::to_string(H + 2 * padding) + "x" +
                         std::to_string(W + 2 * padding) + " smaller than kernel " +
                         std::to_string(K));

    int Hp = (H + 2 * padding - K) / stride + 1;
    int Wp = (W + 2 * padding - K) / stride + 1;
    std::vector<double> out(static_cast<size_t>(shape_numel({N, Cout, Hp, Wp})));
    const double* in = input.data();
    const double* w = weight.data();
    const double* b = bias.data();

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            double* oplane = out.data() +
                             (static_cast<std::int64_t>(n) * Cout + co) * Hp * Wp;
            double bv = b[co];
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Hp) * Wp; ++i) oplane[i] = bv;
            for (int ci = 0; ci < Cin; ++ci) {
                const double* iplane = in + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                const double* wk = w + (static_cast<std::int64_t>(co) * Cin + ci) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                    int oy_lo = std::max(0, ceil_div(padding - ky, stride));
                    int oy_hi = std::min(Hp, floor_div(H - 1 - ky + padding, stride) + 1);
                    for (int kx = 0; kx < K; ++kx) {
                        double wv = wk[ky * K + kx];
                        if (wv == 0.0) continue;
                        int ox_lo = std::max(0, ceil_div(padding - kx, stride));
                        int ox_hi = std::min(Wp, floor_div(W - 1 - kx + padding, stride) + 1);
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const double* irow = iplane +
                                                 static_cast<std::int64_t>(oy * stride - padding + ky) * W;
                            double* orow = oplane + static_cast<std::int64_t>(oy) * Wp;
                            int ibase = -padding + kx;
                            if (stride == 1) {
                                for (int ox = ox_lo; ox < ox_hi; ++ox)
                                    orow[ox] += wv * irow[ibase + ox];
                            } else {
                                for (int ox = ox_lo; ox < ox_hi; ++ox)
                                    orow[ox] += wv * irow[ibase + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    return detail::make_op(
        "conv2d", Shape{N, Cout, Hp, Wp}, std::move(out), {input, weight, bias},
        [N, Cin, H, W, Cout, K, Hp, Wp, stride, padding](Node& nd) {
            const std::vector<double>& g = nd.grad;
            const std::vector<double>& in = nd.inputs[0]->values;
            const std::vector<double>& w = nd.inputs[1]->values;
            bool need_in = nd.inputs[0]->requires_grad;
            bool need_w = nd.inputs[1]->requires_grad;
            bool need_b = nd.inputs[2]->requires_grad;
            double* gin = need_in ? nd.inputs[0]->grad_acc() : nullptr;
            double* gw = need_w ? nd.inputs[1]->grad_acc() : nullptr;
            double* gb = need_b ? nd.inputs[2]->grad_acc() : nullptr;

            for (int n = 0; n < N; ++n) {
                for (int co = 0; co < Cout; ++co) {
                    const double* gplane = g.data() +
                                           (static_cast<std::int64_t>(n) * Cout + co) * Hp * Wp;
                    if (need_b) {
                        double s = 0.0;
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Hp) * Wp; ++i)
                            s += gplane[i];
                        gb[co] += s;
                    }
                    if (!need_in && !need_w) continue;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const double* iplane = in.data() +
                                               (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                        const double* wk = w.data() +
                                           (static_cast<std::int64_t>(co) * Cin + ci) * K * K;
                        double* giplane = need_in ? gin +
                                          (static_cast<std::int64_t>(n) * Cin + ci) * H * W
                                                  : nullptr;
                        double* gwk = need_w ? gw +
                                      (static_cast<std::int64_t>(co) * Cin + ci) * K * K
                                             : nullptr;
                        for (int ky = 0; ky < K; ++ky) {
                            int oy_lo = std::max(0, ceil_div(padding - ky, stride));
                            int oy_hi = std::min(Hp, floor_div(H - 1 - ky + padding, stride) + 1);
                            for (int kx = 0; kx < K; ++kx) {
                                int ox_lo = std::max(0, ceil_div(padding - kx, stride));
                                int ox_hi = std::min(Wp, floor_div(W - 1 - kx + padding, stride) + 1);
                                double wv = wk[ky * K + kx];
                                double wacc = 0.0;
                                int ibase = -padding + kx;
                                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                    const double* grow = gplane + static_cast<std::int64_t>(oy) * Wp;
                                    std::int64_t irow_off =
                                        static_cast<std::int64_t>(oy * stride - padding + ky) * W;
                                    const double* irow = iplane + irow_off;
                                    if (need_w) {
                                        for (int ox = ox_lo; ox < ox_hi; ++ox)
                                            wacc += grow[ox] * irow[ibase + ox * stride];
                                    }
                                    if (need_in) {
                                        double* girow = giplane + irow_off;
                                        for (int ox = ox_lo; ox < ox_hi; ++ox)
                                            girow[ibase + ox * stride] += wv * grow[ox];
                                    }
                                }
                                if (need_w) gwk[ky * K + kx] += wacc;
                            }
                        }
                    }
                }
            }
        });
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   RunningStats& stats, BnMode mode) {
    if (input.ndim() != 4)
        throw ShapeError("batchnorm2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
    int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        throw ShapeError("batchnorm2d: gamma/beta must be [C]");
    if (static_cast<int>(stats.mean.size()) != C || static_cast<int>(stats.var.size()) != C)
        throw ShapeError("batchnorm2d: running stats sized for " +
                         std::to_string(stats.mean.size()) + " channels, input has " +
                         std::to_string(C));
    if (input.numel() == 0) throw ValueError("batchnorm2d: zero-size batch");
    std::int64_t m = static_cast<std::int64_t>(N) * H * W;
    if (mode == BnMode::train && m < 2)
        throw ValueError("batchnorm2d: train mode needs N*H*W >= 2, got " + std::to_string(m));

    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const double* x = input.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    std::vector<double> mu(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));

    if (mode == BnMode::train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += p[i];
            }
            double mean = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    double d = p[i] - mean;
                    v += d * d;
                }
            }
            double var = v / static_cast<double>(m); // biased, used for normalization
            mu[static_cast<size_t>(c)] = mean;
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + stats.eps);
            double unbiased = v / static_cast<double>(m - 1);
            stats.mean[static_cast<size_t>(c)] =
                (1.0 - stats.momentum) * stats.mean[static_cast<size_t>(c)] + stats.momentum * mean;
            stats.var[static_cast<size_t>(c)] =
                (1.0 - stats.momentum) * stats.var[static_cast<size_t>(c)] + stats.momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[static_cast<size_t>(c)] = stats.mean[static_cast<size_t>(c)];
            invstd[static_cast<size_t>(c)] =
                1.0 / std::sqrt(stats.var[static_cast<size_t>(c)] + stats.eps);
        }
    }

    std::vector<double> out(input.values().size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x + (static_cast<std::int64_t>(n) * C + c) * plane;
            double* o = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            double mc = mu[static_cast<size_t>(c)], ic = invstd[static_cast<size_t>(c)];
            double gc = pg[c], bc = pb[c];
            for (std::int64_t i = 0; i < plane; ++i) o[i] = gc * (p[i] - mc) * ic + bc;
        }

    bool train = mode == BnMode::train;
    return detail::make_op(
        "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
        [N, C, plane, m, train, mu = std::move(mu), invstd = std::move(invstd)](Node& nd) {
            const std::vector<double>& g = nd.grad;
            const std::vector<double>& x = nd.inputs[0]->values;
            const std::vector<double>& gamma = nd.inputs[1]->values;
            bool need_x = nd.inputs[0]->requires_grad;
            bool need_g = nd.inputs[1]->requires_grad;
            bool need_b = nd.inputs[2]->requires_grad;
            double* gx = need_x ? nd.inputs[0]->grad_acc() : nullptr;
            double* gg = need_g ? nd.inputs[1]->grad_acc() : nullptr;
            double* gb = need_b ? nd.inputs[2]->grad_acc() : nullptr;

            for (int c = 0; c < C; ++c) {
                double mc = mu[static_cast<size_t>(c)];
                double ic = invstd[static_cast<size_t>(c)];
                double sum_g = 0.0, sum_gxh = 0.0;
                for (int n = 0; n < N; ++n) {
                    std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                    const double* gp = g.data() + off;
                    const double* xp = x.data() + off;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gxh += gp[i] * (xp[i] - mc) * ic;
                    }
                }
                if (need_g) gg[c] += sum_gxh;
                if (need_b) gb[c] += sum_g;
                if (!need_x) continue;
                double gc = gamma[static_cast<size_t>(c)];
                if (train) {
                    // dxhat_i = g_i * gamma; dx folds the mean/var paths.
                    double inv_m = 1.0 / static_cast<double>(m);
                    for (int n = 0; n < N; ++n) {
                        std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                        const double* gp = g.data() + off;
                        const double* xp = x.data() + off;
                        double* gxp = gx + off;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            double xhat = (xp[i] - mc) * ic;
                            gxp[i] += gc * ic *
                                      (gp[i] - inv_m * sum_g - inv_m * xhat * sum_gxh);
                        }
                    }
                } else {
                    for (int n = 0; n < N; ++n) {
                        std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                        const double* gp = g.data() + off;
                        double* gxp = gx + off;
                        for (std::int64_t i = 0; i < plane; ++i) gxp[i] += gc * ic * gp[i];
                    }
                }
            }
        });
}

Tensor upsample_nearest2x(const Tensor& input) {
    if (input.ndim() != 4)
        throw ShapeError("upsample_nearest2x: input must be [N,C,H,W], got " +
                         shape_str(input.shape()));
    int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    int H2 = 2 * H, W2 = 2 * W;
    std::vector<double> out(static_cast<size_t>(shape_numel({N, C, H2, W2})));
    const double* x = input.data();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const double* ip = x + nc * H * W;
        double* op = out.data() + nc * H2 * W2;
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
                double v = ip[y * W + x2];
                double* o = op + (2 * y) * W2 + 2 * x2;
                o[0] = v;
                o[1] = v;
                o[W2] = v;
                o[W2 + 1] = v;
            }
    }
    return detail::make_op("upsample_nearest2x", Shape{N, C, H2, W2}, std::move(out), {input},
                           [N, C, H, W, H2, W2](Node& nd) {
                               double* gi = nd.inputs[0]->grad_acc();
                               const double* g = nd.grad.data();
                               for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
                                   const double* gp = g + nc * H2 * W2;
                                   double* gip = gi + nc * H * W;
                                   for (int y = 0; y < H; ++y)
                                       for (int x = 0; x < W; ++x) {
                                           const double* s = gp + (2 * y) * W2 + 2 * x;
                                           gip[y * W + x] += s[0] + s[1] + s[W2] + s[W2 + 1];
                                       }
                               }
                           });
}

Tensor softmax_flat(const Tensor& logits, const std::set<int>& axes) {
    if (axes.empty()) throw ValueError("softmax_flat: empty axis set");
    int r = logits.ndim();
    for (int a : axes)
        if (a < 0 || a >= r)
            throw ShapeError("softmax_flat: axis " + std::to_string(a) + " out of range for rank " +
                             std::to_string(r));
    Shape dims = logits.shape();
    auto strides = row_major_strides(dims);
    std::vector<int> sel(axes.begin(), axes.end());
    std::vector<int> rest;
    for (int d = 0; d < r; ++d)
        if (!axes.count(d)) rest.push_back(d);
    std::vector<std::int64_t> inner = axis_offsets(dims, strides, sel);
    std::vector<std::int64_t> outer = axis_offsets(dims, strides, rest);

    std::vector<double> out(logits.values().size());
    const double* x = logits.data();
    for (std::int64_t base : outer) {
        double m = x[static_cast<size_t>(base + inner[0])];
        for (std::int64_t off : inner) m = std::max(m, x[static_cast<size_t>(base + off)]);
        double denom = 0.0;
        for (std::int64_t off : inner) {
            double e = std::exp(x[static_cast<size_t>(base + off)] - m);
            out[static_cast<size_t>(base + off)] = e;
            denom += e;
        }
        double inv = 1.0 / denom;
        for (std::int64_t off : inner) out[static_cast<size_t>(base + off)] *= inv;
    }
    return detail::make_op(
        "softmax_flat", dims, std::move(out), {logits},
        [inner = std::move(inner), outer = std::move(outer)](Node& nd) {
            // dx = p * (g - sum(g*p)) per group
            const std::vector<double>& p = nd.values;
            const std::vector<double>& g = nd.grad;
            double* gx = nd.inputs[0]->grad_acc();
            for (std::int64_t base : outer) {
                double dot = 0.0;
                for (std::int64_t off : inner) {
                    size_t i = static_cast<size_t>(base + off);
                    dot += g[i] * p[i];
                }
                for (std::int64_t off : inner) {
                    size_t i = static_cast<size_t>(base + off);
                    gx[i] += p[i] * (g[i] - dot);
                }
            }
        });
}

Tensor kernel_contract(const Tensor& samples, const Tensor& weight, const Tensor& bias) {
    if (samples.ndim() != 6)
        throw ShapeError("kernel_contract: samples must be [N,P,H,W,K,K], got " +
                         shape_str(samples.shape()));
    if (weight.ndim() != 4)
        throw ShapeError("kernel_contract: weight must be [Q,P,K,K], got " +
                         shape_str(weight.shape()));
    int N = samples.dim(0), P = samples.dim(1), H = samples.dim(2), W = samples.dim(3);
    int K = samples.dim(4);
    int Q = weight.dim(0);
    if (samples.dim(5) != K || weight.dim(2) != K || weight.dim(3) != K || weight.dim(1) != P)
        throw ShapeError("kernel_contract: weight " + shape_str(weight.shape()) +
                         " incompatible with samples " + shape_str(samples.shape()));
    if (bias.ndim() != 1 || bias.dim(0) != Q)
        throw ShapeError("kernel_contract: bias must be [Q]");

    int KK = K * K;
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(static_cast<size_t>(shape_numel({N, Q, H, W})));
    const double* s = samples.data();
    const double* w = weight.data();
    const double* b = bias.data();
    for (int n = 0; n < N; ++n)
        for (int q = 0; q < Q; ++q) {
            double* oplane = out.data() + (static_cast<std::int64_t>(n) * Q + q) * hw;
            const double* wq = w + static_cast<std::int64_t>(q) * P * KK;
            for (std::int64_t yx = 0; yx < hw; ++yx) {
                double acc = b[q];
                const double* sp = s + (static_cast<std::int64_t>(n) * P * hw + yx) * KK;
                const double* wp = wq;
                for (int p = 0; p < P; ++p) {
                    for (int t = 0; t < KK; ++t) acc += wp[t] * sp[t];
                    sp += hw * KK;
                    wp += KK;
                }
                oplane[yx] = acc;
            }
        }

    return detail::make_op(
        "kernel_contract", Shape{N, Q, H, W}, std::move(out), {samples, weight, bias},
        [N, P, H, W, K, Q, KK, hw](Node& nd) {
            const std::vector<double>& g = nd.grad;
            const std::vector<double>& s = nd.inputs[0]->values;
            const std::vector<double>& w = nd.inputs[1]->values;
            bool need_s = nd.inputs[0]->requires_grad;
            bool need_w = nd.inputs[1]->requires_grad;
            bool need_b = nd.inputs[2]->requires_grad;
            double* gs = need_s ? nd.inputs[0]->grad_acc() : nullptr;
            double* gw = need_w ? nd.inputs[1]->grad_acc() : nullptr;
            double* gb = need_b ? nd.inputs[2]->grad_acc() : nullptr;
            for (int n = 0; n < N; ++n)
                for (int q = 0; q < Q; ++q) {
                    const double* gplane = g.data() + (static_cast<std::int64_t>(n) * Q + q) * hw;
                    if (need_b) {
                        double acc = 0.0;
                        for (std::int64_t yx = 0; yx < hw; ++yx) acc += gplane[yx];
                        gb[q] += acc;
                    }
                    if (!need_s && !need_w) continue;
                    const double* wq = w.data() + static_cast<std::int64_t>(q) * P * KK;
                    double* gwq = need_w ? gw + static_cast<std::int64_t>(q) * P * KK : nullptr;
                    for (std::int64_t yx = 0; yx < hw; ++yx) {
                        double gv = gplane[yx];
                        if (gv == 0.0) continue;
                        std::int64_t sbase = (static_cast<std::int64_t>(n) * P * hw + yx) * KK;
                        for (int p = 0; p < P; ++p) {
                            std::int64_t so = sbase + static_cast<std::int64_t>(p) * hw * KK;
                            std::int64_t wo = static_cast<std::int64_t>(p) * KK;
                            if (need_s) {
                                double* gsp = gs + so;
                                const double* wp = wq + wo;
                                for (int t = 0; t < KK; ++t) gsp[t] += gv * wp[t];
                            }
                            if (need_w) {
                                double* gwp = gwq + wo;
                                const double* sp = s.data() + so;
                                for (int t = 0; t < KK; ++t) gwp[t] += gv * sp[t];
                            }
                        }
                    }
                }
        });
}

} // namespace cstn
