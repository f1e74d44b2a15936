#include "vnsc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace vnsc {

namespace {

template <typename S>
using StridedMap = Eigen::Map<RowMatrix<S>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMatrix<S>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
using DynStride = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
    if (shape.size() != rank) {
        throw ConfigError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_string(shape));
    }
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ConfigError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <typename S>
void require_bias(const Var<S>& bias, Index channels, const char* what) {
    if (bias && (bias.value().size() != channels)) {
        throw ConfigError(std::string(what) + ": bias has " + std::to_string(bias.value().size()) +
                          " entries, expected " + std::to_string(channels));
    }
}

// Output positions t in [0, n_out) whose source index t*stride + offset lies in [0, n_in).
struct TapRange {
    Index begin = 0;
    Index end = 0;
    Index size() const { return std::max<Index>(0, end - begin); }
};

TapRange tap_range(Index n_out, Index n_in, Index stride, Index offset) {
    // t*stride + offset >= 0  and  t*stride + offset <= n_in - 1
    Index lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    Index hi_num = n_in - 1 - offset;
    Index hi = hi_num < 0 ? -1 : hi_num / stride;
    return {lo, std::min(hi + 1, n_out)};
}

template <typename S>
void add_bias_rows(Tensor<S>& y, const Var<S>& bias) {
    if (!bias) return;
    auto m = y.matrix();
    m.colwise() += bias.value().vec();
}

template <typename S>
void accumulate_bias_grad(const Var<S>& bias, const Tensor<S>& g) {
    if (bias.requires_grad()) bias.accumulate(g.matrix().rowwise().sum());
}

// Geometry shared by conv3d (big -> small) and conv3d_transposed (small -> big).
struct Conv3dGeometry {
    Index channels_big = 0;
    std::array<Index, 3> big{};   // T, H, W
    std::array<Index, 3> small{}; // T', H', W'
    std::array<Index, 3> kernel{};
    std::array<Index, 3> stride{};
    std::array<Index, 3> padding{};

    Index taps() const { return kernel[0] * kernel[1] * kernel[2]; }
    Index small_plane() const { return small[1] * small[2]; }
    Index big_plane() const { return big[1] * big[2]; }
    Index big_volume() const { return big[0] * big_plane(); }

    // Number of small time slices handled per GEMM; bounds the column buffer.
    Index chunk() const {
        const Index per_slice = channels_big * taps() * small_plane();
        return std::max<Index>(1, (Index(1) << 22) / std::max<Index>(1, per_slice));
    }
};

// cols[(c*kT + a)*kH*kW + b*kW + d, (t - t0)*H'W' + h*W' + w] = big[c, t*sT + a - pT, h*sH + b - pH, w*sW + d - pW]
template <typename S>
void im2col3d(const S* big, const Conv3dGeometry& g, Index t0, Index count, RowMatrix<S>& cols) {
    const Index plane = g.small_plane();
    cols.setZero(g.channels_big * g.taps(), count * plane);
    for (Index c = 0; c < g.channels_big; ++c) {
        for (Index a = 0; a < g.kernel[0]; ++a) {
            for (Index b = 0; b < g.kernel[1]; ++b) {
                for (Index d = 0; d < g.kernel[2]; ++d) {
                    const Index row = ((c * g.kernel[0] + a) * g.kernel[1] + b) * g.kernel[2] + d;
                    S* out = cols.row(row).data();
                    for (Index t = t0; t < t0 + count; ++t) {
                        const Index ti = t * g.stride[0] + a - g.padding[0];
                        if (ti < 0 || ti >= g.big[0]) continue;
                        const S* src = big + (c * g.big[0] + ti) * g.big_plane();
                        S* dst = out + (t - t0) * plane;
                        for (Index h = 0; h < g.small[1]; ++h) {
                            const Index hi = h * g.stride[1] + b - g.padding[1];
                            if (hi < 0 || hi >= g.big[1]) continue;
                            for (Index w = 0; w < g.small[2]; ++w) {
                                const Index wi = w * g.stride[2] + d - g.padding[2];
                                if (wi < 0 || wi >= g.big[2]) continue;
                                dst[h * g.small[2] + w] = src[hi * g.big[2] + wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col3d: scatter-adds columns back into the big grid.
template <typename S>
void col2im3d(const RowMatrix<S>& cols, const Conv3dGeometry& g, Index t0, Index count, S* big) {
    const Index plane = g.small_plane();
    for (Index c = 0; c < g.channels_big; ++c) {
        for (Index a = 0; a < g.kernel[0]; ++a) {
            for (Index b = 0; b < g.kernel[1]; ++b) {
                for (Index d = 0; d < g.kernel[2]; ++d) {
                    const Index row = ((c * g.kernel[0] + a) * g.kernel[1] + b) * g.kernel[2] + d;
                    const S* in = cols.row(row).data();
                    for (Index t = t0; t < t0 + count; ++t) {
                        const Index ti = t * g.stride[0] + a - g.padding[0];
                        if (ti < 0 || ti >= g.big[0]) continue;
                        S* dst = big + (c * g.big[0] + ti) * g.big_plane();
                        const S* src = in + (t - t0) * plane;
                        for (Index h = 0; h < g.small[1]; ++h) {
                            const Index hi = h * g.stride[1] + b - g.padding[1];
                            if (hi < 0 || hi >= g.big[1]) continue;
                            for (Index w = 0; w < g.small[2]; ++w) {
                                const Index wi = w * g.stride[2] + d - g.padding[2];
                                if (wi < 0 || wi >= g.big[2]) continue;
                                dst[hi * g.big[2] + wi] += src[h * g.small[2] + w];
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// elementwise and structural

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<S> y(a.shape(), a.value().vec() + b.value().vec());
    return make_result<S>(std::move(y), {a, b}, [a, b](const Tensor<S>& g) {
        a.accumulate(g.vec());
        b.accumulate(g.vec());
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<S> y(a.shape(), a.value().vec() - b.value().vec());
    return make_result<S>(std::move(y), {a, b}, [a, b](const Tensor<S>& g) {
        a.accumulate(g.vec());
        b.accumulate(-g.vec());
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
    Tensor<S> y(a.shape(), a.value().vec() * factor);
    return make_result<S>(std::move(y), {a}, [a, factor](const Tensor<S>& g) { a.accumulate(g.vec() * factor); });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
    const double total = a.value().vec().template cast<double>().sum();
    Tensor<S> y = Tensor<S>::constant({1}, static_cast<S>(total));
    return make_result<S>(std::move(y), {a}, [a](const Tensor<S>& g) {
        a.accumulate(Vector<S>::Constant(a.value().size(), g[0]));
    });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
    const Index n = a.value().size();
    return scale(sum(a), static_cast<S>(1.0 / static_cast<double>(n)));
}

template <typename S>
Var<S> weighted_sum(const std::vector<Var<S>>& terms, const std::vector<double>& weights) {
    if (terms.size() != weights.size()) throw ConfigError("weighted_sum: terms and weights differ in length");
    double total = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) throw ConfigError("weighted_sum: terms must be scalars");
        total += weights[i] * static_cast<double>(terms[i].item());
    }
    Var<S> out(Tensor<S>::constant({1}, static_cast<S>(total)));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : terms) any = any || t.requires_grad();
    if (!any) return out;
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& t : terms) {
        if (t.requires_grad()) node->parents.push_back(t.shared());
    }
    node->backward_fn = [terms, weights](const Tensor<S>& g) {
        for (std::size_t i = 0; i < terms.size(); ++i) {
            terms[i].accumulate(Vector<S>::Constant(1, static_cast<S>(weights[i] * static_cast<double>(g[0]))));
        }
    };
    return out;
}

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
    Tensor<S> y = a.value().reshaped(std::move(shape));
    return make_result<S>(std::move(y), {a}, [a](const Tensor<S>& g) { a.accumulate(g.vec()); });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
    require_rank(a.shape(), 2, "transpose");
    Tensor<S> y({a.dim(1), a.dim(0)});
    y.matrix() = a.value().matrix().transpose();
    return make_result<S>(std::move(y), {a}, [a](const Tensor<S>& g) {
        RowMatrix<S> gt = g.matrix().transpose();
        a.accumulate(Eigen::Map<const Vector<S>>(gt.data(), gt.size()));
    });
}

template <typename S>
Var<S> concat_rows(const Var<S>& top, const Var<S>& bottom) {
    require_rank(top.shape(), 2, "concat_rows");
    require_rank(bottom.shape(), 2, "concat_rows");
    if (top.dim(1) != bottom.dim(1)) {
        throw AlignmentError("concat_rows: frame counts differ (" + std::to_string(top.dim(1)) + " vs " +
                             std::to_string(bottom.dim(1)) + ")");
    }
    const Index na = top.value().size();
    Tensor<S> y({top.dim(0) + bottom.dim(0), top.dim(1)});
    y.vec().head(na) = top.value().vec();
    y.vec().tail(bottom.value().size()) = bottom.value().vec();
    return make_result<S>(std::move(y), {top, bottom}, [top, bottom, na](const Tensor<S>& g) {
        top.accumulate(g.vec().head(na));
        bottom.accumulate(g.vec().tail(g.size() - na));
    });
}

template <typename S>
Var<S> fit_frames(const Var<S>& a, Index frames) {
    require_rank(a.shape(), 2, "fit_frames");
    const Index rows = a.dim(0);
    const Index keep = std::min(frames, a.dim(1));
    Tensor<S> y({rows, frames});
    y.matrix().leftCols(keep) = a.value().matrix().leftCols(keep);
    return make_result<S>(std::move(y), {a}, [a, rows, keep](const Tensor<S>& g) {
        Tensor<S> ga(a.shape());
        ga.matrix().leftCols(keep) = g.matrix().leftCols(keep);
        a.accumulate(ga.vec());
        (void)rows;
    });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> y(x.shape(), x.value().vec().cwiseMax(S(0)));
    return make_result<S>(std::move(y), {x}, [x](const Tensor<S>& g) {
        x.accumulate((x.value().vec().array() > S(0)).select(g.vec(), S(0)).matrix());
    });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
    const auto& v = x.value().vec();
    Tensor<S> y(x.shape());
    for (Index i = 0; i < v.size(); ++i) {
        const double a = v[i];
        y[i] = static_cast<S>(0.5 * a * (1.0 + std::erf(a / std::numbers::sqrt2)));
    }
    return make_result<S>(std::move(y), {x}, [x](const Tensor<S>& g) {
        const auto& v = x.value().vec();
        Vector<S> gx(v.size());
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (Index i = 0; i < v.size(); ++i) {
            const double a = v[i];
            const double cdf = 0.5 * (1.0 + std::erf(a / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * a * a);
            gx[i] = static_cast<S>(g[i] * (cdf + a * pdf));
        }
        x.accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// linear and convolutions

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    require_rank(x.shape(), 2, "linear input");
    require_rank(weight.shape(), 2, "linear weight");
    if (weight.dim(1) != x.dim(0)) {
        throw ConfigError("linear: weight " + shape_string(weight.shape()) + " cannot map input " +
                          shape_string(x.shape()));
    }
    require_bias(bias, weight.dim(0), "linear");
    Tensor<S> y({weight.dim(0), x.dim(1)});
    y.matrix().noalias() = weight.value().matrix() * x.value().matrix();
    add_bias_rows(y, bias);
    return make_result<S>(std::move(y), {x, weight, bias}, [x, weight, bias](const Tensor<S>& g) {
        if (x.requires_grad()) {
            RowMatrix<S> gx = weight.value().matrix().transpose() * g.matrix();
            x.accumulate(Eigen::Map<const Vector<S>>(gx.data(), gx.size()));
        }
        if (weight.requires_grad()) {
            RowMatrix<S> gw = g.matrix() * x.value().matrix().transpose();
            weight.accumulate(Eigen::Map<const Vector<S>>(gw.data(), gw.size()));
        }
        accumulate_bias_grad(bias, g);
    });
}

template <typename S>
Var<S> conv1d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv1dOptions& opts) {
    require_rank(x.shape(), 2, "conv1d input");
    require_rank(weight.shape(), 3, "conv1d weight");
    const Index c_in = x.dim(0), n = x.dim(1);
    const Index c_out = weight.dim(0), cin_g = weight.dim(1), k = weight.dim(2);
    const Index groups = opts.groups, stride = opts.stride, pad = opts.padding;
    if (groups < 1 || c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups) {
        throw ConfigError("conv1d: weight " + shape_string(weight.shape()) + " incompatible with " +
                          std::to_string(c_in) + " input channels and " + std::to_string(groups) + " groups");
    }
    if (stride < 1 || pad < 0) throw ConfigError("conv1d: stride must be >= 1 and padding >= 0");
    if (n + 2 * pad < k) throw ConfigError("conv1d: input shorter than kernel");
    require_bias(bias, c_out, "conv1d");
    const Index n_out = (n + 2 * pad - k) / stride + 1;
    const Index cout_g = c_out / groups;
    const bool depthwise = cin_g == 1 && cout_g == 1;

    Tensor<S> y({c_out, n_out});
    {
        auto ym = y.matrix();
        const S* xp = x.value().data();
        const S* wp = weight.value().data();
        for (Index tap = 0; tap < k; ++tap) {
            const TapRange r = tap_range(n_out, n, stride, tap - pad);
            if (r.size() == 0) continue;
            const Index src0 = r.begin * stride + tap - pad;
            if (depthwise) {
                for (Index c = 0; c < c_out; ++c) {
                    ConstStridedMap<S> xs(xp + c * n + src0, 1, r.size(), DynStride(n, stride));
                    ym.row(c).segment(r.begin, r.size()) += wp[c * k + tap] * xs;
                }
                continue;
            }
            for (Index grp = 0; grp < groups; ++grp) {
                RowMatrix<S> wk(cout_g, cin_g);
                for (Index o = 0; o < cout_g; ++o)
                    for (Index i = 0; i < cin_g; ++i) wk(o, i) = wp[((grp * cout_g + o) * cin_g + i) * k + tap];
                ConstStridedMap<S> xs(xp + grp * cin_g * n + src0, cin_g, r.size(), DynStride(n, stride));
                ym.block(grp * cout_g, r.begin, cout_g, r.size()).noalias() += wk * xs;
            }
        }
    }
    add_bias_rows(y, bias);

    return make_result<S>(std::move(y), {x, weight, bias},
                          [x, weight, bias, n, n_out, k, stride, pad, groups, cin_g, cout_g, depthwise](const Tensor<S>& g) {
        const auto gm = g.matrix();
        const S* xp = x.value().data();
        const S* wp = weight.value().data();
        Tensor<S> gx(x.shape());
        Tensor<S> gw(weight.shape());
        for (Index tap = 0; tap < k; ++tap) {
            const TapRange r = tap_range(n_out, n, stride, tap - pad);
            if (r.size() == 0) continue;
            const Index src0 = r.begin * stride + tap - pad;
            if (depthwise) {
                for (Index c = 0; c < weight.dim(0); ++c) {
                    ConstStridedMap<S> xs(xp + c * n + src0, 1, r.size(), DynStride(n, stride));
                    StridedMap<S> gxs(gx.data() + c * n + src0, 1, r.size(), DynStride(n, stride));
                    const auto gseg = gm.row(c).segment(r.begin, r.size());
                    gxs += wp[c * k + tap] * gseg;
                    gw[c * k + tap] += static_cast<S>(gseg.template cast<double>().dot(xs.row(0).template cast<double>()));
                }
                continue;
            }
            for (Index grp = 0; grp < groups; ++grp) {
                RowMatrix<S> wk(cout_g, cin_g);
                for (Index o = 0; o < cout_g; ++o)
                    for (Index i = 0; i < cin_g; ++i) wk(o, i) = wp[((grp * cout_g + o) * cin_g + i) * k + tap];
                ConstStridedMap<S> xs(xp + grp * cin_g * n + src0, cin_g, r.size(), DynStride(n, stride));
                StridedMap<S> gxs(gx.data() + grp * cin_g * n + src0, cin_g, r.size(), DynStride(n, stride));
                const auto gblk = gm.block(grp * cout_g, r.begin, cout_g, r.size());
                gxs.noalias() += wk.transpose() * gblk;
                RowMatrix<S> gwk = gblk * xs.transpose();
                for (Index o = 0; o < cout_g; ++o)
                    for (Index i = 0; i < cin_g; ++i) gw[((grp * cout_g + o) * cin_g + i) * k + tap] += gwk(o, i);
            }
        }
        x.accumulate(gx.vec());
        weight.accumulate(gw.vec());
        accumulate_bias_grad(bias, g);
    });
}

template <typename S>
Var<S> conv1d_transposed(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
                         const ConvTranspose1dOptions& opts) {
    require_rank(x.shape(), 2, "conv1d_transposed input");
    require_rank(weight.shape(), 3, "conv1d_transposed weight");
    const Index c_in = x.dim(0), n = x.dim(1);
    const Index c_out = weight.dim(1), k = weight.dim(2);
    const Index stride = opts.stride, pad = opts.padding, out_pad = opts.output_padding;
    if (weight.dim(0) != c_in) {
        throw ConfigError("conv1d_transposed: weight " + shape_string(weight.shape()) + " expects " +
                          std::to_string(weight.dim(0)) + " input channels, got " + std::to_string(c_in));
    }
    if (stride < 1 || pad < 0 || out_pad < 0 || out_pad >= stride || k < stride) {
        throw ConfigError("conv1d_transposed: incompatible kernel " + std::to_string(k) + " / stride " +
                          std::to_string(stride) + " / padding " + std::to_string(pad));
    }
    const Index n_out = (n - 1) * stride - 2 * pad + k + out_pad;
    if (n_out < 1) throw ConfigError("conv1d_transposed: empty output");
    require_bias(bias, c_out, "conv1d_transposed");

    auto tap_weight = [c_in, c_out, k](const S* wp, Index tap) {
        RowMatrix<S> wk(c_in, c_out);
        for (Index i = 0; i < c_in; ++i)
            for (Index o = 0; o < c_out; ++o) wk(i, o) = wp[(i * c_out + o) * k + tap];
        return wk;
    };
    // Output index j = t*stride + tap - pad; iterate input frames t for which j is valid.
    auto input_range = [n, n_out, stride, pad](Index tap) {
        Index lo = 0;
        const Index off = tap - pad;
        if (off < 0) lo = (-off + stride - 1) / stride;
        const Index hi_num = n_out - 1 - off;
        const Index hi = hi_num < 0 ? -1 : hi_num / stride;
        return TapRange{lo, std::min(hi + 1, n)};
    };

    Tensor<S> y({c_out, n_out});
    for (Index tap = 0; tap < k; ++tap) {
        const TapRange r = input_range(tap);
        if (r.size() == 0) continue;
        const RowMatrix<S> wk = tap_weight(weight.value().data(), tap);
        const Index dst0 = r.begin * stride + tap - pad;
        StridedMap<S> ys(y.data() + dst0, c_out, r.size(), DynStride(n_out, stride));
        ys.noalias() += wk.transpose() * x.value().matrix().middleCols(r.begin, r.size());
    }
    add_bias_rows(y, bias);

    return make_result<S>(std::move(y), {x, weight, bias},
                          [x, weight, bias, k, stride, pad, n_out, c_in, c_out, tap_weight, input_range](const Tensor<S>& g) {
        Tensor<S> gx(x.shape());
        Tensor<S> gw(weight.shape());
        for (Index tap = 0; tap < k; ++tap) {
            const TapRange r = input_range(tap);
            if (r.size() == 0) continue;
            const RowMatrix<S> wk = tap_weight(weight.value().data(), tap);
            const Index src0 = r.begin * stride + tap - pad;
            ConstStridedMap<S> gs(g.data() + src0, c_out, r.size(), DynStride(n_out, stride));
            gx.matrix().middleCols(r.begin, r.size()).noalias() += wk * gs;
            RowMatrix<S> gwk = x.value().matrix().middleCols(r.begin, r.size()) * gs.transpose();
            for (Index i = 0; i < c_in; ++i)
                for (Index o = 0; o < c_out; ++o) gw[(i * c_out + o) * k + tap] += gwk(i, o);
        }
        x.accumulate(gx.vec());
        weight.accumulate(gw.vec());
        accumulate_bias_grad(bias, g);
    });
}

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv3dOptions& opts) {
    require_rank(x.shape(), 4, "conv3d input");
    require_rank(weight.shape(), 5, "conv3d weight");
    if (weight.dim(1) != x.dim(0)) {
        throw ConfigError("conv3d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                          shape_string(x.shape()));
    }
    Conv3dGeometry geo;
    geo.channels_big = x.dim(0);
    for (int a = 0; a < 3; ++a) {
        geo.big[a] = x.dim(a + 1);
        geo.kernel[a] = weight.dim(a + 2);
        geo.stride[a] = opts.stride[a];
        geo.padding[a] = opts.padding[a];
        if (geo.stride[a] < 1 || geo.padding[a] < 0) throw ConfigError("conv3d: stride must be >= 1 and padding >= 0");
        if (geo.big[a] + 2 * geo.padding[a] < geo.kernel[a]) throw ConfigError("conv3d: input smaller than kernel");
        geo.small[a] = (geo.big[a] + 2 * geo.padding[a] - geo.kernel[a]) / geo.stride[a] + 1;
    }
    const Index c_out = weight.dim(0);
    require_bias(bias, c_out, "conv3d");
    const Index plane = geo.small_plane();
    const Index cols_k = geo.channels_big * geo.taps();
    typename Tensor<S>::ConstMatrixMap wmat(weight.value().data(), c_out, cols_k);

    Tensor<S> y({c_out, geo.small[0], geo.small[1], geo.small[2]});
    auto ym = y.matrix();
    RowMatrix<S> cols;
    const Index chunk = geo.chunk();
    for (Index t0 = 0; t0 < geo.small[0]; t0 += chunk) {
        const Index cnt = std::min(chunk, geo.small[0] - t0);
        im2col3d(x.value().data(), geo, t0, cnt, cols);
        ym.middleCols(t0 * plane, cnt * plane).noalias() = wmat * cols;
    }
    add_bias_rows(y, bias);

    return make_result<S>(std::move(y), {x, weight, bias}, [x, weight, bias, geo, c_out, cols_k, plane, chunk](const Tensor<S>& g) {
        typename Tensor<S>::ConstMatrixMap wmat(weight.value().data(), c_out, cols_k);
        Tensor<S> gx(x.shape());
        RowMatrix<S> gw = RowMatrix<S>::Zero(c_out, cols_k);
        RowMatrix<S> cols, gcols;
        const auto gm = g.matrix();
        for (Index t0 = 0; t0 < geo.small[0]; t0 += chunk) {
            const Index cnt = std::min(chunk, geo.small[0] - t0);
            const auto gblk = gm.middleCols(t0 * plane, cnt * plane);
            if (weight.requires_grad()) {
                im2col3d(x.value().data(), geo, t0, cnt, cols);
                gw.noalias() += gblk * cols.transpose();
            }
            if (x.requires_grad()) {
                gcols.noalias() = wmat.transpose() * gblk;
                col2im3d(gcols, geo, t0, cnt, gx.data());
            }
        }
        x.accumulate(gx.vec());
        weight.accumulate(Eigen::Map<const Vector<S>>(gw.data(), gw.size()));
        accumulate_bias_grad(bias, g);
    });
}

template <typename S>
Var<S> conv3d_transposed(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv3dOptions& opts) {
    require_rank(x.shape(), 4, "conv3d_transposed input");
    require_rank(weight.shape(), 5, "conv3d_transposed weight");
    if (weight.dim(0) != x.dim(0)) {
        throw ConfigError("conv3d_transposed: weight " + shape_string(weight.shape()) + " incompatible with input " +
                          shape_string(x.shape()));
    }
    Conv3dGeometry geo;
    geo.channels_big = weight.dim(1);
    for (int a = 0; a < 3; ++a) {
        geo.small[a] = x.dim(a + 1);
        geo.kernel[a] = weight.dim(a + 2);
        geo.stride[a] = opts.stride[a];
        geo.padding[a] = opts.padding[a];
        const Index op = opts.output_padding[a];
        if (geo.stride[a] < 1 || geo.padding[a] < 0 || op < 0 || op >= geo.stride[a] || geo.kernel[a] < geo.stride[a]) {
            throw ConfigError("conv3d_transposed: incompatible kernel/stride/padding on axis " + std::to_string(a));
        }
        geo.big[a] = (geo.small[a] - 1) * geo.stride[a] - 2 * geo.padding[a] + geo.kernel[a] + op;
        if (geo.big[a] < 1) throw ConfigError("conv3d_transposed: empty output");
    }
    const Index c_in = x.dim(0);
    const Index c_out = geo.channels_big;
    require_bias(bias, c_out, "conv3d_transposed");
    const Index plane = geo.small_plane();
    const Index cols_k = c_out * geo.taps();
    typename Tensor<S>::ConstMatrixMap wmat(weight.value().data(), c_in, cols_k);

    Tensor<S> y({c_out, geo.big[0], geo.big[1], geo.big[2]});
    RowMatrix<S> cols;
    const auto xm = x.value().matrix();
    const Index chunk = geo.chunk();
    for (Index t0 = 0; t0 < geo.small[0]; t0 += chunk) {
        const Index cnt = std::min(chunk, geo.small[0] - t0);
        cols.noalias() = wmat.transpose() * xm.middleCols(t0 * plane, cnt * plane);
        col2im3d(cols, geo, t0, cnt, y.data());
    }
    add_bias_rows(y, bias);

    return make_result<S>(std::move(y), {x, weight, bias}, [x, weight, bias, geo, c_in, cols_k, plane, chunk](const Tensor<S>& g) {
        typename Tensor<S>::ConstMatrixMap wmat(weight.value().data(), c_in, cols_k);
        const auto xm = x.value().matrix();
        Tensor<S> gx(x.shape());
        auto gxm = gx.matrix();
        RowMatrix<S> gw = RowMatrix<S>::Zero(c_in, cols_k);
        RowMatrix<S> gcols;
        for (Index t0 = 0; t0 < geo.small[0]; t0 += chunk) {
            const Index cnt = std::min(chunk, geo.small[0] - t0);
            im2col3d(g.data(), geo, t0, cnt, gcols);
            if (x.requires_grad()) gxm.middleCols(t0 * plane, cnt * plane).noalias() = wmat * gcols;
            if (weight.requires_grad()) gw.noalias() += xm.middleCols(t0 * plane, cnt * plane) * gcols.transpose();
        }
        x.accumulate(gx.vec());
        weight.accumulate(Eigen::Map<const Vector<S>>(gw.data(), gw.size()));
        accumulate_bias_grad(bias, g);
    });
}

template <typename S>
Var<S> avg_pool_hw(const Var<S>& x) {
    require_rank(x.shape(), 4, "avg_pool_hw");
    const Index c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("avg_pool_hw: height and width must be even, got " + shape_string(x.shape()));
    }
    const Index planes = c * t, ho = h / 2, wo = w / 2;
    Tensor<S> y({c, t, ho, wo});
    const S* xp = x.value().data();
    for (Index p = 0; p < planes; ++p) {
        const S* src = xp + p * h * w;
        S* dst = y.data() + p * ho * wo;
        for (Index i = 0; i < ho; ++i)
            for (Index j = 0; j < wo; ++j) {
                const Index s0 = 2 * i * w + 2 * j;
                dst[i * wo + j] = S(0.25) * (src[s0] + src[s0 + 1] + src[s0 + w] + src[s0 + w + 1]);
            }
    }
    return make_result<S>(std::move(y), {x}, [x, planes, h, w, ho, wo](const Tensor<S>& g) {
        Tensor<S> gx(x.shape());
        for (Index p = 0; p < planes; ++p) {
            const S* src = g.data() + p * ho * wo;
            S* dst = gx.data() + p * h * w;
            for (Index i = 0; i < ho; ++i)
                for (Index j = 0; j < wo; ++j) {
                    const S v = S(0.25) * src[i * wo + j];
                    const Index s0 = 2 * i * w + 2 * j;
                    dst[s0] += v;
                    dst[s0 + 1] += v;
                    dst[s0 + w] += v;
                    dst[s0 + w + 1] += v;
                }
        }
        x.accumulate(gx.vec());
    });
}

// ---------------------------------------------------------------------------
// normalization

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
    require_rank(x.shape(), 2, "layer_norm");
    const Index d = x.dim(0), n = x.dim(1);
    if (gamma.value().size() != d || beta.value().size() != d) throw ConfigError("layer_norm: gamma/beta size mismatch");
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    const auto xm = x.value().matrix().template cast<double>();
    const Eigen::RowVectorXd mu = xm.colwise().mean();
    const Eigen::MatrixXd centered = xm.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    const Eigen::RowVectorXd rstd = (var.array() + eps).rsqrt();
    Eigen::MatrixXd xhat = centered.array().rowwise() * rstd.array();

    Tensor<S> y({d, n});
    const Eigen::VectorXd gm = gamma.value().vec().template cast<double>();
    const Eigen::VectorXd bt = beta.value().vec().template cast<double>();
    y.matrix() = ((xhat.array().colwise() * gm.array()).colwise() + bt.array()).template cast<S>();

    return make_result<S>(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat = std::move(xhat), rstd, gm](const Tensor<S>& g) {
        const Eigen::MatrixXd gd = g.matrix().template cast<double>();
        if (gamma.requires_grad()) gamma.accumulate((gd.array() * xhat.array()).rowwise().sum().matrix().template cast<S>());
        if (beta.requires_grad()) beta.accumulate(gd.rowwise().sum().template cast<S>());
        if (x.requires_grad()) {
            const Eigen::MatrixXd dxhat = gd.array().colwise() * gm.array();
            const Eigen::RowVectorXd m1 = dxhat.colwise().mean();
            const Eigen::RowVectorXd m2 = (dxhat.array() * xhat.array()).colwise().mean();
            Eigen::MatrixXd dx = dxhat.rowwise() - m1;
            dx -= (xhat.array().rowwise() * m2.array()).matrix();
            dx = dx.array().rowwise() * rstd.array();
            RowMatrix<S> dxs = dx.template cast<S>();
            x.accumulate(Eigen::Map<const Vector<S>>(dxs.data(), dxs.size()));
        }
    });
}

template <typename S>
Var<S> grn(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
    require_rank(x.shape(), 2, "grn");
    const Index d = x.dim(0), n = x.dim(1);
    if (gamma.value().size() != d || beta.value().size() != d) throw ConfigError("grn: gamma/beta size mismatch");
    const Eigen::MatrixXd xm = x.value().matrix().template cast<double>();
    const Eigen::VectorXd energy = xm.rowwise().norm();
    const double denom = energy.mean() + eps;
    const Eigen::VectorXd response = energy / denom;
    const Eigen::VectorXd gm = gamma.value().vec().template cast<double>();
    const Eigen::VectorXd bt = beta.value().vec().template cast<double>();

    Tensor<S> y({d, n});
    y.matrix() = ((xm.array().colwise() * (gm.array() * response.array() + 1.0)).colwise() + bt.array()).template cast<S>();

    return make_result<S>(std::move(y), {x, gamma, beta}, [x, gamma, beta, energy, response, denom, gm, d](const Tensor<S>& g) {
        const Eigen::MatrixXd gd = g.matrix().template cast<double>();
        const Eigen::MatrixXd xm = x.value().matrix().template cast<double>();
        const Eigen::VectorXd gx_dot = (gd.array() * xm.array()).rowwise().sum();
        if (gamma.requires_grad()) gamma.accumulate((gx_dot.array() * response.array()).matrix().template cast<S>());
        if (beta.requires_grad()) beta.accumulate(gd.rowwise().sum().template cast<S>());
        if (x.requires_grad()) {
            // y = x * (gamma * G/denom + 1) + beta, denom = mean(G) + eps
            const Eigen::VectorXd d_response = gm.array() * gx_dot.array();
            const double coupling = (d_response.array() * energy.array()).sum() / (denom * denom * static_cast<double>(d));
            const Eigen::VectorXd d_energy = (d_response.array() / denom) - coupling;
            Eigen::MatrixXd dx = gd.array().colwise() * (gm.array() * response.array() + 1.0);
            for (Index c = 0; c < d; ++c) {
                if (energy[c] > 0.0) dx.row(c) += (d_energy[c] / energy[c]) * xm.row(c);
            }
            RowMatrix<S> dxs = dx.template cast<S>();
            x.accumulate(Eigen::Map<const Vector<S>>(dxs.data(), dxs.size()));
        }
    });
}

template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Tensor<S>& running_mean,
                  Tensor<S>& running_var, bool training, double momentum, double eps) {
    const Index c = x.value().rows();
    const Index m = x.value().cols();
    if (gamma.value().size() != c || beta.value().size() != c || running_mean.size() != c || running_var.size() != c) {
        throw ConfigError("batch_norm: parameter size mismatch for " + std::to_string(c) + " channels");
    }
    const Eigen::MatrixXd xm = x.value().matrix().template cast<double>();
    Eigen::VectorXd mu, var;
    if (training) {
        mu = xm.rowwise().mean();
        var = (xm.colwise() - mu).array().square().rowwise().mean();
        const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
        running_mean.vec() = ((1.0 - momentum) * running_mean.vec().template cast<double>() + momentum * mu).template cast<S>();
        running_var.vec() =
            ((1.0 - momentum) * running_var.vec().template cast<double>() + momentum * unbias * var).template cast<S>();
    } else {
        mu = running_mean.vec().template cast<double>();
        var = running_var.vec().template cast<double>();
    }
    const Eigen::VectorXd rstd = (var.array() + eps).rsqrt();
    Eigen::MatrixXd xhat = (xm.colwise() - mu).array().colwise() * rstd.array();
    const Eigen::VectorXd gm = gamma.value().vec().template cast<double>();
    const Eigen::VectorXd bt = beta.value().vec().template cast<double>();
    Tensor<S> y(x.shape());
    y.matrix() = ((xhat.array().colwise() * gm.array()).colwise() + bt.array()).template cast<S>();

    return make_result<S>(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat = std::move(xhat), rstd, gm, training](const Tensor<S>& g) {
        const Eigen::MatrixXd gd = g.matrix().template cast<double>();
        if (gamma.requires_grad()) gamma.accumulate((gd.array() * xhat.array()).rowwise().sum().matrix().template cast<S>());
        if (beta.requires_grad()) beta.accumulate(gd.rowwise().sum().template cast<S>());
        if (x.requires_grad()) {
            const Eigen::MatrixXd dxhat = gd.array().colwise() * gm.array();
            Eigen::MatrixXd dx;
            if (training) {
                const Eigen::VectorXd m1 = dxhat.rowwise().mean();
                const Eigen::VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().mean();
                dx = dxhat.colwise() - m1;
                dx -= (xhat.array().colwise() * m2.array()).matrix();
                dx = dx.array().colwise() * rstd.array();
            } else {
                dx = dxhat.array().colwise() * rstd.array();
            }
            RowMatrix<S> dxs = dx.template cast<S>();
            x.accumulate(Eigen::Map<const Vector<S>>(dxs.data(), dxs.size()));
        }
    });
}

// ---------------------------------------------------------------------------
// losses

template <typename S>
Var<S> mse_loss(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "mse_loss");
    const Eigen::VectorXd diff = a.value().vec().template cast<double>() - b.value().vec().template cast<double>();
    const double n = static_cast<double>(diff.size());
    Tensor<S> y = Tensor<S>::constant({1}, static_cast<S>(diff.squaredNorm() / n));
    return make_result<S>(std::move(y), {a, b}, [a, b, diff, n](const Tensor<S>& g) {
        const Vector<S> ga = (diff * (2.0 * static_cast<double>(g[0]) / n)).template cast<S>();
        a.accumulate(ga);
        b.accumulate(-ga);
    });
}

template <typename S>
Var<S> l1_loss(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.shape(), b.shape(), "l1_loss");
    const Eigen::VectorXd diff = a.value().vec().template cast<double>() - b.value().vec().template cast<double>();
    const double n = static_cast<double>(diff.size());
    Tensor<S> y = Tensor<S>::constant({1}, static_cast<S>(diff.cwiseAbs().sum() / n));
    return make_result<S>(std::move(y), {a, b}, [a, b, diff, n](const Tensor<S>& g) {
        const double k = static_cast<double>(g[0]) / n;
        const Vector<S> ga = diff.unaryExpr([k](double v) { return v > 0 ? k : (v < 0 ? -k : 0.0); }).template cast<S>();
        a.accumulate(ga);
        b.accumulate(-ga);
    });
}

template <typename S>
Var<S> straight_through(const Var<S>& x, const Tensor<S>& offset) {
    require_same_shape(x.shape(), offset.shape(), "straight_through");
    Tensor<S> y(x.shape(), x.value().vec() + offset.vec());
    return make_result<S>(std::move(y), {x}, [x](const Tensor<S>& g) { x.accumulate(g.vec()); });
}

#define VNSC_INSTANTIATE_OPS(S)                                                                                      \
    template Var<S> add(const Var<S>&, const Var<S>&);                                                               \
    template Var<S> sub(const Var<S>&, const Var<S>&);                                                               \
    template Var<S> scale(const Var<S>&, S);                                                                         \
    template Var<S> sum(const Var<S>&);                                                                              \
    template Var<S> mean(const Var<S>&);                                                                             \
    template Var<S> weighted_sum(const std::vector<Var<S>>&, const std::vector<double>&);                            \
    template Var<S> reshape(const Var<S>&, Shape);                                                                   \
    template Var<S> transpose(const Var<S>&);                                                                        \
    template Var<S> concat_rows(const Var<S>&, const Var<S>&);                                                       \
    template Var<S> fit_frames(const Var<S>&, Index);                                                                \
    template Var<S> relu(const Var<S>&);                                                                             \
    template Var<S> gelu(const Var<S>&);                                                                             \
    template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                             \
    template Var<S> conv1d(const Var<S>&, const Var<S>&, const Var<S>&, const Conv1dOptions&);                       \
    template Var<S> conv1d_transposed(const Var<S>&, const Var<S>&, const Var<S>&, const ConvTranspose1dOptions&);   \
    template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&, const Conv3dOptions&);                       \
    template Var<S> conv3d_transposed(const Var<S>&, const Var<S>&, const Var<S>&, const Conv3dOptions&);            \
    template Var<S> avg_pool_hw(const Var<S>&);                                                                      \
    template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, double);                                 \
    template Var<S> grn(const Var<S>&, const Var<S>&, const Var<S>&, double);                                        \
    template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&, Tensor<S>&, bool, double,    \
                               double);                                                                              \
    template Var<S> mse_loss(const Var<S>&, const Var<S>&);                                                          \
    template Var<S> l1_loss(const Var<S>&, const Var<S>&);                                                           \
    template Var<S> straight_through(const Var<S>&, const Tensor<S>&);

VNSC_INSTANTIATE_OPS(float)
VNSC_INSTANTIATE_OPS(double)

} // namespace vnsc
