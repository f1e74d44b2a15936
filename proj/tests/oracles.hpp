// Direct-definition reference implementations used as test oracles. They
// share nothing with the library kernels beyond the Tensor container.
#ifndef VNSC_TESTS_ORACLES_HPP
#define VNSC_TESTS_ORACLES_HPP

#include <cmath>
#include <vector>

#include "vnsc/rng.hpp"
#include "vnsc/tensor.hpp"

namespace oracle {

using vnsc::Index;
using vnsc::Tensor;

inline Tensor<double> random_tensor(vnsc::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    vnsc::Rng rng(seed);
    return rng.uniform_tensor<double>(std::move(shape), lo, hi);
}

// y[o, t] = b[o] + sum_{i in group(o), k} w[o, i, k] * x[g*cin_g + i, t*s + k - p]
inline Tensor<double> conv1d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, Index stride,
                             Index pad, Index groups) {
    const Index cin = x.dim(0), n = x.dim(1), cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
    const Index cout_g = cout / groups;
    const Index n_out = (n + 2 * pad - k) / stride + 1;
    Tensor<double> y({cout, n_out});
    (void)cin;
    for (Index o = 0; o < cout; ++o) {
        const Index g = o / cout_g;
        for (Index t = 0; t < n_out; ++t) {
            double acc = b ? (*b)[o] : 0.0;
            for (Index i = 0; i < cin_g; ++i)
                for (Index j = 0; j < k; ++j) {
                    const Index src = t * stride + j - pad;
                    if (src < 0 || src >= n) continue;
                    acc += w[(o * cin_g + i) * k + j] * x[(g * cin_g + i) * n + src];
                }
            y[o * n_out + t] = acc;
        }
    }
    return y;
}

inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                             std::array<Index, 3> s, std::array<Index, 3> p) {
    const Index cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    const Index To = (T + 2 * p[0] - kt) / s[0] + 1, Ho = (H + 2 * p[1] - kh) / s[1] + 1,
                Wo = (W + 2 * p[2] - kw) / s[2] + 1;
    Tensor<double> y({cout, To, Ho, Wo});
    for (Index o = 0; o < cout; ++o)
        for (Index t = 0; t < To; ++t)
            for (Index h = 0; h < Ho; ++h)
                for (Index v = 0; v < Wo; ++v) {
                    double acc = b ? (*b)[o] : 0.0;
                    for (Index c = 0; c < cin; ++c)
                        for (Index a = 0; a < kt; ++a)
                            for (Index bb = 0; bb < kh; ++bb)
                                for (Index d = 0; d < kw; ++d) {
                                    const Index ti = t * s[0] + a - p[0], hi = h * s[1] + bb - p[1],
                                                wi = v * s[2] + d - p[2];
                                    if (ti < 0 || ti >= T || hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                                    acc += w[(((o * cin + c) * kt + a) * kh + bb) * kw + d] *
                                           x[((c * T + ti) * H + hi) * W + wi];
                                }
                    y[((o * To + t) * Ho + h) * Wo + v] = acc;
                }
    return y;
}

inline Tensor<double> avg_pool_hw(const Tensor<double>& x) {
    const Index C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<double> y({C, T, H / 2, W / 2});
    for (Index c = 0; c < C; ++c)
        for (Index t = 0; t < T; ++t)
            for (Index h = 0; h < H / 2; ++h)
                for (Index w = 0; w < W / 2; ++w) {
                    double acc = 0;
                    for (Index a = 0; a < 2; ++a)
                        for (Index b = 0; b < 2; ++b) acc += x[((c * T + t) * H + 2 * h + a) * W + 2 * w + b];
                    y[((c * T + t) * (H / 2) + h) * (W / 2) + w] = acc / 4.0;
                }
    return y;
}

inline Tensor<double> matmul_affine(const Tensor<double>& w, const Tensor<double>& x, const Tensor<double>* b) {
    const Index dout = w.dim(0), din = w.dim(1), n = x.dim(1);
    Tensor<double> y({dout, n});
    for (Index o = 0; o < dout; ++o)
        for (Index t = 0; t < n; ++t) {
            double acc = b ? (*b)[o] : 0.0;
            for (Index i = 0; i < din; ++i) acc += w[o * din + i] * x[i * n + t];
            y[o * n + t] = acc;
        }
    return y;
}

inline Tensor<double> layer_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                                 double eps) {
    const Index d = x.dim(0), n = x.dim(1);
    Tensor<double> y({d, n});
    for (Index t = 0; t < n; ++t) {
        double mu = 0;
        for (Index c = 0; c < d; ++c) mu += x[c * n + t];
        mu /= d;
        double var = 0;
        for (Index c = 0; c < d; ++c) var += (x[c * n + t] - mu) * (x[c * n + t] - mu);
        var /= d;
        for (Index c = 0; c < d; ++c) y[c * n + t] = (x[c * n + t] - mu) / std::sqrt(var + eps) * gamma[c] + beta[c];
    }
    return y;
}

inline Tensor<double> grn(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta, double eps) {
    const Index d = x.dim(0), n = x.dim(1);
    std::vector<double> energy(d, 0.0);
    double mean_energy = 0;
    for (Index c = 0; c < d; ++c) {
        double ss = 0;
        for (Index t = 0; t < n; ++t) ss += x[c * n + t] * x[c * n + t];
        energy[c] = std::sqrt(ss);
        mean_energy += energy[c] / d;
    }
    Tensor<double> y({d, n});
    for (Index c = 0; c < d; ++c)
        for (Index t = 0; t < n; ++t)
            y[c * n + t] = gamma[c] * x[c * n + t] * (energy[c] / (mean_energy + eps)) + beta[c] + x[c * n + t];
    return y;
}

inline double gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

} // namespace oracle

#endif // VNSC_TESTS_ORACLES_HPP
