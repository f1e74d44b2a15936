#ifndef VNSC_OPS_HPP
#define VNSC_OPS_HPP

#include <array>
#include <vector>

#include "vnsc/autograd.hpp"

// Differentiable primitives. Feature maps are channel-first: [C, N] for
// sequences and [C, T, H, W] for image stacks. A default-constructed Var
// passed as a bias means "no bias".

namespace vnsc {

struct Conv1dOptions {
    Index stride = 1;
    Index padding = 0;
    Index groups = 1;
};

struct ConvTranspose1dOptions {
    Index stride = 1;
    Index padding = 0;
    Index output_padding = 0;
};

struct Conv3dOptions {
    std::array<Index, 3> stride{1, 1, 1};
    std::array<Index, 3> padding{0, 0, 0};
    std::array<Index, 3> output_padding{0, 0, 0}; // transposed only
};

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);

/// sum_i weights[i] * terms[i] over one-element variables.
template <typename S> Var<S> weighted_sum(const std::vector<Var<S>>& terms, const std::vector<double>& weights);

template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
template <typename S> Var<S> transpose(const Var<S>& a);
template <typename S> Var<S> concat_rows(const Var<S>& top, const Var<S>& bottom);

/// Keeps the first `frames` columns of a [C, N] map, zero-padding when N < frames.
template <typename S> Var<S> fit_frames(const Var<S>& a, Index frames);

template <typename S> Var<S> relu(const Var<S>& x);

/// Exact GELU, x * Phi(x).
template <typename S> Var<S> gelu(const Var<S>& x);

/// Per-frame affine map: weight [D_out, D_in] times x [D_in, N] plus bias [D_out].
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

/// x [C_in, N], weight [C_out, C_in/groups, K].
template <typename S>
Var<S> conv1d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv1dOptions& opts);

/// x [C_in, N], weight [C_in, C_out, K]; output length (N-1)*stride - 2*padding + K + output_padding.
/// Shares weight layout with conv1d so that the two are adjoint.
template <typename S>
Var<S> conv1d_transposed(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
                         const ConvTranspose1dOptions& opts);

/// x [C_in, T, H, W], weight [C_out, C_in, kT, kH, kW].
template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv3dOptions& opts);

/// x [C_in, T, H, W], weight [C_in, C_out, kT, kH, kW].
template <typename S>
Var<S> conv3d_transposed(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const Conv3dOptions& opts);

/// 2x2 mean pooling over the two trailing (height, width) axes.
template <typename S> Var<S> avg_pool_hw(const Var<S>& x);

/// Normalizes each frame of x [D, N] across its D channels.
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-6);

/// Global response normalization over x [D, N]:
///   G_d = ||x_d||_2 over frames, N_d = G_d / (mean_d G_d + eps),
///   y = gamma * (x * N) + beta + x.
template <typename S>
Var<S> grn(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-6);

/// Batch normalization with per-channel statistics over every axis but the
/// first. In training mode the running statistics are updated in place.
template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Tensor<S>& running_mean,
                  Tensor<S>& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

template <typename S> Var<S> mse_loss(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> l1_loss(const Var<S>& a, const Var<S>& b);

/// Forward value x + offset, gradient passed to x unchanged.
template <typename S> Var<S> straight_through(const Var<S>& x, const Tensor<S>& offset);

} // namespace vnsc

#endif // VNSC_OPS_HPP
