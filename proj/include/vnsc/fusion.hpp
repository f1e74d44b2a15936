#ifndef VNSC_FUSION_HPP
#define VNSC_FUSION_HPP

#include <optional>
#include <string>

#include "vnsc/codec.hpp"
#include "vnsc/vision.hpp"

namespace vnsc {

inline constexpr double distillation_eps = 1e-6;

/// Concatenates X_i [D_s, N] and V [D_v, N] and maps back to D_s with a linear layer.
template <typename S>
class FusionLayer {
public:
    FusionLayer(ParameterStore<S>& store, Index speech_dim, Index visual_dim, Rng& rng,
                const std::string& prefix = "fusion");
    Var<S> operator()(const Var<S>& speech, const Var<S>& visual) const;
    /// Weight [I | 0], bias 0: the output equals the speech feature.
    void set_pass_through();

    Var<S> weight, bias;
};

/// log(1 + exp(-tr(X^T Y) / (max(|X|_F, eps) * max(|Y|_F, eps)))), reduced in double.
template <typename S>
Var<S> distillation_loss(const Var<S>& x, const Var<S>& x_tilde, double eps = distillation_eps);

template <typename S>
struct FusionStep {
    Var<S> next;                     // input of block i+1
    std::optional<Var<S>> distill;   // L_D, VUA training only
};

/// VA: next = fuse(x, v). VUA training: next = x and L_D(x, fuse(x, v)).
/// VUA inference and audio-only: next = x, visual data is never touched.
template <typename S>
FusionStep<S> apply_fusion_strategy(Scenario mode, bool training, const Var<S>& x, const Var<S>* visual,
                                    const FusionLayer<S>* fusion);

} // namespace vnsc

#endif // VNSC_FUSION_HPP
