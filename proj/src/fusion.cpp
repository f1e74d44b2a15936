#include "vnsc/fusion.hpp"

#include <cmath>

namespace vnsc {

template <typename S>
FusionLayer<S>::FusionLayer(ParameterStore<S>& store, Index speech_dim, Index visual_dim, Rng& rng,
                            const std::string& prefix) {
    const Index fan_in = speech_dim + visual_dim;
    weight = store.add_uniform(prefix + ".linear.weight", {speech_dim, fan_in}, fan_in, rng);
    bias = store.add_uniform(prefix + ".linear.bias", {speech_dim}, fan_in, rng);
}

template <typename S>
Var<S> FusionLayer<S>::operator()(const Var<S>& speech, const Var<S>& visual) const {
    if (speech.dim(1) != visual.dim(1)) {
        throw AlignmentError("speech feature has " + std::to_string(speech.dim(1)) + " frames, visual feature " +
                             std::to_string(visual.dim(1)));
    }
    note_visual_op();
    return linear(concat_rows(speech, visual), weight, bias);
}

template <typename S>
void FusionLayer<S>::set_pass_through() {
    auto w = weight.mutable_value().matrix();
    w.setZero();
    w.leftCols(w.rows()).setIdentity();
    bias.mutable_value().set_zero();
}

template <typename S>
Var<S> distillation_loss(const Var<S>& x, const Var<S>& y, double eps) {
    if (x.shape() != y.shape()) {
        throw ConfigError("distillation loss: shape " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
    }
    const Eigen::VectorXd xd = x.value().vec().template cast<double>();
    const Eigen::VectorXd yd = y.value().vec().template cast<double>();
    const double trace = xd.dot(yd);
    const double nx = xd.norm(), ny = yd.norm();
    const double a = std::max(nx, eps), b = std::max(ny, eps);
    const double r = trace / (a * b);
    // softplus(-r) = log1p(exp(-r)); r is bounded by 1 in magnitude, no overflow
    Tensor<S> out = Tensor<S>::constant({1}, static_cast<S>(std::log1p(std::exp(-r))));
    return make_result<S>(std::move(out), {x, y}, [x, y, xd, yd, trace, nx, ny, a, b, r, eps](const Tensor<S>& g) {
        const double dr = -static_cast<double>(g[0]) / (1.0 + std::exp(r));
        if (x.requires_grad()) {
            Eigen::VectorXd gx = yd / (a * b);
            if (nx >= eps) gx -= trace / (a * a * b) * xd / nx;
            x.accumulate((dr * gx).template cast<S>());
        }
        if (y.requires_grad()) {
            Eigen::VectorXd gy = xd / (a * b);
            if (ny >= eps) gy -= trace / (a * b * b) * yd / ny;
            y.accumulate((dr * gy).template cast<S>());
        }
    });
}

template <typename S>
FusionStep<S> apply_fusion_strategy(Scenario mode, bool training, const Var<S>& x, const Var<S>* visual,
                                    const FusionLayer<S>* fusion) {
    FusionStep<S> step;
    switch (mode) {
    case Scenario::va:
        if (!visual || !*visual) throw UsageError("VA mode requires a visual feature");
        if (!fusion) throw UsageError("VA mode requires a fusion layer");
        step.next = (*fusion)(x, *visual);
        return step;
    case Scenario::vua:
        step.next = x;
        if (training) {
            if (!visual || !*visual) throw UsageError("VUA training requires a visual feature");
            if (!fusion) throw UsageError("VUA training requires a fusion layer");
            step.distill = distillation_loss(x, (*fusion)(x, *visual));
        }
        return step;
    case Scenario::audio_only:
        step.next = x;
        return step;
    }
    throw UsageError("unknown scenario");
}

template class FusionLayer<float>;
template class FusionLayer<double>;
template Var<float> distillation_loss(const Var<float>&, const Var<float>&, double);
template Var<double> distillation_loss(const Var<double>&, const Var<double>&, double);
template FusionStep<float> apply_fusion_strategy(Scenario, bool, const Var<float>&, const Var<float>*,
                                                 const FusionLayer<float>*);
template FusionStep<double> apply_fusion_strategy(Scenario, bool, const Var<double>&, const Var<double>*,
                                                  const FusionLayer<double>*);

} // namespace vnsc
