#ifndef VNSC_GRADCHECK_HPP
#define VNSC_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "vnsc/autograd.hpp"

namespace vnsc {

struct GradCheckOptions {
    double step = 1e-3;
    double rel_tol = 1e-3;
    // Denominator floor: max(|analytic|, |numeric|, scale_floor).
    double scale_floor = 1e-6;
    // Combine central differences at h and h/2 (Richardson), cancelling the h^2 term.
    bool richardson = true;
    // Piecewise-smooth functions (ReLU): a coordinate whose h and h/2 central
    // differences disagree by more than rel_tol straddles a kink. Such
    // coordinates are listed in `excluded` instead of failing.
    bool allow_nonsmooth = false;
};

struct GradCheckFailure {
    std::string name;
    Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    Index checked = 0;
    double max_rel_error = 0.0;
    std::string worst;
    std::vector<GradCheckFailure> failures;
    std::vector<std::string> excluded;

    bool passed() const { return failures.empty(); }

    std::string summary() const {
        std::ostringstream os;
        os << "checked=" << checked << " max_rel_error=" << max_rel_error << " worst=" << worst
           << " failures=" << failures.size() << " excluded=" << excluded.size();
        for (std::size_t i = 0; i < std::min<std::size_t>(failures.size(), 10); ++i) {
            const auto& f = failures[i];
            os << "\n  " << f.name << "[" << f.index << "] analytic=" << f.analytic << " numeric=" << f.numeric
               << " rel=" << f.rel_error;
        }
        return os.str();
    }
};

template <typename S>
struct NamedInput {
    std::string name;
    Var<S> var;
};

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// scalar of `inputs` against central finite differences. `f` must read the
/// inputs' current values on every call.
template <typename S>
GradCheckReport check_gradients(const std::function<Var<S>()>& f, const std::vector<NamedInput<S>>& inputs,
                                const GradCheckOptions& opts = {}) {
    for (auto in : inputs) in.var.zero_grad();
    {
        Var<S> root = f();
        backward(root);
    }
    std::vector<Tensor<S>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& in : inputs) {
        analytic.push_back(in.var.has_grad() ? in.var.grad() : Tensor<S>(in.var.shape()));
    }

    NoGradGuard no_grad;
    auto eval = [&f]() { return static_cast<double>(f().item()); };

    GradCheckReport report;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        Var<S> var = inputs[p].var;
        auto& value = var.mutable_value();
        for (Index i = 0; i < value.size(); ++i) {
            const S original = value[i];
            auto central = [&](double h) {
                value[i] = static_cast<S>(original + h);
                const double up = eval();
                value[i] = static_cast<S>(original - h);
                const double down = eval();
                value[i] = original;
                return (up - down) / (2.0 * h);
            };
            const double d1 = central(opts.step);
            double numeric = d1;
            double spread = 0.0;
            if (opts.richardson || opts.allow_nonsmooth) {
                const double d2 = central(0.5 * opts.step);
                spread = std::abs(d1 - d2) / std::max({std::abs(d1), std::abs(d2), opts.scale_floor});
                if (opts.richardson) numeric = (4.0 * d2 - d1) / 3.0;
            }
            const double a = static_cast<double>(analytic[p][i]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.scale_floor});
            ++report.checked;
            if (rel > opts.rel_tol && opts.allow_nonsmooth && spread > opts.rel_tol) {
                report.excluded.push_back(inputs[p].name + "[" + std::to_string(i) + "] (non-smooth point)");
                continue;
            }
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = inputs[p].name + "[" + std::to_string(i) + "]";
            }
            if (rel > opts.rel_tol) report.failures.push_back({inputs[p].name, i, a, numeric, rel});
        }
    }
    return report;
}

} // namespace vnsc

#endif // VNSC_GRADCHECK_HPP
