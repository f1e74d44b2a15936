#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "vnsc/fusion.hpp"
#include "vnsc/gradcheck.hpp"

using namespace vnsc;

namespace {

const double lo_bound = std::log1p(std::exp(-1.0));
const double hi_bound = std::log1p(std::exp(1.0));

double ld(const Tensor<double>& x, const Tensor<double>& y) {
    return distillation_loss(constant(x), constant(y)).item();
}

} // namespace

TEST_CASE("fuse dimensions and pass-through") {
    ParameterStore<float> store;
    Rng rng(1);
    FusionLayer<float> fusion(store, 256, 64, rng);
    CHECK(fusion.weight.shape() == Shape{256, 320});
    CHECK(fusion.bias.shape() == Shape{256});
    Rng data(2);
    const Var<float> x = constant(data.normal_tensor<float>({256, 10}));
    const Var<float> v = constant(data.normal_tensor<float>({64, 10}));
    CHECK(fusion(x, v).shape() == Shape{256, 10});
    fusion.set_pass_through();
    CHECK(fusion(x, v).value().vec() == x.value().vec());
    CHECK_THROWS_AS(fusion(x, constant(Tensor<float>({64, 9}))), AlignmentError);
}

TEST_CASE("fuse matches concat + matmul oracle and is linear") {
    ParameterStore<double> store;
    Rng rng(3);
    FusionLayer<double> fusion(store, 4, 2, rng);
    const Tensor<double> x = oracle::random_tensor({4, 5}, 4), v = oracle::random_tensor({2, 5}, 5);
    Tensor<double> cat({6, 5});
    cat.matrix().topRows(4) = x.matrix();
    cat.matrix().bottomRows(2) = v.matrix();
    const Tensor<double> b = fusion.bias.value();
    const Tensor<double> ref = oracle::matmul_affine(fusion.weight.value(), cat, &b);
    CHECK(oracle::max_abs_diff(fusion(constant(x), constant(v)).value(), ref) < 1e-14);

    // superposition on the bias-free part
    fusion.bias.mutable_value().set_zero();
    const Tensor<double> x2 = oracle::random_tensor({4, 5}, 6), v2 = oracle::random_tensor({2, 5}, 7);
    const auto f = [&](const Tensor<double>& a, const Tensor<double>& c) {
        return fusion(constant(a), constant(c)).value().vec();
    };
    const Vector<double> lhs = f(Tensor<double>(x.shape(), 2.0 * x.vec() + x2.vec()),
                                 Tensor<double>(v.shape(), 2.0 * v.vec() + v2.vec()));
    CHECK((lhs - (2.0 * f(x, v) + f(x2, v2))).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("distillation loss closed forms") {
    const Tensor<double> x = oracle::random_tensor({6, 7}, 8);
    Tensor<double> neg = x;
    neg.vec() = -x.vec();
    CHECK(std::abs(ld(x, x) - lo_bound) < 1e-9);
    CHECK(std::abs(ld(x, neg) - hi_bound) < 1e-9);
    CHECK(std::abs(lo_bound - 0.3132617) < 1e-7);
    CHECK(std::abs(hi_bound - 1.3132617) < 1e-7);

    Tensor<double> a({2, 2}), b({2, 2});
    a.vec() << 1, 0, 0, 1;
    b.vec() << 0, 1, 1, 0; // tr(a^T b) = 0
    CHECK(std::abs(ld(a, b) - std::log(2.0)) < 1e-9);
    CHECK(std::abs(ld(Tensor<double>({3, 3}), Tensor<double>({3, 3})) - std::log(2.0)) < 1e-12);

    // float inputs are reduced in double
    const Tensor<float> xf = x.cast<float>();
    CHECK(std::abs(distillation_loss(constant(xf), constant(xf)).item() - lo_bound) < 1e-7);
}

TEST_CASE("distillation loss bounds, scale invariance and symmetry") {
    Rng rng(9);
    for (int trial = 0; trial < 2000; ++trial) {
        const Index d = 1 + rng.below(6), n = 1 + rng.below(6);
        const Tensor<double> x = rng.normal_tensor<double>({d, n}), y = rng.normal_tensor<double>({d, n});
        const double v = ld(x, y);
        REQUIRE(v >= lo_bound - 1e-12);
        REQUIRE(v <= hi_bound + 1e-12);
        CHECK(std::abs(ld(y, x) - v) < 1e-15);
        const double a = rng.uniform(0.01, 100.0), c = rng.uniform(0.01, 100.0);
        CHECK(std::abs(ld(Tensor<double>(x.shape(), a * x.vec()), Tensor<double>(y.shape(), c * y.vec())) - v) < 1e-9);
    }
}

TEST_CASE("distillation loss gradient") {
    Var<double> x(oracle::random_tensor({8, 6}, 10), true), y(oracle::random_tensor({8, 6}, 11), true);
    auto f = [&] { return distillation_loss(x, y); };
    const auto report = check_gradients<double>(f, {{"x", x}, {"x_tilde", y}}, {.rel_tol = 1e-4});
    CHECK_MESSAGE(report.passed(), report.summary());
    CHECK_THROWS_AS(distillation_loss(x, constant(Tensor<double>({6, 8}))), ConfigError);
}

TEST_CASE("fusion strategy routing") {
    ParameterStore<double> store;
    Rng rng(12);
    FusionLayer<double> fusion(store, 4, 2, rng);
    const Var<double> x = constant(oracle::random_tensor({4, 3}, 13));
    const Var<double> v = constant(oracle::random_tensor({2, 3}, 14));

    const auto va = apply_fusion_strategy<double>(Scenario::va, false, x, &v, &fusion);
    CHECK(va.next.value().vec() == fusion(x, v).value().vec());
    CHECK_FALSE(va.distill.has_value());
    CHECK_THROWS_AS(apply_fusion_strategy<double>(Scenario::va, false, x, nullptr, &fusion), UsageError);

    const std::uint64_t before = visual_op_count();
    const auto vua_inf = apply_fusion_strategy<double>(Scenario::vua, false, x, &v, &fusion);
    const auto audio = apply_fusion_strategy<double>(Scenario::audio_only, true, x, &v, &fusion);
    CHECK(visual_op_count() == before);
    CHECK(vua_inf.next.value().vec() == x.value().vec());
    CHECK_FALSE(vua_inf.distill.has_value());
    CHECK(audio.next.value().vec() == x.value().vec());

    const auto vua = apply_fusion_strategy<double>(Scenario::vua, true, x, &v, &fusion);
    CHECK(vua.next.value().vec() == x.value().vec());
    REQUIRE(vua.distill.has_value());
    CHECK(vua.distill->item() == doctest::Approx(distillation_loss(x, fusion(x, v)).item()));
    CHECK_THROWS_AS(apply_fusion_strategy<double>(Scenario::vua, true, x, nullptr, &fusion), UsageError);

    fusion.set_pass_through();
    CHECK(apply_fusion_strategy<double>(Scenario::va, false, x, &v, &fusion).next.value().vec() == x.value().vec());
}
