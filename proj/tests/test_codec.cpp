#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "oracles.hpp"
#include "vnsc/model.hpp"

using namespace vnsc;

namespace {

ModelConfig tiny(Scenario s, std::uint64_t seed = 1) {
    ModelConfig cfg = ModelConfig::defaults(s);
    cfg.seed = seed;
    cfg.codec.n_blocks = 3;
    cfg.codec.speech_dim = 16;
    cfg.codec.code_dim = 8;
    cfg.rvq = {.stages = 2, .entries = 16, .dim = 8};
    cfg.vision.image_size = 8;
    cfg.vision.channels = {2, 4};
    cfg.vision.post_channels = {8, 8};
    cfg.mel = {.n_fft = 128, .hop = 32, .n_mels = 16, .sample_rate = 48000, .floor = 1e-5};
    return cfg;
}

Vector<float> noise(Index n, std::uint64_t seed) {
    Rng rng(seed);
    Vector<float> x(n);
    for (Index i = 0; i < n; ++i) x[i] = static_cast<float>(0.3 * rng.normal());
    return x;
}

Tensor<double> t(const Var<double>& v) { return v.value(); }

} // namespace

TEST_CASE("scenario names") {
    CHECK(parse_scenario("va") == Scenario::va);
    CHECK(parse_scenario("vua") == Scenario::vua);
    CHECK(parse_scenario("audio-only") == Scenario::audio_only);
    CHECK(to_string(Scenario::vua) == "vua");
    CHECK_THROWS_AS(parse_scenario("VA2"), UsageError);
}

TEST_CASE("codec config validation") {
    CodecConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.fusion_index = 8;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.fusion_index = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.fusion_index = 7;
    CHECK_NOTHROW(cfg.validate());
    cfg.dw_kernel = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("MCNX block: residual identity, shape and composition oracle") {
    Rng rng(3);
    ParameterStore<double> store;
    McnxBlock<double> block(store, "b", 6, 7, 2, rng);
    // non-trivial GRN so the oracle exercises it
    block.grn_gamma.mutable_value() = oracle::random_tensor({12}, 4);
    block.grn_beta.mutable_value() = oracle::random_tensor({12}, 5);
    block.norm_gamma.mutable_value() = oracle::random_tensor({6}, 6, 0.5, 1.5);
    const Tensor<double> x = oracle::random_tensor({6, 11}, 7);
    const Tensor<double> y = block(constant(x)).value();

    const Tensor<double> b_dw = t(block.dw_bias), b1 = t(block.pw1_bias), b2 = t(block.pw2_bias);
    Tensor<double> h = oracle::conv1d(x, t(block.dw_weight), &b_dw, 1, 3, 6);
    h = oracle::layer_norm(h, t(block.norm_gamma), t(block.norm_beta), 1e-6);
    h = oracle::matmul_affine(t(block.pw1_weight), h, &b1);
    for (Index i = 0; i < h.size(); ++i) h[i] = oracle::gelu(h[i]);
    h = oracle::grn(h, t(block.grn_gamma), t(block.grn_beta), 1e-6);
    h = oracle::matmul_affine(t(block.pw2_weight), h, &b2);
    CHECK(oracle::max_abs_diff(y, Tensor<double>(x.shape(), x.vec() + h.vec())) < 1e-12);

    block.pw2_weight.mutable_value().set_zero();
    block.pw2_bias.mutable_value().set_zero();
    CHECK(block(constant(x)).value().vec() == x.vec());

    Rng rng2(4);
    ParameterStore<float> big;
    McnxBlock<float> full(big, "b", 256, 7, 2, rng2);
    CHECK(full(constant(Tensor<float>({256, 120}))).shape() == Shape{256, 120});
}

TEST_CASE("encoder and decoder shapes at default size") {
    CodecConfig cfg;
    ParameterStore<float> store;
    Rng rng(1);
    SpeechEncoder<float> enc(cfg, store, rng);
    SpeechDecoder<float> dec(cfg, store, rng);
    Rng data(2);
    const auto out = enc(constant(data.normal_tensor<float>({40, 960})));
    CHECK(out.latent.shape() == Shape{256, 120});
    CHECK(out.feature.shape() == Shape{256, 960});
    const Var<float> spec = dec(out.latent);
    CHECK(spec.shape() == Shape{40, 960});
    const Var<float> from_zero = dec(constant(Tensor<float>({256, 120})));
    CHECK(from_zero.value().all_finite());
    CHECK(from_zero.value().vec().cwiseAbs().maxCoeff() < 100.0f);
    CHECK_THROWS_AS(enc(constant(Tensor<float>({40, 961}))), ConfigError);
    CHECK_THROWS_AS(enc(constant(Tensor<float>({39, 960}))), ConfigError);
    CHECK_THROWS_AS(dec(constant(Tensor<float>({255, 10}))), ConfigError);
}

TEST_CASE("fusion hook sees block i and replaces its output") {
    CodecConfig cfg = tiny(Scenario::audio_only).codec;
    ParameterStore<double> store;
    Rng rng(5);
    SpeechEncoder<double> enc(cfg, store, rng);
    const Var<double> spec = constant(oracle::random_tensor({40, 16}, 6));
    const auto plain = enc(spec);
    int calls = 0;
    const auto hooked = enc(spec, [&](const Var<double>& x) {
        ++calls;
        CHECK(x.value().vec() == plain.feature.value().vec());
        return x;
    });
    CHECK(calls == 1);
    CHECK(hooked.latent.value().vec() == plain.latent.value().vec());
    const auto changed = enc(spec, [](const Var<double>& x) { return scale(x, 0.5); });
    CHECK(changed.latent.value().vec() != plain.latent.value().vec());
}

TEST_CASE("frame grid and bit budget arithmetic") {
    VnscModel<float> model(ModelConfig::defaults(Scenario::audio_only));
    CHECK(model.encoder_frames(12001) == 12000);
    CHECK(model.latent_frames_for_samples(480000) == 1500);
    CHECK(payload_bits(model.config().rvq, model.latent_frames_for_samples(480000)) == 60000);
    CHECK(model.samples_for_latent(1500) == 480000);
    CHECK(model.encoder_frames(26) == 32);
}

TEST_CASE("neutral fusion reproduces audio-only latents for any visual input") {
    VnscModel<float> va(tiny(Scenario::va)), audio(tiny(Scenario::audio_only));
    va.fusion()->set_pass_through();
    const Vector<float> wave = noise(640, 9);
    const Var<float> spec = constant(audio.analysis(wave));
    const Tensor<float> ref = audio.encode_features(spec, nullptr, Scenario::audio_only, false).latent.value();
    for (std::uint64_t seed : {0, 1, 2}) {
        Rng rng(seed);
        const Var<float> v = constant(seed == 0 ? Tensor<float>({8, 16}) : rng.normal_tensor<float>({8, 16}, 3.0));
        const Tensor<float> got = va.encode_features(spec, &v, Scenario::va, false).latent.value();
        CHECK(got.vec() == ref.vec());
    }
}

TEST_CASE("mode routing errors") {
    VnscModel<float> va(tiny(Scenario::va)), vua(tiny(Scenario::vua)), audio(tiny(Scenario::audio_only));
    const Vector<float> wave = noise(640, 10);
    const Tensor<float> lips({1, 16, 8, 8});
    const Tensor<float> short_lips({1, 15, 8, 8});
    CHECK_THROWS_AS(va.encode(wave, nullptr, Scenario::va), UsageError);
    CHECK_THROWS_AS(va.encode(wave, nullptr, Scenario::audio_only), UsageError);
    CHECK_THROWS_AS(va.encode(wave, &short_lips, Scenario::va), AlignmentError);
    CHECK_NOTHROW(va.encode(wave, &lips, Scenario::va));
    CHECK_THROWS_AS(vua.encode(wave, &lips, Scenario::vua), UsageError);
    CHECK_THROWS_AS(audio.encode(wave, &lips, Scenario::audio_only), UsageError);
    CHECK_THROWS_AS(audio.encode(wave, nullptr, Scenario::vua), UsageError);
    CHECK_THROWS_AS(va.forward(wave, nullptr, true), UsageError);
    CHECK_THROWS_AS(vua.forward(wave, &short_lips, true), AlignmentError);
}

TEST_CASE("VUA inference touches no visual data and equals audio-only") {
    VnscModel<float> vua(tiny(Scenario::vua, 7)), audio(tiny(Scenario::audio_only, 7));
    const Vector<float> wave = noise(2000, 11);
    const std::uint64_t before = visual_op_count();
    const CodeIndices a = vua.encode(wave, nullptr, Scenario::vua);
    const CodeIndices b = vua.encode(wave, nullptr, Scenario::audio_only);
    const CodeIndices c = audio.encode(wave, nullptr, Scenario::audio_only);
    const Vector<float> wa = vua.decode(a), wc = audio.decode(c);
    CHECK(visual_op_count() == before);
    CHECK(a == b);
    CHECK(a == c);
    CHECK(wa == wc);
    // a training pass does use the visual path
    const Tensor<float> lips({1, vua.encoder_frames_for_samples(2000), 8, 8});
    vua.forward(wave, &lips, true);
    CHECK(visual_op_count() > before);
}

TEST_CASE("encode/decode shapes and determinism") {
    VnscModel<float> model(tiny(Scenario::audio_only));
    const Vector<float> wave = noise(4000, 12);
    const CodeIndices idx = model.encode(wave, nullptr, Scenario::audio_only);
    CHECK(idx.stages == 2);
    CHECK(idx.frames == model.latent_frames_for_samples(4000));
    const Vector<float> out = model.decode(idx);
    CHECK(out.size() == model.samples_for_latent(idx.frames));
    CHECK(out.size() >= 4000);
    CHECK(model.decode(model.encode(wave, nullptr, Scenario::audio_only)) == out);
    const Tensor<float> spec = model.decode_spectrum(idx);
    CHECK(spec.shape() == Shape{40, idx.frames * 8});
}

TEST_CASE("forward pass report") {
    VnscModel<double> model(tiny(Scenario::vua));
    const Vector<double> wave = noise(640, 13).cast<double>();
    Rng rng(14);
    const Tensor<double> lips = rng.uniform_tensor<double>({1, 16, 8, 8}, 0.0, 1.0);
    const auto pass = model.forward(wave, &lips, true);
    const LossReport& r = pass.report;
    CHECK(r.l_mdct > 0);
    CHECK(r.l_mel > 0);
    CHECK(r.l_quant > 0);
    CHECK(r.l_image > 0);
    CHECK(r.l_distill >= std::log1p(std::exp(-1.0)) - 1e-12);
    CHECK(r.total == doctest::Approx(composite_loss_vua(r, 0.5e-5, 1.0)).epsilon(1e-12));
    CHECK(pass.terms.size() == 5);
    const auto audio_pass = VnscModel<double>(tiny(Scenario::audio_only)).forward(wave, nullptr, true);
    CHECK(audio_pass.report.l_image == 0.0);
    CHECK(audio_pass.terms.size() == 3);
}
