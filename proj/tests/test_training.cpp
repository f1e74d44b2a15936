#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>

#include "vnsc/gradcheck.hpp"
#include "vnsc/training.hpp"

using namespace vnsc;

namespace {

ModelConfig mini(Scenario s, std::uint64_t seed = 3) {
    ModelConfig cfg = ModelConfig::defaults(s);
    cfg.seed = seed;
    cfg.codec.n_blocks = 2;
    cfg.codec.speech_dim = 16;
    cfg.codec.code_dim = 8;
    cfg.codec.fusion_index = 1;
    cfg.rvq = {.stages = 2, .entries = 8, .dim = 8};
    cfg.vision.image_size = 8;
    cfg.vision.channels = {2, 4};
    cfg.vision.post_channels = {8, 8};
    cfg.mel = {.n_fft = 128, .hop = 32, .n_mels = 16, .sample_rate = 48000, .floor = 1e-5};
    return cfg;
}

TrainConfig quick_train() {
    TrainConfig t;
    t.batch_size = 2;
    t.crop_frames = 32;
    t.lr = 2e-3;
    return t;
}

Dataset toy(Index utts, Index image, std::uint64_t seed = 9) {
    return make_toy_dataset(seed, {.utterances = utts, .duration = 0.1, .image_size = image});
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("vnsc_training_" + name);
    std::filesystem::remove_all(p);
    return p;
}

bool same_parameters(const VnscModel<float>& a, const VnscModel<float>& b) {
    const auto& pa = a.parameters().all();
    const auto& pb = b.parameters().all();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i].var.value().vec() != pb[i].var.value().vec()) return false;
    return true;
}

} // namespace

TEST_CASE("composite losses are the stated weighted sums") {
    const LossReport parts{.l_mdct = 1.0, .l_mel = 0.5, .l_quant = 0.1, .l_image = 2.0, .l_distill = 0.7};
    CHECK(codec_loss(parts) == doctest::Approx(1.6).epsilon(1e-15));
    CHECK(composite_loss_va(parts, 1e-5) == doctest::Approx(1.6 + 2e-5).epsilon(1e-15));
    CHECK(composite_loss_va(parts, 0.0) == codec_loss(parts));
    CHECK(composite_loss_vua(parts, 1e-5, 0.0) == composite_loss_va(parts, 1e-5));
    CHECK(composite_loss_vua(parts, 0.5e-5, 1.0) == doctest::Approx(1.6 + 1e-5 + 0.7).epsilon(1e-15));
    CHECK(composite_loss_vua(LossReport{}, 0.5e-5, 1.0) == 0.0);
}

TEST_CASE("config parsing, defaults and echo") {
    const Config va = parse_config("scenario = va\nlr=0.001 # faster\n\nrvq_q=2\nrvq_k=512\n");
    CHECK(va.model.scenario == Scenario::va);
    CHECK(va.model.lambda_image == 1e-5);
    CHECK(va.model.lambda_distill == 0.0);
    CHECK(va.train.lr == 0.001);
    CHECK(va.model.rvq.stages == 2);
    CHECK(va.model.rvq.entries == 512);
    CHECK(va.train.weight_decay == 0.01);
    CHECK(va.train.batch_size == 4);
    CHECK(va.train.crop_frames == 960);

    const Config vua = parse_config("scenario=vua\n");
    CHECK(vua.model.lambda_image == 0.5e-5);
    CHECK(vua.model.lambda_distill == 1.0);
    // explicit weights win over scenario defaults regardless of line order
    CHECK(parse_config("lambda_d=0.25\nscenario=vua\n").model.lambda_distill == 0.25);
    // override replaces the file's scenario, defaults follow it
    const Config over = parse_config("scenario=va\n", Scenario::vua);
    CHECK(over.model.scenario == Scenario::vua);
    CHECK(over.model.lambda_distill == 1.0);

    const Config custom = parse_config("scenario=vua\ncode_dim=64\nimage_size=16\nvision_channels=4,8,8\n"
                                       "vision_post_channels=16,8\nseed=77\nlambda_i=3.25e-6\n");
    CHECK(custom.model.rvq.dim == 64);
    CHECK(custom.model.vision.visual_dim() == 8);
    const Config echoed = parse_config(echo_config(custom));
    CHECK(echo_config(echoed) == echo_config(custom));
    CHECK(echoed.model.lambda_image == 3.25e-6);
    CHECK(echoed.model.seed == 77);
    CHECK(echo_config(custom).find("w_mel=1\n") != std::string::npos);

    CHECK_THROWS_AS(parse_config("learning_rate=1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lr=1\nlr=2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lr=fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("just a line\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("scenario=audiovisual\n"), UsageError);
    CHECK_THROWS_AS(parse_config("fusion_index=9\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("scenario=va\nimage_size=32\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("batch_size=0\n"), ConfigError);
}

TEST_CASE("AdamW matches a scalar hand computation") {
    ParameterStore<double> store;
    Var<double> p = store.add("p", Tensor<double>::constant({1}, 1.0));
    store.add("buffer", Tensor<double>::constant({1}, 5.0), false);
    AdamW<double> opt(store, 0.8, 0.99, 1e-8, 0.01);
    const double lr = 0.1;
    double ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const double g = 2.0 * ref; // d/dp p^2
        store.zero_grad();
        backward(mse_loss(p, constant(Tensor<double>::constant({1}, 0.0))));
        opt.step(store, lr);
        m = 0.8 * m + 0.2 * g;
        v = 0.99 * v + 0.01 * g * g;
        const double m_hat = m / (1 - std::pow(0.8, t)), v_hat = v / (1 - std::pow(0.99, t));
        ref = ref - lr * 0.01 * ref - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
        CHECK(p.value()[0] == doctest::Approx(ref).epsilon(1e-14));
    }
    CHECK(store.get("buffer").value()[0] == 5.0);
    CHECK(opt.steps() == 3);

    AdamW<double> copy(store, 0.8, 0.99, 1e-8, 0.01);
    copy.import_state(opt.export_state());
    CHECK(copy.steps() == 3);
    CHECK(copy.export_state()[1].second.vec() == opt.export_state()[1].second.vec());
    NamedTensors bad = opt.export_state();
    bad[1].first = "q.m";
    CHECK_THROWS_AS(copy.import_state(bad), FormatError);
}

TEST_CASE("toy dataset is seeded and lip opening tracks loudness") {
    const Dataset a = make_toy_dataset(5, {.utterances = 3, .duration = 1.0, .image_size = 16});
    const Dataset b = make_toy_dataset(5, {.utterances = 3, .duration = 1.0, .image_size = 16});
    const Dataset c = make_toy_dataset(6, {.utterances = 3, .duration = 1.0, .image_size = 16});
    REQUIRE(a.size() == 3);
    CHECK(a[0].wave.samples == b[0].wave.samples);
    CHECK(a[2].lips.pixels == b[2].lips.pixels);
    CHECK(a[0].wave.samples != c[0].wave.samples);
    for (const auto& u : a) {
        CHECK(u.wave.size() == 48000);
        CHECK(u.wave.sample_rate == 48000);
        CHECK(u.wave.samples.cwiseAbs().maxCoeff() <= 1.0f);
        CHECK(u.lips.frames == 60);
        CHECK(u.lips.height == 16);
        CHECK(u.lips.width == 16);
        CHECK(u.lips.pixels.size() == 60u * 16u * 16u);

        // Pearson correlation of per-frame RMS and measured mouth opening
        const Vector<double> aperture = lip_aperture(u.lips);
        Vector<double> rms(u.lips.frames);
        for (Index f = 0; f < u.lips.frames; ++f)
            rms[f] = std::sqrt(u.wave.samples.segment(f * 800, 800).cast<double>().squaredNorm() / 800.0);
        const Vector<double> x = aperture.array() - aperture.mean(), y = rms.array() - rms.mean();
        const double r = x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm());
        MESSAGE(u.name << " aperture-amplitude correlation " << r);
        CHECK(r > 0.5);
    }
}

TEST_CASE("full-model gradient check on a miniature VUA codec") {
    VnscModel<double> model(mini(Scenario::vua));
    ParameterStore<double>& store = model.parameters();
    // quantizer with nonzero codewords so every stage contributes
    Rng rng(11);
    {
        Vector<double> wave = rng.normal_tensor<double>({15 * 40}, 0.3).vec();
        NoGradGuard no_grad;
        const Tensor<double> lips = rng.uniform_tensor<double>({1, 16, 8, 8}, 0.0, 1.0);
        const auto pass = model.forward(wave, &lips, false);
        Rng init(12);
        model.quantizer().initialize(pass.latent.value(), init);
    }
    const Vector<double> wave = rng.normal_tensor<double>({15 * 40}, 0.3).vec();
    const Tensor<double> lips = rng.uniform_tensor<double>({1, 16, 8, 8}, 0.0, 1.0);
    CHECK(model.encoder_frames_for_samples(wave.size()) == 16);

    QuantizerFreeze<double> freeze;
    auto f = [&]() { return model.forward(wave, &lips, true, &freeze).total; };
    {
        NoGradGuard no_grad;
        const auto pass = model.forward(wave, &lips, true, &freeze);
        CHECK(pass.report.l_distill > 0.0);
        CHECK(pass.report.l_image > 0.0);
        CHECK(pass.report.total ==
              doctest::Approx(composite_loss_vua(pass.report, 0.5e-5, 1.0)).epsilon(1e-12));
    }

    std::vector<NamedInput<double>> inputs;
    for (const auto& p : store.all())
        if (p.trainable) inputs.push_back({p.name, p.var});
    GradCheckOptions opts;
    opts.step = 1e-5;
    opts.allow_nonsmooth = true;
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport report = check_gradients<double>(f, inputs, opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MESSAGE("parameters " << inputs.size() << ", " << report.summary() << ", " << secs << " s");
    for (const auto& e : report.excluded) MESSAGE("excluded " << e);
    CHECK(report.checked == store.scalar_count());
    CHECK(report.passed());
    CHECK(report.excluded.size() * 100 < static_cast<std::size_t>(report.checked));
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
    const Dataset data = toy(3, 8);
    auto run = [&](Index steps) {
        auto model = std::make_unique<VnscModel<float>>(mini(Scenario::va));
        Trainer trainer(*model, quick_train(), data);
        std::vector<double> totals;
        for (Index i = 0; i < steps; ++i) totals.push_back(trainer.step().total);
        return std::make_pair(std::move(model), totals);
    };
    const auto [m1, a] = run(15);
    const auto [m2, b] = run(15);
    CHECK(a == b);
    CHECK(same_parameters(*m1, *m2));
    CHECK(m1->quantizer().initialized());

    // 5 steps, checkpoint, reload, 10 more
    const auto dir = scratch("resume");
    Config cfg{mini(Scenario::va), quick_train()};
    {
        VnscModel<float> model(cfg.model);
        Trainer trainer(model, cfg.train, data);
        for (int i = 0; i < 5; ++i) trainer.step();
        save_checkpoint(dir, cfg, model, &trainer.optimizer());
    }
    Checkpoint ck = load_checkpoint(dir);
    CHECK(echo_config(ck.config) == echo_config(cfg));
    Trainer resumed(*ck.model, ck.config.train, data);
    resumed.optimizer().import_state(ck.optimizer);
    CHECK(resumed.steps_done() == 5);
    std::vector<double> tail;
    for (int i = 0; i < 10; ++i) tail.push_back(resumed.step().total);
    CHECK(std::vector<double>(a.begin() + 5, a.end()) == tail);
    CHECK(same_parameters(*ck.model, *m1));
    std::filesystem::remove_all(dir);
}

TEST_CASE("trainer batching, crops and errors") {
    const Dataset data = toy(5, 8);
    VnscModel<float> model(mini(Scenario::audio_only));
    TrainConfig tc = quick_train();
    tc.epochs = 3;
    Trainer trainer(model, tc, data);
    CHECK(trainer.steps_per_epoch() == 3);
    CHECK(trainer.total_steps() == 9);
    CHECK(trainer.learning_rate(2) == tc.lr);
    CHECK(trainer.learning_rate(3) == doctest::Approx(tc.lr * 0.999));
    CHECK(trainer.learning_rate(8) == doctest::Approx(tc.lr * 0.999 * 0.999));

    const Example ex = trainer.example(0, 100, 32);
    CHECK(ex.wave.size() == 32 * 40);
    CHECK(ex.wave.head(20 * 40) == data[0].wave.samples.segment(100 * 40, 20 * 40));
    CHECK(ex.wave.tail(12 * 40).isZero()); // past the 120-hop utterance
    CHECK(ex.lips.empty());

    VnscModel<float> va(mini(Scenario::va));
    Trainer va_trainer(va, tc, data);
    const Example lex = va_trainer.example(1, 10, 32);
    REQUIRE(lex.lips.rank() == 4);
    CHECK(lex.lips.dim(1) == va.encoder_frames_for_samples(32 * 40));
    const Tensor<float> full = align_video(data[1].lips, 200);
    CHECK(lex.lips.vec().head(64) == full.vec().segment(10 * 64, 64));

    Dataset no_lips = data;
    for (auto& u : no_lips) u.lips = {};
    CHECK_THROWS_AS(Trainer(va, tc, no_lips), FormatError);
    CHECK_THROWS_AS(Trainer(va, tc, toy(2, 16)), FormatError);

    // a poisoned weight surfaces as a named numerical error
    VnscModel<float> bad(mini(Scenario::audio_only));
    Var<float> w = bad.parameters().get("decoder.post.conv.weight");
    w.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    Trainer bad_trainer(bad, tc, data);
    try {
        bad_trainer.step();
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("non-finite l_mdct") != std::string::npos);
    }
}

TEST_CASE("VUA training lowers the distillation loss") {
    const Dataset data = toy(1, 8);
    VnscModel<float> model(mini(Scenario::vua));
    TrainConfig tc = quick_train();
    tc.batch_size = 1;
    Trainer trainer(model, tc, data);
    double early = 0, late = 0;
    for (int i = 1; i <= 200; ++i) {
        const double d = trainer.step().l_distill;
        if (i <= 10) early += d / 10;
        if (i > 190) late += d / 10;
    }
    MESSAGE("l_distill first-10 mean " << early << ", last-10 mean " << late);
    CHECK(late < early);
}
