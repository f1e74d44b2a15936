#include "vnsc/model.hpp"

#include <cmath>

namespace vnsc {

ModelConfig ModelConfig::defaults(Scenario s) {
    ModelConfig cfg;
    cfg.scenario = s;
    if (s == Scenario::va) cfg.lambda_image = 1e-5;
    if (s == Scenario::vua) {
        cfg.lambda_image = 0.5e-5;
        cfg.lambda_distill = 1.0;
    }
    return cfg;
}

void ModelConfig::validate() const {
    codec.validate();
    if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
    if (rvq.dim != codec.code_dim) {
        throw ConfigError("RVQ dim " + std::to_string(rvq.dim) + " must equal code_dim " +
                          std::to_string(codec.code_dim));
    }
    if (mel.sample_rate != sample_rate) throw ConfigError("mel sample rate must equal the codec sample rate");
    if (has_vision()) vision.validate();
    if (lambda_image < 0 || lambda_distill < 0 || w_mdct < 0 || w_mel < 0 || w_quant < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (sample_rate % codec.frame_shift != 0) throw ConfigError("frame_shift must divide the sample rate");
}

double codec_loss(const LossReport& p, const LossWeights& w) {
    return w.mdct * p.l_mdct + w.mel * p.l_mel + w.quant * p.l_quant;
}

double composite_loss_va(const LossReport& p, double lambda_image, const LossWeights& w) {
    return codec_loss(p, w) + lambda_image * p.l_image;
}

double composite_loss_vua(const LossReport& p, double lambda_image, double lambda_distill, const LossWeights& w) {
    return codec_loss(p, w) + lambda_image * p.l_image + lambda_distill * p.l_distill;
}

namespace {
enum Stream : std::uint64_t { s_encoder = 1, s_decoder, s_rvq, s_analyzer, s_synthesizer, s_fusion };
}

template <typename S>
VnscModel<S>::VnscModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    // Independent streams per module: the speech path is initialized
    // identically whatever the scenario.
    Rng enc_rng(derive_seed(cfg.seed, s_encoder)), dec_rng(derive_seed(cfg.seed, s_decoder)),
        rvq_rng(derive_seed(cfg.seed, s_rvq));
    encoder_ = std::make_unique<SpeechEncoder<S>>(cfg.codec, store_, enc_rng);
    decoder_ = std::make_unique<SpeechDecoder<S>>(cfg.codec, store_, dec_rng);
    rvq_ = std::make_unique<ResidualVQ<S>>(cfg.rvq, store_, "rvq", rvq_rng);
    if (cfg.has_vision()) {
        Rng a_rng(derive_seed(cfg.seed, s_analyzer)), s_rng(derive_seed(cfg.seed, s_synthesizer)),
            f_rng(derive_seed(cfg.seed, s_fusion));
        analyzer_ = std::make_unique<ImageAnalyzer<S>>(cfg.vision, store_, a_rng);
        synthesizer_ = std::make_unique<ImageSynthesizer<S>>(cfg.vision, store_, s_rng);
        fusion_ = std::make_unique<FusionLayer<S>>(store_, cfg.codec.speech_dim, cfg.vision.visual_dim(), f_rng);
    }
    mel_ = std::make_unique<LogMelSpectrogram<S>>(cfg.mel);
}

template <typename S>
Index VnscModel<S>::encoder_frames(Index mdct_frames) const {
    const Index r = cfg_.codec.downsample;
    const Index hops = std::max<Index>(mdct_frames - 1, 1);
    return r * ((hops + r - 1) / r);
}

template <typename S>
Index VnscModel<S>::encoder_frames_for_samples(Index samples) const {
    const Index m = cfg_.codec.frame_shift;
    return encoder_frames((samples + m - 1) / m + 1);
}

template <typename S>
Index VnscModel<S>::latent_frames_for_samples(Index samples) const {
    return encoder_frames_for_samples(samples) / cfg_.codec.downsample;
}

template <typename S>
Index VnscModel<S>::samples_for_latent(Index latent_frames) const {
    return latent_frames * cfg_.codec.downsample * cfg_.codec.frame_shift;
}

template <typename S>
Tensor<S> VnscModel<S>::analysis(const Vector<S>& wave) const {
    const Tensor<S> spec = mdct<S>(wave, cfg_.codec.frame_shift);
    const Index frames = encoder_frames(spec.dim(1));
    NoGradGuard no_grad;
    return fit_frames(constant(spec), frames).value();
}

template <typename S>
EncoderOutput<S> VnscModel<S>::encode_features(const Var<S>& spec, const Var<S>* visual, Scenario mode,
                                               bool training, std::optional<Var<S>>* distill) const {
    const bool have_visual = visual && *visual;
    switch (mode) {
    case Scenario::va:
        if (cfg_.scenario != Scenario::va) throw UsageError("VA encoding needs a model trained for VA");
        if (!have_visual) throw UsageError("VA mode requires lip video");
        break;
    case Scenario::vua:
        if (cfg_.scenario != Scenario::vua) throw UsageError("VUA encoding needs a model trained for VUA");
        if (have_visual && !training) throw UsageError("VUA inference does not take lip video");
        break;
    case Scenario::audio_only:
        if (cfg_.scenario == Scenario::va) throw UsageError("a VA model cannot encode without lip video");
        if (have_visual) throw UsageError("audio-only mode does not take lip video");
        break;
    }
    if (have_visual && (*visual).dim(1) != spec.dim(1)) {
        throw AlignmentError("visual feature has " + std::to_string((*visual).dim(1)) + " frames, speech " +
                             std::to_string(spec.dim(1)));
    }
    const bool routed = mode == Scenario::va || (mode == Scenario::vua && have_visual);
    if (!routed) return (*encoder_)(spec);
    FusionHook<S> hook = [&](const Var<S>& x) {
        auto step = apply_fusion_strategy<S>(mode, training, x, visual, fusion_.get());
        if (distill && step.distill) *distill = *step.distill;
        return step.next;
    };
    return (*encoder_)(spec, hook);
}

template <typename S>
ForwardPass<S> VnscModel<S>::forward(const Vector<S>& wave, const Tensor<S>* lips, bool training,
                                     QuantizerFreeze<S>* freeze) const {
    const Index m = cfg_.codec.frame_shift;
    const Var<S> spec = constant(analysis(wave));
    const Index frames = spec.dim(1);

    ForwardPass<S> pass;
    std::vector<Var<S>> terms;
    std::vector<double> weights;
    auto record = [&](const char* name, const Var<S>& v, double w, double& slot) {
        slot = static_cast<double>(v.item());
        terms.push_back(v);
        weights.push_back(w);
        pass.terms.emplace_back(name, v);
    };

    Var<S> visual, image_loss;
    if (cfg_.has_vision() && lips) {
        if (lips->rank() != 4 || lips->dim(1) != frames) {
            throw AlignmentError("lip sequence " + shape_string(lips->shape()) + " does not match " +
                                 std::to_string(frames) + " encoder frames");
        }
        const Var<S> images = constant(*lips);
        visual = (*analyzer_)(images, training);
        image_loss = image_reconstruction_loss(images, (*synthesizer_)(visual, training));
    } else if (cfg_.scenario == Scenario::va || (cfg_.scenario == Scenario::vua && training)) {
        throw UsageError(to_string(cfg_.scenario) + " training needs lip video");
    }

    std::optional<Var<S>> distill;
    const EncoderOutput<S> enc = encode_features(spec, visual ? &visual : nullptr, cfg_.scenario, true, &distill);
    pass.latent = enc.latent;
    pass.feature = enc.feature;

    pass.rvq = rvq_->quantize(enc.latent.value());
    Tensor<S> offset, target;
    if (freeze && freeze->filled) {
        offset = freeze->offset;
        target = freeze->quantized;
    } else {
        target = pass.rvq.quantized;
        offset = Tensor<S>(target.shape(), target.vec() - enc.latent.value().vec());
        if (freeze) *freeze = {true, offset, target};
    }
    const Var<S> zq = straight_through(enc.latent, offset);
    const Var<S> decoded = (*decoder_)(zq);

    const Var<S> l_mdct = mse_loss(decoded, spec);
    const Var<S> wave_hat = imdct(fit_frames(decoded, frames + 1));
    Vector<S> target_wave = Vector<S>::Zero(frames * m);
    const Index keep = std::min<Index>(wave.size(), target_wave.size());
    target_wave.head(keep) = wave.head(keep);
    const Var<S> l_mel = l1_loss((*mel_)(wave_hat), constant((*mel_)(target_wave)));
    const Var<S> l_quant = quantization_loss(enc.latent, target);

    record("l_mdct", l_mdct, cfg_.w_mdct, pass.report.l_mdct);
    record("l_mel", l_mel, cfg_.w_mel, pass.report.l_mel);
    record("l_quant", l_quant, cfg_.w_quant, pass.report.l_quant);
    if (image_loss) record("l_image", image_loss, cfg_.lambda_image, pass.report.l_image);
    if (distill) record("l_distill", *distill, cfg_.lambda_distill, pass.report.l_distill);
    pass.total = weighted_sum(terms, weights);
    pass.report.total = static_cast<double>(pass.total.item());
    return pass;
}

template <typename S>
Tensor<S> VnscModel<S>::encode_latent(const Vector<S>& wave, const Tensor<S>* lips, Scenario mode) const {
    NoGradGuard no_grad;
    const Var<S> spec = constant(analysis(wave));
    Var<S> visual;
    if (mode == Scenario::va) {
        if (!lips) throw UsageError("VA mode requires lip video");
        if (lips->rank() != 4 || lips->dim(1) != spec.dim(1)) {
            throw AlignmentError("lip sequence " + shape_string(lips->shape()) + " does not match " +
                                 std::to_string(spec.dim(1)) + " encoder frames");
        }
        if (!analyzer_) throw UsageError("VA encoding needs a model trained for VA");
        visual = (*analyzer_)(constant(*lips), false);
    } else if (lips) {
        throw UsageError(to_string(mode) + " mode does not take lip video");
    }
    return encode_features(spec, visual ? &visual : nullptr, mode, false).latent.value();
}

template <typename S>
CodeIndices VnscModel<S>::encode(const Vector<S>& wave, const Tensor<S>* lips, Scenario mode) const {
    return rvq_->quantize(encode_latent(wave, lips, mode)).indices;
}

template <typename S>
Tensor<S> VnscModel<S>::decode_spectrum(const CodeIndices& indices) const {
    NoGradGuard no_grad;
    return (*decoder_)(constant(rvq_->dequantize(indices))).value();
}

template <typename S>
Vector<S> VnscModel<S>::decode(const CodeIndices& indices) const {
    NoGradGuard no_grad;
    const Tensor<S> spec = decode_spectrum(indices);
    return imdct(fit_frames(constant(spec), spec.dim(1) + 1).value());
}

template class VnscModel<float>;
template class VnscModel<double>;

} // namespace vnsc
