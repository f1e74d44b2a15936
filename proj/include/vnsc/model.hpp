#ifndef VNSC_MODEL_HPP
#define VNSC_MODEL_HPP

#include <memory>
#include <optional>

#include "vnsc/codec.hpp"
#include "vnsc/dsp.hpp"
#include "vnsc/fusion.hpp"
#include "vnsc/rvq.hpp"
#include "vnsc/vision.hpp"

namespace vnsc {

struct ModelConfig {
    Scenario scenario = Scenario::audio_only;
    int sample_rate = default_sample_rate;
    CodecConfig codec;
    RvqConfig rvq;
    VisionConfig vision;
    MelConfig mel;
    double lambda_image = 0.0;
    double lambda_distill = 0.0;
    double w_mdct = 1.0;
    double w_mel = 1.0;
    double w_quant = 1.0;
    std::uint64_t seed = 0;

    /// Defaults for a scenario: lambda_I = 1e-5 (VA) or 0.5e-5 (VUA), lambda_D = 1 (VUA).
    static ModelConfig defaults(Scenario s);
    bool has_vision() const { return scenario != Scenario::audio_only; }
    void validate() const;
};

struct LossReport {
    double l_mdct = 0.0;
    double l_mel = 0.0;
    double l_quant = 0.0;
    double l_image = 0.0;
    double l_distill = 0.0;
    double total = 0.0;
};

struct LossWeights {
    double mdct = 1.0;
    double mel = 1.0;
    double quant = 1.0;
};

double codec_loss(const LossReport& parts, const LossWeights& w = {});
double composite_loss_va(const LossReport& parts, double lambda_image, const LossWeights& w = {});
double composite_loss_vua(const LossReport& parts, double lambda_image, double lambda_distill,
                          const LossWeights& w = {});

/// Straight-through offsets and targets captured from one pass and replayed,
/// so finite differences see a smooth function of the parameters.
template <typename S>
struct QuantizerFreeze {
    bool filled = false;
    Tensor<S> offset;
    Tensor<S> quantized;
};

template <typename S>
struct ForwardPass {
    LossReport report;
    Var<S> total;
    Var<S> latent;
    RvqResult<S> rvq;
    Var<S> feature; // X_i
    std::vector<std::pair<std::string, Var<S>>> terms;
};

template <typename S>
class VnscModel {
public:
    explicit VnscModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<S>& parameters() { return store_; }
    const ParameterStore<S>& parameters() const { return store_; }
    ResidualVQ<S>& quantizer() { return *rvq_; }
    const ResidualVQ<S>& quantizer() const { return *rvq_; }
    const SpeechEncoder<S>& encoder() const { return *encoder_; }
    const SpeechDecoder<S>& decoder() const { return *decoder_; }
    const ImageAnalyzer<S>* analyzer() const { return analyzer_.get(); }
    const ImageSynthesizer<S>* synthesizer() const { return synthesizer_.get(); }
    FusionLayer<S>* fusion() { return fusion_.get(); }

    /// Encoder frame grid for an MDCT of `mdct_frames` frames: the smallest
    /// multiple of the downsample factor that covers mdct_frames - 1 hops.
    Index encoder_frames(Index mdct_frames) const;
    Index encoder_frames_for_samples(Index samples) const;
    Index latent_frames_for_samples(Index samples) const;
    Index samples_for_latent(Index latent_frames) const;

    /// MDCT of `wave` fitted to the encoder grid: [M, N'].
    Tensor<S> analysis(const Vector<S>& wave) const;

    /// Encoder with the scenario's fusion routing. `visual` is V [D_v, N'].
    EncoderOutput<S> encode_features(const Var<S>& spec, const Var<S>* visual, Scenario mode, bool training,
                                     std::optional<Var<S>>* distill = nullptr) const;

    /// Differentiable pass over one utterance. `lips` is [1, N', H, W] on the
    /// encoder grid (required for VA/VUA training).
    ForwardPass<S> forward(const Vector<S>& wave, const Tensor<S>* lips, bool training,
                           QuantizerFreeze<S>* freeze = nullptr) const;

    /// Inference. Visual input is only accepted (and required) in VA mode.
    Tensor<S> encode_latent(const Vector<S>& wave, const Tensor<S>* lips, Scenario mode) const;
    CodeIndices encode(const Vector<S>& wave, const Tensor<S>* lips, Scenario mode) const;
    Tensor<S> decode_spectrum(const CodeIndices& indices) const;
    Vector<S> decode(const CodeIndices& indices) const;

private:
    ModelConfig cfg_;
    ParameterStore<S> store_;
    std::unique_ptr<SpeechEncoder<S>> encoder_;
    std::unique_ptr<SpeechDecoder<S>> decoder_;
    std::unique_ptr<ResidualVQ<S>> rvq_;
    std::unique_ptr<ImageAnalyzer<S>> analyzer_;
    std::unique_ptr<ImageSynthesizer<S>> synthesizer_;
    std::unique_ptr<FusionLayer<S>> fusion_;
    std::unique_ptr<LogMelSpectrogram<S>> mel_;
};

} // namespace vnsc

#endif // VNSC_MODEL_HPP
