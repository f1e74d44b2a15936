#ifndef VNSC_CODEC_HPP
#define VNSC_CODEC_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vnsc/ops.hpp"
#include "vnsc/parameters.hpp"

namespace vnsc {

enum class Scenario : std::uint8_t { audio_only = 0, va = 1, vua = 2 };

std::string to_string(Scenario s);
/// Accepts "audio-only"/"audio_only"/"audio", "va", "vua" (case-sensitive).
Scenario parse_scenario(const std::string& text);

struct CodecConfig {
    Index frame_shift = 40;  // MDCT bins M
    Index n_blocks = 8;
    Index speech_dim = 256;  // D_s
    Index code_dim = 256;    // D_code
    Index fusion_index = 2;  // visual information enters after this block
    Index downsample = 8;
    Index dw_kernel = 7;
    Index io_kernel = 7;     // plain convs at the ends of encoder and decoder
    Index expansion = 2;

    void validate() const;
};

/// Modified ConvNeXt v2 block:
///   x + pw2(grn(gelu(pw1(layer_norm(dwconv(x))))))
template <typename S>
class McnxBlock {
public:
    McnxBlock(ParameterStore<S>& store, const std::string& prefix, Index dim, Index kernel, Index expansion, Rng& rng);
    Var<S> operator()(const Var<S>& x) const;

    Var<S> dw_weight, dw_bias, norm_gamma, norm_beta, pw1_weight, pw1_bias, grn_gamma, grn_beta, pw2_weight, pw2_bias;

private:
    Index kernel_;
};

/// Called on X_i (output of block fusion_index); returns the input of block i+1.
template <typename S>
using FusionHook = std::function<Var<S>(const Var<S>&)>;

template <typename S>
struct EncoderOutput {
    Var<S> latent;  // [D_code, N / downsample]
    Var<S> feature; // X_i, [D_s, N]
};

template <typename S>
class SpeechEncoder {
public:
    SpeechEncoder(const CodecConfig& cfg, ParameterStore<S>& store, Rng& rng, const std::string& prefix = "encoder");
    /// spec [M, N] with N divisible by the downsample factor.
    EncoderOutput<S> operator()(const Var<S>& spec, const FusionHook<S>& hook = {}) const;

private:
    CodecConfig cfg_;
    Var<S> pre_w_, pre_b_, pre_g_, pre_beta_;
    std::vector<McnxBlock<S>> blocks_;
    Var<S> post_g_, post_beta_, post_lin_w_, post_lin_b_, down_w_, down_b_, out_w_, out_b_;
};

template <typename S>
class SpeechDecoder {
public:
    SpeechDecoder(const CodecConfig& cfg, ParameterStore<S>& store, Rng& rng, const std::string& prefix = "decoder");
    /// latent [D_code, F] -> spectrum [M, F * downsample].
    Var<S> operator()(const Var<S>& latent) const;

private:
    CodecConfig cfg_;
    Var<S> in_w_, in_b_, up_w_, up_b_, pre_g_, pre_beta_;
    std::vector<McnxBlock<S>> blocks_;
    Var<S> post_g_, post_beta_, post_lin_w_, post_lin_b_, out_w_, out_b_;
};

} // namespace vnsc

#endif // VNSC_CODEC_HPP
