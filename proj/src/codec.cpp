#include "vnsc/codec.hpp"

namespace vnsc {

std::string to_string(Scenario s) {
    switch (s) {
    case Scenario::audio_only: return "audio-only";
    case Scenario::va: return "va";
    case Scenario::vua: return "vua";
    }
    return "unknown";
}

Scenario parse_scenario(const std::string& text) {
    if (text == "audio-only" || text == "audio_only" || text == "audio") return Scenario::audio_only;
    if (text == "va") return Scenario::va;
    if (text == "vua") return Scenario::vua;
    throw UsageError("unknown scenario '" + text + "' (expected audio-only, va or vua)");
}

void CodecConfig::validate() const {
    auto positive = [](Index v, const char* what) {
        if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
    };
    positive(frame_shift, "frame_shift");
    positive(n_blocks, "n_blocks");
    positive(speech_dim, "speech_dim");
    positive(code_dim, "code_dim");
    positive(downsample, "downsample_factor");
    positive(expansion, "expansion");
    if (dw_kernel < 1 || dw_kernel % 2 == 0) throw ConfigError("dw_kernel must be odd");
    if (io_kernel < 1 || io_kernel % 2 == 0) throw ConfigError("io_kernel must be odd");
    if (n_blocks >= 2 && (fusion_index < 1 || fusion_index > n_blocks - 1)) {
        throw ConfigError("fusion_index must lie in [1, n_blocks - 1], got " + std::to_string(fusion_index));
    }
    if (n_blocks == 1 && fusion_index != 1) throw ConfigError("fusion_index must be 1 with a single block");
}

template <typename S>
McnxBlock<S>::McnxBlock(ParameterStore<S>& store, const std::string& prefix, Index dim, Index kernel,
                        Index expansion, Rng& rng)
    : kernel_(kernel) {
    const Index hidden = expansion * dim;
    dw_weight = store.add_uniform(prefix + ".dwconv.weight", {dim, 1, kernel}, kernel, rng);
    dw_bias = store.add_uniform(prefix + ".dwconv.bias", {dim}, kernel, rng);
    norm_gamma = store.add(prefix + ".norm.gamma", Tensor<S>::constant({dim}, S(1)));
    norm_beta = store.add(prefix + ".norm.beta", Tensor<S>({dim}));
    pw1_weight = store.add_uniform(prefix + ".pw1.weight", {hidden, dim}, dim, rng);
    pw1_bias = store.add_uniform(prefix + ".pw1.bias", {hidden}, dim, rng);
    grn_gamma = store.add(prefix + ".grn.gamma", Tensor<S>({hidden}));
    grn_beta = store.add(prefix + ".grn.beta", Tensor<S>({hidden}));
    pw2_weight = store.add_uniform(prefix + ".pw2.weight", {dim, hidden}, hidden, rng);
    pw2_bias = store.add_uniform(prefix + ".pw2.bias", {dim}, hidden, rng);
}

template <typename S>
Var<S> McnxBlock<S>::operator()(const Var<S>& x) const {
    const Index dim = x.dim(0);
    Var<S> h = conv1d(x, dw_weight, dw_bias, {.stride = 1, .padding = kernel_ / 2, .groups = dim});
    h = layer_norm(h, norm_gamma, norm_beta);
    h = linear(h, pw1_weight, pw1_bias);
    h = gelu(h);
    h = grn(h, grn_gamma, grn_beta);
    h = linear(h, pw2_weight, pw2_bias);
    return add(x, h);
}

namespace {

template <typename S>
void add_norm(ParameterStore<S>& store, const std::string& name, Index dim, Var<S>& gamma, Var<S>& beta) {
    gamma = store.add(name + ".gamma", Tensor<S>::constant({dim}, S(1)));
    beta = store.add(name + ".beta", Tensor<S>({dim}));
}

template <typename S>
void add_conv(ParameterStore<S>& store, const std::string& name, Shape shape, Index fan_in, Index bias_dim, Rng& rng,
              Var<S>& w, Var<S>& b) {
    w = store.add_uniform(name + ".weight", std::move(shape), fan_in, rng);
    b = store.add_uniform(name + ".bias", {bias_dim}, fan_in, rng);
}

} // namespace

template <typename S>
SpeechEncoder<S>::SpeechEncoder(const CodecConfig& cfg, ParameterStore<S>& store, Rng& rng,
                                const std::string& prefix)
    : cfg_(cfg) {
    cfg.validate();
    const Index m = cfg.frame_shift, d = cfg.speech_dim, k = cfg.io_kernel, r = cfg.downsample;
    add_conv(store, prefix + ".pre.conv", {d, m, k}, m * k, d, rng, pre_w_, pre_b_);
    add_norm(store, prefix + ".pre.norm", d, pre_g_, pre_beta_);
    for (Index i = 0; i < cfg.n_blocks; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i + 1), d, cfg.dw_kernel, cfg.expansion, rng);
    }
    add_norm(store, prefix + ".post.norm", d, post_g_, post_beta_);
    add_conv(store, prefix + ".post.linear", {d, d}, d, d, rng, post_lin_w_, post_lin_b_);
    add_conv(store, prefix + ".post.down", {d, d, r}, d * r, d, rng, down_w_, down_b_);
    add_conv(store, prefix + ".post.conv", {cfg.code_dim, d, k}, d * k, cfg.code_dim, rng, out_w_, out_b_);
}

template <typename S>
EncoderOutput<S> SpeechEncoder<S>::operator()(const Var<S>& spec, const FusionHook<S>& hook) const {
    if (spec.dim(0) != cfg_.frame_shift) {
        throw ConfigError("encoder expects " + std::to_string(cfg_.frame_shift) + " MDCT bins, got " +
                          std::to_string(spec.dim(0)));
    }
    if (spec.dim(1) % cfg_.downsample != 0) {
        throw ConfigError("frame count " + std::to_string(spec.dim(1)) + " is not divisible by downsample factor " +
                          std::to_string(cfg_.downsample));
    }
    const Index pad = cfg_.io_kernel / 2;
    Var<S> h = conv1d(spec, pre_w_, pre_b_, {.stride = 1, .padding = pad});
    h = layer_norm(h, pre_g_, pre_beta_);
    EncoderOutput<S> out;
    for (Index i = 0; i < cfg_.n_blocks; ++i) {
        h = blocks_[i](h);
        if (i + 1 == cfg_.fusion_index) {
            out.feature = h;
            if (hook) h = hook(h);
        }
    }
    h = layer_norm(h, post_g_, post_beta_);
    h = linear(h, post_lin_w_, post_lin_b_);
    h = conv1d(h, down_w_, down_b_, {.stride = cfg_.downsample});
    out.latent = conv1d(h, out_w_, out_b_, {.stride = 1, .padding = pad});
    return out;
}

template <typename S>
SpeechDecoder<S>::SpeechDecoder(const CodecConfig& cfg, ParameterStore<S>& store, Rng& rng,
                                const std::string& prefix)
    : cfg_(cfg) {
    cfg.validate();
    const Index m = cfg.frame_shift, d = cfg.speech_dim, k = cfg.io_kernel, r = cfg.downsample;
    add_conv(store, prefix + ".pre.conv", {d, cfg.code_dim, k}, cfg.code_dim * k, d, rng, in_w_, in_b_);
    // transposed weight layout [C_in, C_out, K]
    add_conv(store, prefix + ".pre.up", {d, d, r}, d * r, d, rng, up_w_, up_b_);
    add_norm(store, prefix + ".pre.norm", d, pre_g_, pre_beta_);
    for (Index i = 0; i < cfg.n_blocks; ++i) {
        blocks_.emplace_back(store, prefix + ".block" + std::to_string(i + 1), d, cfg.dw_kernel, cfg.expansion, rng);
    }
    add_norm(store, prefix + ".post.norm", d, post_g_, post_beta_);
    add_conv(store, prefix + ".post.linear", {d, d}, d, d, rng, post_lin_w_, post_lin_b_);
    add_conv(store, prefix + ".post.conv", {m, d, k}, d * k, m, rng, out_w_, out_b_);
}

template <typename S>
Var<S> SpeechDecoder<S>::operator()(const Var<S>& latent) const {
    if (latent.dim(0) != cfg_.code_dim) {
        throw ConfigError("decoder expects latent dim " + std::to_string(cfg_.code_dim) + ", got " +
                          std::to_string(latent.dim(0)));
    }
    const Index pad = cfg_.io_kernel / 2;
    Var<S> h = conv1d(latent, in_w_, in_b_, {.stride = 1, .padding = pad});
    h = conv1d_transposed(h, up_w_, up_b_, {.stride = cfg_.downsample});
    h = layer_norm(h, pre_g_, pre_beta_);
    for (const auto& block : blocks_) h = block(h);
    h = layer_norm(h, post_g_, post_beta_);
    h = linear(h, post_lin_w_, post_lin_b_);
    return conv1d(h, out_w_, out_b_, {.stride = 1, .padding = pad});
}

template class McnxBlock<float>;
template class McnxBlock<double>;
template class SpeechEncoder<float>;
template class SpeechEncoder<double>;
template class SpeechDecoder<float>;
template class SpeechDecoder<double>;

} // namespace vnsc
