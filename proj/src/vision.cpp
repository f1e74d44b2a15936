#include "vnsc/vision.hpp"

#include <atomic>
#include <fstream>
#include <limits>

#include "vnsc/binary_io.hpp"

namespace vnsc {

namespace {
std::atomic<std::uint64_t> g_visual_ops{0};
} // namespace

std::uint64_t visual_op_count() { return g_visual_ops.load(std::memory_order_relaxed); }
void note_visual_op() { g_visual_ops.fetch_add(1, std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// lip files

void write_lips(std::ostream& os, const LipVideo& v) {
    if (v.frames < 1 || v.height < 1 || v.width < 1) throw ConfigError("lip video must be non-empty");
    if (v.height > std::numeric_limits<std::uint16_t>::max() || v.width > std::numeric_limits<std::uint16_t>::max()) {
        throw ConfigError("lip frame size exceeds 65535");
    }
    if (static_cast<Index>(v.pixels.size()) != v.frames * v.height * v.width) {
        throw ConfigError("lip video pixel count does not match its header");
    }
    os.write(lips_magic, 8);
    io::write_le<std::uint32_t>(os, lips_format_version);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.frames));
    io::write_le<std::uint32_t>(os, v.fps_num);
    io::write_le<std::uint32_t>(os, v.fps_den);
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(v.height));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(v.width));
    os.write(reinterpret_cast<const char*>(v.pixels.data()), static_cast<std::streamsize>(v.pixels.size()));
    if (!os) throw FormatError("failed writing lip file");
}

LipVideo read_lips(std::istream& is) {
    io::expect_magic(is, lips_magic, "VNSCLIPS");
    const auto version = io::read_le<std::uint32_t>(is, "version");
    if (version != lips_format_version) throw FormatError("unsupported lip file version " + std::to_string(version));
    LipVideo v;
    v.frames = io::read_le<std::uint32_t>(is, "frame count");
    v.fps_num = io::read_le<std::uint32_t>(is, "fps numerator");
    v.fps_den = io::read_le<std::uint32_t>(is, "fps denominator");
    v.height = io::read_le<std::uint16_t>(is, "height");
    v.width = io::read_le<std::uint16_t>(is, "width");
    if (v.frames < 1) throw FormatError("lip file has no frames");
    if (v.fps_num == 0 || v.fps_den == 0) throw FormatError("lip file has a zero frame rate");
    if (v.height < 1 || v.width < 1) throw FormatError("lip file has empty frames");
    v.pixels.resize(static_cast<std::size_t>(v.frames * v.height * v.width));
    if (!is.read(reinterpret_cast<char*>(v.pixels.data()), static_cast<std::streamsize>(v.pixels.size()))) {
        throw FormatError("lip file truncated: expected " + std::to_string(v.pixels.size()) + " pixel bytes");
    }
    return v;
}

void write_lips(const std::filesystem::path& path, const LipVideo& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_lips(os, v);
}

LipVideo read_lips(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_lips(is);
}

Tensor<float> align_video(const LipVideo& v, Index target_frames, int feature_rate, int hold_rate) {
    if (v.frames < 1 || v.pixels.empty()) throw ConfigError("cannot align an empty lip video");
    if (target_frames < 1) throw ConfigError("target frame count must be positive");
    if (hold_rate < 1 || feature_rate < hold_rate || feature_rate % hold_rate != 0) {
        throw ConfigError("feature rate must be a multiple of the hold rate");
    }
    const Index repeat = feature_rate / hold_rate;
    const Index plane = v.height * v.width;
    Tensor<float> out({1, target_frames, v.height, v.width});
    for (Index n = 0; n < target_frames; ++n) {
        const Index j = n / repeat; // hold-rate frame
        // source frame shown at time j / hold_rate: floor(j * fps / hold_rate)
        const auto num = static_cast<unsigned long long>(j) * v.fps_num;
        const auto den = static_cast<unsigned long long>(hold_rate) * v.fps_den;
        const Index src = std::min<Index>(static_cast<Index>(num / den), v.frames - 1);
        const std::uint8_t* p = v.frame(src);
        for (Index i = 0; i < plane; ++i) out[n * plane + i] = static_cast<float>(p[i]) / 255.0f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// networks

void VisionConfig::validate() const {
    if (channels.empty()) throw ConfigError("vision needs at least one analysis block");
    if (post_channels.empty()) throw ConfigError("vision needs at least one post-processing conv");
    for (Index c : channels)
        if (c < 1) throw ConfigError("vision channel counts must be positive");
    for (Index c : post_channels)
        if (c < 1) throw ConfigError("vision channel counts must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("vision kernel must be odd");
    const Index expected = Index(2) << channels.size();
    if (image_size != expected) {
        throw ConfigError("image_size " + std::to_string(image_size) + " does not reduce to 2x2 after " +
                          std::to_string(channels.size()) + " blocks (expected " + std::to_string(expected) + ")");
    }
}

template <typename S>
BatchNormParams<S>::BatchNormParams(ParameterStore<S>& store, const std::string& prefix, Index channels) {
    gamma = store.add(prefix + ".gamma", Tensor<S>::constant({channels}, S(1)));
    beta = store.add(prefix + ".beta", Tensor<S>({channels}));
    running_mean = store.add(prefix + ".running_mean", Tensor<S>({channels}), false);
    running_var = store.add(prefix + ".running_var", Tensor<S>::constant({channels}, S(1)), false);
}

template <typename S>
Var<S> BatchNormParams<S>::operator()(const Var<S>& x, bool training, double momentum, double eps) const {
    Var<S> mean = running_mean, var = running_var;
    return batch_norm(x, gamma, beta, mean.mutable_value(), var.mutable_value(), training, momentum, eps);
}

template <typename S>
ImageAnalyzer<S>::ImageAnalyzer(const VisionConfig& cfg, ParameterStore<S>& store, Rng& rng,
                                const std::string& prefix)
    : cfg_(cfg) {
    cfg.validate();
    const Index k = cfg.kernel, taps = k * k * k;
    Index c_in = 1;
    for (std::size_t b = 0; b < cfg.channels.size(); ++b) {
        const std::string name = prefix + ".block" + std::to_string(b + 1);
        const Index c = cfg.channels[b];
        conv_w_.push_back(store.add_uniform(name + ".conv.weight", {c, c_in, k, k, k}, c_in * taps, rng));
        conv_b_.push_back(store.add_uniform(name + ".conv.bias", {c}, c_in * taps, rng));
        bn_.emplace_back(store, name + ".bn", c);
        c_in = c;
    }
    merge_w_ = store.add_uniform(prefix + ".post.merge.weight", {1, 4}, 4, rng);
    merge_b_ = store.add_uniform(prefix + ".post.merge.bias", {1}, 4, rng);
    for (std::size_t j = 0; j < cfg.post_channels.size(); ++j) {
        const std::string name = prefix + ".post.conv" + std::to_string(j + 1);
        const Index c = cfg.post_channels[j];
        post_w_.push_back(store.add_uniform(name + ".weight", {c, c_in, 3}, c_in * 3, rng));
        post_b_.push_back(store.add_uniform(name + ".bias", {c}, c_in * 3, rng));
        c_in = c;
    }
}

template <typename S>
std::vector<Var<S>> ImageAnalyzer<S>::block_outputs(const Var<S>& images, bool training) const {
    if (images.value().rank() != 4 || images.dim(0) != 1 || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
        throw ConfigError("image analyzer expects [1, N, " + std::to_string(cfg_.image_size) + ", " +
                          std::to_string(cfg_.image_size) + "] input, got " + shape_string(images.shape()));
    }
    note_visual_op();
    const Index p = cfg_.kernel / 2;
    std::vector<Var<S>> outs;
    Var<S> h = images;
    for (std::size_t b = 0; b < conv_w_.size(); ++b) {
        Conv3dOptions opts{.stride = {1, 1, 1}, .padding = {p, p, p}};
        if (b == 0) opts.stride = {1, 2, 2};
        h = conv3d(h, conv_w_[b], conv_b_[b], opts);
        h = relu(bn_[b](h, training, cfg_.bn_momentum, cfg_.bn_eps));
        if (b > 0) h = avg_pool_hw(h);
        outs.push_back(h);
    }
    return outs;
}

template <typename S>
Var<S> ImageAnalyzer<S>::post(const Var<S>& x) const {
    const Index c = x.dim(0), n = x.dim(1);
    Var<S> h = transpose(reshape(x, {c * n, 4}));      // [4, C*N]
    h = reshape(linear(h, merge_w_, merge_b_), {c, n}); // spatial axis folded away
    for (std::size_t j = 0; j < post_w_.size(); ++j) {
        h = conv1d(h, post_w_[j], post_b_[j], {.stride = 1, .padding = 1});
        if (j + 1 < post_w_.size()) h = relu(h);
    }
    return h;
}

template <typename S>
Var<S> ImageAnalyzer<S>::operator()(const Var<S>& images, bool training) const {
    return post(block_outputs(images, training).back());
}

template <typename S>
ImageSynthesizer<S>::ImageSynthesizer(const VisionConfig& cfg, ParameterStore<S>& store, Rng& rng,
                                      const std::string& prefix)
    : cfg_(cfg) {
    cfg.validate();
    // mirror of the analyzer's post-processing chain
    std::vector<Index> dims{cfg.channels.back()};
    dims.insert(dims.end(), cfg.post_channels.begin(), cfg.post_channels.end());
    for (std::size_t j = dims.size() - 1; j > 0; --j) {
        const std::string name = prefix + ".pre.conv" + std::to_string(dims.size() - j);
        const Index c_in = dims[j], c_out = dims[j - 1];
        pre_w_.push_back(store.add_uniform(name + ".weight", {c_out, c_in, 3}, c_in * 3, rng));
        pre_b_.push_back(store.add_uniform(name + ".bias", {c_out}, c_in * 3, rng));
    }
    split_w_ = store.add_uniform(prefix + ".pre.split.weight", {4, 1}, 1, rng);
    split_b_ = store.add_uniform(prefix + ".pre.split.bias", {4}, 1, rng);
    const Index k = cfg.kernel, taps = k * k * k;
    const std::size_t blocks = cfg.channels.size();
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::string name = prefix + ".block" + std::to_string(b + 1);
        const Index c_in = cfg.channels[blocks - 1 - b];
        const Index c_out = b + 1 < blocks ? cfg.channels[blocks - 2 - b] : 1;
        conv_w_.push_back(store.add_uniform(name + ".deconv.weight", {c_in, c_out, k, k, k}, c_in * taps, rng));
        conv_b_.push_back(store.add_uniform(name + ".deconv.bias", {c_out}, c_in * taps, rng));
        if (b + 1 < blocks) bn_.emplace_back(store, name + ".bn", c_out);
    }
}

template <typename S>
Var<S> ImageSynthesizer<S>::operator()(const Var<S>& visual, bool training) const {
    if (visual.value().rank() != 2 || visual.dim(0) != cfg_.visual_dim()) {
        throw ConfigError("image synthesizer expects [" + std::to_string(cfg_.visual_dim()) + ", N] input, got " +
                          shape_string(visual.shape()));
    }
    note_visual_op();
    Var<S> h = visual;
    for (std::size_t j = 0; j < pre_w_.size(); ++j) {
        h = conv1d(h, pre_w_[j], pre_b_[j], {.stride = 1, .padding = 1});
        if (j + 1 < pre_w_.size()) h = relu(h);
    }
    const Index c = h.dim(0), n = h.dim(1);
    h = linear(reshape(h, {1, c * n}), split_w_, split_b_); // [4, C*N]
    h = reshape(transpose(h), {c, n, 2, 2});
    const Index p = cfg_.kernel / 2;
    const Conv3dOptions opts{.stride = {1, 2, 2}, .padding = {p, p, p}, .output_padding = {0, 1, 1}};
    for (std::size_t b = 0; b < conv_w_.size(); ++b) {
        h = conv3d_transposed(h, conv_w_[b], conv_b_[b], opts);
        if (b < bn_.size()) h = relu(bn_[b](h, training, cfg_.bn_momentum, cfg_.bn_eps));
    }
    return h;
}

template <typename S>
Var<S> image_reconstruction_loss(const Var<S>& images, const Var<S>& reconstructed) {
    if (images.shape() != reconstructed.shape()) {
        throw ConfigError("image reconstruction loss: shape " + shape_string(images.shape()) + " vs " +
                          shape_string(reconstructed.shape()));
    }
    return mse_loss(reconstructed, images);
}

template struct BatchNormParams<float>;
template struct BatchNormParams<double>;
template class ImageAnalyzer<float>;
template class ImageAnalyzer<double>;
template class ImageSynthesizer<float>;
template class ImageSynthesizer<double>;
template Var<float> image_reconstruction_loss(const Var<float>&, const Var<float>&);
template Var<double> image_reconstruction_loss(const Var<double>&, const Var<double>&);

} // namespace vnsc
