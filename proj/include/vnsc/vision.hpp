#ifndef VNSC_VISION_HPP
#define VNSC_VISION_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vnsc/ops.hpp"
#include "vnsc/parameters.hpp"

namespace vnsc {

/// Number of forward evaluations that touched visual data (analyzer,
/// synthesizer, fusion) since program start. Relaxed atomic; for tests.
std::uint64_t visual_op_count();
void note_visual_op();

/// Grayscale lip video as stored in a "VNSCLIPS" file.
struct LipVideo {
    std::uint32_t fps_num = 60;
    std::uint32_t fps_den = 1;
    Index frames = 0;
    Index height = 0;
    Index width = 0;
    std::vector<std::uint8_t> pixels; // frame-major, row-major within a frame

    const std::uint8_t* frame(Index f) const { return pixels.data() + f * height * width; }
};

inline constexpr char lips_magic[8] = {'V', 'N', 'S', 'C', 'L', 'I', 'P', 'S'};
inline constexpr std::uint32_t lips_format_version = 1;

/// magic, version u32, frame count u32, fps numerator u32, fps denominator
/// u32, H u16, W u16, then u8 pixels; all little-endian.
void write_lips(std::ostream& os, const LipVideo& video);
LipVideo read_lips(std::istream& is);
void write_lips(const std::filesystem::path& path, const LipVideo& video);
LipVideo read_lips(const std::filesystem::path& path);

/// Resamples to `hold_rate` Hz by sample-and-hold, repeats every frame
/// feature_rate / hold_rate times and fits the result to `target_frames`
/// (truncating, or repeating the last frame). Returns [1, N, H, W] in [0, 1].
Tensor<float> align_video(const LipVideo& video, Index target_frames, int feature_rate = 1200, int hold_rate = 150);

struct VisionConfig {
    Index image_size = 64;
    std::vector<Index> channels{32, 64, 128, 256, 512};
    std::vector<Index> post_channels{256, 256, 64, 64};
    Index kernel = 3;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    Index visual_dim() const { return post_channels.back(); }
    void validate() const;
};

template <typename S>
struct BatchNormParams {
    Var<S> gamma, beta, running_mean, running_var;

    BatchNormParams() = default;
    BatchNormParams(ParameterStore<S>& store, const std::string& prefix, Index channels);
    Var<S> operator()(const Var<S>& x, bool training, double momentum, double eps) const;
};

/// phi_IA: [1, N, H, W] images -> [D_v, N] visual feature.
template <typename S>
class ImageAnalyzer {
public:
    ImageAnalyzer(const VisionConfig& cfg, ParameterStore<S>& store, Rng& rng, const std::string& prefix = "vision.analyzer");
    Var<S> operator()(const Var<S>& images, bool training) const;
    /// Output of every analysis block, for shape inspection.
    std::vector<Var<S>> block_outputs(const Var<S>& images, bool training) const;

private:
    Var<S> post(const Var<S>& blocks_out) const;

    VisionConfig cfg_;
    std::vector<Var<S>> conv_w_, conv_b_;
    std::vector<BatchNormParams<S>> bn_;
    Var<S> merge_w_, merge_b_;
    std::vector<Var<S>> post_w_, post_b_;
};

/// phi_IS: [D_v, N] -> [1, N, H, W].
template <typename S>
class ImageSynthesizer {
public:
    ImageSynthesizer(const VisionConfig& cfg, ParameterStore<S>& store, Rng& rng,
                     const std::string& prefix = "vision.synthesizer");
    Var<S> operator()(const Var<S>& visual, bool training) const;

private:
    VisionConfig cfg_;
    std::vector<Var<S>> pre_w_, pre_b_;
    Var<S> split_w_, split_b_;
    std::vector<Var<S>> conv_w_, conv_b_;
    std::vector<BatchNormParams<S>> bn_;
};

/// Mean squared pixel error.
template <typename S>
Var<S> image_reconstruction_loss(const Var<S>& images, const Var<S>& reconstructed);

} // namespace vnsc

#endif // VNSC_VISION_HPP
