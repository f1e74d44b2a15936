#ifndef VNSC_DSP_HPP
#define VNSC_DSP_HPP

#include <cstdint>

#include "vnsc/autograd.hpp"

namespace vnsc {

inline constexpr int default_sample_rate = 48000;
inline constexpr Index default_frame_shift = 40;

struct Waveform {
    Vector<float> samples;
    int sample_rate = default_sample_rate;

    Index size() const { return samples.size(); }
};

/// Sine-windowed MDCT basis with orthonormal scaling: row k of the [M, 2M]
/// matrix is sqrt(2/M) * w[j] * cos(pi/M * (j + 1/2 + M/2) * (k + 1/2)).
/// The sine window satisfies w[j]^2 + w[j+M]^2 = 1, so overlap-added
/// synthesis with the transpose cancels time-domain aliasing exactly.
template <typename S>
class MdctBasis {
public:
    explicit MdctBasis(Index bins);

    Index bins() const { return bins_; }
    const RowMatrix<S>& matrix() const { return basis_; }
    const Vector<S>& window() const { return window_; }

private:
    Index bins_;
    Vector<S> window_;
    RowMatrix<S> basis_;
};

/// MDCT of `samples` with hop `frame_shift` (= number of bins M).
/// The signal is zero-padded to a whole number of hops, then reflect-padded by
/// M on both sides; the result is [M, ceil(len/M) + 1].
template <typename S>
Tensor<S> mdct(const Eigen::Ref<const Vector<S>>& samples, Index frame_shift = default_frame_shift);

/// Overlap-add synthesis of an [M, N] spectrum; returns (N - 1) * M samples
/// (the half-window tails introduced by analysis padding are dropped).
template <typename S>
Vector<S> imdct(const Tensor<S>& spectrum);

/// Differentiable synthesis: [M, N] -> [1, (N - 1) * M].
template <typename S>
Var<S> imdct(const Var<S>& spectrum);

Tensor<float> mdct(const Waveform& w, Index frame_shift = default_frame_shift);
Waveform imdct_waveform(const Tensor<float>& spectrum, int sample_rate = default_sample_rate);

struct MelConfig {
    Index n_fft = 1024;
    Index hop = 240;
    Index n_mels = 80;
    int sample_rate = default_sample_rate;
    double floor = 1e-5;
};

/// HTK-scale triangular filterbank, [n_mels, n_fft/2 + 1], spanning 0 .. sample_rate/2.
Eigen::MatrixXd mel_filterbank(const MelConfig& cfg);

/// Log-compressed mel magnitude spectrogram. Frames are centred (reflect
/// padding of n_fft/2) and Hann-windowed; output is [n_mels, 1 + len/hop].
template <typename S>
class LogMelSpectrogram {
public:
    explicit LogMelSpectrogram(const MelConfig& cfg);

    const MelConfig& config() const { return cfg_; }
    Index frames(Index length) const { return 1 + length / cfg_.hop; }

    Tensor<S> operator()(const Eigen::Ref<const Vector<S>>& samples) const;
    /// Differentiable form over a [1, L] waveform.
    Var<S> operator()(const Var<S>& waveform) const;

private:
    MelConfig cfg_;
    Vector<S> window_;
    RowMatrix<S> cos_;  // [bins, n_fft]
    RowMatrix<S> sin_;  // [bins, n_fft]
    RowMatrix<S> mel_;  // [n_mels, bins]
};

/// Segmental SNR in dB: non-overlapping segments of `segment` samples, each
/// clamped to [lo, hi] before averaging. Lengths are truncated to the shorter.
double ssnr(const Waveform& clean, const Waveform& decoded, Index segment = 320, double lo = -10.0, double hi = 35.0);

/// Global SNR of `noisy` measured against `clean`, in dB.
double snr_db(const Waveform& clean, const Waveform& noisy);

/// Adds seeded white Gaussian noise scaled so the global SNR equals `snr_db`.
Waveform add_noise(const Waveform& w, double snr_db, std::uint64_t seed);

} // namespace vnsc

#endif // VNSC_DSP_HPP
