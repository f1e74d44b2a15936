#include "vnsc/dsp.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "vnsc/rng.hpp"

namespace vnsc {

namespace {

// Source index of padded position i for reflect padding by `pad` on a signal
// of `len` samples (numpy "reflect": the edge sample is not repeated).
Index reflect_source(Index i, Index pad, Index len) {
    Index j = i - pad;
    if (j < 0) j = -j;
    if (j >= len) j = 2 * (len - 1) - j;
    return j;
}

template <typename S>
Vector<S> mdct_padded(const Eigen::Ref<const Vector<S>>& x, Index m) {
    const Index len = x.size();
    const Index hops = (len + m - 1) / m;
    const Index ext = hops * m;
    Vector<S> padded = Vector<S>::Zero(ext + 2 * m);
    for (Index i = 0; i < padded.size(); ++i) {
        const Index src = reflect_source(i, m, ext);
        if (src < len) padded[i] = x[src];
    }
    return padded;
}

} // namespace

template <typename S>
MdctBasis<S>::MdctBasis(Index bins) : bins_(bins) {
    if (bins <= 0) throw ConfigError("MDCT frame shift must be positive");
    const Index len = 2 * bins;
    window_.resize(len);
    basis_.resize(bins, len);
    const double m = static_cast<double>(bins);
    const double norm = std::sqrt(2.0 / m);
    for (Index j = 0; j < len; ++j) {
        window_[j] = static_cast<S>(std::sin(std::numbers::pi * (static_cast<double>(j) + 0.5) / (2.0 * m)));
    }
    for (Index k = 0; k < bins; ++k) {
        for (Index j = 0; j < len; ++j) {
            const double phase = std::numbers::pi / m * (static_cast<double>(j) + 0.5 + m / 2.0) * (static_cast<double>(k) + 0.5);
            const double w = std::sin(std::numbers::pi * (static_cast<double>(j) + 0.5) / (2.0 * m));
            basis_(k, j) = static_cast<S>(norm * w * std::cos(phase));
        }
    }
}

template <typename S>
Tensor<S> mdct(const Eigen::Ref<const Vector<S>>& samples, Index frame_shift) {
    if (frame_shift <= 0) throw ConfigError("MDCT frame shift must be positive");
    if (samples.size() < 2 * frame_shift) {
        throw ConfigError("MDCT input needs at least " + std::to_string(2 * frame_shift) + " samples, got " +
                          std::to_string(samples.size()));
    }
    const MdctBasis<S> basis(frame_shift);
    const Vector<S> padded = mdct_padded<S>(samples, frame_shift);
    const Index frames = padded.size() / frame_shift - 1;
    // Overlapping frames as columns of a strided view.
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>, 0, Eigen::OuterStride<>> framed(
        padded.data(), 2 * frame_shift, frames, Eigen::OuterStride<>(frame_shift));
    Tensor<S> out({frame_shift, frames});
    out.matrix().noalias() = basis.matrix() * framed;
    return out;
}

template <typename S>
Vector<S> imdct(const Tensor<S>& spectrum) {
    if (spectrum.rank() != 2) throw ConfigError("IMDCT expects an [M, N] spectrum");
    const Index m = spectrum.dim(0), frames = spectrum.dim(1);
    const MdctBasis<S> basis(m);
    const RowMatrix<S> y = basis.matrix().transpose() * spectrum.matrix(); // [2M, N]
    Vector<S> full = Vector<S>::Zero((frames + 1) * m);
    for (Index n = 0; n < frames; ++n) full.segment(n * m, 2 * m) += y.col(n);
    return full.segment(m, (frames - 1) * m);
}

template <typename S>
Var<S> imdct(const Var<S>& spectrum) {
    const Index m = spectrum.dim(0), frames = spectrum.dim(1);
    const Vector<S> out = imdct(spectrum.value());
    Tensor<S> y({1, out.size()}, out);
    return make_result<S>(std::move(y), {spectrum}, [spectrum, m, frames](const Tensor<S>& g) {
        const MdctBasis<S> basis(m);
        Vector<S> full = Vector<S>::Zero((frames + 1) * m);
        full.segment(m, (frames - 1) * m) = g.vec();
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>, 0, Eigen::OuterStride<>> framed(
            full.data(), 2 * m, frames, Eigen::OuterStride<>(m));
        Tensor<S> gs({m, frames});
        gs.matrix().noalias() = basis.matrix() * framed;
        spectrum.accumulate(gs.vec());
    });
}

Tensor<float> mdct(const Waveform& w, Index frame_shift) { return mdct<float>(w.samples, frame_shift); }

Waveform imdct_waveform(const Tensor<float>& spectrum, int sample_rate) {
    return Waveform{imdct(spectrum), sample_rate};
}

// ---------------------------------------------------------------------------
// mel spectrogram

Eigen::MatrixXd mel_filterbank(const MelConfig& cfg) {
    if (cfg.n_fft < 2 || cfg.n_mels < 1 || cfg.hop < 1 || cfg.sample_rate <= 0) {
        throw ConfigError("invalid mel spectrogram configuration");
    }
    auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto mel_to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const Index bins = cfg.n_fft / 2 + 1;
    const double top = hz_to_mel(cfg.sample_rate / 2.0);
    std::vector<double> edges(cfg.n_mels + 2);
    for (Index i = 0; i < cfg.n_mels + 2; ++i) {
        edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
    }
    Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, bins);
    for (Index m = 0; m < cfg.n_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (Index k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
            const double rise = (f - lo) / (mid - lo);
            const double fall = (hi - f) / (hi - mid);
            fb(m, k) = std::max(0.0, std::min(rise, fall));
        }
    }
    return fb;
}

template <typename S>
LogMelSpectrogram<S>::LogMelSpectrogram(const MelConfig& cfg) : cfg_(cfg) {
    const Eigen::MatrixXd fb = mel_filterbank(cfg);
    const Index n = cfg.n_fft, bins = n / 2 + 1;
    window_.resize(n);
    for (Index i = 0; i < n; ++i) {
        window_[i] = static_cast<S>(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
    }
    cos_.resize(bins, n);
    sin_.resize(bins, n);
    for (Index k = 0; k < bins; ++k) {
        for (Index i = 0; i < n; ++i) {
            const double phase = 2.0 * std::numbers::pi * static_cast<double>((k * i) % n) / static_cast<double>(n);
            cos_(k, i) = static_cast<S>(std::cos(phase));
            sin_(k, i) = static_cast<S>(-std::sin(phase));
        }
    }
    mel_ = fb.cast<S>();
}

namespace {

template <typename S>
struct StftState {
    Index length = 0;
    Index frames = 0;
    RowMatrix<S> re, im, mag, mel; // mag/re/im: [bins, F], mel: [n_mels, F]
};

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> frame_signal(const S* x, Index len, const MelConfig& cfg,
                                                              const Vector<S>& window) {
    const Index pad = cfg.n_fft / 2;
    if (len <= pad) {
        throw ConfigError("mel spectrogram input of " + std::to_string(len) + " samples is shorter than n_fft/2 + 1");
    }
    const Index frames = 1 + len / cfg.hop;
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out(cfg.n_fft, frames);
    for (Index f = 0; f < frames; ++f) {
        for (Index i = 0; i < cfg.n_fft; ++i) {
            out(i, f) = window[i] * x[reflect_source(f * cfg.hop + i, pad, len)];
        }
    }
    return out;
}

template <typename S>
StftState<S> analyze(const S* x, Index len, const MelConfig& cfg, const Vector<S>& window, const RowMatrix<S>& c,
                     const RowMatrix<S>& s, const RowMatrix<S>& mel) {
    StftState<S> st;
    st.length = len;
    const auto framed = frame_signal(x, len, cfg, window);
    st.frames = framed.cols();
    st.re.noalias() = c * framed;
    st.im.noalias() = s * framed;
    st.mag = (st.re.array().square() + st.im.array().square()).sqrt();
    st.mel.noalias() = mel * st.mag;
    return st;
}

} // namespace

template <typename S>
Tensor<S> LogMelSpectrogram<S>::operator()(const Eigen::Ref<const Vector<S>>& samples) const {
    const auto st = analyze(samples.data(), samples.size(), cfg_, window_, cos_, sin_, mel_);
    Tensor<S> out({cfg_.n_mels, st.frames});
    out.matrix() = st.mel.array().max(static_cast<S>(cfg_.floor)).log();
    return out;
}

template <typename S>
Var<S> LogMelSpectrogram<S>::operator()(const Var<S>& waveform) const {
    const Vector<S>& x = waveform.value().vec();
    auto st = std::make_shared<StftState<S>>(analyze(x.data(), x.size(), cfg_, window_, cos_, sin_, mel_));
    Tensor<S> out({cfg_.n_mels, st->frames});
    out.matrix() = st->mel.array().max(static_cast<S>(cfg_.floor)).log();
    return make_result<S>(std::move(out), {waveform}, [this, waveform, st](const Tensor<S>& g) {
        const S floor = static_cast<S>(cfg_.floor);
        const RowMatrix<S> g_mel = (st->mel.array() > floor).select(g.matrix().array() / st->mel.array(), S(0));
        const RowMatrix<S> g_mag = mel_.transpose() * g_mel;
        // |X| is not differentiable at 0; use the zero subgradient there.
        const RowMatrix<S> inv = (st->mag.array() > S(0)).select(st->mag.array().inverse(), S(0));
        const RowMatrix<S> g_re = g_mag.array() * st->re.array() * inv.array();
        const RowMatrix<S> g_im = g_mag.array() * st->im.array() * inv.array();
        const RowMatrix<S> g_frames = cos_.transpose() * g_re + sin_.transpose() * g_im; // [n_fft, F]
        const Index pad = cfg_.n_fft / 2;
        Vector<S> gx = Vector<S>::Zero(st->length);
        for (Index f = 0; f < st->frames; ++f) {
            for (Index i = 0; i < cfg_.n_fft; ++i) {
                gx[reflect_source(f * cfg_.hop + i, pad, st->length)] += window_[i] * g_frames(i, f);
            }
        }
        waveform.accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// metrics and noise

double ssnr(const Waveform& clean, const Waveform& decoded, Index segment, double lo, double hi) {
    const Index len = std::min(clean.size(), decoded.size());
    if (len == 0 || segment <= 0) return lo;
    const Index count = std::max<Index>(1, len / segment);
    double total = 0.0;
    for (Index s = 0; s < count; ++s) {
        const Index begin = s * segment;
        const Index n = std::min(segment, len - begin);
        double signal = 0.0, noise = 0.0;
        for (Index i = begin; i < begin + n; ++i) {
            const double c = clean.samples[i];
            const double e = c - static_cast<double>(decoded.samples[i]);
            signal += c * c;
            noise += e * e;
        }
        double snr;
        if (noise <= 0.0) {
            snr = hi; // exact, silent segments included
        } else if (signal <= 0.0) {
            snr = lo;
        } else {
            snr = std::clamp(10.0 * std::log10(signal / noise), lo, hi);
        }
        total += snr;
    }
    return total / static_cast<double>(count);
}

double snr_db(const Waveform& clean, const Waveform& noisy) {
    const Index len = std::min(clean.size(), noisy.size());
    double signal = 0.0, noise = 0.0;
    for (Index i = 0; i < len; ++i) {
        const double c = clean.samples[i];
        const double e = static_cast<double>(noisy.samples[i]) - c;
        signal += c * c;
        noise += e * e;
    }
    if (noise <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(signal / noise);
}

Waveform add_noise(const Waveform& w, double snr, std::uint64_t seed) {
    if (std::isinf(snr) && snr > 0) return w;
    if (std::isnan(snr)) throw ConfigError("noise SNR must be a number");
    Rng rng(seed);
    Eigen::VectorXd noise(w.size());
    for (Index i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    const double signal = w.samples.cast<double>().squaredNorm();
    const double target = signal / std::pow(10.0, snr / 10.0);
    const double current = noise.squaredNorm();
    if (current > 0.0) noise *= std::sqrt(target / current);
    Waveform out = w;
    out.samples = (w.samples.cast<double>() + noise).cast<float>();
    return out;
}

#define VNSC_INSTANTIATE_DSP(S)                                                      \
    template class MdctBasis<S>;                                                     \
    template class LogMelSpectrogram<S>;                                             \
    template Tensor<S> mdct<S>(const Eigen::Ref<const Vector<S>>&, Index);           \
    template Vector<S> imdct<S>(const Tensor<S>&);                                   \
    template Var<S> imdct<S>(const Var<S>&);

VNSC_INSTANTIATE_DSP(float)
VNSC_INSTANTIATE_DSP(double)

} // namespace vnsc
