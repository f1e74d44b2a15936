#include "vnsc/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "vnsc/wav.hpp"

namespace vnsc {

// ---------------------------------------------------------------------------
// toy data

namespace {

struct Syllable {
    double start, length, amplitude, f0, glide, noise_mix;
};

double envelope_at(const std::vector<Syllable>& syl, double t) {
    double e = 0.0;
    for (const auto& s : syl) {
        if (t < s.start || t >= s.start + s.length) continue;
        const double x = std::sin(std::numbers::pi * (t - s.start) / s.length);
        e += s.amplitude * x * x;
    }
    return e;
}

const Syllable* syllable_at(const std::vector<Syllable>& syl, double t) {
    for (const auto& s : syl)
        if (t >= s.start && t < s.start + s.length) return &s;
    return nullptr;
}

} // namespace

Dataset make_toy_dataset(std::uint64_t seed, const ToyDatasetConfig& cfg) {
    if (cfg.utterances < 1) throw ConfigError("toy dataset needs at least one utterance");
    if (!(cfg.duration > 0)) throw ConfigError("toy utterance duration must be positive");
    if (cfg.image_size < 4) throw ConfigError("toy image size must be at least 4");
    const Index n = static_cast<Index>(std::llround(cfg.duration * cfg.sample_rate));
    const double fs = cfg.sample_rate;
    constexpr int fps = 60;
    const Index video_frames = static_cast<Index>(std::ceil(cfg.duration * fps));
    const Index size = cfg.image_size;

    Dataset out;
    out.reserve(static_cast<std::size_t>(cfg.utterances));
    for (Index u = 0; u < cfg.utterances; ++u) {
        Rng rng(derive_seed(seed, 100, static_cast<std::uint64_t>(u)));
        std::vector<Syllable> syl;
        for (double t = rng.uniform(0.02, 0.1); t < cfg.duration;) {
            Syllable s{t, rng.uniform(0.12, 0.3), rng.uniform(0.35, 1.0), rng.uniform(100.0, 250.0),
                       rng.uniform(-0.3, 0.3), rng.uniform(0.05, 0.4)};
            syl.push_back(s);
            t += s.length + rng.uniform(0.02, 0.15);
        }
        const double lowpass = rng.uniform(0.3, 0.9);
        const int harmonics = 3 + static_cast<int>(rng.below(4));

        Utterance utt;
        utt.name = "toy" + std::to_string(u);
        utt.wave.sample_rate = cfg.sample_rate;
        utt.wave.samples.resize(n);
        double phase = 0.0, noise = 0.0, peak = 0.0;
        std::vector<double> wave(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / fs;
            noise = lowpass * noise + (1.0 - lowpass) * rng.normal();
            const Syllable* s = syllable_at(syl, t);
            double tone = 0.0, mix = 0.2;
            if (s) {
                const double f = s->f0 * (1.0 + s->glide * (t - s->start) / s->length);
                phase += 2.0 * std::numbers::pi * f / fs;
                for (int h = 1; h <= harmonics; ++h) tone += std::sin(h * phase) / h;
                mix = s->noise_mix;
            }
            const double x = envelope_at(syl, t) * ((1.0 - mix) * tone + mix * 3.0 * noise);
            wave[static_cast<std::size_t>(i)] = x;
            peak = std::max(peak, std::abs(x));
        }
        const double gain = peak > 0 ? 0.5 / peak : 0.0;
        for (Index i = 0; i < n; ++i) utt.wave.samples[i] = static_cast<float>(gain * wave[static_cast<std::size_t>(i)]);

        // mouth: dark ellipse on a lighter face, opening follows the envelope
        auto& v = utt.lips;
        v.fps_num = fps;
        v.fps_den = 1;
        v.frames = video_frames;
        v.height = v.width = size;
        v.pixels.resize(static_cast<std::size_t>(video_frames * size * size));
        const double drift_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (Index f = 0; f < video_frames; ++f) {
            // average opening over the frame's exposure
            double aperture = 0.0;
            for (int k = 0; k < 8; ++k) aperture += envelope_at(syl, (f + (k + 0.5) / 8.0) / fps) / 8.0;
            aperture = std::min(aperture, 1.0);
            const double t = static_cast<double>(f) / fps;
            const double cx = 0.5 * size + 0.04 * size * std::sin(2.0 * std::numbers::pi * 0.4 * t + drift_phase);
            const double cy = 0.55 * size;
            const double rx = 0.32 * size;
            const double ry = size * (0.03 + 0.25 * aperture);
            for (Index y = 0; y < size; ++y)
                for (Index x = 0; x < size; ++x) {
                    const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
                    const double r = std::sqrt(dx * dx + dy * dy);
                    const double inside = std::clamp((1.0 - r) * std::min(rx, ry) + 0.5, 0.0, 1.0);
                    const double value = 175.0 - 140.0 * inside + 3.0 * rng.normal();
                    v.pixels[static_cast<std::size_t>((f * size + y) * size + x)] =
                        static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
                }
        }
        out.push_back(std::move(utt));
    }
    return out;
}

Vector<double> lip_aperture(const LipVideo& video) {
    const Index plane = video.height * video.width;
    Vector<double> a(video.frames);
    for (Index f = 0; f < video.frames; ++f) {
        const std::uint8_t* p = video.frame(f);
        a[f] = static_cast<double>(std::count_if(p, p + plane, [](std::uint8_t x) { return x < 100; })) /
               static_cast<double>(plane);
    }
    return a;
}

Dataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> wavs;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".wav") wavs.push_back(e.path());
    std::sort(wavs.begin(), wavs.end());
    if (wavs.empty()) throw FormatError("no .wav files in " + dir.string());
    Dataset out;
    for (const auto& p : wavs) {
        Utterance u;
        u.name = p.stem().string();
        u.wave = read_wav(p);
        auto lips = p;
        lips.replace_extension(".lips");
        if (std::filesystem::exists(lips)) u.lips = read_lips(lips);
        out.push_back(std::move(u));
    }
    return out;
}

// ---------------------------------------------------------------------------
// optimizer

template <typename S>
AdamW<S>::AdamW(const ParameterStore<S>& store, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto& p : store.all()) {
        if (!p.trainable) continue;
        names_.push_back(p.name);
        m_.emplace_back(p.var.shape());
        v_.emplace_back(p.var.shape());
    }
}

template <typename S>
void AdamW<S>::step(ParameterStore<S>& store, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < names_.size(); ++i) {
        Var<S> var = store.get(names_[i]);
        if (!var.has_grad()) continue;
        const Tensor<S>& g = var.grad();
        Tensor<S>& p = var.mutable_value();
        auto& m = m_[i];
        auto& v = v_[i];
        for (Index j = 0; j < p.size(); ++j) {
            const double gj = g[j];
            m[j] = static_cast<S>(beta1_ * m[j] + (1.0 - beta1_) * gj);
            v[j] = static_cast<S>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
            const double m_hat = m[j] / c1, v_hat = v[j] / c2;
            const double decayed = p[j] * (1.0 - lr * weight_decay_);
            p[j] = static_cast<S>(decayed - lr * m_hat / (std::sqrt(v_hat) + eps_));
        }
    }
}

template <typename S>
NamedTensors AdamW<S>::export_state() const {
    NamedTensors out;
    out.emplace_back("step", Tensor<float>::constant({1}, static_cast<float>(steps_)));
    for (std::size_t i = 0; i < names_.size(); ++i) {
        out.emplace_back(names_[i] + ".m", m_[i].template cast<float>());
        out.emplace_back(names_[i] + ".v", v_[i].template cast<float>());
    }
    return out;
}

template <typename S>
void AdamW<S>::import_state(const NamedTensors& state) {
    if (state.size() != 1 + 2 * names_.size() || state.front().first != "step" || state.front().second.size() != 1) {
        throw FormatError("optimizer state does not match the model's trainable parameters");
    }
    const float step = state.front().second[0];
    if (!(step >= 0) || step != std::floor(step)) throw FormatError("optimizer step count is not a whole number");
    for (std::size_t i = 0; i < names_.size(); ++i) {
        const auto& [mn, m] = state[1 + 2 * i];
        const auto& [vn, v] = state[2 + 2 * i];
        if (mn != names_[i] + ".m" || vn != names_[i] + ".v") {
            throw FormatError("optimizer state entry " + mn + " does not match parameter " + names_[i]);
        }
        if (m.shape() != m_[i].shape() || v.shape() != v_[i].shape()) {
            throw FormatError("optimizer state shape mismatch for " + names_[i]);
        }
        m_[i] = m.template cast<S>();
        v_[i] = v.template cast<S>();
    }
    steps_ = static_cast<Index>(step);
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------------------
// trainer

namespace {

Tensor<float> concat_columns(const std::vector<Tensor<float>>& parts) {
    Index cols = 0;
    for (const auto& p : parts) cols += p.dim(1);
    Tensor<float> out({parts.front().dim(0), cols});
    Index c = 0;
    for (const auto& p : parts) {
        out.matrix().middleCols(c, p.dim(1)) = p.matrix();
        c += p.dim(1);
    }
    return out;
}

void accumulate(LossReport& acc, const LossReport& r, double w) {
    acc.l_mdct += w * r.l_mdct;
    acc.l_mel += w * r.l_mel;
    acc.l_quant += w * r.l_quant;
    acc.l_image += w * r.l_image;
    acc.l_distill += w * r.l_distill;
    acc.total += w * r.total;
}

} // namespace

Trainer::Trainer(VnscModel<float>& model, const TrainConfig& cfg, Dataset data)
    : model_(model), cfg_(cfg), data_(std::move(data)),
      optimizer_(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay) {
    cfg_.validate();
    if (data_.empty()) throw ConfigError("training needs at least one utterance");
    const auto& mc = model_.config();
    for (const auto& u : data_) {
        if (u.wave.sample_rate != mc.sample_rate) {
            throw FormatError(u.name + ": sample rate " + std::to_string(u.wave.sample_rate) + ", model expects " +
                              std::to_string(mc.sample_rate));
        }
        if (!mc.has_vision()) {
            aligned_.emplace_back();
            continue;
        }
        if (u.lips.frames == 0) throw FormatError(u.name + ": " + to_string(mc.scenario) + " training needs lips");
        if (u.lips.height != mc.vision.image_size || u.lips.width != mc.vision.image_size) {
            throw FormatError(u.name + ": lip frames are " + std::to_string(u.lips.height) + "x" +
                              std::to_string(u.lips.width) + ", model expects " +
                              std::to_string(mc.vision.image_size));
        }
        aligned_.push_back(align_video(u.lips, model_.encoder_frames_for_samples(u.wave.size()) + 1,
                                       mc.sample_rate / static_cast<int>(mc.codec.frame_shift)));
    }
}

Index Trainer::steps_per_epoch() const {
    const auto n = static_cast<Index>(data_.size());
    return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

Index Trainer::total_steps() const { return cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * steps_per_epoch(); }

double Trainer::learning_rate(Index step) const {
    return cfg_.lr * std::pow(cfg_.lr_decay, static_cast<double>(step / steps_per_epoch()));
}

Example Trainer::example(std::size_t u, Index offset, Index frames) const {
    const Index m = model_.config().codec.frame_shift;
    const auto& src = data_.at(u).wave.samples;
    Example ex;
    ex.wave = Vector<float>::Zero(frames * m);
    const Index begin = offset * m;
    const Index count = std::clamp<Index>(src.size() - begin, 0, frames * m);
    if (count > 0) ex.wave.head(count) = src.segment(begin, count);
    if (model_.config().has_vision()) {
        const Tensor<float>& full = aligned_[u];
        const Index grid = model_.encoder_frames_for_samples(frames * m);
        const Index plane = full.dim(2) * full.dim(3);
        ex.lips = Tensor<float>({1, grid, full.dim(2), full.dim(3)});
        for (Index n = 0; n < grid; ++n) {
            const Index s = std::min(offset + n, full.dim(1) - 1);
            ex.lips.vec().segment(n * plane, plane) = full.vec().segment(s * plane, plane);
        }
    }
    return ex;
}

LossReport Trainer::step() {
    const Index step = steps_done();
    const std::uint64_t seed = model_.config().seed;
    const auto n = static_cast<Index>(data_.size());
    const Index m = model_.config().codec.frame_shift;

    std::vector<std::size_t> order(data_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(seed, 20, static_cast<std::uint64_t>(step / steps_per_epoch())));
    for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

    Rng crop(derive_seed(seed, 21, static_cast<std::uint64_t>(step)));
    std::vector<Example> batch;
    for (Index b = 0; b < cfg_.batch_size; ++b) {
        const std::size_t u = order[((step % steps_per_epoch()) * cfg_.batch_size + b) % n];
        const Index hops = data_[u].wave.size() / m;
        const Index offset = hops > cfg_.crop_frames ? crop.below(hops - cfg_.crop_frames + 1) : 0;
        batch.push_back(example(u, offset, cfg_.crop_frames));
    }
    auto lips_of = [&](const Example& ex) { return model_.config().has_vision() ? &ex.lips : nullptr; };

    auto& vq = model_.quantizer();
    if (!vq.initialized()) {
        NoGradGuard no_grad;
        std::vector<Tensor<float>> latents;
        for (const auto& ex : batch) latents.push_back(model_.forward(ex.wave, lips_of(ex), false).latent.value());
        Rng init(derive_seed(seed, 22));
        vq.initialize(concat_columns(latents), init);
    }

    model_.parameters().zero_grad();
    LossReport report;
    std::vector<Tensor<float>> latents;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        ForwardPass<float> pass = model_.forward(ex.wave, lips_of(ex), true);
        for (const auto& [name, term] : pass.terms) {
            if (!std::isfinite(term.item())) {
                throw NumericalError("non-finite " + name + " at step " + std::to_string(step));
            }
        }
        if (!std::isfinite(pass.total.item())) throw NumericalError("non-finite total loss at step " + std::to_string(step));
        backward(scale(pass.total, static_cast<float>(w)));
        accumulate(report, pass.report, w);
        latents.push_back(pass.latent.value());
    }
    for (const auto& p : model_.parameters().all()) {
        if (p.trainable && p.var.has_grad() && !p.var.grad().vec().allFinite()) {
            throw NumericalError("non-finite gradient for " + p.name + " at step " + std::to_string(step));
        }
    }
    optimizer_.step(model_.parameters(), learning_rate(step));

    const Tensor<float> all = concat_columns(latents);
    Rng ema(derive_seed(seed, 23, static_cast<std::uint64_t>(step)));
    vq.update(all, vq.quantize(all), ema);
    return report;
}

LossReport evaluate(const VnscModel<float>& model, const Dataset& data, Index frames) {
    NoGradGuard no_grad;
    const auto& mc = model.config();
    const Index m = mc.codec.frame_shift;
    LossReport report;
    for (const auto& u : data) {
        Vector<float> wave = Vector<float>::Zero(frames * m);
        const Index count = std::min<Index>(u.wave.size(), frames * m);
        wave.head(count) = u.wave.samples.head(count);
        Tensor<float> lips;
        if (mc.has_vision()) {
            lips = align_video(u.lips, model.encoder_frames_for_samples(frames * m),
                               mc.sample_rate / static_cast<int>(m));
        }
        const auto pass = model.forward(wave, mc.has_vision() ? &lips : nullptr, false);
        accumulate(report, pass.report, 1.0 / static_cast<double>(data.size()));
    }
    return report;
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const std::filesystem::path& dir, const Config& cfg, const VnscModel<float>& model,
                     const AdamW<float>* optimizer) {
    std::filesystem::create_directories(dir);
    model.parameters().save(dir / "model.vnscparm");
    if (optimizer) write_parameter_file(dir / "optim.vnscparm", optimizer->export_state());
    std::ofstream os(dir / "config.txt");
    os << echo_config(cfg);
    if (!os) throw FormatError("cannot write " + (dir / "config.txt").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw FormatError("checkpoint directory not found: " + dir.string());
    Checkpoint ck;
    try {
        ck.config = load_config(dir / "config.txt");
    } catch (const ConfigError& e) {
        throw FormatError("checkpoint config: " + std::string(e.what()));
    }
    ck.model = std::make_unique<VnscModel<float>>(ck.config.model);
    ck.model->parameters().load(dir / "model.vnscparm");
    if (std::filesystem::exists(dir / "optim.vnscparm")) ck.optimizer = read_parameter_file(dir / "optim.vnscparm");
    return ck;
}

std::string format_report(const LossReport& r) {
    std::ostringstream os;
    os.precision(9);
    os << "l_mdct=" << r.l_mdct << " l_mel=" << r.l_mel << " l_quant=" << r.l_quant << " l_image=" << r.l_image
       << " l_distill=" << r.l_distill << " total=" << r.total;
    return os.str();
}

} // namespace vnsc
