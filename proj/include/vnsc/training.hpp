#ifndef VNSC_TRAINING_HPP
#define VNSC_TRAINING_HPP

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vnsc/config.hpp"
#include "vnsc/model.hpp"

namespace vnsc {

struct Utterance {
    std::string name;
    Waveform wave;
    LipVideo lips; // frames == 0 when absent
};

using Dataset = std::vector<Utterance>;

struct ToyDatasetConfig {
    Index utterances = 8;
    double duration = 1.0; // seconds
    Index image_size = 64;
    int sample_rate = default_sample_rate;
};

/// Syllable-like envelopes over harmonic tones plus low-passed noise, with a
/// 60 fps moving-ellipse mouth whose opening follows the envelope.
Dataset make_toy_dataset(std::uint64_t seed, const ToyDatasetConfig& cfg);

/// Mouth opening of every video frame, measured as the dark-pixel fraction.
Vector<double> lip_aperture(const LipVideo& video);

/// Loads every *.wav in `dir` (sorted by name) and the matching *.lips file
/// when present.
Dataset load_dataset(const std::filesystem::path& dir);

/// Decoupled weight decay with bias-corrected moments:
/// p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps).
/// Trainable parameters without a gradient are left untouched.
template <typename S>
class AdamW {
public:
    AdamW(const ParameterStore<S>& store, double beta1, double beta2, double eps, double weight_decay);

    void step(ParameterStore<S>& store, double lr);
    Index steps() const { return steps_; }

    /// "step", then "<param>.m" and "<param>.v" per trainable parameter.
    NamedTensors export_state() const;
    void import_state(const NamedTensors& state);

private:
    double beta1_, beta2_, eps_, weight_decay_;
    Index steps_ = 0;
    std::vector<std::string> names_;
    std::vector<Tensor<S>> m_, v_;
};

/// Model-ready example: a fixed-length waveform crop and its lips on the
/// encoder grid (empty when the scenario has no vision).
struct Example {
    Vector<float> wave;
    Tensor<float> lips;
};

class Trainer {
public:
    Trainer(VnscModel<float>& model, const TrainConfig& cfg, Dataset data);

    /// One optimizer step over a seeded batch. Non-finite losses or gradients
    /// throw NumericalError naming the term or parameter.
    LossReport step();

    Index steps_done() const { return optimizer_.steps(); }
    Index steps_per_epoch() const;
    Index total_steps() const;
    double learning_rate(Index step) const;

    AdamW<float>& optimizer() { return optimizer_; }
    const AdamW<float>& optimizer() const { return optimizer_; }

    /// Crop `frames` MDCT hops starting at hop `offset` of utterance `u`.
    Example example(std::size_t u, Index offset, Index frames) const;

private:
    VnscModel<float>& model_;
    TrainConfig cfg_;
    Dataset data_;
    std::vector<Tensor<float>> aligned_; // per utterance, full-length lips on the 1200 Hz grid
    AdamW<float> optimizer_;
};

/// Mean LossReport over the first `frames` hops of each utterance, in
/// inference mode (running norm statistics, no gradient).
LossReport evaluate(const VnscModel<float>& model, const Dataset& data, Index frames);

/// model.vnscparm, optim.vnscparm and config.txt.
void save_checkpoint(const std::filesystem::path& dir, const Config& cfg, const VnscModel<float>& model,
                     const AdamW<float>* optimizer = nullptr);

struct Checkpoint {
    Config config;
    std::unique_ptr<VnscModel<float>> model;
    NamedTensors optimizer; // empty when no optimizer state was saved
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string format_report(const LossReport& r);

} // namespace vnsc

#endif // VNSC_TRAINING_HPP
