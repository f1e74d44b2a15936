#include "vnsc/cli.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <optional>
#include <ostream>

#include "vnsc/bitstream.hpp"
#include "vnsc/training.hpp"
#include "vnsc/wav.hpp"

namespace vnsc {

namespace {

struct EncodeArgs {
    std::string in, lips, model, mode, out;
};
struct DecodeArgs {
    std::string in, model, out;
};
struct TrainArgs {
    std::string config, data = "toy", scenario, out;
    std::optional<std::uint64_t> seed;
    bool resume = false;
};
struct EvalArgs {
    std::string ref, deg, model, lips, mode;
    std::optional<double> noise_snr;
    std::uint64_t seed = 0;
};

Checkpoint open_model(const std::string& dir) { return load_checkpoint(dir); }

Scenario resolve_mode(const std::string& mode, const ModelConfig& cfg) {
    return mode.empty() ? cfg.scenario : parse_scenario(mode);
}

/// Lip file on the model's encoder grid; only VA inference takes one.
std::optional<Tensor<float>> inference_lips(const std::string& path, Scenario mode, const VnscModel<float>& model,
                                            Index samples) {
    if (mode != Scenario::va) {
        if (!path.empty()) throw UsageError("--lips is only accepted in va mode (mode is " + to_string(mode) + ")");
        return std::nullopt;
    }
    if (path.empty()) throw UsageError("va mode requires --lips");
    const LipVideo video = read_lips(std::filesystem::path(path));
    const Index size = model.config().vision.image_size;
    if (video.height != size || video.width != size) {
        throw FormatError("lip frames are " + std::to_string(video.height) + "x" + std::to_string(video.width) +
                          ", model expects " + std::to_string(size) + "x" + std::to_string(size));
    }
    const auto& mc = model.config();
    return align_video(video, model.encoder_frames_for_samples(samples),
                       mc.sample_rate / static_cast<int>(mc.codec.frame_shift));
}

Bitstream encode_wave(const VnscModel<float>& model, const Waveform& wave, Scenario mode, const std::string& lips) {
    const auto aligned = inference_lips(lips, mode, model, wave.size());
    Bitstream b;
    b.indices = model.encode(wave.samples, aligned ? &*aligned : nullptr, mode);
    b.header = make_header(model.config(), mode, b.indices.frames);
    return b;
}

void print_rate(std::ostream& out, const Bitstream& b, Index samples, int rate) {
    const double seconds = static_cast<double>(samples) / rate;
    const Index bits = b.header.payload_bits();
    const double nominal = static_cast<double>(b.header.stages * bits_per_index(b.header.entries)) * rate /
                           (b.header.frame_shift * b.header.downsample);
    out << "mode=" << to_string(b.header.mode) << " samples=" << samples << " latent_frames=" << b.header.latent_frames
        << " payload_bits=" << bits << " header_bytes=" << bitstream_header_bytes
        << " bitrate_bps=" << static_cast<double>(bits) / seconds << " nominal_bps=" << nominal << "\n";
}

int cmd_encode(const EncodeArgs& a, std::ostream& out) {
    const Checkpoint ck = open_model(a.model);
    const Scenario mode = resolve_mode(a.mode, ck.config.model);
    const Waveform wave = read_wav(std::filesystem::path(a.in), ck.config.model.sample_rate);
    const Bitstream b = encode_wave(*ck.model, wave, mode, a.lips);
    write_bitstream(std::filesystem::path(a.out), b);
    print_rate(out, b, wave.size(), wave.sample_rate);
    return exit_ok;
}

int cmd_decode(const DecodeArgs& a, std::ostream& out) {
    const Bitstream b = read_bitstream(std::filesystem::path(a.in));
    const Checkpoint ck = open_model(a.model);
    check_compatible(b.header, ck.config.model);
    Waveform w;
    w.sample_rate = ck.config.model.sample_rate;
    w.samples = ck.model->decode(b.indices);
    write_wav(std::filesystem::path(a.out), w);
    out << "latent_frames=" << b.header.latent_frames << " samples=" << w.size() << "\n";
    return exit_ok;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    std::optional<Scenario> scenario;
    if (!a.scenario.empty()) scenario = parse_scenario(a.scenario);
    const std::filesystem::path dir(a.out);

    Config cfg;
    std::unique_ptr<VnscModel<float>> model;
    NamedTensors optimizer_state;
    if (a.resume) {
        Checkpoint ck = load_checkpoint(dir);
        if (scenario && *scenario != ck.config.model.scenario) {
            throw UsageError("--scenario " + to_string(*scenario) + " does not match the checkpoint's " +
                             to_string(ck.config.model.scenario));
        }
        if (ck.optimizer.empty()) throw FormatError("checkpoint has no optimizer state to resume from");
        cfg = ck.config;
        model = std::move(ck.model);
        optimizer_state = std::move(ck.optimizer);
    } else {
        cfg = a.config.empty() ? parse_config("", scenario) : load_config(a.config, scenario);
        if (a.seed) cfg.model.seed = *a.seed;
        model = std::make_unique<VnscModel<float>>(cfg.model);
    }

    Dataset data;
    if (a.data == "toy") {
        data = make_toy_dataset(cfg.model.seed, {.utterances = cfg.train.toy_utterances,
                                                 .duration = cfg.train.toy_duration,
                                                 .image_size = cfg.model.vision.image_size,
                                                 .sample_rate = cfg.model.sample_rate});
    } else {
        data = load_dataset(a.data);
    }

    Trainer trainer(*model, cfg.train, std::move(data));
    if (!optimizer_state.empty()) trainer.optimizer().import_state(optimizer_state);
    const Index per_epoch = trainer.steps_per_epoch();
    const Index total = trainer.total_steps();
    LossReport epoch_sum;
    Index in_epoch = 0;
    out << std::setprecision(9);
    while (trainer.steps_done() < total) {
        const Index step = trainer.steps_done();
        const LossReport r = trainer.step();
        epoch_sum.l_mdct += r.l_mdct;
        epoch_sum.l_mel += r.l_mel;
        epoch_sum.l_quant += r.l_quant;
        epoch_sum.l_image += r.l_image;
        epoch_sum.l_distill += r.l_distill;
        epoch_sum.total += r.total;
        ++in_epoch;
        if (trainer.steps_done() % per_epoch == 0 || trainer.steps_done() == total) {
            const double k = 1.0 / static_cast<double>(in_epoch);
            const LossReport mean{epoch_sum.l_mdct * k, epoch_sum.l_mel * k,    epoch_sum.l_quant * k,
                                  epoch_sum.l_image * k, epoch_sum.l_distill * k, epoch_sum.total * k};
            out << "epoch=" << step / per_epoch + 1 << " step=" << trainer.steps_done()
                << " lr=" << trainer.learning_rate(step) << " " << format_report(mean) << "\n";
            save_checkpoint(dir, cfg, *model, &trainer.optimizer());
            epoch_sum = {};
            in_epoch = 0;
        }
    }
    if (trainer.steps_done() == 0 || in_epoch == 0) save_checkpoint(dir, cfg, *model, &trainer.optimizer());
    out << "checkpoint=" << dir.string() << " steps=" << trainer.steps_done() << "\n";
    return exit_ok;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    if (a.deg.empty() == a.model.empty()) throw UsageError("eval needs exactly one of --deg or --model");
    out << std::setprecision(9);
    if (!a.deg.empty()) {
        if (a.noise_snr) throw UsageError("--noise-snr applies only to --model evaluation");
        if (!a.lips.empty() || !a.mode.empty()) throw UsageError("--lips and --mode need --model");
        const Waveform ref = read_wav(std::filesystem::path(a.ref));
        const Waveform deg = read_wav(std::filesystem::path(a.deg));
        const Index n = std::min(ref.size(), deg.size());
        const double mse = n ? (ref.samples.head(n) - deg.samples.head(n)).cast<double>().squaredNorm() / n : 0.0;
        out << "ssnr_db=" << ssnr(ref, deg) << " mse=" << mse << " samples=" << n << "\n";
        return exit_ok;
    }
    const Checkpoint ck = open_model(a.model);
    const Scenario mode = resolve_mode(a.mode, ck.config.model);
    const Waveform ref = read_wav(std::filesystem::path(a.ref), ck.config.model.sample_rate);
    const Waveform input = a.noise_snr ? add_noise(ref, *a.noise_snr, a.seed) : ref;
    const Bitstream b = encode_wave(*ck.model, input, mode, a.lips);
    Waveform dec;
    dec.sample_rate = ref.sample_rate;
    dec.samples = ck.model->decode(b.indices);
    if (!dec.samples.allFinite()) throw NumericalError("decoder produced non-finite samples");
    const Index n = std::min(ref.size(), dec.size());
    const double mse = (ref.samples.head(n) - dec.samples.head(n)).cast<double>().squaredNorm() / n;
    out << "ssnr_db=" << ssnr(ref, dec) << " mse=" << mse << " samples=" << n;
    if (a.noise_snr) out << " input_snr_db=" << snr_db(ref, input);
    out << " payload_bits=" << b.header.payload_bits()
        << " bitrate_bps=" << static_cast<double>(b.header.payload_bits()) * ref.sample_rate / ref.size() << "\n";
    return exit_ok;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Speech codec with optional lip-video conditioning", "vnsc"};
    app.require_subcommand(1);

    EncodeArgs enc;
    auto* encode = app.add_subcommand("encode", "Encode a 48 kHz PCM16 mono WAV to a bitstream");
    encode->add_option("--in", enc.in, "Input WAV")->required();
    encode->add_option("--lips", enc.lips, "Lip video (va mode only)");
    encode->add_option("--model", enc.model, "Checkpoint directory")->required();
    encode->add_option("--mode", enc.mode, "audio-only, va or vua (default: the model's scenario)");
    encode->add_option("--out", enc.out, "Output bitstream")->required();

    DecodeArgs dec;
    auto* decode = app.add_subcommand("decode", "Decode a bitstream to WAV");
    decode->add_option("--in", dec.in, "Input bitstream")->required();
    decode->add_option("--model", dec.model, "Checkpoint directory")->required();
    decode->add_option("--out", dec.out, "Output WAV")->required();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a model and write a checkpoint directory");
    train->add_option("--config", tr.config, "key=value config file");
    train->add_option("--data", tr.data, "Directory of WAV (+ .lips) files, or 'toy'");
    train->add_option("--scenario", tr.scenario, "audio-only, va or vua");
    train->add_option("--out", tr.out, "Checkpoint directory")->required();
    train->add_option("--seed", tr.seed, "Overrides the config seed");
    train->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "SSNR of a degraded file, or of an encode/decode round trip");
    eval->add_option("--ref", ev.ref, "Reference WAV")->required();
    eval->add_option("--deg", ev.deg, "Degraded WAV");
    eval->add_option("--model", ev.model, "Checkpoint directory (encode + decode --ref)");
    eval->add_option("--lips", ev.lips, "Lip video (va mode only)");
    eval->add_option("--mode", ev.mode, "audio-only, va or vua");
    eval->add_option("--noise-snr", ev.noise_snr, "Add white noise at this SNR (dB) before encoding");
    eval->add_option("--seed", ev.seed, "Noise seed");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*encode) return cmd_encode(enc, out);
        if (*decode) return cmd_decode(dec, out);
        if (*train) return cmd_train(tr, out);
        return cmd_eval(ev, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return exit_usage;
    } catch (const AlignmentError& e) {
        err << "alignment error: " << e.what() << "\n";
        return exit_format;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return exit_format;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "file error: " << e.what() << "\n";
        return exit_format;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return exit_numerical;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return exit_internal;
    }
}

} // namespace vnsc
