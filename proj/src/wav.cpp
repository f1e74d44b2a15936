#include "vnsc/wav.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "vnsc/binary_io.hpp"

namespace vnsc {

namespace {

std::string read_tag(std::istream& is, const char* what) {
    char tag[4];
    if (!is.read(tag, 4)) throw FormatError(std::string("WAV: unexpected end of file reading ") + what);
    return std::string(tag, 4);
}

} // namespace

Waveform read_wav(std::istream& is, int expected_rate) {
    if (read_tag(is, "RIFF tag") != "RIFF") throw FormatError("WAV: missing RIFF header");
    io::read_le<std::uint32_t>(is, "RIFF size");
    if (read_tag(is, "WAVE tag") != "WAVE") throw FormatError("WAV: missing WAVE tag");

    bool have_fmt = false;
    std::uint32_t rate = 0;
    while (true) {
        const std::string id = read_tag(is, "chunk id");
        const auto size = io::read_le<std::uint32_t>(is, "chunk size");
        if (id == "fmt ") {
            if (size < 16) throw FormatError("WAV: fmt chunk too short");
            const auto format = io::read_le<std::uint16_t>(is, "format");
            const auto channels = io::read_le<std::uint16_t>(is, "channels");
            rate = io::read_le<std::uint32_t>(is, "sample rate");
            io::read_le<std::uint32_t>(is, "byte rate");
            io::read_le<std::uint16_t>(is, "block align");
            const auto bits = io::read_le<std::uint16_t>(is, "bits per sample");
            is.ignore(size - 16 + (size & 1));
            // 0xFFFE is WAVE_FORMAT_EXTENSIBLE; accepted when the rest says PCM16 mono.
            if ((format != 1 && format != 0xFFFE) || bits != 16) throw FormatError("WAV: only PCM16 is supported");
            if (channels != 1) throw FormatError("WAV: expected mono, got " + std::to_string(channels) + " channels");
            if (expected_rate > 0 && rate != static_cast<std::uint32_t>(expected_rate)) {
                throw FormatError("WAV: sample rate " + std::to_string(rate) + " Hz, expected " +
                                  std::to_string(expected_rate) + " Hz");
            }
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw FormatError("WAV: data chunk before fmt chunk");
            const Index count = size / 2;
            Waveform w;
            w.sample_rate = static_cast<int>(rate);
            w.samples.resize(count);
            for (Index i = 0; i < count; ++i) {
                w.samples[i] = static_cast<float>(io::read_le<std::int16_t>(is, "sample data")) / 32768.0f;
            }
            return w;
        } else {
            is.ignore(size + (size & 1));
            if (!is) throw FormatError("WAV: truncated chunk " + id);
        }
    }
}

Waveform read_wav(const std::filesystem::path& path, int expected_rate) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_wav(is, expected_rate);
}

void write_wav(std::ostream& os, const Waveform& w) {
    if (!w.samples.allFinite()) throw NumericalError("refusing to write non-finite samples to WAV");
    const auto bytes = static_cast<std::uint32_t>(w.size() * 2);
    os.write("RIFF", 4);
    io::write_le<std::uint32_t>(os, 36 + bytes);
    os.write("WAVEfmt ", 8);
    io::write_le<std::uint32_t>(os, 16);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate) * 2);
    io::write_le<std::uint16_t>(os, 2);
    io::write_le<std::uint16_t>(os, 16);
    os.write("data", 4);
    io::write_le<std::uint32_t>(os, bytes);
    for (Index i = 0; i < w.size(); ++i) {
        const double v = std::nearbyint(static_cast<double>(w.samples[i]) * 32768.0);
        const double clamped = std::clamp(v, -32768.0, 32767.0);
        io::write_le<std::int16_t>(os, static_cast<std::int16_t>(clamped));
    }
    if (!os) throw FormatError("failed writing WAV data");
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_wav(os, w);
}

} // namespace vnsc
