#include "vnsc/bitstream.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vnsc/binary_io.hpp"

namespace vnsc {

using io::read_le;
using io::write_le;

Index BitstreamHeader::payload_bits() const {
    return static_cast<Index>(latent_frames) * stages * bits_per_index(entries);
}

void BitWriter::put(std::uint32_t value, int bits) {
    if (bits < 1 || bits > 32) throw ConfigError("bit width must be in [1, 32]");
    if (bits < 32 && (value >> bits) != 0) {
        throw ConfigError("value " + std::to_string(value) + " does not fit in " + std::to_string(bits) + " bits");
    }
    for (int b = bits - 1; b >= 0; --b) {
        if (bits_ % 8 == 0) bytes_.push_back(0);
        if ((value >> b) & 1u) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
        ++bits_;
    }
}

std::vector<std::uint8_t> BitWriter::finish() {
    bits_ = 0;
    return std::exchange(bytes_, {});
}

std::uint32_t BitReader::get(int bits) {
    if (bits < 1 || bits > 32) throw ConfigError("bit width must be in [1, 32]");
    if (bits > bits_available()) {
        throw FormatError("bit reader ran out of data: wanted " + std::to_string(bits) + " bits, " +
                          std::to_string(bits_available()) + " left");
    }
    std::uint32_t v = 0;
    for (int b = 0; b < bits; ++b, ++pos_) v = (v << 1) | ((data_[pos_ / 8] >> (7 - pos_ % 8)) & 1u);
    return v;
}

std::vector<std::uint8_t> pack_indices(const CodeIndices& indices, Index entries) {
    const int bits = static_cast<int>(bits_per_index(entries));
    BitWriter w;
    for (std::uint32_t v : indices.values) {
        if (v >= static_cast<std::uint32_t>(entries)) {
            throw ConfigError("codeword index " + std::to_string(v) + " out of range for K=" + std::to_string(entries));
        }
        w.put(v, bits);
    }
    return w.finish();
}

CodeIndices unpack_indices(const std::vector<std::uint8_t>& payload, Index stages, Index frames, Index entries) {
    const Index bits = bits_per_index(entries);
    const Index expected = stages * frames * bits;
    const Index found = static_cast<Index>(payload.size()) * 8;
    const Index expected_bytes = (expected + 7) / 8;
    if (static_cast<Index>(payload.size()) < expected_bytes) {
        throw FormatError("truncated payload: expected " + std::to_string(expected) + " bits, found " +
                          std::to_string(found));
    }
    if (static_cast<Index>(payload.size()) > expected_bytes) {
        throw FormatError("payload too long: expected " + std::to_string(expected) + " bits, found " +
                          std::to_string(found));
    }
    BitReader r(payload.data(), payload.size());
    CodeIndices out(stages, frames);
    for (auto& v : out.values) {
        v = r.get(static_cast<int>(bits));
        if (v >= static_cast<std::uint32_t>(entries)) {
            throw FormatError("codeword index " + std::to_string(v) + " out of range for K=" + std::to_string(entries));
        }
    }
    if (r.bits_available() > 0 && r.get(static_cast<int>(r.bits_available())) != 0) {
        throw FormatError("nonzero padding bits after the payload");
    }
    return out;
}

void write_bitstream(std::ostream& os, const Bitstream& b) {
    const auto& h = b.header;
    if (b.indices.stages != h.stages || b.indices.frames != static_cast<Index>(h.latent_frames)) {
        throw ConfigError("bitstream header does not describe its indices");
    }
    os.write(bitstream_magic, sizeof bitstream_magic);
    write_le<std::uint32_t>(os, bitstream_version);
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(h.mode));
    write_le<std::uint32_t>(os, h.sample_rate);
    write_le<std::uint16_t>(os, h.frame_shift);
    write_le<std::uint16_t>(os, h.downsample);
    write_le<std::uint8_t>(os, h.stages);
    write_le<std::uint32_t>(os, h.entries);
    write_le<std::uint32_t>(os, h.latent_frames);
    const auto payload = pack_indices(b.indices, h.entries);
    os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!os) throw FormatError("failed writing bitstream");
}

Bitstream read_bitstream(std::istream& is) {
    io::expect_magic(is, bitstream_magic, "VNSCBITS bitstream");
    Bitstream b;
    auto& h = b.header;
    try {
        const auto version = read_le<std::uint32_t>(is, "version");
        if (version != bitstream_version) throw FormatError("unsupported bitstream version " + std::to_string(version));
        const auto mode = read_le<std::uint8_t>(is, "mode");
        if (mode > 2) throw FormatError("unknown bitstream mode " + std::to_string(mode));
        h.mode = static_cast<Scenario>(mode);
        h.sample_rate = read_le<std::uint32_t>(is, "sample_rate");
        h.frame_shift = read_le<std::uint16_t>(is, "frame_shift");
        h.downsample = read_le<std::uint16_t>(is, "downsample");
        h.stages = read_le<std::uint8_t>(is, "stages");
        h.entries = read_le<std::uint32_t>(is, "entries");
        h.latent_frames = read_le<std::uint32_t>(is, "latent_frames");
    } catch (const FormatError& e) {
        throw FormatError("bitstream header: " + std::string(e.what()));
    }
    if (h.stages < 1 || h.entries < 2) throw FormatError("bitstream header has an empty codebook configuration");
    const std::vector<std::uint8_t> payload{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
    b.indices = unpack_indices(payload, h.stages, h.latent_frames, h.entries);
    return b;
}

void write_bitstream(const std::filesystem::path& path, const Bitstream& b) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_bitstream(os, b);
}

Bitstream read_bitstream(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_bitstream(is);
}

BitstreamHeader make_header(const ModelConfig& cfg, Scenario mode, Index latent_frames) {
    BitstreamHeader h;
    h.mode = mode;
    h.sample_rate = static_cast<std::uint32_t>(cfg.sample_rate);
    h.frame_shift = static_cast<std::uint16_t>(cfg.codec.frame_shift);
    h.downsample = static_cast<std::uint16_t>(cfg.codec.downsample);
    h.stages = static_cast<std::uint8_t>(cfg.rvq.stages);
    h.entries = static_cast<std::uint32_t>(cfg.rvq.entries);
    h.latent_frames = static_cast<std::uint32_t>(latent_frames);
    return h;
}

void check_compatible(const BitstreamHeader& h, const ModelConfig& cfg) {
    auto mismatch = [](const char* what, auto stream, auto model) {
        throw FormatError(std::string("bitstream/model mismatch: ") + what + " is " + std::to_string(stream) +
                          " in the stream but " + std::to_string(model) + " in the model");
    };
    if (h.sample_rate != static_cast<std::uint32_t>(cfg.sample_rate)) mismatch("sample_rate", h.sample_rate, cfg.sample_rate);
    if (h.frame_shift != cfg.codec.frame_shift) mismatch("frame_shift", h.frame_shift, cfg.codec.frame_shift);
    if (h.downsample != cfg.codec.downsample) mismatch("downsample_factor", h.downsample, cfg.codec.downsample);
    if (h.stages != cfg.rvq.stages) mismatch("rvq_q", static_cast<unsigned>(h.stages), cfg.rvq.stages);
    if (h.entries != static_cast<std::uint32_t>(cfg.rvq.entries)) mismatch("rvq_k", h.entries, cfg.rvq.entries);
    const bool ok = h.mode == cfg.scenario || (h.mode == Scenario::audio_only && cfg.scenario == Scenario::vua);
    if (!ok) {
        throw FormatError("bitstream/model mismatch: " + to_string(h.mode) + " stream cannot be decoded by a " +
                          to_string(cfg.scenario) + " model");
    }
}

} // namespace vnsc
