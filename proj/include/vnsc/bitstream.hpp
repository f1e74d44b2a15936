#ifndef VNSC_BITSTREAM_HPP
#define VNSC_BITSTREAM_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "vnsc/model.hpp"

namespace vnsc {

inline constexpr char bitstream_magic[8] = {'V', 'N', 'S', 'C', 'B', 'I', 'T', 'S'};
inline constexpr std::uint32_t bitstream_version = 1;
inline constexpr std::size_t bitstream_header_bytes = 30;

/// magic, version u32, mode u8, sample_rate u32, frame_shift u16,
/// downsample u16, stages u8, entries u32, latent frames u32; little-endian.
struct BitstreamHeader {
    Scenario mode = Scenario::audio_only;
    std::uint32_t sample_rate = default_sample_rate;
    std::uint16_t frame_shift = 40;
    std::uint16_t downsample = 8;
    std::uint8_t stages = 4;
    std::uint32_t entries = 1024;
    std::uint32_t latent_frames = 0;

    Index payload_bits() const;
    bool operator==(const BitstreamHeader&) const = default;
};

struct Bitstream {
    BitstreamHeader header;
    CodeIndices indices;
};

/// MSB-first bit packing.
class BitWriter {
public:
    void put(std::uint32_t value, int bits);
    Index bits_written() const { return bits_; }
    /// Zero-pads to a byte boundary.
    std::vector<std::uint8_t> finish();

private:
    std::vector<std::uint8_t> bytes_;
    Index bits_ = 0;
};

class BitReader {
public:
    BitReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    std::uint32_t get(int bits);
    Index bits_read() const { return pos_; }
    Index bits_available() const { return static_cast<Index>(size_) * 8 - pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    Index pos_ = 0;
};

/// Stage-major, then frame-major; ceil(log2 K) bits per index.
std::vector<std::uint8_t> pack_indices(const CodeIndices& indices, Index entries);
CodeIndices unpack_indices(const std::vector<std::uint8_t>& payload, Index stages, Index frames, Index entries);

void write_bitstream(std::ostream& os, const Bitstream& b);
Bitstream read_bitstream(std::istream& is);
void write_bitstream(const std::filesystem::path& path, const Bitstream& b);
Bitstream read_bitstream(const std::filesystem::path& path);

BitstreamHeader make_header(const ModelConfig& cfg, Scenario mode, Index latent_frames);

/// Throws FormatError when the stream was not produced by a model with this
/// configuration. An audio-only stream decodes with a VUA model as well.
void check_compatible(const BitstreamHeader& h, const ModelConfig& cfg);

} // namespace vnsc

#endif // VNSC_BITSTREAM_HPP
