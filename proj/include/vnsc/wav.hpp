#ifndef VNSC_WAV_HPP
#define VNSC_WAV_HPP

#include <filesystem>
#include <iosfwd>

#include "vnsc/dsp.hpp"

namespace vnsc {

// PCM16 mono only. Samples are normalized as value / 32768 on read; writing
// rounds x * 32768 and saturates to the int16 range.
Waveform read_wav(std::istream& is, int expected_rate = default_sample_rate);
Waveform read_wav(const std::filesystem::path& path, int expected_rate = default_sample_rate);
void write_wav(std::ostream& os, const Waveform& w);
void write_wav(const std::filesystem::path& path, const Waveform& w);

} // namespace vnsc

#endif // VNSC_WAV_HPP
