#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clapkit {

/// Decoded multi-channel audio, samples interleaved, amplitudes in [-1, 1].
struct DecodedAudio {
  std::vector<double> samples;  // frame-interleaved
  int channels = 0;
  int sample_rate = 0;
};

/// RIFF WAV reader: PCM 16/24/32-bit and 32-bit float, plain or extensible.
DecodedAudio read_wav(const std::string& path);

/// FLAC reader: constant/verbatim/fixed/LPC subframes, Rice residuals,
/// stereo decorrelation, CRC-verified.
DecodedAudio read_flac(const std::string& path);

/// Dispatches on the container magic (RIFF vs fLaC), not the extension.
DecodedAudio read_audio(const std::string& path);

/// 16-bit PCM WAV writer.
void write_wav16(const std::string& path, const std::vector<double>& mono,
                 int sample_rate);

/// Minimal FLAC writer (mono/stereo 16-bit). Picks constant, fixed-order-2
/// Rice or verbatim subframes per block; used for fixtures and exports.
void write_flac16(const std::string& path, const std::vector<double>& mono,
                  int sample_rate);

/// Canonical PCM bytes for content hashing: little-endian int16 of the
/// canonical (mono, resampled) waveform. Shared by datakit's content_hash.
std::vector<std::uint8_t> canonical_pcm16_bytes(const std::vector<double>& mono);

}  // namespace clapkit
