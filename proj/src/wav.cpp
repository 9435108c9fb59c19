#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "clapkit/audio_io.hpp"

namespace clapkit {

namespace {

constexpr std::uint16_t kFormatPcm = 0x0001;
constexpr std::uint16_t kFormatFloat = 0x0003;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t rd_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("audio: cannot open " + path);
  f.seekg(0, std::ios::end);
  std::streamoff n = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw std::runtime_error("audio: short read on " + path);
  return buf;
}

}  // namespace

DecodedAudio read_wav(const std::string& path) {
  std::vector<std::uint8_t> buf = read_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("wav: not a RIFF/WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::uint8_t* hdr = buf.data() + pos;
    std::uint32_t chunk_len = rd_u32(hdr + 4);
    const std::uint8_t* body = hdr + 8;
    if (pos + 8 + chunk_len > buf.size())
      chunk_len = static_cast<std::uint32_t>(buf.size() - pos - 8);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw std::runtime_error("wav: truncated fmt chunk");
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
      if (format == kFormatExtensible) {
        if (chunk_len < 40) throw std::runtime_error("wav: truncated extensible fmt");
        format = rd_u16(body + 24);  // first two bytes of SubFormat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr)
    throw std::runtime_error("wav: missing fmt or data chunk: " + path);
  if (channels == 0 || rate == 0)
    throw std::runtime_error("wav: bad fmt values: " + path);
  if (format != kFormatPcm && format != kFormatFloat)
    throw std::runtime_error("wav: unsupported format tag " + std::to_string(format));

  std::size_t bytes_per = bits / 8;
  if (format == kFormatPcm && bits != 16 && bits != 24 && bits != 32)
    throw std::runtime_error("wav: unsupported PCM depth " + std::to_string(bits));
  if (format == kFormatFloat && bits != 32)
    throw std::runtime_error("wav: unsupported float depth " + std::to_string(bits));

  std::size_t n = data_len / (bytes_per * channels) * channels;
  DecodedAudio out;
  out.channels = channels;
  out.sample_rate = static_cast<int>(rate);
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = data + i * bytes_per;
    double x;
    if (format == kFormatFloat) {
      float f;
      std::memcpy(&f, p, 4);
      x = std::clamp(static_cast<double>(f), -1.0, 1.0);
    } else if (bits == 16) {
      std::int16_t s = static_cast<std::int16_t>(p[0] | (p[1] << 8));
      x = s / 32768.0;
    } else if (bits == 24) {
      std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
      if (s & 0x800000) s |= ~0xFFFFFF;
      x = s / 8388608.0;
    } else {
      std::int32_t s;
      std::memcpy(&s, p, 4);
      x = s / 2147483648.0;
    }
    out.samples[i] = x;
  }
  return out;
}

void write_wav16(const std::string& path, const std::vector<double>& mono,
                 int sample_rate) {
  std::vector<std::uint8_t> pcm = canonical_pcm16_bytes(mono);
  std::uint32_t data_len = static_cast<std::uint32_t>(pcm.size());
  std::uint32_t riff_len = 36 + data_len;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav: cannot write " + path);
  auto u32 = [&](std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16),
                         static_cast<std::uint8_t>(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  auto u16 = [&](std::uint16_t v) {
    std::uint8_t b[2] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8)};
    f.write(reinterpret_cast<char*>(b), 2);
  };
  f.write("RIFF", 4);
  u32(riff_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(static_cast<std::uint32_t>(sample_rate));
  u32(static_cast<std::uint32_t>(sample_rate) * 2);
  u16(2);
  u16(16);
  f.write("data", 4);
  u32(data_len);
  f.write(reinterpret_cast<const char*>(pcm.data()), pcm.size());
  if (!f) throw std::runtime_error("wav: write failed for " + path);
}

std::vector<std::uint8_t> canonical_pcm16_bytes(const std::vector<double>& mono) {
  std::vector<std::uint8_t> out(mono.size() * 2);
  for (std::size_t i = 0; i < mono.size(); ++i) {
    double x = std::clamp(mono[i], -1.0, 1.0);
    long q = std::lround(x * 32767.0);
    std::int16_t s = static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L));
    out[2 * i] = static_cast<std::uint8_t>(s & 0xFF);
    out[2 * i + 1] = static_cast<std::uint8_t>((s >> 8) & 0xFF);
  }
  return out;
}

DecodedAudio read_audio(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("audio: cannot open " + path);
  char magic[4] = {0};
  f.read(magic, 4);
  if (!f) throw std::runtime_error("audio: cannot read header of " + path);
  f.close();
  if (std::memcmp(magic, "RIFF", 4) == 0) return read_wav(path);
  if (std::memcmp(magic, "fLaC", 4) == 0) return read_flac(path);
  throw std::runtime_error("audio: unrecognized container (want WAV or FLAC): " + path);
}

}  // namespace clapkit
