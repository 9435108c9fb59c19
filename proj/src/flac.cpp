// FLAC subset codec. The reader handles constant/verbatim/fixed/LPC
// subframes, Rice and Rice2 partitioned residuals, wasted bits, stereo
// decorrelation and CRC verification. The writer emits fixed-blocksize
// streams with constant, fixed-order-2 Rice or verbatim subframes; enough
// for fixtures and lossless round-trips of 16-bit audio.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clapkit/audio_io.hpp"

namespace clapkit {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("flac: " + msg);
}

std::uint8_t crc8(const std::uint8_t* data, std::size_t len) {
  std::uint8_t crc = 0;
  for (std::size_t i = 0; i < len; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b)
      crc = (crc & 0x80) ? static_cast<std::uint8_t>((crc << 1) ^ 0x07)
                         : static_cast<std::uint8_t>(crc << 1);
  }
  return crc;
}

std::uint16_t crc16(const std::uint8_t* data, std::size_t len) {
  std::uint16_t crc = 0;
  for (std::size_t i = 0; i < len; ++i) {
    crc ^= static_cast<std::uint16_t>(data[i]) << 8;
    for (int b = 0; b < 8; ++b)
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x8005)
                           : static_cast<std::uint16_t>(crc << 1);
  }
  return crc;
}

class BitReader {
 public:
  BitReader(const std::uint8_t* data, std::size_t len) : p_(data), len_(len) {}

  bool eof() const { return byte_ >= len_; }
  std::size_t byte_pos() const { return byte_; }
  bool aligned() const { return bit_ == 0; }

  std::uint64_t bits(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      if (byte_ >= len_) fail("unexpected end of stream");
      int b = (p_[byte_] >> (7 - bit_)) & 1;
      v = (v << 1) | static_cast<std::uint64_t>(b);
      if (++bit_ == 8) {
        bit_ = 0;
        ++byte_;
      }
    }
    return v;
  }

  std::int64_t signed_bits(int n) {
    std::uint64_t v = bits(n);
    if (n > 0 && (v & (1ULL << (n - 1))))
      v |= ~((1ULL << n) - 1);  // sign extend
    return static_cast<std::int64_t>(v);
  }

  std::uint32_t unary() {
    std::uint32_t q = 0;
    while (bits(1) == 0) ++q;
    return q;
  }

  void align() {
    if (bit_ != 0) {
      bit_ = 0;
      ++byte_;
    }
  }

 private:
  const std::uint8_t* p_;
  std::size_t len_;
  std::size_t byte_ = 0;
  int bit_ = 0;
};

std::uint64_t read_coded_number(BitReader& br) {
  std::uint64_t b0 = br.bits(8);
  int extra = 0;
  std::uint64_t v = 0;
  if (b0 < 0x80) return b0;
  if ((b0 & 0xE0) == 0xC0) { extra = 1; v = b0 & 0x1F; }
  else if ((b0 & 0xF0) == 0xE0) { extra = 2; v = b0 & 0x0F; }
  else if ((b0 & 0xF8) == 0xF0) { extra = 3; v = b0 & 0x07; }
  else if ((b0 & 0xFC) == 0xF8) { extra = 4; v = b0 & 0x03; }
  else if ((b0 & 0xFE) == 0xFC) { extra = 5; v = b0 & 0x01; }
  else if (b0 == 0xFE) { extra = 6; v = 0; }
  else fail("bad coded number");
  for (int i = 0; i < extra; ++i) {
    std::uint64_t b = br.bits(8);
    if ((b & 0xC0) != 0x80) fail("bad coded number continuation");
    v = (v << 6) | (b & 0x3F);
  }
  return v;
}

struct StreamInfo {
  unsigned sample_rate = 0;
  unsigned channels = 0;
  unsigned bps = 0;
  std::uint64_t total_samples = 0;
};

void decode_residual(BitReader& br, unsigned blocksize, unsigned order,
                     std::vector<std::int64_t>& out) {
  unsigned method = static_cast<unsigned>(br.bits(2));
  if (method > 1) fail("reserved residual coding method");
  int param_bits = method == 0 ? 4 : 5;
  unsigned escape = method == 0 ? 0xF : 0x1F;
  unsigned part_order = static_cast<unsigned>(br.bits(4));
  unsigned partitions = 1u << part_order;
  if (blocksize % partitions != 0) fail("blocksize not divisible by partitions");
  unsigned part_len = blocksize >> part_order;
  if (part_len <= order && partitions == 1) fail("partition shorter than order");
  std::size_t idx = order;
  for (unsigned part = 0; part < partitions; ++part) {
    unsigned n = part_len - (part == 0 ? order : 0);
    unsigned param = static_cast<unsigned>(br.bits(param_bits));
    if (param == escape) {
      unsigned raw_bits = static_cast<unsigned>(br.bits(5));
      for (unsigned i = 0; i < n; ++i)
        out[idx++] = raw_bits == 0 ? 0 : br.signed_bits(static_cast<int>(raw_bits));
    } else {
      for (unsigned i = 0; i < n; ++i) {
        std::uint64_t q = br.unary();
        std::uint64_t r = param ? br.bits(static_cast<int>(param)) : 0;
        std::uint64_t u = (q << param) | r;
        out[idx++] = static_cast<std::int64_t>(u >> 1) ^
                     -static_cast<std::int64_t>(u & 1);
      }
    }
  }
}

void decode_subframe(BitReader& br, unsigned blocksize, unsigned bps,
                     std::vector<std::int64_t>& out) {
  if (br.bits(1) != 0) fail("bad subframe padding bit");
  unsigned type = static_cast<unsigned>(br.bits(6));
  unsigned wasted = 0;
  if (br.bits(1) == 1) wasted = br.unary() + 1;
  if (wasted >= bps) fail("wasted bits exceed sample size");
  unsigned eff_bps = bps - wasted;

  out.assign(blocksize, 0);
  if (type == 0) {  // CONSTANT
    std::int64_t v = br.signed_bits(static_cast<int>(eff_bps));
    std::fill(out.begin(), out.end(), v);
  } else if (type == 1) {  // VERBATIM
    for (unsigned i = 0; i < blocksize; ++i)
      out[i] = br.signed_bits(static_cast<int>(eff_bps));
  } else if ((type & 0x38) == 0x08 && (type & 0x07) <= 4) {  // FIXED
    unsigned order = type & 0x07;
    if (order > blocksize) fail("fixed order exceeds blocksize");
    for (unsigned i = 0; i < order; ++i)
      out[i] = br.signed_bits(static_cast<int>(eff_bps));
    decode_residual(br, blocksize, order, out);
    for (unsigned i = order; i < blocksize; ++i) {
      switch (order) {
        case 0: break;
        case 1: out[i] += out[i - 1]; break;
        case 2: out[i] += 2 * out[i - 1] - out[i - 2]; break;
        case 3: out[i] += 3 * out[i - 1] - 3 * out[i - 2] + out[i - 3]; break;
        case 4:
          out[i] += 4 * out[i - 1] - 6 * out[i - 2] + 4 * out[i - 3] - out[i - 4];
          break;
      }
    }
  } else if (type & 0x20) {  // LPC
    unsigned order = (type & 0x1F) + 1;
    if (order > blocksize) fail("lpc order exceeds blocksize");
    for (unsigned i = 0; i < order; ++i)
      out[i] = br.signed_bits(static_cast<int>(eff_bps));
    unsigned prec = static_cast<unsigned>(br.bits(4));
    if (prec == 0xF) fail("invalid qlp precision");
    ++prec;
    int shift = static_cast<int>(br.signed_bits(5));
    if (shift < 0) fail("negative qlp shift");
    std::vector<std::int64_t> coef(order);
    for (unsigned i = 0; i < order; ++i)
      coef[i] = br.signed_bits(static_cast<int>(prec));
    decode_residual(br, blocksize, order, out);
    for (unsigned i = order; i < blocksize; ++i) {
      std::int64_t acc = 0;
      for (unsigned j = 0; j < order; ++j) acc += coef[j] * out[i - 1 - j];
      out[i] += acc >> shift;
    }
  } else {
    fail("reserved subframe type");
  }

  if (wasted > 0)
    for (auto& v : out) v <<= wasted;
}

}  // namespace

DecodedAudio read_flac(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), "fLaC", 4) != 0)
    fail("not a FLAC stream: " + path);

  BitReader br(buf.data(), buf.size());
  br.bits(32);  // magic

  StreamInfo info;
  bool have_info = false;
  bool last = false;
  while (!last) {
    last = br.bits(1) != 0;
    unsigned type = static_cast<unsigned>(br.bits(7));
    unsigned len = static_cast<unsigned>(br.bits(24));
    if (type == 0) {
      if (len != 34) fail("bad STREAMINFO length");
      br.bits(16);  // min blocksize
      br.bits(16);  // max blocksize
      br.bits(24);  // min framesize
      br.bits(24);  // max framesize
      info.sample_rate = static_cast<unsigned>(br.bits(20));
      info.channels = static_cast<unsigned>(br.bits(3)) + 1;
      info.bps = static_cast<unsigned>(br.bits(5)) + 1;
      info.total_samples = br.bits(36);
      for (int i = 0; i < 16; ++i) br.bits(8);  // md5
      have_info = true;
    } else {
      for (unsigned i = 0; i < len; ++i) br.bits(8);
    }
  }
  if (!have_info) fail("missing STREAMINFO");
  if (info.sample_rate == 0) fail("bad sample rate in STREAMINFO");

  DecodedAudio out;
  out.channels = static_cast<int>(info.channels);
  out.sample_rate = static_cast<int>(info.sample_rate);
  double scale = std::ldexp(1.0, -static_cast<int>(info.bps - 1));

  std::uint64_t decoded = 0;
  while (!br.eof() && (info.total_samples == 0 || decoded < info.total_samples)) {
    std::size_t frame_start = br.byte_pos();
    std::uint64_t sync = br.bits(14);
    if (sync != 0x3FFE) fail("lost frame sync");
    br.bits(1);  // reserved
    br.bits(1);  // blocking strategy
    unsigned bs_code = static_cast<unsigned>(br.bits(4));
    unsigned sr_code = static_cast<unsigned>(br.bits(4));
    unsigned ch_code = static_cast<unsigned>(br.bits(4));
    unsigned ss_code = static_cast<unsigned>(br.bits(3));
    br.bits(1);  // reserved
    read_coded_number(br);

    unsigned blocksize = 0;
    switch (bs_code) {
      case 0: fail("reserved blocksize code");
      case 1: blocksize = 192; break;
      case 6: blocksize = static_cast<unsigned>(br.bits(8)) + 1; break;
      case 7: blocksize = static_cast<unsigned>(br.bits(16)) + 1; break;
      default:
        blocksize = bs_code <= 5 ? 576u << (bs_code - 2) : 256u << (bs_code - 8);
    }
    switch (sr_code) {
      case 12: br.bits(8); break;
      case 13:
      case 14: br.bits(16); break;
      case 15: fail("invalid sample rate code");
      default: break;  // table or STREAMINFO; stream rate comes from STREAMINFO
    }
    unsigned bps = info.bps;
    switch (ss_code) {
      case 0: break;
      case 1: bps = 8; break;
      case 2: bps = 12; break;
      case 4: bps = 16; break;
      case 5: bps = 20; break;
      case 6: bps = 24; break;
      case 7: bps = 32; break;
      default: fail("reserved sample size code");
    }
    std::uint8_t want_crc8 = crc8(buf.data() + frame_start,
                                  br.byte_pos() - frame_start);
    if (br.bits(8) != want_crc8) fail("frame header CRC mismatch");

    unsigned n_ch = ch_code < 8 ? ch_code + 1 : 2;
    if (ch_code >= 11) fail("reserved channel assignment");
    if (n_ch != info.channels) fail("frame channel count differs from STREAMINFO");

    std::vector<std::vector<std::int64_t>> ch(n_ch);
    for (unsigned c = 0; c < n_ch; ++c) {
      unsigned sub_bps = bps;
      if ((ch_code == 8 && c == 1) || (ch_code == 9 && c == 0) ||
          (ch_code == 10 && c == 1))
        ++sub_bps;  // side channel carries one extra bit
      decode_subframe(br, blocksize, sub_bps, ch[c]);
    }
    br.align();
    std::uint16_t want_crc16 = crc16(buf.data() + frame_start,
                                     br.byte_pos() - frame_start);
    if (br.bits(16) != want_crc16) fail("frame CRC mismatch");

    if (ch_code == 8) {  // left/side
      for (unsigned i = 0; i < blocksize; ++i) ch[1][i] = ch[0][i] - ch[1][i];
    } else if (ch_code == 9) {  // right/side
      for (unsigned i = 0; i < blocksize; ++i) ch[0][i] = ch[1][i] + ch[0][i];
    } else if (ch_code == 10) {  // mid/side
      for (unsigned i = 0; i < blocksize; ++i) {
        std::int64_t side = ch[1][i];
        std::int64_t mid = (ch[0][i] << 1) | (side & 1);
        ch[0][i] = (mid + side) >> 1;
        ch[1][i] = (mid - side) >> 1;
      }
    }

    std::uint64_t take = blocksize;
    if (info.total_samples != 0 && decoded + take > info.total_samples)
      take = info.total_samples - decoded;
    for (std::uint64_t i = 0; i < take; ++i)
      for (unsigned c = 0; c < n_ch; ++c)
        out.samples.push_back(
            std::clamp(static_cast<double>(ch[c][i]) * scale, -1.0, 1.0));
    decoded += take;

    // Tolerate trailing junk after the last expected sample.
    if (info.total_samples != 0 && decoded >= info.total_samples) break;
  }
  if (info.total_samples != 0 && decoded < info.total_samples)
    fail("stream ended early: " + path);
  return out;
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

namespace {

class BitWriter {
 public:
  void bits(std::uint64_t v, int n) {
    for (int i = n - 1; i >= 0; --i) {
      cur_ = static_cast<std::uint8_t>((cur_ << 1) | ((v >> i) & 1));
      if (++nbits_ == 8) {
        out_.push_back(cur_);
        cur_ = 0;
        nbits_ = 0;
      }
    }
  }
  void align() {
    if (nbits_ != 0) bits(0, 8 - nbits_);
  }
  void unary(std::uint32_t q) {
    for (std::uint32_t i = 0; i < q; ++i) bits(0, 1);
    bits(1, 1);
  }
  const std::vector<std::uint8_t>& bytes() const { return out_; }
  std::size_t size() const { return out_.size(); }

 private:
  std::vector<std::uint8_t> out_;
  std::uint8_t cur_ = 0;
  int nbits_ = 0;
};

void write_coded_number(BitWriter& bw, std::uint64_t v) {
  if (v < 0x80) {
    bw.bits(v, 8);
    return;
  }
  int extra = 1;
  for (std::uint64_t lim = 0x800; v >= lim && extra < 6; lim <<= 5) ++extra;
  static const unsigned lead_bits[] = {0, 0xC0, 0xE0, 0xF0, 0xF8, 0xFC, 0xFE};
  static const unsigned lead_payload[] = {0, 5, 4, 3, 2, 1, 0};
  bw.bits(lead_bits[extra] | ((v >> (6 * extra)) & ((1u << lead_payload[extra]) - 1)),
          8);
  for (int i = extra - 1; i >= 0; --i) bw.bits(0x80 | ((v >> (6 * i)) & 0x3F), 8);
}

std::uint64_t zigzag(std::int64_t v) {
  return (static_cast<std::uint64_t>(v) << 1) ^
         static_cast<std::uint64_t>(v >> 63);
}

unsigned pick_rice_param(const std::vector<std::int64_t>& res, std::size_t from) {
  std::uint64_t total = 0;
  for (std::size_t i = from; i < res.size(); ++i) total += zigzag(res[i]);
  std::size_t n = res.size() - from;
  unsigned k = 0;
  while (k < 14 && (total >> k) > n) ++k;
  return k;
}

std::size_t rice_cost_bits(const std::vector<std::int64_t>& res, std::size_t from,
                           unsigned k) {
  std::size_t bits = 0;
  for (std::size_t i = from; i < res.size(); ++i)
    bits += (zigzag(res[i]) >> k) + 1 + k;
  return bits;
}

void write_subframe16(BitWriter& bw, const std::vector<std::int32_t>& s) {
  const unsigned bps = 16;
  bool constant = std::all_of(s.begin(), s.end(),
                              [&](std::int32_t v) { return v == s[0]; });
  if (constant) {
    bw.bits(0, 1);
    bw.bits(0, 6);  // CONSTANT
    bw.bits(0, 1);  // no wasted bits
    bw.bits(static_cast<std::uint64_t>(static_cast<std::uint32_t>(s[0]) & 0xFFFF),
            bps);
    return;
  }

  // Fixed order-2 residuals vs verbatim; pick the cheaper encoding.
  std::size_t verbatim_bits = s.size() * bps;
  bool use_fixed = s.size() > 2;
  std::vector<std::int64_t> res;
  unsigned k = 0;
  if (use_fixed) {
    res.resize(s.size());
    for (std::size_t i = 2; i < s.size(); ++i)
      res[i] = static_cast<std::int64_t>(s[i]) - 2 * s[i - 1] + s[i - 2];
    k = pick_rice_param(res, 2);
    std::size_t fixed_bits = 2 * bps + 2 + 4 + 4 + rice_cost_bits(res, 2, k);
    if (fixed_bits >= verbatim_bits || k >= 15) use_fixed = false;
  }

  bw.bits(0, 1);
  if (use_fixed) {
    bw.bits(0x08 | 2, 6);  // FIXED, order 2
    bw.bits(0, 1);
    bw.bits(static_cast<std::uint32_t>(s[0]) & 0xFFFF, bps);
    bw.bits(static_cast<std::uint32_t>(s[1]) & 0xFFFF, bps);
    bw.bits(0, 2);  // rice method 0
    bw.bits(0, 4);  // partition order 0
    bw.bits(k, 4);
    for (std::size_t i = 2; i < res.size(); ++i) {
      std::uint64_t u = zigzag(res[i]);
      bw.unary(static_cast<std::uint32_t>(u >> k));
      if (k) bw.bits(u & ((1ULL << k) - 1), static_cast<int>(k));
    }
  } else {
    bw.bits(1, 6);  // VERBATIM
    bw.bits(0, 1);
    for (std::int32_t v : s)
      bw.bits(static_cast<std::uint32_t>(v) & 0xFFFF, bps);
  }
}

}  // namespace

void write_flac16(const std::string& path, const std::vector<double>& mono,
                  int sample_rate) {
  std::vector<std::uint8_t> pcm = canonical_pcm16_bytes(mono);
  std::size_t n = pcm.size() / 2;
  const unsigned blocksize = 4096;

  BitWriter bw;
  bw.bits(0x664C6143, 32);  // "fLaC"
  // STREAMINFO, last metadata block
  bw.bits(1, 1);
  bw.bits(0, 7);
  bw.bits(34, 24);
  bw.bits(blocksize, 16);
  bw.bits(blocksize, 16);
  bw.bits(0, 24);
  bw.bits(0, 24);
  bw.bits(static_cast<std::uint32_t>(sample_rate), 20);
  bw.bits(0, 3);   // channels - 1
  bw.bits(15, 5);  // bps - 1
  bw.bits(static_cast<std::uint64_t>(n), 36);
  for (int i = 0; i < 16; ++i) bw.bits(0, 8);  // md5 unset

  std::uint64_t frame_no = 0;
  for (std::size_t pos = 0; pos < n; pos += blocksize, ++frame_no) {
    std::size_t len = std::min<std::size_t>(blocksize, n - pos);
    std::vector<std::int32_t> s(len);
    for (std::size_t i = 0; i < len; ++i) {
      std::size_t j = pos + i;
      s[i] = static_cast<std::int16_t>(pcm[2 * j] | (pcm[2 * j + 1] << 8));
    }

    BitWriter fw;
    fw.bits(0x3FFE, 14);
    fw.bits(0, 1);  // reserved
    fw.bits(0, 1);  // fixed blocking
    fw.bits(7, 4);  // blocksize: 16-bit field at header end
    fw.bits(0, 4);  // sample rate from STREAMINFO
    fw.bits(0, 4);  // mono, independent
    fw.bits(4, 3);  // 16 bps
    fw.bits(0, 1);  // reserved
    write_coded_number(fw, frame_no);
    fw.bits(static_cast<unsigned>(len) - 1, 16);
    fw.bits(crc8(fw.bytes().data(), fw.size()), 8);
    write_subframe16(fw, s);
    fw.align();
    fw.bits(crc16(fw.bytes().data(), fw.size()), 16);

    for (std::uint8_t b : fw.bytes()) bw.bits(b, 8);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bw.bytes().data()),
          static_cast<std::streamsize>(bw.size()));
  if (!f) fail("write failed for " + path);
}

}  // namespace clapkit
