#include "clapkit/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "clapkit/audio_io.hpp"

namespace clapkit {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

std::vector<double> resample_linear(const std::vector<double>& in, int in_rate,
                                    int out_rate) {
  if (in_rate == out_rate || in.empty()) return in;
  std::size_t out_n = static_cast<std::size_t>(std::llround(
      static_cast<double>(in.size()) * out_rate / in_rate));
  std::vector<double> out(out_n);
  double step = static_cast<double>(in_rate) / out_rate;
  for (std::size_t i = 0; i < out_n; ++i) {
    double pos = i * step;
    std::size_t lo = static_cast<std::size_t>(pos);
    if (lo >= in.size() - 1) {
      out[i] = in.back();
    } else {
      double frac = pos - static_cast<double>(lo);
      out[i] = in[lo] * (1.0 - frac) + in[lo + 1] * frac;
    }
  }
  return out;
}

Waveform canonicalize_waveform(const std::vector<double>& interleaved,
                               int channels, int sample_rate,
                               const DspConfig& target, const std::string& id) {
  if (channels <= 0) throw std::runtime_error("audio: no channels in " + id);
  std::size_t frames = interleaved.size() / static_cast<std::size_t>(channels);
  if (frames == 0) throw std::runtime_error("audio: empty input: " + id);

  Waveform w;
  w.id = id;
  w.samples.resize(frames);
  if (channels == 1) {
    std::copy(interleaved.begin(), interleaved.begin() + frames,
              w.samples.begin());
  } else {
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (int c = 0; c < channels; ++c)
        acc += interleaved[i * channels + c];
      w.samples[i] = acc / channels;
    }
  }
  if (sample_rate != target.sample_rate) {
    w.samples = resample_linear(w.samples, sample_rate, target.sample_rate);
    w.resample_method = target.resampler;
  } else {
    w.resample_method = "none";
  }
  w.sample_rate = target.sample_rate;
  for (double& x : w.samples) x = std::clamp(x, -1.0, 1.0);
  if (w.samples.empty()) throw std::runtime_error("audio: empty input: " + id);
  return w;
}

Waveform load_audio(const std::string& path, const DspConfig& target) {
  DecodedAudio raw = read_audio(path);
  if (raw.samples.empty())
    throw std::runtime_error("audio: empty input: " + path);
  return canonicalize_waveform(raw.samples, raw.channels, raw.sample_rate,
                               target, path);
}

void fft(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (n < 2) return;
  if ((n & (n - 1)) != 0) {
    // Naive DFT fallback for non-power-of-two sizes.
    std::vector<std::complex<double>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<double> acc = 0;
      for (std::size_t t = 0; t < n; ++t) {
        double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) / n;
        acc += buf[t] * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      out[k] = acc;
    }
    buf = std::move(out);
    return;
  }
  // Iterative radix-2 Cooley-Tukey.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = buf[i + k];
        std::complex<double> v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

MelFilterbank mel_filterbank(const DspConfig& cfg) {
  cfg.validate();
  MelFilterbank fb;
  fb.n_mels = static_cast<std::size_t>(cfg.n_mels);
  fb.n_bins = static_cast<std::size_t>(cfg.window) / 2 + 1;
  fb.peak_weights.assign(fb.n_mels * fb.n_bins, 0.0);
  fb.area_scale.resize(fb.n_mels);
  fb.center_hz.resize(fb.n_mels);

  double mel_lo = hz_to_mel(cfg.f_min);
  double mel_hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(fb.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(fb.n_mels + 1));

  double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.window;
  for (std::size_t m = 0; m < fb.n_mels; ++m) {
    double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    fb.center_hz[m] = mid;
    fb.area_scale[m] = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < fb.n_bins; ++k) {
      double f = k * bin_hz;
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo)
        w = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid)
        w = (hi - f) / (hi - mid);
      fb.peak_weights[m * fb.n_bins + k] = w;
    }
  }
  return fb;
}

namespace {

MelSpectrogram mel_impl(const Waveform& w, const DspConfig& cfg, bool take_log) {
  cfg.validate();
  require(w.sample_rate == cfg.sample_rate,
          "mel_spectrogram: waveform rate differs from config");
  require(!w.samples.empty(), "mel_spectrogram: empty waveform");

  const std::size_t n = w.samples.size();
  const std::size_t win = static_cast<std::size_t>(cfg.window);
  const std::size_t hop = static_cast<std::size_t>(cfg.hop);
  const std::size_t t_frames = n / hop + 1;
  const std::size_t half = win / 2;

  std::vector<double> hann(win);
  for (std::size_t i = 0; i < win; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i /
                                   static_cast<double>(win));

  MelFilterbank fb = mel_filterbank(cfg);

  MelSpectrogram m;
  m.t_frames = t_frames;
  m.f_bins = fb.n_mels;
  m.frame_rate = static_cast<double>(cfg.sample_rate) / cfg.hop;
  m.config_hash = cfg.hash();
  m.values.assign(t_frames * fb.n_mels, 0.0);

  // Center framing: frame t is the window around sample t*hop, with
  // reflection padding at the edges (degenerate inputs fall back to zeros).
  auto sample_at = [&](long long idx) -> double {
    long long nn = static_cast<long long>(n);
    if (idx < 0) idx = -idx;
    if (idx >= nn) idx = 2 * (nn - 1) - idx;
    if (idx < 0 || idx >= nn) return 0.0;
    return w.samples[static_cast<std::size_t>(idx)];
  };

  std::vector<std::complex<double>> buf(win);
  std::vector<double> mag(fb.n_bins);
  for (std::size_t t = 0; t < t_frames; ++t) {
    long long center = static_cast<long long>(t * hop);
    for (std::size_t i = 0; i < win; ++i)
      buf[i] = hann[i] * sample_at(center - static_cast<long long>(half) +
                                   static_cast<long long>(i));
    fft(buf);
    for (std::size_t k = 0; k < fb.n_bins; ++k) mag[k] = std::abs(buf[k]);

    for (std::size_t mel = 0; mel < fb.n_mels; ++mel) {
      double acc = 0.0;
      const double* wrow = &fb.peak_weights[mel * fb.n_bins];
      for (std::size_t k = 0; k < fb.n_bins; ++k) acc += wrow[k] * mag[k];
      acc *= fb.area_scale[mel];
      m.values[t * fb.n_mels + mel] =
          take_log ? std::log(std::max(acc, cfg.log_floor)) : acc;
    }
  }
  return m;
}

}  // namespace

MelSpectrogram mel_spectrogram(const Waveform& w, const DspConfig& cfg) {
  return mel_impl(w, cfg, true);
}

MelSpectrogram mel_energies(const Waveform& w, const DspConfig& cfg) {
  return mel_impl(w, cfg, false);
}

MelSpectrogram canonicalize_frames(const MelSpectrogram& m, std::size_t target_t,
                                   double log_floor) {
  require(target_t >= 1, "canonicalize_frames: target_t must be at least 1");
  if (m.t_frames == target_t) return m;

  MelSpectrogram out;
  out.f_bins = m.f_bins;
  out.t_frames = target_t;
  out.frame_rate = m.frame_rate;
  out.config_hash = m.config_hash;
  out.values.assign(target_t * m.f_bins, std::log(log_floor));

  if (m.t_frames < target_t) {
    std::copy(m.values.begin(), m.values.end(), out.values.begin());
  } else {
    std::size_t start = (m.t_frames - target_t) / 2;
    std::copy(m.values.begin() + static_cast<std::ptrdiff_t>(start * m.f_bins),
              m.values.begin() +
                  static_cast<std::ptrdiff_t>((start + target_t) * m.f_bins),
              out.values.begin());
  }
  return out;
}

}  // namespace clapkit
