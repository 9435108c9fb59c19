#pragma once

#include <complex>
#include <string>
#include <vector>

#include "clapkit/config.hpp"

namespace clapkit {

/// Mono waveform at a known rate, amplitudes in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;
  std::string id;
  std::string resample_method = "none";  // "none" or "linear"

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate
                           : 0.0;
  }
};

/// Log-mel matrix, frames (time) x bins (frequency), row-major.
struct MelSpectrogram {
  std::vector<double> values;  // t_frames * f_bins
  std::size_t t_frames = 0;
  std::size_t f_bins = 0;
  double frame_rate = 0.0;  // frames per second
  std::string config_hash;

  double& at(std::size_t t, std::size_t f) { return values[t * f_bins + f]; }
  double at(std::size_t t, std::size_t f) const { return values[t * f_bins + f]; }
};

/// Decodes a WAV/FLAC file, averages channels to mono and resamples to
/// target.sample_rate (linear interpolation, recorded in resample_method).
Waveform load_audio(const std::string& path, const DspConfig& target);

/// Mono-averages and resamples an already-decoded waveform.
Waveform canonicalize_waveform(const std::vector<double>& interleaved,
                               int channels, int sample_rate,
                               const DspConfig& target, const std::string& id);

/// Linear-interpolation resampler; output length = round(n * out_rate / in_rate).
std::vector<double> resample_linear(const std::vector<double>& in, int in_rate,
                                    int out_rate);

/// Triangular mel filterbank on FFT bin center frequencies, HTK mel scale.
/// Each filter spans [edge_m, edge_m+2] with its peak at edge_m+1.
struct MelFilterbank {
  std::size_t n_mels = 0;
  std::size_t n_bins = 0;  // window/2 + 1
  /// Peak-height-1 triangles; adjacent filters sum to 1 between the first
  /// and last peak (partition property).
  std::vector<double> peak_weights;  // n_mels * n_bins
  /// Unit-area scaling 2/(edge_m+2 - edge_m); production filterbank is
  /// peak_weights[m] * area_scale[m].
  std::vector<double> area_scale;  // n_mels
  std::vector<double> center_hz;   // n_mels

  double weight(std::size_t m, std::size_t k) const {
    return peak_weights[m * n_bins + k] * area_scale[m];
  }
};

MelFilterbank mel_filterbank(const DspConfig& cfg);

double hz_to_mel(double hz);   // HTK: 2595 log10(1 + f/700)
double mel_to_hz(double mel);

/// Hann-windowed STFT magnitude -> area-normalized mel filterbank ->
/// log(max(x, log_floor)). Frames = floor(n/hop) + 1, center-padded
/// (reflection at the edges). Inputs shorter than one window still yield
/// a single frame.
MelSpectrogram mel_spectrogram(const Waveform& w, const DspConfig& cfg);

/// Pre-log mel energies with the same framing; used by property tests.
MelSpectrogram mel_energies(const Waveform& w, const DspConfig& cfg);

/// Pads (log_floor rows on the right) or center-crops to target_t frames.
MelSpectrogram canonicalize_frames(const MelSpectrogram& m, std::size_t target_t,
                                   double log_floor);

/// In-place radix-2 FFT for power-of-two sizes; naive DFT fallback otherwise.
void fft(std::vector<std::complex<double>>& buf);

}  // namespace clapkit
