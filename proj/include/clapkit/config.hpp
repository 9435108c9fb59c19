#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clapkit {

/// STFT / mel front-end settings, config section [dsp].
struct DspConfig {
  int sample_rate = 48000;
  int hop = 480;
  int window = 1024;
  int n_mels = 64;
  double f_min = 50.0;
  double f_max = 14000.0;
  double log_floor = 1e-10;
  std::string resampler = "linear";

  void validate() const;
  /// Short hex digest of the resolved settings; stamped on every mel.
  std::string hash() const;
};

/// Variable-length input policy, config section [fusion].
struct FusionConfig {
  bool enabled = true;
  double chunk_seconds = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Encoder and projection sizes, config section [model].
struct ModelConfig {
  int stem_channels = 16;
  int stem_stride = 2;
  std::vector<int> block_channels = {32, 64, 256};  // last entry is L
  int embed_dim = 512;                               // D; proj hidden H = D
  int text_dim = 256;                                // E = L_text
  bool text_attention = false;
  int bottleneck_ratio = 4;  // AFF bottleneck divisor

  static constexpr int kMaxTokens = 77;

  int audio_out_dim() const { return block_channels.back(); }
  void validate() const;
};

/// Optimizer, schedule and loop settings, config section [train].
struct TrainConfig {
  int batch_size = 16;
  int epochs = 45;
  std::uint64_t seed = 1;
  double base_lr = 1e-4;
  double beta1 = 0.99;  // paper ordering; see adam_conventional()
  double beta2 = 0.9;
  double adam_eps = 1e-8;
  double warmup_frac = 0.03;  // warmup_steps = round(frac * total_steps)
  double clip_norm = 1.0;
  double tau_init = 0.07;
  double tau_min = 5e-3;
  double tau_max = 1.0;
  int checkpoint_every = 0;  // epochs between periodic checkpoints, 0 = final only
  int threads = 0;           // 0 = auto (CLAPKIT_THREADS / hardware)

  /// Swaps in the conventional Adam betas (0.9, 0.999).
  void adam_conventional() {
    beta1 = 0.9;
    beta2 = 0.999;
  }
  void validate() const;
};

struct Config {
  DspConfig dsp;
  FusionConfig fusion;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

/// Flat INI-style config: [section] headers, key = value lines, # comments.
Config load_config(const std::string& path);
Config parse_config(const std::string& text);

/// Applies a "section.key=value" override; throws on unknown keys.
void apply_override(Config& cfg, const std::string& spec);

/// Canonical serialization; every run writes this as its resolved snapshot.
std::string serialize_config(const Config& cfg);
void save_config(const Config& cfg, const std::string& path);

}  // namespace clapkit
