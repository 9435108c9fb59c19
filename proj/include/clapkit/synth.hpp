#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clapkit/datakit.hpp"

namespace clapkit {

/// Synthetic tone corpus: each class is a deterministic timbre named
/// "<kind>_<hz>" with kind in {sine, square, chirp, noise}. Captions follow
/// "the sound of a {class} tone"; durations cycle through the list so every
/// fusion path gets exercised.
struct SynthSpec {
  std::vector<std::string> classes;
  int clips_per_class = 40;
  std::vector<double> durations = {3.0, 10.0, 30.0};
  std::uint64_t seed = 0;
  int sample_rate = 48000;
};

/// Eight well-separated default timbres.
std::vector<std::string> default_synth_classes();

/// Renders one clip of a class; clip_index seeds phase/noise variation.
std::vector<double> synth_clip(const std::string& class_name, double duration_s,
                               int sample_rate, std::uint64_t seed,
                               int clip_index);

/// Writes WAVs plus manifest.jsonl under out_dir and returns the manifest.
Manifest synth_corpus(const SynthSpec& spec, const std::string& out_dir);

}  // namespace clapkit
