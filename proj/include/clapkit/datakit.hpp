#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clapkit/config.hpp"
#include "clapkit/dsp.hpp"

namespace clapkit {

struct PairRecord {
  std::string id;
  std::string audio_path;
  std::vector<std::string> captions;
  std::vector<std::string> labels;
  double duration_s = 0.0;
  std::string source;
  std::string content_hash;  // SHA-256 of canonical mono-48kHz PCM bytes
};

struct Manifest {
  std::vector<PairRecord> records;
  std::string name;
};

/// "The sound of L1", "The sound of L1, and L2", "The sound of L1, L2, and L3".
std::string labels_to_caption(const std::vector<std::string>& labels);

using DebiasRules = std::vector<std::pair<std::string, std::string>>;
/// woman/man -> person, women/men -> people.
DebiasRules default_debias_rules();
DebiasRules load_debias_rules(const std::string& path);

/// Whole-word case-insensitive replacement preserving leading capitalization.
std::string debias_caption(const std::string& text, const DebiasRules& rules);

/// Runs the external generator (labels comma-joined on stdin, one caption on
/// stdout) and de-biases the output. Falls back to the template caption when
/// the generator is absent or fails, or when the record is shorter than 2 s
/// (no generated caption for those).
std::string keyword_to_caption(const PairRecord& rec,
                               const std::string& generator_cmd,
                               const DebiasRules& rules,
                               std::string* warning = nullptr);

/// Captions used for training/eval: explicit captions when present, else the
/// label template (optionally replaced by keyword-to-caption upstream).
std::vector<std::string> effective_captions(const PairRecord& rec);

struct OverlapReport {
  std::vector<std::string> removed_ids;
  /// (eval source, train source) -> number of removed eval records whose
  /// hash appears under that train source.
  std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
  std::size_t removed_total = 0;

  std::string to_json() const;
};

/// Drops eval records whose content_hash appears in train. Idempotent.
std::pair<Manifest, OverlapReport> exclude_overlaps(const Manifest& eval_set,
                                                    const Manifest& train_set);

struct IngestReport {
  std::vector<std::string> record_errors;  // per-record problems (kept out of the manifest)

  std::string to_json() const;
};

/// Parses a JSON-lines manifest (or <dir>/manifest.jsonl for a directory),
/// validates invariants and fills missing content_hash/duration by decoding
/// the audio. Malformed lines and duplicate ids are hard errors with line
/// numbers; unreadable audio drops the record into the report.
Manifest ingest(const std::string& path, const DspConfig& dsp,
                IngestReport* report = nullptr);

/// Canonical JSONL (sorted keys); ingest -> serialize is content-identical.
std::string manifest_to_jsonl(const Manifest& m);
void save_manifest(const Manifest& m, const std::string& path);

std::string sha256_hex(const void* data, std::size_t len);
std::string content_hash_of(const Waveform& canonical);

}  // namespace clapkit
