#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clapkit/config.hpp"
#include "clapkit/datakit.hpp"
#include "clapkit/model.hpp"

namespace clapkit {

struct SimilarityMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
};

/// Caption <-> audio pairing. Every caption belongs to exactly one audio;
/// an audio owns 1-5 captions.
struct RetrievalGroundTruth {
  std::vector<std::vector<std::size_t>> audio_to_captions;
  std::vector<std::size_t> caption_to_audio;
};

struct RetrievalMetrics {
  double r1 = 0, r5 = 0, r10 = 0, map10 = 0;
};

/// Descending sort of one similarity row; ties break by ascending index.
std::vector<std::size_t> rank_ties(const double* row, std::size_t n);

/// Queries are captions (rows), gallery is audios. Each caption counts as an
/// independent test sample with a single relevant audio (AP@10 = 1/rank).
RetrievalMetrics text_to_audio_metrics(const SimilarityMatrix& sim,
                                       const RetrievalGroundTruth& gt);

/// Queries are audios (rows), gallery is captions. Recall uses the
/// best-ranked of the audio's ground truths; mAP@10 = (1/R) sum_{r=1..10}
/// P(r) * rel(r) with R capped at 10.
RetrievalMetrics audio_to_text_metrics(const SimilarityMatrix& sim,
                                       const RetrievalGroundTruth& gt);

// ---------------------------------------------------------------------------
// Embedding pipeline
// ---------------------------------------------------------------------------

/// Deterministic per-record audio embeddings (fusion slices seeded from
/// eval_seed and the record index). Embeddings come out L2-normalized.
std::vector<Embedding> embed_audio_manifest(const Manifest& m,
                                            const ModelParams& params,
                                            const Config& cfg,
                                            std::uint64_t eval_seed);

Embedding embed_text(const std::string& text, const ModelParams& params,
                     const Vocab& vocab);

/// rows = queries, cols = gallery; cosine of unit-norm embeddings.
SimilarityMatrix cosine_matrix(const std::vector<Embedding>& queries,
                               const std::vector<Embedding>& gallery);

/// Gallery = records in order; captions enumerated record by record.
RetrievalGroundTruth ground_truth_from_manifest(const Manifest& m);

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

inline constexpr const char* kPromptSoundOf = "the sound of {label}";
inline constexpr const char* kPromptThisA = "This a sound of {label}.";

/// Replaces the single "{label}" slot.
std::string expand_template(const std::string& templ, const std::string& label);

struct ZeroShotTask {
  std::vector<std::string> class_names;
  std::string prompt_template = kPromptSoundOf;
  std::vector<int> true_class;  // per clip
};

struct ZeroShotResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
};

/// Argmax cosine between each clip embedding and the class-prompt
/// embeddings; ties break toward the lower class index.
ZeroShotResult zero_shot_classify(const std::vector<Embedding>& clip_embs,
                                  const ZeroShotTask& task,
                                  const ModelParams& params,
                                  const Vocab& vocab);

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct LinearProbe {
  Tensor w;  // (M, D)
  Tensor b;  // (M)
};

struct ProbeResult {
  LinearProbe probe;
  double accuracy = 0.0;
  double map = 0.0;  // macro mAP over classes (one-vs-rest)
};

/// Single affine layer on frozen embeddings, softmax cross-entropy,
/// full-batch Adam. Every class must have at least one training sample.
ProbeResult linear_probe(const std::vector<Embedding>& train_embs,
                         const std::vector<int>& train_labels,
                         const std::vector<Embedding>& eval_embs,
                         const std::vector<int>& eval_labels,
                         std::size_t n_classes, std::uint64_t seed);

}  // namespace clapkit
