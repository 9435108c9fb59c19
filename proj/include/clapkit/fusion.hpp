#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "clapkit/dsp.hpp"
#include "clapkit/tensor.hpp"

namespace clapkit {

/// Encoder input built from one clip: a global view plus, for clips longer
/// than the chunk, three randomly sliced local views.
struct FusionInput {
  MelSpectrogram global_view;                       // (target_t, F)
  std::vector<MelSpectrogram> local_views;          // empty or exactly 3
  bool is_fused = false;
  double source_duration = 0.0;
  /// Raw-frame [start, end) of each local slice, for layout checks.
  std::vector<std::pair<std::size_t, std::size_t>> local_frame_windows;
};

/// Two pointwise-conv layers with a ReLU between: C -> bottleneck -> C.
struct AffBranch {
  Tensor w1, b1;  // (B, C), (B)
  Tensor w2, b2;  // (C, B), (C)
};

/// Attention feature fusion: alpha = sigmoid(local_branch(G + X) +
/// global_branch(G + X)); the global branch pools over time/freq first and
/// broadcasts. Output alpha*G + (1 - alpha)*X.
struct AffParams {
  AffBranch local_branch;
  AffBranch global_branch;
  int bottleneck_ratio = 4;
};

/// 2-D convolution with 3-stride in time over the three time-interleaved
/// local maps; kernel taps select one local each, so the output keeps one
/// map's time length.
struct MergeConvParams {
  Tensor weight;  // (C_out, C_in, 3)
  Tensor bias;    // (C_out)
};

/// Repeats a short clip floor(d/T) times and zero-pads the remainder to
/// exactly chunk_seconds (the 3 s -> 3x3 s + 1 s zeros rule).
Waveform repeat_pad(const Waveform& w, double chunk_seconds);

/// Full-length mel for a clip; cacheable across epochs for long clips.
MelSpectrogram full_mel(const Waveform& w, const DspConfig& cfg);

/// Bucket-mean over time from the raw frame count down to out_t frames.
MelSpectrogram mean_pool_frames(const MelSpectrogram& m, std::size_t out_t);

/// Builds the fused views from a precomputed full-length mel. The clip is
/// longer than the chunk; draws one random chunk-length window from each
/// third (contained in its third whenever the third is long enough).
FusionInput fused_views_from_mel(const MelSpectrogram& full, double duration_s,
                                 const DspConfig& cfg, double chunk_seconds,
                                 std::mt19937_64& rng);

/// The variable-length input policy. T <= chunk: repeat + zero-pad, single
/// view. T > chunk: global mean-pooled view plus three local slices.
FusionInput prepare_input(const Waveform& w, const DspConfig& cfg,
                          double chunk_seconds, std::mt19937_64& rng);

/// Fusion-disabled baseline: one chunk-length window of mel frames.
/// random_window picks the start uniformly (training); otherwise the first
/// chunk is taken (deterministic truncation for evaluation).
FusionInput truncate_input(const Waveform& w, const DspConfig& cfg,
                           double chunk_seconds, bool random_window,
                           std::mt19937_64& rng);

/// merge_locals: out[o][t][f] = sum_c sum_j W[o][c][j] * local_j[c][t][f] + b[o].
Tensor merge_locals(const std::array<const Tensor*, 3>& locals,
                    const MergeConvParams& p);

struct MergeCache {
  std::array<Tensor, 3> locals;
};

Tensor merge_locals_forward(const std::array<const Tensor*, 3>& locals,
                            const MergeConvParams& p, MergeCache& cache);

/// Gradients of the merge contraction: returns grads for the three locals
/// and accumulates parameter grads.
std::array<Tensor, 3> merge_locals_backward(const Tensor& grad_out,
                                            const MergeCache& cache,
                                            const MergeConvParams& p,
                                            MergeConvParams& grads);

struct AffCache {
  Tensor global, local;    // inputs G, X
  Tensor sum;              // S = G + X
  Tensor local_pre;        // local branch bottleneck pre-ReLU (B, T, F)
  Tensor local_out;        // local branch output (C, T, F)
  std::vector<double> pooled;      // channel means of S
  std::vector<double> global_pre;  // global branch bottleneck pre-ReLU (B)
  std::vector<double> global_out;  // global branch output (C)
  Tensor alpha;            // (C, T, F)
};

Tensor aff_fuse(const Tensor& global, const Tensor& local, const AffParams& p);
Tensor aff_fuse_forward(const Tensor& global, const Tensor& local,
                        const AffParams& p, AffCache& cache);

/// Exact analytic gradients of the fused output; parameter grads accumulate.
void aff_backward(const Tensor& grad_out, const AffCache& cache,
                  const AffParams& p, Tensor& grad_global, Tensor& grad_local,
                  AffParams& grads);

}  // namespace clapkit
