#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "clapkit/config.hpp"
#include "clapkit/fusion.hpp"
#include "clapkit/tensor.hpp"

namespace clapkit {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Word-level vocabulary; id 0 is <pad>, id 1 is <unk>, the rest are the
/// corpus words in sorted order so a corpus fully determines the table.
struct Vocab {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  static Vocab build(const std::vector<std::string>& texts);
  static Vocab from_words(std::vector<std::string> words);

  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  std::size_t size() const { return words.size(); }
  int lookup(const std::string& w) const;
};

/// Lowercased alphanumeric runs.
std::vector<std::string> split_words(const std::string& text);

/// Lowercase, split on non-alphanumeric runs, map through the vocab
/// (<unk> for OOV), truncate/pad to max_len.
std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                          int max_len = ModelConfig::kMaxTokens);

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

struct ConvLayer {
  Tensor weight;  // (C_out, C_in, K_t, K_f)
  Tensor bias;    // (C_out)
  int stride_t = 1, stride_f = 1;
  int pad_t = 1, pad_f = 1;
};

Tensor conv2d_forward(const Tensor& in, const ConvLayer& l);
/// grad_in may be null when the input is raw data.
void conv2d_backward(const Tensor& grad_out, const Tensor& in,
                     const ConvLayer& l, Tensor* grad_in, ConvLayer& grads);

Tensor avg_pool2(const Tensor& in);  // 2x2 mean, floor semantics
Tensor avg_pool2_backward(const Tensor& grad_out,
                          const std::vector<std::size_t>& in_dims);

void relu_inplace(Tensor& t);
/// grad_pre[i] = grad_out[i] * (pre[i] > 0)
Tensor relu_backward(const Tensor& grad_out, const Tensor& pre);

std::vector<double> global_mean_pool(const Tensor& in);  // (C,T,F) -> C
Tensor global_mean_pool_backward(const std::vector<double>& grad,
                                 const std::vector<std::size_t>& in_dims);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Stem conv block plus N pool-then-conv blocks; global mean pooling of the
/// last block's channels gives the length-L encoder output.
struct AudioEncoderParams {
  ConvLayer stem;                 // 1 -> stem_channels, stride = stem_stride
  std::vector<ConvLayer> blocks;  // 2x2 mean pool, then 3x3 conv, then ReLU
  int out_dim() const { return static_cast<int>(blocks.back().bias.size()); }
};

struct TextEncoderParams {
  Tensor token_embedding;     // (V, E)
  Tensor position_embedding;  // (kMaxTokens, E)
  bool use_attention = false;
  Tensor wq, wk, wv, wo;  // (E, E) each, only allocated with attention
  int embed_dim() const { return static_cast<int>(token_embedding.dim(1)); }
};

/// Two affine layers with a ReLU between: L -> H -> D, H = D.
struct ProjectionParams {
  Tensor w1, b1;  // (H, L), (H)
  Tensor w2, b2;  // (D, H), (D)
  int out_dim() const { return static_cast<int>(b2.size()); }
};

/// Learnable temperature, stored as log(tau) and clamped to [tau_min, tau_max]
/// after every update.
struct Temperature {
  Tensor log_tau{std::vector<std::size_t>{1}};
  double tau_min = 5e-3;
  double tau_max = 1.0;

  double tau() const;
  void clamp();
};

struct ModelParams {
  AudioEncoderParams audio;
  MergeConvParams merge;
  AffParams aff;
  TextEncoderParams text;
  ProjectionParams audio_proj;
  ProjectionParams text_proj;
  Temperature temperature;
};

/// Seeded He-style uniform init; the config fully determines the named
/// parameter set (names and shapes).
ModelParams init_model(const ModelConfig& mc, std::size_t vocab_size,
                       double tau_init, double tau_min, double tau_max,
                       std::uint64_t seed);
ModelParams zeros_like(const ModelParams& p);

struct NamedTensorRef {
  std::string name;
  Tensor* tensor;
};
/// Fixed enumeration order; checkpoints and the optimizer both rely on it.
std::vector<NamedTensorRef> named_params(ModelParams& p);

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

struct Embedding {
  std::vector<double> values;
  std::string modality;  // "audio" | "text"
  std::string id;
  bool eps_floored = false;  // normalize() hit the zero-vector epsilon floor
};

/// e / max(||e||, 1e-12); flags the epsilon floor instead of erroring.
Embedding normalize(const Embedding& e);
/// Gradient through normalize given the pre-normalization vector.
std::vector<double> normalize_backward(const std::vector<double>& grad_out,
                                       const std::vector<double>& pre);

// ---------------------------------------------------------------------------
// Forward / backward passes
// ---------------------------------------------------------------------------

/// Per-encode instrumentation: op calls and block-chain MAC tally, used by
/// the constant-computation property test.
struct EncodeStats {
  int stem_calls = 0;
  int merge_calls = 0;
  int aff_calls = 0;
  std::size_t block_macs = 0;  // conv MACs after the fusion point
  std::vector<std::array<std::size_t, 3>> block_input_shapes;
};

struct AudioEncodeCache {
  std::vector<Tensor> view_in;    // (1, T, F) per view, global first
  std::vector<Tensor> stem_pre;   // pre-ReLU stem maps per view
  std::vector<Tensor> stem_out;   // post-ReLU
  bool fused = false;
  MergeCache merge;
  AffCache aff;
  std::vector<Tensor> block_in;   // input map per block
  std::vector<Tensor> pooled;     // after 2x2 pool
  std::vector<Tensor> conv_pre;   // pre-ReLU conv output
  std::vector<Tensor> conv_out;   // post-ReLU
  std::vector<std::size_t> final_dims;
};

std::vector<double> encode_audio(const FusionInput& x, const ModelParams& p,
                                 AudioEncodeCache* cache = nullptr,
                                 EncodeStats* stats = nullptr);
void encode_audio_backward(const std::vector<double>& grad_features,
                           const AudioEncodeCache& cache, const ModelParams& p,
                           ModelParams& grads);

struct TextEncodeCache {
  std::vector<int> ids;
  std::vector<int> content_pos;  // non-pad positions
  Tensor h;                      // (P, E) token + position embeddings
  // attention intermediates (allocated only when attention is enabled)
  Tensor q, k, v, attn, ctx, res;
  std::vector<double> pooled;
};

/// Embedding lookup + position add, optional one-block self-attention over
/// non-pad positions, masked mean pool. All-pad input pools to zero.
std::vector<double> encode_text(const std::vector<int>& ids,
                                const TextEncoderParams& p,
                                TextEncodeCache* cache = nullptr);
void encode_text_backward(const std::vector<double>& grad_pooled,
                          const TextEncodeCache& cache,
                          const TextEncoderParams& p, TextEncoderParams& grads);

struct ProjectionCache {
  std::vector<double> in, pre1, hidden;
};

std::vector<double> project(const std::vector<double>& v,
                            const ProjectionParams& p,
                            ProjectionCache* cache = nullptr);
std::vector<double> project_backward(const std::vector<double>& grad_out,
                                     const ProjectionCache& cache,
                                     const ProjectionParams& p,
                                     ProjectionParams& grads);

}  // namespace clapkit
