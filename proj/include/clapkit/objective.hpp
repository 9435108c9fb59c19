#pragma once

#include <cstddef>
#include <vector>

#include "clapkit/model.hpp"

namespace clapkit {

/// N x N scaled similarities, logits[i*n + j] = dot(audio_i, text_j) / tau.
struct BatchLogits {
  std::size_t n = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

struct ContrastiveResult {
  double loss = 0.0;
  BatchLogits logits;
};

/// Symmetric batch contrastive loss over paired unit-norm embeddings:
/// -(1/2N) sum_i [log softmax_row(i,i) + log softmax_col(i,i)].
/// The printed form of the loss omits the negation; the cross-entropy sign
/// is used here so training minimizes. Fixed-order summation.
ContrastiveResult contrastive_loss(const std::vector<Embedding>& audio,
                                   const std::vector<Embedding>& text,
                                   const Temperature& tau);

struct ContrastiveGrads {
  std::vector<std::vector<double>> grad_audio;
  std::vector<std::vector<double>> grad_text;
  double grad_log_tau = 0.0;
};

ContrastiveGrads contrastive_backward(const BatchLogits& logits,
                                      const std::vector<Embedding>& audio,
                                      const std::vector<Embedding>& text,
                                      const Temperature& tau);

}  // namespace clapkit
