#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "clapkit/checkpoint.hpp"
#include "clapkit/config.hpp"
#include "clapkit/datakit.hpp"
#include "clapkit/model.hpp"

namespace clapkit {

/// Linear warmup to base_lr, then cosine decay to zero at total_steps.
struct Schedule {
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double base_lr = 1e-4;
};

double lr_at(std::size_t step, const Schedule& s);

/// Bias-corrected Adam over the named-parameter list.
struct AdamState {
  std::vector<Tensor> m, v;  // parallel to named_params order
  std::size_t t = 0;
  double beta1 = 0.99;
  double beta2 = 0.9;
  double eps = 1e-8;
  std::size_t skipped = 0;  // steps dropped on non-finite gradients
};

AdamState init_adam(const std::vector<NamedTensorRef>& params, double beta1,
                    double beta2, double eps);

/// One update. A non-finite gradient anywhere skips the whole step (moments
/// and t untouched) and bumps the skip counter.
void adam_step(const std::vector<NamedTensorRef>& params,
               const std::vector<NamedTensorRef>& grads, AdamState& st,
               double lr);

/// Scales gradients so the global L2 norm is at most max_norm.
void clip_global_norm(const std::vector<NamedTensorRef>& grads,
                      double max_norm);

struct TrainResult {
  std::string final_checkpoint;
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_loss;  // empty when no validation manifest
  std::size_t steps = 0;
  std::size_t skipped_records = 0;
  std::size_t skipped_updates = 0;
};

/// Full loop: seeded shuffling, fusion-aware input pipeline with cached mels,
/// forward/backward/update per batch, JSONL metrics, periodic + final
/// checkpoints. (seed, config, data) fully determine every checkpoint byte.
TrainResult train(const Config& cfg, const Manifest& train_data,
                  const Manifest* val_data, const std::string& out_dir,
                  std::ostream* metrics_log = nullptr);

}  // namespace clapkit
