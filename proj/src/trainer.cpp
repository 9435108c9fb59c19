#include "clapkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "clapkit/fusion.hpp"
#include "clapkit/objective.hpp"
#include "clapkit/threading.hpp"

namespace clapkit {

double lr_at(std::size_t step, const Schedule& s) {
  require(s.warmup_steps <= s.total_steps, "schedule: warmup exceeds total");
  if (step >= s.total_steps) return 0.0;
  if (step < s.warmup_steps)
    return s.base_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  std::size_t span = s.total_steps - s.warmup_steps;
  if (span == 0) return s.base_lr;
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(span);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState init_adam(const std::vector<NamedTensorRef>& params, double beta1,
                    double beta2, double eps) {
  AdamState st;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.eps = eps;
  for (const auto& ref : params) {
    st.m.emplace_back(ref.tensor->dims());
    st.v.emplace_back(ref.tensor->dims());
  }
  return st;
}

void adam_step(const std::vector<NamedTensorRef>& params,
               const std::vector<NamedTensorRef>& grads, AdamState& st,
               double lr) {
  require(params.size() == grads.size() && params.size() == st.m.size(),
          "adam_step: parameter/gradient/state lists disagree");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require(params[i].tensor->dims() == grads[i].tensor->dims(),
            "adam_step: shape mismatch for " + params[i].name);
    for (std::size_t j = 0; j < grads[i].tensor->size(); ++j) {
      if (!std::isfinite((*grads[i].tensor)[j])) {
        std::cerr << "[clapkit] warning: non-finite gradient in "
                  << params[i].name << ", skipping update\n";
        ++st.skipped;
        return;
      }
    }
  }

  ++st.t;
  double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    const Tensor& g = *grads[i].tensor;
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      double m_hat = m[j] / bc1;
      double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + st.eps);
    }
  }
}

void clip_global_norm(const std::vector<NamedTensorRef>& grads,
                      double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& ref : grads)
    for (std::size_t j = 0; j < ref.tensor->size(); ++j)
      sq += (*ref.tensor)[j] * (*ref.tensor)[j];
  double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  double scale = max_norm / norm;
  for (const auto& ref : grads)
    for (std::size_t j = 0; j < ref.tensor->size(); ++j)
      (*ref.tensor)[j] *= scale;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) {
  return splitmix64(splitmix64(splitmix64(base ^ (a + 1)) ^ (b + 1)) ^ (c + 1));
}

/// One corpus clip, ready for the per-step input policy. Short clips are
/// fully deterministic, so their views are frozen once; long clips keep the
/// full mel for per-epoch slicing.
struct PreparedClip {
  bool dynamic = false;
  FusionInput fixed;            // when !dynamic
  MelSpectrogram full;          // when dynamic
  double duration = 0.0;
  std::vector<std::vector<int>> caption_ids;
  std::string id;
};

struct ExampleWork {
  Embedding audio_norm, text_norm;
  std::vector<double> audio_raw, text_raw;  // pre-normalization projections
  AudioEncodeCache audio_cache;
  TextEncodeCache text_cache;
  ProjectionCache audio_proj_cache, text_proj_cache;
};

FusionInput make_input(const PreparedClip& clip, const Config& cfg,
                       std::mt19937_64& rng) {
  if (!clip.dynamic) return clip.fixed;
  if (cfg.fusion.enabled)
    return fused_views_from_mel(clip.full, clip.duration, cfg.dsp,
                                cfg.fusion.chunk_seconds, rng);
  // Fusion disabled: random chunk during training.
  const std::size_t raw_chunk =
      static_cast<std::size_t>(std::llround(cfg.fusion.chunk_seconds *
                                            cfg.dsp.sample_rate)) /
          static_cast<std::size_t>(cfg.dsp.hop) +
      1;
  std::size_t max_start = clip.full.t_frames - raw_chunk;
  std::size_t start = max_start == 0 ? 0 : rng() % (max_start + 1);
  MelSpectrogram view;
  view.f_bins = clip.full.f_bins;
  view.t_frames = raw_chunk;
  view.frame_rate = clip.full.frame_rate;
  view.config_hash = clip.full.config_hash;
  view.values.assign(
      clip.full.values.begin() + static_cast<std::ptrdiff_t>(start * clip.full.f_bins),
      clip.full.values.begin() +
          static_cast<std::ptrdiff_t>((start + raw_chunk) * clip.full.f_bins));
  FusionInput out;
  out.is_fused = false;
  out.source_duration = clip.duration;
  std::size_t target_t = (raw_chunk + 63) / 64 * 64;
  out.global_view = canonicalize_frames(view, target_t, cfg.dsp.log_floor);
  return out;
}

void forward_example(const PreparedClip& clip, const Config& cfg,
                     const ModelParams& model, std::mt19937_64& rng,
                     ExampleWork& w) {
  FusionInput in = make_input(clip, cfg, rng);
  std::vector<double> feats = encode_audio(in, model, &w.audio_cache);
  w.audio_raw = project(feats, model.audio_proj, &w.audio_proj_cache);
  Embedding ea{w.audio_raw, "audio", clip.id, false};
  w.audio_norm = normalize(ea);

  std::size_t pick = clip.caption_ids.size() == 1
                         ? 0
                         : rng() % clip.caption_ids.size();
  std::vector<double> tfeats =
      encode_text(clip.caption_ids[pick], model.text, &w.text_cache);
  w.text_raw = project(tfeats, model.text_proj, &w.text_proj_cache);
  Embedding et{w.text_raw, "text", clip.id, false};
  w.text_norm = normalize(et);
}

void backward_example(const ExampleWork& w, const std::vector<double>& g_audio,
                      const std::vector<double>& g_text,
                      const ModelParams& model, ModelParams& grads) {
  std::vector<double> g_a_raw = normalize_backward(g_audio, w.audio_raw);
  std::vector<double> g_a_feats =
      project_backward(g_a_raw, w.audio_proj_cache, model.audio_proj,
                       grads.audio_proj);
  encode_audio_backward(g_a_feats, w.audio_cache, model, grads);

  std::vector<double> g_t_raw = normalize_backward(g_text, w.text_raw);
  std::vector<double> g_t_feats = project_backward(
      g_t_raw, w.text_proj_cache, model.text_proj, grads.text_proj);
  encode_text_backward(g_t_feats, w.text_cache, model.text, grads.text);
}

double validation_loss(const std::vector<PreparedClip>& val, const Config& cfg,
                       const ModelParams& model, std::uint64_t eval_base,
                       unsigned workers) {
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < val.size(); b += batch) {
    std::size_t count = std::min(batch, val.size() - b);
    if (count < 2) break;
    std::vector<ExampleWork> work(count);
    parallel_for(count, [&](std::size_t i) {
      std::mt19937_64 rng(mix_seed(eval_base, 0x9a11, b + i, 0));
      forward_example(val[b + i], cfg, model, rng, work[i]);
    }, workers);
    std::vector<Embedding> ae, te;
    for (auto& w : work) {
      ae.push_back(std::move(w.audio_norm));
      te.push_back(std::move(w.text_norm));
    }
    total += contrastive_loss(ae, te, model.temperature).loss;
    ++batches;
    if (count < batch) break;
  }
  return batches == 0 ? 0.0 : total / static_cast<double>(batches);
}

}  // namespace

TrainResult train(const Config& cfg, const Manifest& train_data,
                  const Manifest* val_data, const std::string& out_dir,
                  std::ostream* metrics_log) {
  cfg.validate();
  require(!train_data.records.empty(), "train: manifest is empty");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const unsigned workers =
      cfg.train.threads > 0
          ? std::min<unsigned>(static_cast<unsigned>(cfg.train.threads), worker_count())
          : worker_count();

  // Vocabulary from the training captions; stored in every checkpoint.
  std::vector<std::string> texts;
  for (const auto& r : train_data.records)
    for (const auto& c : effective_captions(r)) texts.push_back(c);
  Vocab vocab = Vocab::build(texts);

  ModelParams model =
      init_model(cfg.model, vocab.size(), cfg.train.tau_init, cfg.train.tau_min,
                 cfg.train.tau_max, cfg.train.seed);

  // Decode + mel once per clip; long clips keep the full mel for per-epoch
  // slicing, short clips freeze their deterministic views now.
  auto prepare_one = [&](const PairRecord& rec, PreparedClip& out) -> bool {
    try {
      Waveform w = load_audio(rec.audio_path, cfg.dsp);
      out.id = rec.id;
      out.duration = w.duration_s();
      auto chunk_samples = static_cast<std::size_t>(
          std::llround(cfg.fusion.chunk_seconds * cfg.dsp.sample_rate));
      if (w.samples.size() <= chunk_samples) {
        std::mt19937_64 unused(0);
        out.dynamic = false;
        out.fixed = prepare_input(w, cfg.dsp, cfg.fusion.chunk_seconds, unused);
      } else {
        out.dynamic = true;
        out.full = mel_spectrogram(w, cfg.dsp);
      }
      for (const auto& cap : effective_captions(rec))
        out.caption_ids.push_back(tokenize(cap, vocab));
      return true;
    } catch (const std::exception& e) {
      std::cerr << "[clapkit] skipping record " << rec.id << ": " << e.what()
                << "\n";
      return false;
    }
  };

  std::vector<PreparedClip> clips(train_data.records.size());
  std::vector<char> ok(train_data.records.size(), 0);
  parallel_for(train_data.records.size(), [&](std::size_t i) {
    ok[i] = prepare_one(train_data.records[i], clips[i]) ? 1 : 0;
  }, workers);

  std::vector<PreparedClip> usable;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (ok[i]) usable.push_back(std::move(clips[i]));
    else ++skipped;
  }
  if (skipped * 10 > train_data.records.size())
    throw std::runtime_error("train: more than 10% of records unreadable (" +
                             std::to_string(skipped) + "/" +
                             std::to_string(train_data.records.size()) + ")");

  std::vector<PreparedClip> val_clips;
  if (val_data) {
    std::vector<PreparedClip> vc(val_data->records.size());
    std::vector<char> vok(val_data->records.size(), 0);
    parallel_for(val_data->records.size(), [&](std::size_t i) {
      vok[i] = prepare_one(val_data->records[i], vc[i]) ? 1 : 0;
    }, workers);
    for (std::size_t i = 0; i < vc.size(); ++i)
      if (vok[i]) val_clips.push_back(std::move(vc[i]));
  }

  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  require(usable.size() >= batch, "train: fewer usable records than one batch");
  const std::size_t steps_per_epoch = usable.size() / batch;
  const std::size_t total_steps =
      steps_per_epoch * static_cast<std::size_t>(cfg.train.epochs);
  Schedule sched{static_cast<std::size_t>(
                     std::llround(cfg.train.warmup_frac *
                                  static_cast<double>(total_steps))),
                 total_steps, cfg.train.base_lr};

  auto param_refs = named_params(model);
  AdamState adam = init_adam(param_refs, cfg.train.beta1, cfg.train.beta2,
                             cfg.train.adam_eps);
  ModelParams grads = zeros_like(model);
  auto grad_refs = named_params(grads);

  const std::uint64_t rng_base =
      splitmix64(cfg.train.seed ^ splitmix64(cfg.fusion.seed));

  TrainResult result;
  std::vector<std::size_t> order(usable.size());
  std::size_t global_step = 0;

  auto write_checkpoint = [&](const std::string& name) {
    Checkpoint ck = checkpoint_from_model(model, cfg, vocab);
    std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(ck, path);
    return path;
  };

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    // Seeded Fisher-Yates; modulo draws keep the permutation portable.
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(
        mix_seed(rng_base, 0x50ULL, static_cast<std::uint64_t>(epoch), 1));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng() % i]);

    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<ExampleWork> work(batch);
      parallel_for(batch, [&](std::size_t i) {
        const PreparedClip& clip = usable[order[step * batch + i]];
        std::mt19937_64 rng(
            mix_seed(rng_base, static_cast<std::uint64_t>(epoch), global_step, i));
        forward_example(clip, cfg, model, rng, work[i]);
      }, workers);

      std::vector<Embedding> ae, te;
      ae.reserve(batch);
      te.reserve(batch);
      for (auto& w : work) {
        ae.push_back(w.audio_norm);
        te.push_back(w.text_norm);
      }
      ContrastiveResult loss = contrastive_loss(ae, te, model.temperature);
      ContrastiveGrads lgrads =
          contrastive_backward(loss.logits, ae, te, model.temperature);

      // Per-example backward into private buffers, reduced in index order so
      // thread count never changes results.
      std::vector<ModelParams> slot_grads(batch);
      for (auto& sg : slot_grads) sg = zeros_like(model);
      parallel_for(batch, [&](std::size_t i) {
        backward_example(work[i], lgrads.grad_audio[i], lgrads.grad_text[i],
                         model, slot_grads[i]);
      }, workers);
      for (std::size_t i = 0; i < batch; ++i) {
        auto src = named_params(slot_grads[i]);
        for (std::size_t t = 0; t < grad_refs.size(); ++t)
          for (std::size_t j = 0; j < grad_refs[t].tensor->size(); ++j)
            (*grad_refs[t].tensor)[j] += (*src[t].tensor)[j];
      }
      grads.temperature.log_tau[0] += lgrads.grad_log_tau;

      clip_global_norm(grad_refs, cfg.train.clip_norm);
      double lr = lr_at(global_step + 1, sched);
      adam_step(param_refs, grad_refs, adam, lr);
      model.temperature.clamp();
      for (auto& ref : grad_refs) ref.tensor->fill(0.0);

      ++global_step;
      epoch_loss += loss.loss;
      if (metrics_log) {
        nlohmann::json line = {{"step", global_step},
                               {"epoch", epoch},
                               {"loss", loss.loss},
                               {"lr", lr},
                               {"tau", model.temperature.tau()}};
        (*metrics_log) << line.dump() << "\n";
      }
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    result.epoch_train_loss.push_back(epoch_loss);

    if (!val_clips.empty()) {
      double vl = validation_loss(val_clips, cfg, model,
                                  splitmix64(cfg.fusion.seed ^ 0xeva1), workers);
      result.epoch_val_loss.push_back(vl);
      if (metrics_log) {
        nlohmann::json line = {{"epoch", epoch},
                               {"train_loss", epoch_loss},
                               {"val_loss", vl}};
        (*metrics_log) << line.dump() << "\n";
      }
    }

    if (cfg.train.checkpoint_every > 0 &&
        (epoch + 1) % cfg.train.checkpoint_every == 0 &&
        epoch + 1 < cfg.train.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_epoch_%03d.clpk", epoch + 1);
      write_checkpoint(name);
    }
  }

  result.final_checkpoint = write_checkpoint("checkpoint_final.clpk");
  result.steps = global_step;
  result.skipped_records = skipped;
  result.skipped_updates = adam.skipped;
  return result;
}

}  // namespace clapkit
