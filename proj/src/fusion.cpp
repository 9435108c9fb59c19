#include "clapkit/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace clapkit {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

/// Uniform integer in [lo, hi] via modulo draw; uniform_int_distribution is
/// implementation-defined, and checkpoints must reproduce across toolchains.
std::uint64_t draw_range(std::mt19937_64& rng, std::uint64_t lo, std::uint64_t hi) {
  if (hi <= lo) return lo;
  return lo + rng() % (hi - lo + 1);
}

/// Raw frame count of a standalone chunk-length clip.
std::size_t chunk_raw_frames(const DspConfig& cfg, double chunk_seconds) {
  auto samples = static_cast<std::size_t>(
      std::llround(chunk_seconds * cfg.sample_rate));
  return samples / static_cast<std::size_t>(cfg.hop) + 1;
}

/// Canonical encoder frame count: the raw chunk frames rounded up to a
/// multiple of 64 so repeated 2x pooling stays integral. Canonical config
/// (10 s, hop 480, 48 kHz) gives 1001 -> 1024.
std::size_t canonical_frames(const DspConfig& cfg, double chunk_seconds) {
  std::size_t raw = chunk_raw_frames(cfg, chunk_seconds);
  return (raw + 63) / 64 * 64;
}

}  // namespace

Waveform repeat_pad(const Waveform& w, double chunk_seconds) {
  require(!w.samples.empty(), "repeat_pad: empty waveform");
  auto target = static_cast<std::size_t>(
      std::llround(chunk_seconds * w.sample_rate));
  const std::size_t n = w.samples.size();
  require(n <= target, "repeat_pad: clip longer than chunk");

  Waveform out = w;
  out.samples.assign(target, 0.0);
  std::size_t repeats = target / n;  // floor(d/T)
  for (std::size_t r = 0; r < repeats; ++r)
    std::copy(w.samples.begin(), w.samples.end(),
              out.samples.begin() + static_cast<std::ptrdiff_t>(r * n));
  return out;
}

MelSpectrogram full_mel(const Waveform& w, const DspConfig& cfg) {
  return mel_spectrogram(w, cfg);
}

MelSpectrogram mean_pool_frames(const MelSpectrogram& m, std::size_t out_t) {
  require(out_t >= 1, "mean_pool_frames: out_t must be at least 1");
  MelSpectrogram out;
  out.f_bins = m.f_bins;
  out.t_frames = out_t;
  out.frame_rate = m.frame_rate * static_cast<double>(out_t) /
                   static_cast<double>(m.t_frames);
  out.config_hash = m.config_hash;
  out.values.assign(out_t * m.f_bins, 0.0);
  for (std::size_t j = 0; j < out_t; ++j) {
    std::size_t lo = j * m.t_frames / out_t;
    std::size_t hi = (j + 1) * m.t_frames / out_t;
    if (hi <= lo) hi = std::min(lo + 1, m.t_frames);
    for (std::size_t t = lo; t < hi; ++t)
      for (std::size_t f = 0; f < m.f_bins; ++f)
        out.values[j * m.f_bins + f] += m.values[t * m.f_bins + f];
    double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t f = 0; f < m.f_bins; ++f)
      out.values[j * m.f_bins + f] *= inv;
  }
  return out;
}

FusionInput fused_views_from_mel(const MelSpectrogram& full, double duration_s,
                                 const DspConfig& cfg, double chunk_seconds,
                                 std::mt19937_64& rng) {
  const std::size_t target_t = canonical_frames(cfg, chunk_seconds);
  const std::size_t raw_chunk = chunk_raw_frames(cfg, chunk_seconds);
  const std::size_t window = raw_chunk - 1;  // chunk_seconds worth of hops
  require(full.t_frames > raw_chunk, "fused_views_from_mel: clip not longer than chunk");

  FusionInput out;
  out.is_fused = true;
  out.source_duration = duration_s;
  out.global_view = canonicalize_frames(mean_pool_frames(full, raw_chunk),
                                        target_t, cfg.log_floor);

  const std::size_t total = full.t_frames;
  for (int k = 0; k < 3; ++k) {
    std::size_t b_lo = static_cast<std::size_t>(k) * total / 3;
    std::size_t b_hi = static_cast<std::size_t>(k + 1) * total / 3;
    std::size_t max_start = total - window;
    std::size_t lo = std::min(b_lo, max_start);
    std::size_t hi = b_hi >= window ? std::min(b_hi - window, max_start) : lo;
    if (hi < lo) hi = lo;
    std::size_t start = static_cast<std::size_t>(draw_range(rng, lo, hi));

    MelSpectrogram view;
    view.f_bins = full.f_bins;
    view.t_frames = window;
    view.frame_rate = full.frame_rate;
    view.config_hash = full.config_hash;
    view.values.assign(full.values.begin() +
                           static_cast<std::ptrdiff_t>(start * full.f_bins),
                       full.values.begin() +
                           static_cast<std::ptrdiff_t>((start + window) * full.f_bins));
    out.local_views.push_back(canonicalize_frames(view, target_t, cfg.log_floor));
    out.local_frame_windows.emplace_back(start, start + window);
  }
  return out;
}

FusionInput prepare_input(const Waveform& w, const DspConfig& cfg,
                          double chunk_seconds, std::mt19937_64& rng) {
  require(!w.samples.empty(), "prepare_input: empty waveform");
  const auto target_samples = static_cast<std::size_t>(
      std::llround(chunk_seconds * w.sample_rate));
  const std::size_t target_t = canonical_frames(cfg, chunk_seconds);

  if (w.samples.size() <= target_samples) {
    Waveform padded = repeat_pad(w, chunk_seconds);
    FusionInput out;
    out.is_fused = false;
    out.source_duration = w.duration_s();
    out.global_view = canonicalize_frames(mel_spectrogram(padded, cfg),
                                          target_t, cfg.log_floor);
    return out;
  }
  MelSpectrogram full = mel_spectrogram(w, cfg);
  FusionInput out = fused_views_from_mel(full, w.duration_s(), cfg,
                                         chunk_seconds, rng);
  return out;
}

FusionInput truncate_input(const Waveform& w, const DspConfig& cfg,
                           double chunk_seconds, bool random_window,
                           std::mt19937_64& rng) {
  require(!w.samples.empty(), "truncate_input: empty waveform");
  const auto target_samples = static_cast<std::size_t>(
      std::llround(chunk_seconds * w.sample_rate));
  const std::size_t target_t = canonical_frames(cfg, chunk_seconds);

  if (w.samples.size() <= target_samples) {
    Waveform padded = repeat_pad(w, chunk_seconds);
    FusionInput out;
    out.is_fused = false;
    out.source_duration = w.duration_s();
    out.global_view = canonicalize_frames(mel_spectrogram(padded, cfg),
                                          target_t, cfg.log_floor);
    return out;
  }

  MelSpectrogram full = mel_spectrogram(w, cfg);
  const std::size_t raw_chunk = chunk_raw_frames(cfg, chunk_seconds);
  std::size_t max_start = full.t_frames - raw_chunk;
  std::size_t start =
      random_window ? static_cast<std::size_t>(draw_range(rng, 0, max_start)) : 0;

  MelSpectrogram view;
  view.f_bins = full.f_bins;
  view.t_frames = raw_chunk;
  view.frame_rate = full.frame_rate;
  view.config_hash = full.config_hash;
  view.values.assign(full.values.begin() +
                         static_cast<std::ptrdiff_t>(start * full.f_bins),
                     full.values.begin() +
                         static_cast<std::ptrdiff_t>((start + raw_chunk) * full.f_bins));

  FusionInput out;
  out.is_fused = false;
  out.source_duration = w.duration_s();
  out.global_view = canonicalize_frames(view, target_t, cfg.log_floor);
  return out;
}

// ---------------------------------------------------------------------------
// merge_locals
// ---------------------------------------------------------------------------

namespace {

void check_merge_shapes(const std::array<const Tensor*, 3>& locals,
                        const MergeConvParams& p) {
  require(locals[0] && locals[1] && locals[2], "merge_locals: null input");
  require(locals[0]->rank() == 3, "merge_locals: locals must be (C,T,F)");
  require(locals[0]->same_shape(*locals[1]) && locals[0]->same_shape(*locals[2]),
          "merge_locals: locals must share one shape");
  require(p.weight.rank() == 3 && p.weight.dim(2) == 3,
          "merge_locals: weight must be (C_out, C_in, 3)");
  require(p.weight.dim(1) == locals[0]->dim(0),
          "merge_locals: weight C_in differs from input channels");
  require(p.bias.size() == p.weight.dim(0),
          "merge_locals: bias length differs from C_out");
}

}  // namespace

Tensor merge_locals_forward(const std::array<const Tensor*, 3>& locals,
                            const MergeConvParams& p, MergeCache& cache) {
  check_merge_shapes(locals, p);
  const std::size_t co = p.weight.dim(0), ci = p.weight.dim(1);
  const std::size_t t = locals[0]->dim(1), f = locals[0]->dim(2);

  cache.locals = {*locals[0], *locals[1], *locals[2]};

  Tensor out({co, t, f});
  const std::size_t plane = t * f;
  for (std::size_t o = 0; o < co; ++o) {
    double* op = out.data() + o * plane;
    std::fill(op, op + plane, p.bias[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      for (int j = 0; j < 3; ++j) {
        double wv = p.weight.at3(o, c, static_cast<std::size_t>(j));
        const double* ip = locals[static_cast<std::size_t>(j)]->data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) op[i] += wv * ip[i];
      }
    }
  }
  return out;
}

Tensor merge_locals(const std::array<const Tensor*, 3>& locals,
                    const MergeConvParams& p) {
  MergeCache cache;
  return merge_locals_forward(locals, p, cache);
}

std::array<Tensor, 3> merge_locals_backward(const Tensor& grad_out,
                                            const MergeCache& cache,
                                            const MergeConvParams& p,
                                            MergeConvParams& grads) {
  const std::size_t co = p.weight.dim(0), ci = p.weight.dim(1);
  const std::size_t t = cache.locals[0].dim(1), f = cache.locals[0].dim(2);
  require(grad_out.rank() == 3 && grad_out.dim(0) == co &&
              grad_out.dim(1) == t && grad_out.dim(2) == f,
          "merge_locals_backward: grad shape mismatch");
  const std::size_t plane = t * f;

  std::array<Tensor, 3> grad_locals = {Tensor({ci, t, f}), Tensor({ci, t, f}),
                                       Tensor({ci, t, f})};
  for (std::size_t o = 0; o < co; ++o) {
    const double* gp = grad_out.data() + o * plane;
    double acc_b = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc_b += gp[i];
    grads.bias[o] += acc_b;
    for (std::size_t c = 0; c < ci; ++c) {
      for (int j = 0; j < 3; ++j) {
        const double* ip = cache.locals[static_cast<std::size_t>(j)].data() + c * plane;
        double* gl = grad_locals[static_cast<std::size_t>(j)].data() + c * plane;
        double wv = p.weight.at3(o, c, static_cast<std::size_t>(j));
        double acc_w = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          acc_w += gp[i] * ip[i];
          gl[i] += wv * gp[i];
        }
        grads.weight.at3(o, c, static_cast<std::size_t>(j)) += acc_w;
      }
    }
  }
  return grad_locals;
}

// ---------------------------------------------------------------------------
// Attentional feature fusion
// ---------------------------------------------------------------------------

namespace {

void check_aff_shapes(const Tensor& global, const Tensor& local,
                      const AffParams& p) {
  require(global.rank() == 3, "aff_fuse: inputs must be (C,T,F)");
  require(global.same_shape(local), "aff_fuse: global/local shape mismatch");
  const std::size_t c = global.dim(0);
  const std::size_t b = p.local_branch.w1.dim(0);
  require(p.local_branch.w1.dims() == std::vector<std::size_t>({b, c}) &&
              p.local_branch.w2.dims() == std::vector<std::size_t>({c, b}) &&
              p.global_branch.w1.dims() == std::vector<std::size_t>({b, c}) &&
              p.global_branch.w2.dims() == std::vector<std::size_t>({c, b}),
          "aff_fuse: branch shapes inconsistent with input channels");
}

}  // namespace

Tensor aff_fuse_forward(const Tensor& global, const Tensor& local,
                        const AffParams& p, AffCache& cache) {
  check_aff_shapes(global, local, p);
  const std::size_t c = global.dim(0), t = global.dim(1), f = global.dim(2);
  const std::size_t b = p.local_branch.w1.dim(0);
  const std::size_t plane = t * f;

  cache.global = global;
  cache.local = local;
  cache.sum = Tensor({c, t, f});
  for (std::size_t i = 0; i < cache.sum.size(); ++i)
    cache.sum[i] = global[i] + local[i];

  // Local branch: pointwise C -> B (ReLU) -> C at every position.
  cache.local_pre = Tensor({b, t, f});
  for (std::size_t bb = 0; bb < b; ++bb) {
    double* pre = cache.local_pre.data() + bb * plane;
    std::fill(pre, pre + plane, p.local_branch.b1[bb]);
    for (std::size_t cc = 0; cc < c; ++cc) {
      double wv = p.local_branch.w1.at2(bb, cc);
      const double* sp = cache.sum.data() + cc * plane;
      for (std::size_t i = 0; i < plane; ++i) pre[i] += wv * sp[i];
    }
  }
  cache.local_out = Tensor({c, t, f});
  for (std::size_t cc = 0; cc < c; ++cc) {
    double* lo = cache.local_out.data() + cc * plane;
    std::fill(lo, lo + plane, p.local_branch.b2[cc]);
    for (std::size_t bb = 0; bb < b; ++bb) {
      double wv = p.local_branch.w2.at2(cc, bb);
      const double* pre = cache.local_pre.data() + bb * plane;
      for (std::size_t i = 0; i < plane; ++i)
        lo[i] += wv * std::max(pre[i], 0.0);
    }
  }

  // Global branch: channel means -> B (ReLU) -> C, broadcast back.
  cache.pooled.assign(c, 0.0);
  double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* sp = cache.sum.data() + cc * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += sp[i];
    cache.pooled[cc] = acc * inv_plane;
  }
  cache.global_pre.assign(b, 0.0);
  for (std::size_t bb = 0; bb < b; ++bb) {
    double acc = p.global_branch.b1[bb];
    for (std::size_t cc = 0; cc < c; ++cc)
      acc += p.global_branch.w1.at2(bb, cc) * cache.pooled[cc];
    cache.global_pre[bb] = acc;
  }
  cache.global_out.assign(c, 0.0);
  for (std::size_t cc = 0; cc < c; ++cc) {
    double acc = p.global_branch.b2[cc];
    for (std::size_t bb = 0; bb < b; ++bb)
      acc += p.global_branch.w2.at2(cc, bb) * std::max(cache.global_pre[bb], 0.0);
    cache.global_out[cc] = acc;
  }

  cache.alpha = Tensor({c, t, f});
  Tensor out({c, t, f});
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* lo = cache.local_out.data() + cc * plane;
    const double* gp = global.data() + cc * plane;
    const double* xp = local.data() + cc * plane;
    double* ap = cache.alpha.data() + cc * plane;
    double* op = out.data() + cc * plane;
    double go = cache.global_out[cc];
    for (std::size_t i = 0; i < plane; ++i) {
      double a = sigmoid(lo[i] + go);
      ap[i] = a;
      op[i] = a * gp[i] + (1.0 - a) * xp[i];
    }
  }
  return out;
}

Tensor aff_fuse(const Tensor& global, const Tensor& local, const AffParams& p) {
  AffCache cache;
  return aff_fuse_forward(global, local, p, cache);
}

void aff_backward(const Tensor& grad_out, const AffCache& cache,
                  const AffParams& p, Tensor& grad_global, Tensor& grad_local,
                  AffParams& grads) {
  require(!cache.alpha.empty(), "aff_backward: cache not populated");
  require(grad_out.same_shape(cache.alpha), "aff_backward: grad shape mismatch");
  const std::size_t c = cache.alpha.dim(0), t = cache.alpha.dim(1),
                    f = cache.alpha.dim(2);
  const std::size_t b = p.local_branch.w1.dim(0);
  const std::size_t plane = t * f;

  grad_global = Tensor({c, t, f});
  grad_local = Tensor({c, t, f});

  // gz = dL/d(pre-sigmoid logit) at every position.
  Tensor gz({c, t, f});
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* g = grad_out.data() + cc * plane;
    const double* gp = cache.global.data() + cc * plane;
    const double* xp = cache.local.data() + cc * plane;
    const double* ap = cache.alpha.data() + cc * plane;
    double* zp = gz.data() + cc * plane;
    double* gg = grad_global.data() + cc * plane;
    double* gl = grad_local.data() + cc * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double a = ap[i];
      zp[i] = g[i] * (gp[i] - xp[i]) * a * (1.0 - a);
      gg[i] = g[i] * a;
      gl[i] = g[i] * (1.0 - a);
    }
  }

  // Local branch backward.
  Tensor gh({b, t, f});  // grad wrt post-ReLU bottleneck
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* zp = gz.data() + cc * plane;
    double acc_b2 = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc_b2 += zp[i];
    grads.local_branch.b2[cc] += acc_b2;
    for (std::size_t bb = 0; bb < b; ++bb) {
      const double* pre = cache.local_pre.data() + bb * plane;
      double* ghp = gh.data() + bb * plane;
      double wv = p.local_branch.w2.at2(cc, bb);
      double acc_w2 = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        acc_w2 += zp[i] * std::max(pre[i], 0.0);
        ghp[i] += wv * zp[i];
      }
      grads.local_branch.w2.at2(cc, bb) += acc_w2;
    }
  }
  Tensor gs({c, t, f});  // grad wrt S = G + X
  for (std::size_t bb = 0; bb < b; ++bb) {
    const double* pre = cache.local_pre.data() + bb * plane;
    double* ghp = gh.data() + bb * plane;
    for (std::size_t i = 0; i < plane; ++i)
      if (pre[i] <= 0.0) ghp[i] = 0.0;
    double acc_b1 = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc_b1 += ghp[i];
    grads.local_branch.b1[bb] += acc_b1;
    for (std::size_t cc = 0; cc < c; ++cc) {
      const double* sp = cache.sum.data() + cc * plane;
      double* gsp = gs.data() + cc * plane;
      double wv = p.local_branch.w1.at2(bb, cc);
      double acc_w1 = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        acc_w1 += ghp[i] * sp[i];
        gsp[i] += wv * ghp[i];
      }
      grads.local_branch.w1.at2(bb, cc) += acc_w1;
    }
  }

  // Global branch backward; its output is broadcast, so adjoints sum over
  // the plane first.
  std::vector<double> g_gout(c, 0.0);
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* zp = gz.data() + cc * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += zp[i];
    g_gout[cc] = acc;
  }
  std::vector<double> g_gh(b, 0.0);
  for (std::size_t cc = 0; cc < c; ++cc) {
    grads.global_branch.b2[cc] += g_gout[cc];
    for (std::size_t bb = 0; bb < b; ++bb) {
      grads.global_branch.w2.at2(cc, bb) +=
          g_gout[cc] * std::max(cache.global_pre[bb], 0.0);
      g_gh[bb] += p.global_branch.w2.at2(cc, bb) * g_gout[cc];
    }
  }
  std::vector<double> g_pooled(c, 0.0);
  for (std::size_t bb = 0; bb < b; ++bb) {
    if (cache.global_pre[bb] <= 0.0) g_gh[bb] = 0.0;
    grads.global_branch.b1[bb] += g_gh[bb];
    for (std::size_t cc = 0; cc < c; ++cc) {
      grads.global_branch.w1.at2(bb, cc) += g_gh[bb] * cache.pooled[cc];
      g_pooled[cc] += p.global_branch.w1.at2(bb, cc) * g_gh[bb];
    }
  }
  double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t cc = 0; cc < c; ++cc) {
    double add = g_pooled[cc] * inv_plane;
    double* gsp = gs.data() + cc * plane;
    for (std::size_t i = 0; i < plane; ++i) gsp[i] += add;
  }

  // S = G + X feeds both branches.
  for (std::size_t i = 0; i < gs.size(); ++i) {
    grad_global[i] += gs[i];
    grad_local[i] += gs[i];
  }
}

}  // namespace clapkit
