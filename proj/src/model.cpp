#include "clapkit/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>

namespace clapkit {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> uniq;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) uniq.insert(w);
  std::vector<std::string> words = {"<pad>", "<unk>"};
  words.insert(words.end(), uniq.begin(), uniq.end());
  return from_words(std::move(words));
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  require(words.size() >= 2 && words[0] == "<pad>" && words[1] == "<unk>",
          "vocab: first two entries must be <pad> and <unk>");
  Vocab v;
  v.words = std::move(words);
  for (std::size_t i = 0; i < v.words.size(); ++i)
    v.index[v.words[i]] = static_cast<int>(i);
  return v;
}

int Vocab::lookup(const std::string& w) const {
  auto it = index.find(w);
  return it == index.end() ? unk_id() : it->second;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                          int max_len) {
  require(max_len >= 1, "tokenize: max_len must be at least 1");
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  for (const auto& w : split_words(text)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    ids.push_back(vocab.lookup(w));
  }
  ids.resize(static_cast<std::size_t>(max_len), vocab.pad_id());
  return ids;
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

Tensor conv2d_forward(const Tensor& in, const ConvLayer& l) {
  require(in.rank() == 3, "conv2d: input must be (C,T,F)");
  require(l.weight.rank() == 4 && l.weight.dim(1) == in.dim(0),
          "conv2d: weight/input channel mismatch");
  const std::size_t co = l.weight.dim(0), ci = l.weight.dim(1);
  const std::size_t kt = l.weight.dim(2), kf = l.weight.dim(3);
  const std::size_t t = in.dim(1), f = in.dim(2);
  const int st = l.stride_t, sf = l.stride_f, pt = l.pad_t, pf = l.pad_f;
  require(t + 2 * pt >= kt && f + 2 * pf >= kf, "conv2d: input smaller than kernel");
  const std::size_t ot = (t + 2 * pt - kt) / st + 1;
  const std::size_t of = (f + 2 * pf - kf) / sf + 1;

  Tensor out({co, ot, of});
  for (std::size_t o = 0; o < co; ++o) {
    double* base = out.data() + o * ot * of;
    std::fill(base, base + ot * of, l.bias[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      const double* ip = in.data() + c * t * f;
      for (std::size_t dt = 0; dt < kt; ++dt) {
        for (std::size_t df = 0; df < kf; ++df) {
          double wv = l.weight.at4(o, c, dt, df);
          // valid output ranges so the inner loops stay branch-free
          std::size_t t_lo = 0;
          while (t_lo < ot &&
                 static_cast<long>(t_lo) * st + static_cast<long>(dt) - pt < 0)
            ++t_lo;
          std::size_t t_hi = ot;
          while (t_hi > t_lo && (t_hi - 1) * st + dt - pt >= t) --t_hi;
          std::size_t f_lo = 0;
          while (f_lo < of &&
                 static_cast<long>(f_lo) * sf + static_cast<long>(df) - pf < 0)
            ++f_lo;
          std::size_t f_hi = of;
          while (f_hi > f_lo && (f_hi - 1) * sf + df - pf >= f) --f_hi;

          for (std::size_t tt = t_lo; tt < t_hi; ++tt) {
            const double* irow = ip + (tt * st + dt - pt) * f;
            double* orow = base + tt * of;
            if (sf == 1) {
              const double* ir = irow + (f_lo + df - pf);
              for (std::size_t ff = f_lo; ff < f_hi; ++ff)
                orow[ff] += wv * ir[ff - f_lo];
            } else {
              for (std::size_t ff = f_lo; ff < f_hi; ++ff)
                orow[ff] += wv * irow[ff * sf + df - pf];
            }
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& grad_out, const Tensor& in,
                     const ConvLayer& l, Tensor* grad_in, ConvLayer& grads) {
  const std::size_t co = l.weight.dim(0), ci = l.weight.dim(1);
  const std::size_t kt = l.weight.dim(2), kf = l.weight.dim(3);
  const std::size_t t = in.dim(1), f = in.dim(2);
  const int st = l.stride_t, sf = l.stride_f, pt = l.pad_t, pf = l.pad_f;
  const std::size_t ot = grad_out.dim(1), of = grad_out.dim(2);
  require(grad_out.dim(0) == co, "conv2d_backward: grad channel mismatch");

  if (grad_in) *grad_in = Tensor({ci, t, f});
  for (std::size_t o = 0; o < co; ++o) {
    const double* gbase = grad_out.data() + o * ot * of;
    double acc_bias = 0.0;
    for (std::size_t i = 0; i < ot * of; ++i) acc_bias += gbase[i];
    grads.bias[o] += acc_bias;

    for (std::size_t c = 0; c < ci; ++c) {
      const double* ip = in.data() + c * t * f;
      double* gip = grad_in ? grad_in->data() + c * t * f : nullptr;
      for (std::size_t dt = 0; dt < kt; ++dt) {
        for (std::size_t df = 0; df < kf; ++df) {
          double wv = l.weight.at4(o, c, dt, df);
          std::size_t t_lo = 0;
          while (t_lo < ot &&
                 static_cast<long>(t_lo) * st + static_cast<long>(dt) - pt < 0)
            ++t_lo;
          std::size_t t_hi = ot;
          while (t_hi > t_lo && (t_hi - 1) * st + dt - pt >= t) --t_hi;
          std::size_t f_lo = 0;
          while (f_lo < of &&
                 static_cast<long>(f_lo) * sf + static_cast<long>(df) - pf < 0)
            ++f_lo;
          std::size_t f_hi = of;
          while (f_hi > f_lo && (f_hi - 1) * sf + df - pf >= f) --f_hi;

          double acc_w = 0.0;
          for (std::size_t tt = t_lo; tt < t_hi; ++tt) {
            const double* irow = ip + (tt * st + dt - pt) * f;
            double* girow = gip ? gip + (tt * st + dt - pt) * f : nullptr;
            const double* grow = gbase + tt * of;
            if (sf == 1) {
              std::size_t off = df - pf + f_lo;
              for (std::size_t ff = f_lo; ff < f_hi; ++ff) {
                acc_w += grow[ff] * irow[off + ff - f_lo];
                if (girow) girow[off + ff - f_lo] += wv * grow[ff];
              }
            } else {
              for (std::size_t ff = f_lo; ff < f_hi; ++ff) {
                std::size_t fi = ff * sf + df - pf;
                acc_w += grow[ff] * irow[fi];
                if (girow) girow[fi] += wv * grow[ff];
              }
            }
          }
          grads.weight.at4(o, c, dt, df) += acc_w;
        }
      }
    }
  }
}

Tensor avg_pool2(const Tensor& in) {
  require(in.rank() == 3, "avg_pool2: input must be (C,T,F)");
  const std::size_t c = in.dim(0), t = in.dim(1), f = in.dim(2);
  const std::size_t ot = t / 2, of = f / 2;
  require(ot >= 1 && of >= 1, "avg_pool2: input too small to pool");
  Tensor out({c, ot, of});
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* ip = in.data() + cc * t * f;
    double* op = out.data() + cc * ot * of;
    for (std::size_t tt = 0; tt < ot; ++tt) {
      const double* r0 = ip + (2 * tt) * f;
      const double* r1 = ip + (2 * tt + 1) * f;
      double* orow = op + tt * of;
      for (std::size_t ff = 0; ff < of; ++ff)
        orow[ff] = 0.25 * (r0[2 * ff] + r0[2 * ff + 1] + r1[2 * ff] + r1[2 * ff + 1]);
    }
  }
  return out;
}

Tensor avg_pool2_backward(const Tensor& grad_out,
                          const std::vector<std::size_t>& in_dims) {
  const std::size_t c = in_dims[0], t = in_dims[1], f = in_dims[2];
  const std::size_t ot = grad_out.dim(1), of = grad_out.dim(2);
  Tensor grad_in({c, t, f});
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* gp = grad_out.data() + cc * ot * of;
    double* gi = grad_in.data() + cc * t * f;
    for (std::size_t tt = 0; tt < ot; ++tt) {
      for (std::size_t ff = 0; ff < of; ++ff) {
        double v = 0.25 * gp[tt * of + ff];
        gi[(2 * tt) * f + 2 * ff] += v;
        gi[(2 * tt) * f + 2 * ff + 1] += v;
        gi[(2 * tt + 1) * f + 2 * ff] += v;
        gi[(2 * tt + 1) * f + 2 * ff + 1] += v;
      }
    }
  }
  return grad_in;
}

void relu_inplace(Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] < 0.0) t[i] = 0.0;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& pre) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (pre[i] <= 0.0) g[i] = 0.0;
  return g;
}

std::vector<double> global_mean_pool(const Tensor& in) {
  const std::size_t c = in.dim(0), plane = in.dim(1) * in.dim(2);
  std::vector<double> out(c, 0.0);
  double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t cc = 0; cc < c; ++cc) {
    const double* ip = in.data() + cc * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += ip[i];
    out[cc] = acc * inv;
  }
  return out;
}

Tensor global_mean_pool_backward(const std::vector<double>& grad,
                                 const std::vector<std::size_t>& in_dims) {
  const std::size_t c = in_dims[0], plane = in_dims[1] * in_dims[2];
  Tensor out({c, in_dims[1], in_dims[2]});
  double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t cc = 0; cc < c; ++cc) {
    double v = grad[cc] * inv;
    double* op = out.data() + cc * plane;
    for (std::size_t i = 0; i < plane; ++i) op[i] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace {

double unit_double(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void fill_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = (2.0 * unit_double(rng) - 1.0) * bound;
}

void init_conv(ConvLayer& l, std::mt19937_64& rng) {
  double fan_in = static_cast<double>(l.weight.dim(1) * l.weight.dim(2) *
                                      l.weight.dim(3));
  fill_uniform(l.weight, std::sqrt(6.0 / fan_in), rng);
  l.bias.fill(0.0);
}

void init_linear(Tensor& w, Tensor& b, std::mt19937_64& rng) {
  double fan_in = static_cast<double>(w.dim(1));
  fill_uniform(w, std::sqrt(6.0 / fan_in), rng);
  b.fill(0.0);
}

}  // namespace

double Temperature::tau() const {
  return std::clamp(std::exp(log_tau[0]), tau_min, tau_max);
}

void Temperature::clamp() {
  log_tau[0] = std::clamp(log_tau[0], std::log(tau_min), std::log(tau_max));
}

ModelParams init_model(const ModelConfig& mc, std::size_t vocab_size,
                       double tau_init, double tau_min, double tau_max,
                       std::uint64_t seed) {
  mc.validate();
  require(vocab_size >= 2, "init_model: vocab must hold <pad> and <unk>");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  ModelParams p;

  auto make_conv = [](std::size_t co, std::size_t ci, std::size_t k, int stride) {
    ConvLayer l;
    l.weight = Tensor({co, ci, k, k});
    l.bias = Tensor({co});
    l.stride_t = stride;
    l.stride_f = stride;
    l.pad_t = 1;
    l.pad_f = 1;
    return l;
  };

  p.audio.stem = make_conv(static_cast<std::size_t>(mc.stem_channels), 1, 3,
                           mc.stem_stride);
  init_conv(p.audio.stem, rng);
  std::size_t prev = static_cast<std::size_t>(mc.stem_channels);
  for (int c : mc.block_channels) {
    ConvLayer l = make_conv(static_cast<std::size_t>(c), prev, 3, 1);
    init_conv(l, rng);
    p.audio.blocks.push_back(std::move(l));
    prev = static_cast<std::size_t>(c);
  }

  const std::size_t stem_c = static_cast<std::size_t>(mc.stem_channels);
  p.merge.weight = Tensor({stem_c, stem_c, 3});
  p.merge.bias = Tensor({stem_c});
  fill_uniform(p.merge.weight, std::sqrt(6.0 / (3.0 * static_cast<double>(stem_c))),
               rng);

  const std::size_t bottleneck = std::max<std::size_t>(
      1, stem_c / static_cast<std::size_t>(mc.bottleneck_ratio));
  p.aff.bottleneck_ratio = mc.bottleneck_ratio;
  auto init_branch = [&](AffBranch& br) {
    br.w1 = Tensor({bottleneck, stem_c});
    br.b1 = Tensor({bottleneck});
    br.w2 = Tensor({stem_c, bottleneck});
    br.b2 = Tensor({stem_c});
    init_linear(br.w1, br.b1, rng);
    init_linear(br.w2, br.b2, rng);
  };
  init_branch(p.aff.local_branch);
  init_branch(p.aff.global_branch);

  const std::size_t e = static_cast<std::size_t>(mc.text_dim);
  p.text.token_embedding = Tensor({vocab_size, e});
  fill_uniform(p.text.token_embedding, 0.05, rng);
  p.text.position_embedding =
      Tensor({static_cast<std::size_t>(ModelConfig::kMaxTokens), e});
  fill_uniform(p.text.position_embedding, 0.01, rng);
  p.text.use_attention = mc.text_attention;
  if (mc.text_attention) {
    for (Tensor* w : {&p.text.wq, &p.text.wk, &p.text.wv, &p.text.wo}) {
      *w = Tensor({e, e});
      fill_uniform(*w, std::sqrt(6.0 / static_cast<double>(e)), rng);
    }
  }

  const std::size_t l_audio = static_cast<std::size_t>(mc.audio_out_dim());
  const std::size_t d = static_cast<std::size_t>(mc.embed_dim);
  auto init_proj = [&](ProjectionParams& proj, std::size_t in_dim) {
    proj.w1 = Tensor({d, in_dim});
    proj.b1 = Tensor({d});
    proj.w2 = Tensor({d, d});
    proj.b2 = Tensor({d});
    init_linear(proj.w1, proj.b1, rng);
    init_linear(proj.w2, proj.b2, rng);
  };
  init_proj(p.audio_proj, l_audio);
  init_proj(p.text_proj, e);

  p.temperature.tau_min = tau_min;
  p.temperature.tau_max = tau_max;
  p.temperature.log_tau[0] = std::log(tau_init);
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  auto refs = named_params(z);
  for (auto& r : refs) r.tensor->fill(0.0);
  return z;
}

std::vector<NamedTensorRef> named_params(ModelParams& p) {
  std::vector<NamedTensorRef> out;
  out.push_back({"audio.stem.weight", &p.audio.stem.weight});
  out.push_back({"audio.stem.bias", &p.audio.stem.bias});
  for (std::size_t i = 0; i < p.audio.blocks.size(); ++i) {
    std::string base = "audio.block" + std::to_string(i);
    out.push_back({base + ".weight", &p.audio.blocks[i].weight});
    out.push_back({base + ".bias", &p.audio.blocks[i].bias});
  }
  out.push_back({"fusion.merge.weight", &p.merge.weight});
  out.push_back({"fusion.merge.bias", &p.merge.bias});
  out.push_back({"fusion.aff.local.w1", &p.aff.local_branch.w1});
  out.push_back({"fusion.aff.local.b1", &p.aff.local_branch.b1});
  out.push_back({"fusion.aff.local.w2", &p.aff.local_branch.w2});
  out.push_back({"fusion.aff.local.b2", &p.aff.local_branch.b2});
  out.push_back({"fusion.aff.global.w1", &p.aff.global_branch.w1});
  out.push_back({"fusion.aff.global.b1", &p.aff.global_branch.b1});
  out.push_back({"fusion.aff.global.w2", &p.aff.global_branch.w2});
  out.push_back({"fusion.aff.global.b2", &p.aff.global_branch.b2});
  out.push_back({"text.token_embedding", &p.text.token_embedding});
  out.push_back({"text.position_embedding", &p.text.position_embedding});
  if (p.text.use_attention) {
    out.push_back({"text.attn.wq", &p.text.wq});
    out.push_back({"text.attn.wk", &p.text.wk});
    out.push_back({"text.attn.wv", &p.text.wv});
    out.push_back({"text.attn.wo", &p.text.wo});
  }
  out.push_back({"audio_proj.w1", &p.audio_proj.w1});
  out.push_back({"audio_proj.b1", &p.audio_proj.b1});
  out.push_back({"audio_proj.w2", &p.audio_proj.w2});
  out.push_back({"audio_proj.b2", &p.audio_proj.b2});
  out.push_back({"text_proj.w1", &p.text_proj.w1});
  out.push_back({"text_proj.b1", &p.text_proj.b1});
  out.push_back({"text_proj.w2", &p.text_proj.w2});
  out.push_back({"text_proj.b2", &p.text_proj.b2});
  out.push_back({"objective.log_tau", &p.temperature.log_tau});
  return out;
}

// ---------------------------------------------------------------------------
// Audio encoder
// ---------------------------------------------------------------------------

namespace {

Tensor mel_to_tensor(const MelSpectrogram& m) {
  Tensor t({1, m.t_frames, m.f_bins});
  std::copy(m.values.begin(), m.values.end(), t.data());
  return t;
}

std::size_t conv_macs(const ConvLayer& l, const Tensor& out) {
  return l.weight.size() * out.dim(1) * out.dim(2);
}

}  // namespace

std::vector<double> encode_audio(const FusionInput& x, const ModelParams& p,
                                 AudioEncodeCache* cache, EncodeStats* stats) {
  AudioEncodeCache local_cache;
  AudioEncodeCache& c = cache ? *cache : local_cache;
  c = AudioEncodeCache{};
  c.fused = x.is_fused;
  require(!x.is_fused || x.local_views.size() == 3,
          "encode_audio: fused input needs exactly 3 local views");

  c.view_in.push_back(mel_to_tensor(x.global_view));
  for (const auto& v : x.local_views) {
    require(v.f_bins == x.global_view.f_bins &&
                v.t_frames == x.global_view.t_frames,
            "encode_audio: view shapes differ");
    c.view_in.push_back(mel_to_tensor(v));
  }

  for (const auto& view : c.view_in) {
    Tensor pre = conv2d_forward(view, p.audio.stem);
    Tensor post = pre;
    relu_inplace(post);
    c.stem_pre.push_back(std::move(pre));
    c.stem_out.push_back(std::move(post));
    if (stats) ++stats->stem_calls;
  }

  Tensor chain;
  if (c.fused) {
    std::array<const Tensor*, 3> locals = {&c.stem_out[1], &c.stem_out[2],
                                           &c.stem_out[3]};
    Tensor merged = merge_locals_forward(locals, p.merge, c.merge);
    if (stats) ++stats->merge_calls;
    chain = aff_fuse_forward(c.stem_out[0], merged, p.aff, c.aff);
    if (stats) ++stats->aff_calls;
  } else {
    chain = c.stem_out[0];
  }

  for (std::size_t i = 0; i < p.audio.blocks.size(); ++i) {
    c.block_in.push_back(chain);
    Tensor pooled = avg_pool2(chain);
    Tensor pre = conv2d_forward(pooled, p.audio.blocks[i]);
    if (stats) {
      stats->block_input_shapes.push_back({pooled.dim(0), pooled.dim(1),
                                           pooled.dim(2)});
      stats->block_macs += conv_macs(p.audio.blocks[i], pre);
    }
    Tensor post = pre;
    relu_inplace(post);
    c.pooled.push_back(std::move(pooled));
    c.conv_pre.push_back(std::move(pre));
    c.conv_out.push_back(std::move(post));
    chain = c.conv_out.back();
  }
  c.final_dims = c.conv_out.back().dims();
  return global_mean_pool(c.conv_out.back());
}

void encode_audio_backward(const std::vector<double>& grad_features,
                           const AudioEncodeCache& cache, const ModelParams& p,
                           ModelParams& grads) {
  require(!cache.final_dims.empty(), "encode_audio_backward: cache not populated");
  Tensor g = global_mean_pool_backward(grad_features, cache.final_dims);

  for (std::size_t ri = p.audio.blocks.size(); ri-- > 0;) {
    Tensor g_pre = relu_backward(g, cache.conv_pre[ri]);
    Tensor g_pooled;
    conv2d_backward(g_pre, cache.pooled[ri], p.audio.blocks[ri], &g_pooled,
                    grads.audio.blocks[ri]);
    g = avg_pool2_backward(g_pooled, cache.block_in[ri].dims());
  }

  auto stem_backward = [&](const Tensor& grad_map, std::size_t view) {
    Tensor g_pre = relu_backward(grad_map, cache.stem_pre[view]);
    conv2d_backward(g_pre, cache.view_in[view], p.audio.stem, nullptr,
                    grads.audio.stem);
  };

  if (cache.fused) {
    Tensor g_global, g_merged;
    aff_backward(g, cache.aff, p.aff, g_global, g_merged, grads.aff);
    std::array<Tensor, 3> g_locals =
        merge_locals_backward(g_merged, cache.merge, p.merge, grads.merge);
    stem_backward(g_global, 0);
    for (std::size_t j = 0; j < 3; ++j) stem_backward(g_locals[j], j + 1);
  } else {
    stem_backward(g, 0);
  }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

std::vector<double> encode_text(const std::vector<int>& ids,
                                const TextEncoderParams& p,
                                TextEncodeCache* cache) {
  const std::size_t max_p = p.position_embedding.dim(0);
  require(ids.size() == max_p, "encode_text: token count must equal max positions");
  const std::size_t e = static_cast<std::size_t>(p.embed_dim());
  const int v_size = static_cast<int>(p.token_embedding.dim(0));

  TextEncodeCache local_cache;
  TextEncodeCache& c = cache ? *cache : local_cache;
  c = TextEncodeCache{};
  c.ids = ids;

  c.h = Tensor({max_p, e});
  for (std::size_t pos = 0; pos < max_p; ++pos) {
    int id = ids[pos];
    require(id >= 0 && id < v_size, "encode_text: token id out of range");
    if (id != 0) c.content_pos.push_back(static_cast<int>(pos));
    const double* emb = p.token_embedding.data() + static_cast<std::size_t>(id) * e;
    const double* pe = p.position_embedding.data() + pos * e;
    double* hp = c.h.data() + pos * e;
    for (std::size_t j = 0; j < e; ++j) hp[j] = emb[j] + pe[j];
  }

  const std::size_t k = c.content_pos.size();
  c.pooled.assign(e, 0.0);
  if (k == 0) return c.pooled;  // all-pad text pools to zero

  if (!p.use_attention) {
    for (int pos : c.content_pos) {
      const double* hp = c.h.data() + static_cast<std::size_t>(pos) * e;
      for (std::size_t j = 0; j < e; ++j) c.pooled[j] += hp[j];
    }
    for (std::size_t j = 0; j < e; ++j) c.pooled[j] /= static_cast<double>(k);
    return c.pooled;
  }

  // One self-attention block over the non-pad positions, residual output.
  auto matvec_rows = [&](const Tensor& w, Tensor& out) {
    out = Tensor({max_p, e});
    for (int pos : c.content_pos) {
      const double* hp = c.h.data() + static_cast<std::size_t>(pos) * e;
      double* op = out.data() + static_cast<std::size_t>(pos) * e;
      for (std::size_t r = 0; r < e; ++r) {
        const double* wr = w.data() + r * e;
        double acc = 0.0;
        for (std::size_t j = 0; j < e; ++j) acc += wr[j] * hp[j];
        op[r] = acc;
      }
    }
  };
  matvec_rows(p.wq, c.q);
  matvec_rows(p.wk, c.k);
  matvec_rows(p.wv, c.v);

  const double scale = 1.0 / std::sqrt(static_cast<double>(e));
  c.attn = Tensor({max_p, max_p});
  for (int pi : c.content_pos) {
    double mx = -1e300;
    std::vector<double> scores(k);
    for (std::size_t jj = 0; jj < k; ++jj) {
      int pj = c.content_pos[jj];
      const double* qp = c.q.data() + static_cast<std::size_t>(pi) * e;
      const double* kp = c.k.data() + static_cast<std::size_t>(pj) * e;
      double acc = 0.0;
      for (std::size_t j = 0; j < e; ++j) acc += qp[j] * kp[j];
      scores[jj] = acc * scale;
      mx = std::max(mx, scores[jj]);
    }
    double z = 0.0;
    for (std::size_t jj = 0; jj < k; ++jj) {
      scores[jj] = std::exp(scores[jj] - mx);
      z += scores[jj];
    }
    for (std::size_t jj = 0; jj < k; ++jj)
      c.attn.at2(static_cast<std::size_t>(pi),
                 static_cast<std::size_t>(c.content_pos[jj])) = scores[jj] / z;
  }

  c.ctx = Tensor({max_p, e});
  for (int pi : c.content_pos) {
    double* cp = c.ctx.data() + static_cast<std::size_t>(pi) * e;
    for (int pj : c.content_pos) {
      double a = c.attn.at2(static_cast<std::size_t>(pi),
                            static_cast<std::size_t>(pj));
      const double* vp = c.v.data() + static_cast<std::size_t>(pj) * e;
      for (std::size_t j = 0; j < e; ++j) cp[j] += a * vp[j];
    }
  }

  c.res = Tensor({max_p, e});
  for (int pi : c.content_pos) {
    const double* hp = c.h.data() + static_cast<std::size_t>(pi) * e;
    const double* cp = c.ctx.data() + static_cast<std::size_t>(pi) * e;
    double* rp = c.res.data() + static_cast<std::size_t>(pi) * e;
    for (std::size_t r = 0; r < e; ++r) {
      const double* wr = p.wo.data() + r * e;
      double acc = 0.0;
      for (std::size_t j = 0; j < e; ++j) acc += wr[j] * cp[j];
      rp[r] = hp[r] + acc;
    }
    for (std::size_t j = 0; j < e; ++j) c.pooled[j] += rp[j];
  }
  for (std::size_t j = 0; j < e; ++j) c.pooled[j] /= static_cast<double>(k);
  return c.pooled;
}

void encode_text_backward(const std::vector<double>& grad_pooled,
                          const TextEncodeCache& cache,
                          const TextEncoderParams& p, TextEncoderParams& grads) {
  require(!cache.ids.empty(), "encode_text_backward: cache not populated");
  const std::size_t e = static_cast<std::size_t>(p.embed_dim());
  const std::size_t k = cache.content_pos.size();
  if (k == 0) return;  // zero output had no dependence on parameters

  const double inv_k = 1.0 / static_cast<double>(k);
  const std::size_t max_p = p.position_embedding.dim(0);
  Tensor g_h({max_p, e});

  if (!p.use_attention) {
    for (int pos : cache.content_pos) {
      double* gh = g_h.data() + static_cast<std::size_t>(pos) * e;
      for (std::size_t j = 0; j < e; ++j) gh[j] = grad_pooled[j] * inv_k;
    }
  } else {
    const double scale = 1.0 / std::sqrt(static_cast<double>(e));
    Tensor g_ctx({max_p, e}), g_q({max_p, e}), g_k({max_p, e}), g_v({max_p, e});

    for (int pi : cache.content_pos) {
      // residual: res = h + Wo ctx; pooled = mean(res)
      const double* cp = cache.ctx.data() + static_cast<std::size_t>(pi) * e;
      double* gh = g_h.data() + static_cast<std::size_t>(pi) * e;
      double* gc = g_ctx.data() + static_cast<std::size_t>(pi) * e;
      for (std::size_t r = 0; r < e; ++r) {
        double gr = grad_pooled[r] * inv_k;
        gh[r] += gr;
        const double* wr = p.wo.data() + r * e;
        for (std::size_t j = 0; j < e; ++j) {
          grads.wo.at2(r, j) += gr * cp[j];
          gc[j] += wr[j] * gr;
        }
      }
    }

    for (int pi : cache.content_pos) {
      const double* gc = g_ctx.data() + static_cast<std::size_t>(pi) * e;
      // softmax rows
      std::vector<double> g_attn(k, 0.0);
      for (std::size_t jj = 0; jj < k; ++jj) {
        int pj = cache.content_pos[jj];
        const double* vp = cache.v.data() + static_cast<std::size_t>(pj) * e;
        double acc = 0.0;
        for (std::size_t j = 0; j < e; ++j) acc += gc[j] * vp[j];
        g_attn[jj] = acc;
        double a = cache.attn.at2(static_cast<std::size_t>(pi),
                                  static_cast<std::size_t>(pj));
        double* gv = g_v.data() + static_cast<std::size_t>(pj) * e;
        for (std::size_t j = 0; j < e; ++j) gv[j] += a * gc[j];
      }
      double dot = 0.0;
      for (std::size_t jj = 0; jj < k; ++jj)
        dot += cache.attn.at2(static_cast<std::size_t>(pi),
                              static_cast<std::size_t>(cache.content_pos[jj])) *
               g_attn[jj];
      for (std::size_t jj = 0; jj < k; ++jj) {
        int pj = cache.content_pos[jj];
        double a = cache.attn.at2(static_cast<std::size_t>(pi),
                                  static_cast<std::size_t>(pj));
        double gs = a * (g_attn[jj] - dot) * scale;
        const double* qp = cache.q.data() + static_cast<std::size_t>(pi) * e;
        const double* kp = cache.k.data() + static_cast<std::size_t>(pj) * e;
        double* gq = g_q.data() + static_cast<std::size_t>(pi) * e;
        double* gk = g_k.data() + static_cast<std::size_t>(pj) * e;
        for (std::size_t j = 0; j < e; ++j) {
          gq[j] += gs * kp[j];
          gk[j] += gs * qp[j];
        }
      }
    }

    auto proj_backward = [&](const Tensor& g_out, const Tensor& w, Tensor& gw) {
      for (int pos : cache.content_pos) {
        const double* go = g_out.data() + static_cast<std::size_t>(pos) * e;
        const double* hp = cache.h.data() + static_cast<std::size_t>(pos) * e;
        double* gh = g_h.data() + static_cast<std::size_t>(pos) * e;
        for (std::size_t r = 0; r < e; ++r) {
          const double* wr = w.data() + r * e;
          for (std::size_t j = 0; j < e; ++j) {
            gw.at2(r, j) += go[r] * hp[j];
            gh[j] += wr[j] * go[r];
          }
        }
      }
    };
    proj_backward(g_q, p.wq, grads.wq);
    proj_backward(g_k, p.wk, grads.wk);
    proj_backward(g_v, p.wv, grads.wv);
  }

  for (int pos : cache.content_pos) {
    const double* gh = g_h.data() + static_cast<std::size_t>(pos) * e;
    int id = cache.ids[static_cast<std::size_t>(pos)];
    double* ge = grads.token_embedding.data() + static_cast<std::size_t>(id) * e;
    double* gp = grads.position_embedding.data() + static_cast<std::size_t>(pos) * e;
    for (std::size_t j = 0; j < e; ++j) {
      ge[j] += gh[j];
      gp[j] += gh[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Projection and normalization
// ---------------------------------------------------------------------------

std::vector<double> project(const std::vector<double>& v,
                            const ProjectionParams& p, ProjectionCache* cache) {
  require(v.size() == p.w1.dim(1), "project: input length mismatch");
  const std::size_t h = p.w1.dim(0), d = p.w2.dim(0);

  ProjectionCache local_cache;
  ProjectionCache& c = cache ? *cache : local_cache;
  c.in = v;
  c.pre1.assign(h, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    const double* wr = p.w1.data() + r * v.size();
    double acc = p.b1[r];
    for (std::size_t j = 0; j < v.size(); ++j) acc += wr[j] * v[j];
    c.pre1[r] = acc;
  }
  c.hidden = c.pre1;
  for (double& x : c.hidden) x = std::max(x, 0.0);

  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double* wr = p.w2.data() + r * h;
    double acc = p.b2[r];
    for (std::size_t j = 0; j < h; ++j) acc += wr[j] * c.hidden[j];
    out[r] = acc;
  }
  return out;
}

std::vector<double> project_backward(const std::vector<double>& grad_out,
                                     const ProjectionCache& cache,
                                     const ProjectionParams& p,
                                     ProjectionParams& grads) {
  const std::size_t h = p.w1.dim(0), d = p.w2.dim(0), in_dim = p.w1.dim(1);
  require(grad_out.size() == d, "project_backward: grad length mismatch");
  require(cache.in.size() == in_dim, "project_backward: stale cache");

  std::vector<double> g_hidden(h, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    grads.b2[r] += grad_out[r];
    const double* wr = p.w2.data() + r * h;
    double* gw = grads.w2.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) {
      gw[j] += grad_out[r] * cache.hidden[j];
      g_hidden[j] += wr[j] * grad_out[r];
    }
  }
  std::vector<double> g_in(in_dim, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    double g = cache.pre1[r] > 0.0 ? g_hidden[r] : 0.0;
    grads.b1[r] += g;
    const double* wr = p.w1.data() + r * in_dim;
    double* gw = grads.w1.data() + r * in_dim;
    for (std::size_t j = 0; j < in_dim; ++j) {
      gw[j] += g * cache.in[j];
      g_in[j] += wr[j] * g;
    }
  }
  return g_in;
}

namespace {
constexpr double kNormEps = 1e-12;
}

Embedding normalize(const Embedding& e) {
  Embedding out = e;
  double norm = 0.0;
  for (double x : e.values) norm += x * x;
  norm = std::sqrt(norm);
  out.eps_floored = norm < kNormEps;
  double inv = 1.0 / std::max(norm, kNormEps);
  for (double& x : out.values) x *= inv;
  return out;
}

std::vector<double> normalize_backward(const std::vector<double>& grad_out,
                                       const std::vector<double>& pre) {
  double norm = 0.0;
  for (double x : pre) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<double> g(pre.size(), 0.0);
  if (norm < kNormEps) {
    for (std::size_t i = 0; i < pre.size(); ++i) g[i] = grad_out[i] / kNormEps;
    return g;
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < pre.size(); ++i)
    dot += pre[i] * grad_out[i];
  dot /= norm * norm;
  for (std::size_t i = 0; i < pre.size(); ++i)
    g[i] = (grad_out[i] - pre[i] * dot) / norm;
  return g;
}

}  // namespace clapkit
