#include "clapkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "clapkit/fusion.hpp"
#include "clapkit/threading.hpp"

namespace clapkit {

std::vector<std::size_t> rank_ties(const double* row, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row[a] > row[b];  // stable keeps ascending index on ties
  });
  return order;
}

namespace {

void check_gt(const SimilarityMatrix& sim, const RetrievalGroundTruth& gt) {
  require(!gt.caption_to_audio.empty() && !gt.audio_to_captions.empty(),
          "retrieval metrics: empty ground truth");
  require(sim.rows > 0 && sim.cols > 0, "retrieval metrics: empty similarity");
}

}  // namespace

RetrievalMetrics text_to_audio_metrics(const SimilarityMatrix& sim,
                                       const RetrievalGroundTruth& gt) {
  check_gt(sim, gt);
  require(sim.rows == gt.caption_to_audio.size(),
          "text_to_audio_metrics: one row per caption required");

  RetrievalMetrics m;
  for (std::size_t q = 0; q < sim.rows; ++q) {
    std::size_t truth = gt.caption_to_audio[q];
    require(truth < sim.cols, "text_to_audio_metrics: ground truth out of range");
    auto order = rank_ties(&sim.values[q * sim.cols], sim.cols);
    std::size_t rank = 0;  // 1-based rank of the true audio
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (order[r] == truth) {
        rank = r + 1;
        break;
      }
    }
    if (rank <= 1) m.r1 += 1.0;
    if (rank <= 5) m.r5 += 1.0;
    if (rank <= 10) m.r10 += 1.0;
    if (rank <= 10) m.map10 += 1.0 / static_cast<double>(rank);
  }
  double inv = 1.0 / static_cast<double>(sim.rows);
  m.r1 *= inv;
  m.r5 *= inv;
  m.r10 *= inv;
  m.map10 *= inv;
  return m;
}

RetrievalMetrics audio_to_text_metrics(const SimilarityMatrix& sim,
                                       const RetrievalGroundTruth& gt) {
  check_gt(sim, gt);
  require(sim.rows == gt.audio_to_captions.size(),
          "audio_to_text_metrics: one row per audio required");

  RetrievalMetrics m;
  for (std::size_t q = 0; q < sim.rows; ++q) {
    const auto& truths = gt.audio_to_captions[q];
    require(!truths.empty(), "audio_to_text_metrics: audio with no captions");
    auto order = rank_ties(&sim.values[q * sim.cols], sim.cols);
    std::vector<char> relevant(sim.cols, 0);
    for (std::size_t t : truths) {
      require(t < sim.cols, "audio_to_text_metrics: ground truth out of range");
      relevant[t] = 1;
    }

    // Recall uses the best-ranked ground truth.
    std::size_t best_rank = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (relevant[order[r]]) {
        best_rank = r + 1;
        break;
      }
    }
    if (best_rank <= 1) m.r1 += 1.0;
    if (best_rank <= 5) m.r5 += 1.0;
    if (best_rank <= 10) m.r10 += 1.0;

    // mAP@10 = (1/R) sum_{r<=10} P(r) * rel(r); R capped at rank 10.
    double cap_r = static_cast<double>(std::min<std::size_t>(truths.size(), 10));
    double hits = 0.0, ap = 0.0;
    std::size_t top = std::min<std::size_t>(10, order.size());
    for (std::size_t r = 0; r < top; ++r) {
      if (relevant[order[r]]) {
        hits += 1.0;
        ap += hits / static_cast<double>(r + 1);
      }
    }
    m.map10 += ap / cap_r;
  }
  double inv = 1.0 / static_cast<double>(sim.rows);
  m.r1 *= inv;
  m.r5 *= inv;
  m.r10 *= inv;
  m.map10 *= inv;
  return m;
}

// ---------------------------------------------------------------------------
// Embedding pipeline
// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<Embedding> embed_audio_manifest(const Manifest& m,
                                            const ModelParams& params,
                                            const Config& cfg,
                                            std::uint64_t eval_seed) {
  std::vector<Embedding> out(m.records.size());
  parallel_for(m.records.size(), [&](std::size_t i) {
    const PairRecord& rec = m.records[i];
    Waveform w = load_audio(rec.audio_path, cfg.dsp);
    std::mt19937_64 rng(splitmix64(eval_seed ^ splitmix64(i + 1)));
    FusionInput in =
        cfg.fusion.enabled
            ? prepare_input(w, cfg.dsp, cfg.fusion.chunk_seconds, rng)
            : truncate_input(w, cfg.dsp, cfg.fusion.chunk_seconds, false, rng);
    std::vector<double> feats = encode_audio(in, params);
    Embedding e{project(feats, params.audio_proj), "audio", rec.id, false};
    out[i] = normalize(e);
  });
  return out;
}

Embedding embed_text(const std::string& text, const ModelParams& params,
                     const Vocab& vocab) {
  std::vector<int> ids = tokenize(text, vocab);
  std::vector<double> feats = encode_text(ids, params.text);
  Embedding e{project(feats, params.text_proj), "text", text, false};
  return normalize(e);
}

SimilarityMatrix cosine_matrix(const std::vector<Embedding>& queries,
                               const std::vector<Embedding>& gallery) {
  SimilarityMatrix sim;
  sim.rows = queries.size();
  sim.cols = gallery.size();
  sim.values.assign(sim.rows * sim.cols, 0.0);
  for (std::size_t i = 0; i < sim.rows; ++i) {
    const auto& q = queries[i].values;
    for (std::size_t j = 0; j < sim.cols; ++j) {
      const auto& g = gallery[j].values;
      require(q.size() == g.size(), "cosine_matrix: dimension mismatch");
      double dot = 0.0;
      for (std::size_t k = 0; k < q.size(); ++k) dot += q[k] * g[k];
      sim.values[i * sim.cols + j] = dot;
    }
  }
  return sim;
}

RetrievalGroundTruth ground_truth_from_manifest(const Manifest& m) {
  RetrievalGroundTruth gt;
  gt.audio_to_captions.resize(m.records.size());
  for (std::size_t a = 0; a < m.records.size(); ++a) {
    for (std::size_t c = 0; c < effective_captions(m.records[a]).size(); ++c) {
      gt.audio_to_captions[a].push_back(gt.caption_to_audio.size());
      gt.caption_to_audio.push_back(a);
    }
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

std::string expand_template(const std::string& templ, const std::string& label) {
  const std::string slot = "{label}";
  std::size_t pos = templ.find(slot);
  require(pos != std::string::npos, "template must contain {label}");
  require(templ.find(slot, pos + 1) == std::string::npos,
          "template must contain {label} exactly once");
  std::string out = templ;
  out.replace(pos, slot.size(), label);
  return out;
}

ZeroShotResult zero_shot_classify(const std::vector<Embedding>& clip_embs,
                                  const ZeroShotTask& task,
                                  const ModelParams& params,
                                  const Vocab& vocab) {
  require(!task.class_names.empty(), "zero_shot: no classes");
  require(task.true_class.size() == clip_embs.size(),
          "zero_shot: per-clip labels required");

  std::vector<Embedding> prompts;
  for (const auto& name : task.class_names) {
    std::string prompt = expand_template(task.prompt_template, name);
    std::vector<int> ids = tokenize(prompt, vocab);
    bool non_empty = false;
    for (int id : ids)
      if (id != vocab.pad_id()) non_empty = true;
    require(non_empty, "zero_shot: prompt tokenizes to nothing for " + name);
    prompts.push_back(embed_text(prompt, params, vocab));
  }

  ZeroShotResult res;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clip_embs.size(); ++i) {
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t c = 0; c < prompts.size(); ++c) {
      double dot = 0.0;
      for (std::size_t k = 0; k < prompts[c].values.size(); ++k)
        dot += prompts[c].values[k] * clip_embs[i].values[k];
      if (dot > best_sim) {  // ties keep the lower class index
        best_sim = dot;
        best = c;
      }
    }
    res.predictions.push_back(static_cast<int>(best));
    if (static_cast<int>(best) == task.true_class[i]) ++correct;
  }
  res.accuracy = clip_embs.empty()
                     ? 0.0
                     : static_cast<double>(correct) /
                           static_cast<double>(clip_embs.size());
  return res;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

ProbeResult linear_probe(const std::vector<Embedding>& train_embs,
                         const std::vector<int>& train_labels,
                         const std::vector<Embedding>& eval_embs,
                         const std::vector<int>& eval_labels,
                         std::size_t n_classes, std::uint64_t seed) {
  require(n_classes >= 2, "linear_probe: need at least 2 classes");
  require(train_embs.size() == train_labels.size() && !train_embs.empty(),
          "linear_probe: bad training set");
  require(eval_embs.size() == eval_labels.size(),
          "linear_probe: bad evaluation set");
  std::vector<std::size_t> class_count(n_classes, 0);
  for (int l : train_labels) {
    require(l >= 0 && static_cast<std::size_t>(l) < n_classes,
            "linear_probe: label out of range");
    ++class_count[static_cast<std::size_t>(l)];
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    require(class_count[c] > 0,
            "linear_probe: class " + std::to_string(c) + " has no samples");

  const std::size_t d = train_embs[0].values.size();
  ProbeResult res;
  res.probe.w = Tensor({n_classes, d});
  res.probe.b = Tensor({n_classes});
  std::mt19937_64 rng(splitmix64(seed ^ 0x11bea7ULL));
  for (std::size_t i = 0; i < res.probe.w.size(); ++i)
    res.probe.w[i] =
        (static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0) * 0.01;

  // Full-batch Adam on softmax cross-entropy over the cached embeddings.
  const int steps = 300;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor mw({n_classes, d}), vw({n_classes, d}), mb({n_classes}), vb({n_classes});
  const double inv_n = 1.0 / static_cast<double>(train_embs.size());

  std::vector<double> logits(n_classes), prob(n_classes);
  Tensor gw({n_classes, d});
  Tensor gb({n_classes});
  for (int t = 1; t <= steps; ++t) {
    gw.fill(0.0);
    gb.fill(0.0);
    for (std::size_t i = 0; i < train_embs.size(); ++i) {
      const auto& x = train_embs[i].values;
      double mx = -1e300;
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double* wr = res.probe.w.data() + c * d;
        double acc = res.probe.b[c];
        for (std::size_t k = 0; k < d; ++k) acc += wr[k] * x[k];
        logits[c] = acc;
        mx = std::max(mx, acc);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < n_classes; ++c) {
        prob[c] = std::exp(logits[c] - mx);
        z += prob[c];
      }
      for (std::size_t c = 0; c < n_classes; ++c) {
        double g = (prob[c] / z -
                    (static_cast<int>(c) == train_labels[i] ? 1.0 : 0.0)) *
                   inv_n;
        gb[c] += g;
        double* gwr = gw.data() + c * d;
        for (std::size_t k = 0; k < d; ++k) gwr[k] += g * x[k];
      }
    }
    double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < gw.size(); ++i) {
      mw[i] = b1 * mw[i] + (1 - b1) * gw[i];
      vw[i] = b2 * vw[i] + (1 - b2) * gw[i] * gw[i];
      res.probe.w[i] -= lr * (mw[i] / bc1) / (std::sqrt(vw[i] / bc2) + eps);
    }
    for (std::size_t i = 0; i < gb.size(); ++i) {
      mb[i] = b1 * mb[i] + (1 - b1) * gb[i];
      vb[i] = b2 * vb[i] + (1 - b2) * gb[i] * gb[i];
      res.probe.b[i] -= lr * (mb[i] / bc1) / (std::sqrt(vb[i] / bc2) + eps);
    }
  }

  // Evaluation: top-1 accuracy plus macro mAP over classes (one-vs-rest).
  if (!eval_embs.empty()) {
    std::size_t correct = 0;
    SimilarityMatrix scores;
    scores.rows = n_classes;
    scores.cols = eval_embs.size();
    scores.values.assign(n_classes * eval_embs.size(), 0.0);
    for (std::size_t i = 0; i < eval_embs.size(); ++i) {
      const auto& x = eval_embs[i].values;
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double* wr = res.probe.w.data() + c * d;
        double acc = res.probe.b[c];
        for (std::size_t k = 0; k < d; ++k) acc += wr[k] * x[k];
        scores.at(c, i) = acc;
        if (acc > best_score) {
          best_score = acc;
          best = c;
        }
      }
      if (static_cast<int>(best) == eval_labels[i]) ++correct;
    }
    res.accuracy = static_cast<double>(correct) /
                   static_cast<double>(eval_embs.size());

    double map_sum = 0.0;
    std::size_t classes_seen = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      std::size_t positives = 0;
      for (int l : eval_labels)
        if (static_cast<std::size_t>(l) == c) ++positives;
      if (positives == 0) continue;
      auto order = rank_ties(&scores.values[c * scores.cols], scores.cols);
      double hits = 0.0, ap = 0.0;
      for (std::size_t r = 0; r < order.size(); ++r) {
        if (static_cast<std::size_t>(eval_labels[order[r]]) == c) {
          hits += 1.0;
          ap += hits / static_cast<double>(r + 1);
        }
      }
      map_sum += ap / static_cast<double>(positives);
      ++classes_seen;
    }
    res.map = classes_seen == 0 ? 0.0 : map_sum / static_cast<double>(classes_seen);
  }
  return res;
}

}  // namespace clapkit
