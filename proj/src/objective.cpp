#include "clapkit/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace clapkit {

namespace {

void check_batch(const std::vector<Embedding>& audio,
                 const std::vector<Embedding>& text) {
  require(!audio.empty(), "contrastive_loss: empty batch");
  require(audio.size() == text.size(),
          "contrastive_loss: audio/text counts differ");
  const std::size_t d = audio[0].values.size();
  for (const auto& e : audio) {
    require(e.values.size() == d, "contrastive_loss: ragged embeddings");
    for (double x : e.values)
      require(std::isfinite(x), "contrastive_loss: non-finite embedding");
  }
  for (const auto& e : text) {
    require(e.values.size() == d, "contrastive_loss: ragged embeddings");
    for (double x : e.values)
      require(std::isfinite(x), "contrastive_loss: non-finite embedding");
  }
}

/// log softmax value at index `pick` of a length-n strided slice.
double log_softmax_at(const double* base, std::size_t n, std::size_t stride,
                      std::size_t pick) {
  double mx = base[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, base[j * stride]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(base[j * stride] - mx);
  return base[pick * stride] - mx - std::log(z);
}

}  // namespace

ContrastiveResult contrastive_loss(const std::vector<Embedding>& audio,
                                   const std::vector<Embedding>& text,
                                   const Temperature& tau) {
  check_batch(audio, text);
  const std::size_t n = audio.size();
  const std::size_t d = audio[0].values.size();
  const double inv_tau = 1.0 / tau.tau();

  ContrastiveResult res;
  res.logits.n = n;
  res.logits.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = audio[i].values.data();
    for (std::size_t j = 0; j < n; ++j) {
      const double* t = text[j].values.data();
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += a[k] * t[k];
      res.logits.values[i * n + j] = dot * inv_tau;
    }
  }

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += log_softmax_at(&res.logits.values[i * n], n, 1, i);        // row i
    acc += log_softmax_at(&res.logits.values[i], n, n, i);            // column i
  }
  res.loss = -acc / (2.0 * static_cast<double>(n));
  return res;
}

ContrastiveGrads contrastive_backward(const BatchLogits& logits,
                                      const std::vector<Embedding>& audio,
                                      const std::vector<Embedding>& text,
                                      const Temperature& tau) {
  const std::size_t n = logits.n;
  require(n > 0 && audio.size() == n && text.size() == n,
          "contrastive_backward: shape mismatch");
  const std::size_t d = audio[0].values.size();
  const double inv_tau = 1.0 / tau.tau();

  // dL/dlogit[a][b] = -(1/2N) * (2*delta_ab - row_softmax[a][b]
  //                              - col_softmax[b] at row a)
  std::vector<double> dlogit(n * n, 0.0);
  std::vector<double> prob(n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));

  for (std::size_t a = 0; a < n; ++a) {  // row softmaxes
    const double* row = &logits.values[a * n];
    double mx = row[0];
    for (std::size_t b = 1; b < n; ++b) mx = std::max(mx, row[b]);
    double z = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      prob[b] = std::exp(row[b] - mx);
      z += prob[b];
    }
    for (std::size_t b = 0; b < n; ++b)
      dlogit[a * n + b] += scale * (prob[b] / z - (a == b ? 1.0 : 0.0));
  }
  for (std::size_t b = 0; b < n; ++b) {  // column softmaxes
    double mx = logits.values[b];
    for (std::size_t a = 1; a < n; ++a)
      mx = std::max(mx, logits.values[a * n + b]);
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      prob[a] = std::exp(logits.values[a * n + b] - mx);
      z += prob[a];
    }
    for (std::size_t a = 0; a < n; ++a)
      dlogit[a * n + b] += scale * (prob[a] / z - (a == b ? 1.0 : 0.0));
  }

  ContrastiveGrads g;
  g.grad_audio.assign(n, std::vector<double>(d, 0.0));
  g.grad_text.assign(n, std::vector<double>(d, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      double dl = dlogit[a * n + b] * inv_tau;
      const double* tv = text[b].values.data();
      const double* av = audio[a].values.data();
      double* ga = g.grad_audio[a].data();
      double* gt = g.grad_text[b].data();
      for (std::size_t k = 0; k < d; ++k) {
        ga[k] += dl * tv[k];
        gt[k] += dl * av[k];
      }
    }
  }
  // logit = dot/tau with tau = exp(log_tau):
  // d logit / d log_tau = -dot/tau = -logit
  double acc = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) acc += dlogit[i] * logits.values[i];
  g.grad_log_tau = -acc;
  return g;
}

}  // namespace clapkit
