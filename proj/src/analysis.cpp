#include "nope/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nope {

SimMatrix SimMatrix::zeros(int n) {
  SimMatrix m;
  m.n = n;
  m.values.assign(static_cast<std::size_t>(n) * n, 0.0);
  return m;
}

SimMatrix cosine_sim_matrix(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("cosine_sim_matrix expects [n x d], got " + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (float v : x.row(i)) s += static_cast<double>(v) * v;
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  SimMatrix c = SimMatrix::zeros(n);
  for (int i = 0; i < n; ++i) {
    const double ni = norms[static_cast<std::size_t>(i)];
    for (int j = i; j < n; ++j) {
      const double nj = norms[static_cast<std::size_t>(j)];
      double v = 0.0;
      if (ni > 0.0 && nj > 0.0) {
        if (i == j) {
          v = 1.0;
        } else {
          auto a = x.row(i);
          auto b = x.row(j);
          double dot = 0.0;
          for (int k = 0; k < d; ++k) dot += static_cast<double>(a[k]) * b[k];
          v = std::clamp(dot / (ni * nj), -1.0, 1.0);
        }
      }
      c.at(i, j) = v;
      c.at(j, i) = v;
    }
  }
  return c;
}

std::optional<double> ordered_pair_fraction(std::span<const double> values, Order order) {
  const std::size_t m = values.size();
  if (m < 2) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const bool ok = order == Order::kIncreasing ? values[i] < values[j] : values[i] > values[j];
      hits += ok ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (static_cast<double>(m) * (m - 1) / 2.0);
}

AdjScore adjacency_score(const SimMatrix& c, bool include_diagonal, Order order) {
  if (c.n < 2) throw std::invalid_argument("adjacency_score needs at least a 2x2 matrix");
  AdjScore out;
  double total = 0.0;
  int present = 0;
  for (int k = 0; k < c.n; ++k) {
    const int m = include_diagonal ? k + 1 : k;
    auto r = ordered_pair_fraction(c.row(k).first(static_cast<std::size_t>(m)), order);
    out.row_scores.push_back(r);
    if (r) {
      total += *r;
      ++present;
    }
  }
  out.matrix_score = present ? total / present : 0.0;
  return out;
}

std::vector<double> variance_sequence(const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) < 2) throw DimensionError("variance_sequence expects [n x d] with d >= 2, got " + shape_str(x.shape()));
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(x.dim(0)));
  for (int i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (float v : r) mean += v;
    mean /= static_cast<double>(r.size());
    double var = 0.0;
    for (float v : r) var += (v - mean) * (v - mean);
    out.push_back(var / static_cast<double>(r.size()));
  }
  return out;
}

AdjScore variance_adjacency_score(std::span<const double> v, Order direction, bool include_diagonal) {
  const int n = static_cast<int>(v.size());
  if (n < 2) throw std::invalid_argument("variance_adjacency_score needs at least 2 positions");
  SimMatrix m = SimMatrix::zeros(n);
  for (int i = 0; i < n; ++i) std::copy(v.begin(), v.end(), m.values.begin() + static_cast<std::ptrdiff_t>(i) * n);
  return adjacency_score(m, include_diagonal, direction);
}

ScoreDistribution summarize_scores(std::vector<double> scores) {
  ScoreDistribution d;
  d.histogram.assign(kHistogramBins, 0);
  if (!scores.empty()) {
    // Shifted by the first score so identical scores give exactly zero spread.
    const double k = scores.front();
    const double n = static_cast<double>(scores.size());
    double shift = 0.0;
    for (double s : scores) shift += s - k;
    shift /= n;
    double ss = 0.0;
    for (double s : scores) ss += (s - k - shift) * (s - k - shift);
    d.mean = k + shift;
    d.std = std::sqrt(ss / n);
    for (double s : scores) {
      int bin = static_cast<int>(std::floor(s * kHistogramBins));
      d.histogram[static_cast<std::size_t>(std::clamp(bin, 0, kHistogramBins - 1))]++;
    }
  }
  d.scores = std::move(scores);
  return d;
}

LayerScores layer_scores(const LayerActivations& acts, const ScoreOptions& opts) {
  LayerScores out;
  for (const Tensor& x : acts.per_layer) {
    out.cosine.push_back(adjacency_score(cosine_sim_matrix(x), opts.include_diagonal).matrix_score);
    const auto var = variance_sequence(x);
    out.variance.push_back(variance_adjacency_score(var, opts.variance_direction, opts.include_diagonal).matrix_score);
  }
  return out;
}

LayerScores layer_scores(const ModelParams& params, std::span<const int> tokens, const ScoreOptions& opts) {
  return layer_scores(forward(params, tokens).acts, opts);
}

LayerScoreSummary score_inputs(const ModelParams& params, const std::vector<std::vector<int>>& inputs,
                               const ScoreOptions& opts) {
  const std::size_t L = static_cast<std::size_t>(params.config.n_layers) + 1;
  std::vector<std::vector<double>> cos(L), var(L);
  for (const auto& tokens : inputs) {
    const LayerScores s = layer_scores(params, tokens, opts);
    for (std::size_t l = 0; l < L; ++l) {
      cos[l].push_back(s.cosine[l]);
      var[l].push_back(s.variance[l]);
    }
  }
  LayerScoreSummary out;
  for (std::size_t l = 0; l < L; ++l) {
    out.cosine.push_back(summarize_scores(std::move(cos[l])));
    out.variance.push_back(summarize_scores(std::move(var[l])));
  }
  return out;
}

ScoreDistribution score_distribution(const ModelParams& params, const std::vector<std::vector<int>>& inputs, int layer,
                                     int n_samples, const ScoreOptions& opts) {
  if (layer < 0 || layer > params.config.n_layers) {
    throw std::invalid_argument("layer " + std::to_string(layer) + " outside [0, " +
                                std::to_string(params.config.n_layers) + "]");
  }
  const std::size_t n = std::min(inputs.size(), static_cast<std::size_t>(std::max(0, n_samples)));
  std::vector<double> scores;
  scores.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto acts = forward(params, inputs[i]).acts;
    scores.push_back(
        adjacency_score(cosine_sim_matrix(acts.per_layer[static_cast<std::size_t>(layer)]), opts.include_diagonal)
            .matrix_score);
  }
  return summarize_scores(std::move(scores));
}

SimMatrix synthetic_banded_matrix(int n, double noise_weight, std::mt19937_64& rng) {
  if (n < 2) throw std::invalid_argument("synthetic matrix needs n >= 2");
  if (noise_weight < 0.0 || noise_weight > 1.0) throw std::invalid_argument("noise_weight must be in [0, 1]");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SimMatrix m = SimMatrix::zeros(n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const double band = 1.0 - static_cast<double>(std::abs(i - j)) / n;
      const double noise = noise_weight > 0.0 ? u(rng) : 0.0;
      const double v = (1.0 - noise_weight) * band + noise_weight * noise;
      m.at(i, j) = v;
      m.at(j, i) = v;
    }
  }
  return m;
}

}  // namespace nope
