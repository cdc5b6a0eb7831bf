#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "nope/model.hpp"
#include "nope/tensor.hpp"

namespace nope {

/// Square matrix of pairwise cosine similarities, values[i*n + j].
struct SimMatrix {
  int n = 0;
  std::vector<double> values;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * n + j]; }
  std::span<const double> row(int i) const { return {values.data() + static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n)}; }

  static SimMatrix zeros(int n);
};

/// Row-wise adjacency probability scores and their mean. Rows with fewer
/// than two comparable columns carry no score.
struct AdjScore {
  double matrix_score = 0.0;
  std::vector<std::optional<double>> row_scores;
};

enum class Order {
  kIncreasing,  // counts i<j with x_i < x_j
  kDecreasing,  // counts i<j with x_i > x_j
};

/// Cosine similarity between every pair of rows of X [n x d]. A zero row has
/// similarity 0 with everything, itself included.
SimMatrix cosine_sim_matrix(const Tensor& x);

/// Fraction of strictly ordered pairs among `values`, over all i<j.
/// Returns nullopt when fewer than two values are given.
std::optional<double> ordered_pair_fraction(std::span<const double> values, Order order);

/// For each row k, the columns up to the diagonal (inclusive unless
/// include_diagonal is false) are scored by the fraction of pairs i<j with
/// C[k][i] < C[k][j]; ties count as unordered. Throws for n < 2.
AdjScore adjacency_score(const SimMatrix& c, bool include_diagonal = true, Order order = Order::kIncreasing);

/// Population variance across the coordinates of each row of X [n x d].
std::vector<double> variance_sequence(const Tensor& x);

/// Adjacency score of a sequence repeated into every row of a square
/// matrix. The default orientation rewards a sequence that decreases with
/// position.
AdjScore variance_adjacency_score(std::span<const double> v, Order direction = Order::kDecreasing,
                                  bool include_diagonal = true);

struct ScoreDistribution {
  double mean = 0.0;
  double std = 0.0;              // population standard deviation
  std::vector<int> histogram;    // 20 uniform bins on [0, 1]
  std::vector<double> scores;
};

inline constexpr int kHistogramBins = 20;
ScoreDistribution summarize_scores(std::vector<double> scores);

struct ScoreOptions {
  bool include_diagonal = true;
  Order variance_direction = Order::kDecreasing;
};

/// Cosine and variance adjacency scores at every layer (0..n_layers) for one
/// input sequence.
struct LayerScores {
  std::vector<double> cosine;
  std::vector<double> variance;
};

LayerScores layer_scores(const LayerActivations& acts, const ScoreOptions& opts = {});
LayerScores layer_scores(const ModelParams& params, std::span<const int> tokens, const ScoreOptions& opts = {});

/// Per-layer means over a set of inputs.
struct LayerScoreSummary {
  std::vector<ScoreDistribution> cosine;    // one per layer
  std::vector<ScoreDistribution> variance;  // one per layer
};

LayerScoreSummary score_inputs(const ModelParams& params, const std::vector<std::vector<int>>& inputs,
                               const ScoreOptions& opts = {});

/// Distribution of layer-`layer` cosine adjacency scores over the first
/// n_samples inputs.
ScoreDistribution score_distribution(const ModelParams& params, const std::vector<std::vector<int>>& inputs, int layer,
                                     int n_samples = 256, const ScoreOptions& opts = {});

/// Test matrix mixing a perfect band C[i][j] = 1 - |i-j|/n with symmetric
/// i.i.d. uniform[-1,1] noise: (1 - noise_weight) * band + noise_weight * noise.
SimMatrix synthetic_banded_matrix(int n, double noise_weight, std::mt19937_64& rng);

}  // namespace nope
