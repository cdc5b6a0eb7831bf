#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nope/autodiff.hpp"
#include "nope/model.hpp"
#include "nope/tasks.hpp"

namespace nope {

enum class ProbeFeature {
  kEmbedding,  // the d-dim residual vector
  kVariance,   // its coordinate variance
  kCosToLast,  // cosine similarity to the vector at the last position
};

std::string to_string(ProbeFeature f);
ProbeFeature parse_probe_feature(const std::string& s);

struct ProbeConfig {
  ProbeFeature feature = ProbeFeature::kCosToLast;
  int layer = 1;
  int seq_len = 32;
  int n_train = 1600;
  int n_test = 1600;
  int hidden_dim = 64;
  std::uint64_t seed = 0;
  float lr = 1e-3f;
  int batch_size = 512;
  int max_epochs = 2000;
  int patience = 20;                // epochs without relative improvement before stopping
  double min_improvement = 1e-2;    // relative validation-loss improvement that resets patience
  double val_fraction = 0.1;        // tail of the training rows held out for early stopping

  void validate() const;
};

/// Feature matrix [rows x features] with the position target of every row.
struct ProbeData {
  Tensor x;
  std::vector<float> y;
};

/// Residual-stream activations of a batch of equal-length sequences,
/// computed in chunks of `chunk` sequences. Identical to running forward()
/// on each sequence.
std::vector<LayerActivations> collect_activations(const ModelParams& params,
                                                  const std::vector<std::vector<int>>& sequences, int chunk = 64);

ProbeData extract_probe_features(const std::vector<LayerActivations>& acts, int layer, ProbeFeature feature);
ProbeData extract_probe_features(const ModelParams& params, const std::vector<std::vector<int>>& sequences, int layer,
                                 ProbeFeature feature);

/// 4 affine layers with ReLU between them, scalar output. Inputs are
/// standardized with the training-set mean and standard deviation.
struct Probe {
  std::vector<Parameter> weights;  // 4 matrices
  std::vector<Parameter> biases;   // 4 vectors
  std::vector<float> feature_mean;
  std::vector<float> feature_std;
  int epochs_run = 0;
  double final_train_mse = 0.0;  // training MSE of the epoch whose weights were kept
  double best_val_mse = 0.0;     // 0 when no rows were held out

  std::vector<float> predict(const Tensor& x) const;
};

/// Holds out the last `val_fraction` of the rows (whole sequences when the
/// row count is a multiple of seq_len), stops when validation MSE stalls and
/// keeps the best weights. Throws std::runtime_error if the loss becomes
/// non-finite.
Probe train_probe(const ProbeData& train, const ProbeConfig& cfg);

struct ProbeReport {
  double pearson_r = 0.0;
  bool r_undefined = false;  // predictions had zero variance; pearson_r reported as 0
  double nrmse = 0.0;        // RMSE / seq_len
  double rmse = 0.0;
  int seq_len = 0;
  std::vector<std::vector<float>> predictions_by_position;
};

ProbeReport evaluate_predictions(const std::vector<float>& predictions, const std::vector<float>& targets, int seq_len);
ProbeReport evaluate_probe(const Probe& probe, const ProbeData& test, int seq_len);

struct ProbeSequences {
  std::vector<std::vector<int>> train;  // digits 5..9
  std::vector<std::vector<int>> test;   // digits 0..4
};

/// Uniform random digit strings with disjoint alphabets for the two splits.
ProbeSequences build_probe_sequences(int seq_len, int n_train, int n_test, std::uint64_t seed,
                                     const Vocab& vocab = default_vocab());

struct ProbeResult {
  int layer = 0;
  ProbeFeature feature = ProbeFeature::kEmbedding;
  ProbeReport report;
  int epochs = 0;
};

/// Trains and evaluates one probe per (layer, feature) on shared activations.
std::vector<ProbeResult> run_probes(const ModelParams& params, const std::vector<int>& layers,
                                    const std::vector<ProbeFeature>& features, const ProbeConfig& base);

void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path);
void write_probe_residuals_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path);

}  // namespace nope
