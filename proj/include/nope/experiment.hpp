#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nope/analysis.hpp"
#include "nope/kv_config.hpp"
#include "nope/model.hpp"
#include "nope/probing.hpp"
#include "nope/report.hpp"
#include "nope/simulation.hpp"
#include "nope/tasks.hpp"
#include "nope/training.hpp"

namespace nope {

struct ModelVariantSpec {
  std::string label;
  ModelConfig model;
};

/// Declarative run: every (task, model) pair is initialized per seed,
/// optionally trained, then analyzed. Probes and the coefficient simulation
/// are optional extra stages.
struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<TaskSpec> tasks{TaskSpec::desk(TaskKind::kReversal)};
  std::vector<ModelVariantSpec> models{{"causal_nope", ModelConfig{}}};
  bool train = false;
  TrainConfig train_config;
  int n_train = 5000;
  int n_test = 5000;

  bool analyze = true;
  int analysis_samples = 256;
  bool variance_scores = true;
  ScoreOptions score_options;
  bool heatmaps = true;

  bool probe = false;
  ProbeConfig probe_config;
  std::vector<ProbeFeature> probe_features{ProbeFeature::kEmbedding, ProbeFeature::kVariance, ProbeFeature::kCosToLast};

  std::optional<SimulationSpec> simulation;

  std::filesystem::path out_dir = "out";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  /// Throws std::invalid_argument unless at least one stage is requested,
  /// seeds are nonempty and every nested config is valid.
  void validate() const;

  KeyValues to_map() const;
  /// Keys: name, tasks (comma list), scale (desk|full), models (comma list of
  /// labels, each configured by `<label>.<model key>`), train, n_train,
  /// n_test, analysis_samples, variance_scores, include_diagonal, heatmaps,
  /// probe, probe_features, simulate, seeds, plus TrainConfig keys.
  static ExperimentSpec from_map(const KeyValues& kv, ExperimentSpec base);
};

/// FNV-1a over the canonical key=value text of the spec.
std::uint64_t config_hash(const ExperimentSpec& spec);

struct ExperimentResult {
  ResultsTable cosine;
  ResultsTable variance;
  std::vector<ProbeResult> probes;  // first seed only
  std::optional<GapHistograms> simulation;
  std::filesystem::path dir;
};

/// Runs every stage and writes tables, heatmaps, histograms, checkpoints and
/// manifest.txt under spec.out_dir. A failing stage leaves a manifest that
/// names it and rethrows as std::runtime_error.
ExperimentResult run_experiment(const ExperimentSpec& spec);

enum class Scale { kDesk, kFull };
Scale parse_scale(const std::string& s);

/// Presets for `reproduce`: table1..table6, figure1..figure6, figure8..figure12.
ExperimentSpec reproduction_preset(const std::string& target, Scale scale);
std::vector<std::string> reproduction_targets();

}  // namespace nope
