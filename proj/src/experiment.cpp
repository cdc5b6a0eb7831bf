#include "nope/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace nope {

namespace {

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, sep) : "") + parts[i];
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string task_label(const TaskSpec& t) {
  std::string name = to_string(t.kind);
  name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
  return name + " (" + std::to_string(t.max_prompt_len()) + ")";
}

int required_seq_len(const TaskSpec& t) { return t.max_prompt_len() + t.max_answer_len() + 1; }

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw std::invalid_argument("experiment needs at least one seed");
  if (!analyze && !train && !probe && !simulation) throw std::invalid_argument("experiment requests no stage");
  const bool needs_models = analyze || train || probe;
  if (needs_models) {
    if (tasks.empty()) throw std::invalid_argument("experiment needs at least one task");
    if (models.empty()) throw std::invalid_argument("experiment needs at least one model");
  }
  for (const auto& t : tasks) t.validate();
  for (const auto& m : models) {
    if (m.label.empty() || m.label.find_first_of(",=. ") != std::string::npos) {
      throw std::invalid_argument("model label '" + m.label + "' must be nonempty without ',', '=', '.' or spaces");
    }
    m.model.validate();
    for (const auto& t : tasks) {
      if (m.model.max_seq_len < required_seq_len(t)) {
        throw std::invalid_argument("model '" + m.label + "' max_seq_len " + std::to_string(m.model.max_seq_len) +
                                    " is shorter than " + to_string(t.kind) + " sequences (" +
                                    std::to_string(required_seq_len(t)) + ")");
      }
    }
  }
  if (train) {
    train_config.validate();
    if (n_train < 1 || n_test < 1) throw std::invalid_argument("n_train and n_test must be >= 1");
  }
  if (analyze && analysis_samples < 1) throw std::invalid_argument("analysis_samples must be >= 1");
  if (probe) probe_config.validate();
  if (simulation) simulation->validate();
}

KeyValues ExperimentSpec::to_map() const {
  KeyValues kv = train_config.to_map();
  kv["name"] = name;
  std::vector<std::string> t;
  for (const auto& task : tasks) t.push_back(to_string(task.kind) + ":" + std::to_string(task.max_operand));
  kv["tasks"] = join(t);
  if (!tasks.empty()) kv["max_len_fraction"] = num(tasks.front().max_len_fraction);
  std::vector<std::string> labels;
  for (const auto& m : models) {
    labels.push_back(m.label);
    for (const auto& [k, v] : parse_key_values(m.model.to_text())) kv[m.label + "." + k] = v;
  }
  kv["models"] = join(labels);
  kv["train"] = train ? "true" : "false";
  kv["n_train"] = std::to_string(n_train);
  kv["n_test"] = std::to_string(n_test);
  kv["analyze"] = analyze ? "true" : "false";
  kv["analysis_samples"] = std::to_string(analysis_samples);
  kv["variance_scores"] = variance_scores ? "true" : "false";
  kv["include_diagonal"] = score_options.include_diagonal ? "true" : "false";
  kv["variance_direction"] = score_options.variance_direction == Order::kDecreasing ? "decreasing" : "increasing";
  kv["heatmaps"] = heatmaps ? "true" : "false";
  kv["probe"] = probe ? "true" : "false";
  std::vector<std::string> feats;
  for (auto f : probe_features) feats.push_back(to_string(f));
  kv["probe_features"] = join(feats);
  kv["probe_seq_len"] = std::to_string(probe_config.seq_len);
  kv["probe_n_train"] = std::to_string(probe_config.n_train);
  kv["probe_n_test"] = std::to_string(probe_config.n_test);
  kv["probe_hidden_dim"] = std::to_string(probe_config.hidden_dim);
  kv["probe_max_epochs"] = std::to_string(probe_config.max_epochs);
  kv["probe_patience"] = std::to_string(probe_config.patience);
  kv["simulate"] = simulation ? "true" : "false";
  if (simulation) {
    std::vector<std::string> sig;
    for (double s : simulation->sigmas) sig.push_back(num(s));
    kv["sim_sigmas"] = join(sig);
    kv["sim_trials"] = std::to_string(simulation->trials);
    kv["sim_dim"] = std::to_string(simulation->dim);
    kv["sim_coeff_mean"] = num(simulation->coeff_mean);
  }
  std::vector<std::string> s;
  for (auto seed : seeds) s.push_back(std::to_string(seed));
  kv["seeds"] = join(s);
  return kv;
}

ExperimentSpec ExperimentSpec::from_map(const KeyValues& kv, ExperimentSpec base) {
  base.name = get_string(kv, "name", base.name);
  const double frac = get_double(kv, "max_len_fraction", base.tasks.empty() ? 0.9 : base.tasks.front().max_len_fraction);
  const Scale scale = parse_scale(get_string(kv, "scale", "desk"));
  if (kv.count("tasks")) {
    base.tasks.clear();
    for (const auto& item : split_list(kv.at("tasks"))) {
      const auto colon = item.find(':');
      const TaskKind kind = parse_task_kind(item.substr(0, colon));
      TaskSpec t = scale == Scale::kDesk ? TaskSpec::desk(kind) : TaskSpec::full(kind);
      if (colon != std::string::npos) {
        try {
          t.max_operand = std::stoi(item.substr(colon + 1));
        } catch (const std::exception&) {
          throw std::invalid_argument("bad task operand size in '" + item + "'");
        }
      }
      base.tasks.push_back(t);
    }
  }
  for (auto& t : base.tasks) t.max_len_fraction = frac;
  if (kv.count("models")) {
    std::vector<ModelVariantSpec> models;
    for (const auto& label : split_list(kv.at("models"))) {
      KeyValues sub;
      for (const auto& [k, v] : kv) {
        if (k.rfind(label + ".", 0) == 0) sub[k.substr(label.size() + 1)] = v;
      }
      ModelConfig start;
      for (const auto& m : base.models) {
        if (m.label == label) start = m.model;
      }
      models.push_back({label, ModelConfig::from_map(sub, start)});
    }
    base.models = std::move(models);
  }
  base.train = get_bool(kv, "train", base.train);
  base.train_config = TrainConfig::from_map(kv, base.train_config);
  base.n_train = get_int(kv, "n_train", base.n_train);
  base.n_test = get_int(kv, "n_test", base.n_test);
  base.analyze = get_bool(kv, "analyze", base.analyze);
  base.analysis_samples = get_int(kv, "analysis_samples", base.analysis_samples);
  base.variance_scores = get_bool(kv, "variance_scores", base.variance_scores);
  base.score_options.include_diagonal = get_bool(kv, "include_diagonal", base.score_options.include_diagonal);
  if (kv.count("variance_direction")) {
    const std::string& d = kv.at("variance_direction");
    if (d == "decreasing") {
      base.score_options.variance_direction = Order::kDecreasing;
    } else if (d == "increasing") {
      base.score_options.variance_direction = Order::kIncreasing;
    } else {
      throw std::invalid_argument("variance_direction must be decreasing or increasing");
    }
  }
  base.heatmaps = get_bool(kv, "heatmaps", base.heatmaps);
  base.probe = get_bool(kv, "probe", base.probe);
  if (kv.count("probe_features")) {
    base.probe_features.clear();
    for (const auto& f : split_list(kv.at("probe_features"))) base.probe_features.push_back(parse_probe_feature(f));
  }
  base.probe_config.seq_len = get_int(kv, "probe_seq_len", base.probe_config.seq_len);
  base.probe_config.n_train = get_int(kv, "probe_n_train", base.probe_config.n_train);
  base.probe_config.n_test = get_int(kv, "probe_n_test", base.probe_config.n_test);
  base.probe_config.hidden_dim = get_int(kv, "probe_hidden_dim", base.probe_config.hidden_dim);
  base.probe_config.max_epochs = get_int(kv, "probe_max_epochs", base.probe_config.max_epochs);
  base.probe_config.patience = get_int(kv, "probe_patience", base.probe_config.patience);
  if (get_bool(kv, "simulate", base.simulation.has_value())) {
    SimulationSpec sim = base.simulation.value_or(SimulationSpec{});
    if (kv.count("sim_sigmas")) {
      sim.sigmas.clear();
      for (const auto& s : split_list(kv.at("sim_sigmas"))) sim.sigmas.push_back(get_double({{"v", s}}, "v", 0.0));
    }
    sim.trials = get_int(kv, "sim_trials", sim.trials);
    sim.dim = get_int(kv, "sim_dim", sim.dim);
    sim.coeff_mean = get_double(kv, "sim_coeff_mean", sim.coeff_mean);
    base.simulation = sim;
  } else {
    base.simulation.reset();
  }
  if (kv.count("seeds")) {
    base.seeds.clear();
    for (const auto& s : split_list(kv.at("seeds"))) {
      try {
        base.seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw std::invalid_argument("bad seed '" + s + "'");
      }
    }
  }
  base.validate();
  return base;
}

std::uint64_t config_hash(const ExperimentSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : format_key_values(spec.to_map())) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Scale parse_scale(const std::string& s) {
  if (s == "desk") return Scale::kDesk;
  if (s == "full") return Scale::kFull;
  throw std::invalid_argument("unknown scale '" + s + "' (expected desk or full)");
}

namespace {

class Manifest {
 public:
  explicit Manifest(std::filesystem::path path) : path_(std::move(path)) {}
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void flush() const {
    std::ofstream out(path_);
    if (!out) throw std::runtime_error("cannot write " + path_.string());
    out << format_key_values(kv_);
  }

 private:
  std::filesystem::path path_;
  KeyValues kv_;
};

struct Accumulator {
  std::vector<std::vector<double>> cosine, variance;  // [layer][sample]

  void add(const LayerScoreSummary& s) {
    if (cosine.empty()) {
      cosine.resize(s.cosine.size());
      variance.resize(s.variance.size());
    }
    for (std::size_t l = 0; l < s.cosine.size(); ++l) {
      cosine[l].insert(cosine[l].end(), s.cosine[l].scores.begin(), s.cosine[l].scores.end());
      variance[l].insert(variance[l].end(), s.variance[l].scores.begin(), s.variance[l].scores.end());
    }
  }
  static ResultsRow row(const std::string& label, const std::vector<std::vector<double>>& per_layer) {
    ResultsRow r{label, {}, {}};
    for (const auto& scores : per_layer) {
      const ScoreDistribution d = summarize_scores(scores);
      r.mean.push_back(d.mean);
      r.std.push_back(d.std);
    }
    return r;
  }
};

void write_variance_sequences(const LayerActivations& acts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,position,variance\n" << std::setprecision(17);
  for (std::size_t l = 0; l < acts.per_layer.size(); ++l) {
    const auto v = variance_sequence(acts.per_layer[l]);
    for (std::size_t p = 0; p < v.size(); ++p) out << l << ',' << p << ',' << v[p] << '\n';
  }
}

void write_artifacts(const ModelParams& params, const std::vector<int>& tokens, const LayerScoreSummary& summary,
                     const ScoreOptions& opts, const std::filesystem::path& dir, const std::string& phase) {
  std::filesystem::create_directories(dir);
  const LayerActivations acts = forward(params, tokens).acts;
  for (std::size_t l = 0; l < acts.per_layer.size(); ++l) {
    const std::string stem = phase + "_layer" + std::to_string(l);
    const SimMatrix c = cosine_sim_matrix(acts.per_layer[l]);
    const double score = adjacency_score(c, opts.include_diagonal).matrix_score;
    render_heatmap(c, dir / ("heatmap_" + stem + ".pgm"));
    render_heatmap_svg(c, score, dir / ("heatmap_" + stem + ".svg"));
    write_sim_matrix_csv(c, dir / ("sim_" + stem + ".csv"));
    write_score_histogram_csv(summary.cosine[l], dir / ("hist_" + stem + ".csv"));
  }
  write_variance_sequences(acts, dir / ("variance_" + phase + ".csv"));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const std::filesystem::path dir = spec.out_dir;
  std::filesystem::create_directories(dir);
  Manifest manifest(dir / "manifest.txt");
  for (const auto& [k, v] : spec.to_map()) manifest.set(k, v);
  manifest.set("run.config_hash", hex64(config_hash(spec)));
  manifest.set("run.status", "running");
  manifest.flush();

  std::string stage = "setup";
  ExperimentResult result;
  result.dir = dir;
  try {
    std::vector<std::string> row_labels;
    std::vector<Accumulator> accs;
    const bool multi_model = spec.models.size() > 1;
    const bool needs_models = spec.analyze || spec.train || spec.probe;

    for (std::size_t ti = 0; needs_models && ti < spec.tasks.size(); ++ti) {
      const TaskSpec& task = spec.tasks[ti];
      for (std::size_t mi = 0; mi < spec.models.size(); ++mi) {
        const ModelVariantSpec& mv = spec.models[mi];
        const std::string base_label = task_label(task) + (multi_model ? " " + mv.label : "");
        Accumulator init_acc, trained_acc;
        for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
          const std::uint64_t seed = spec.seeds[si];
          const std::uint64_t run_seed = derive_seed(derive_seed(seed, ti + 1), mi + 1);
          const std::uint64_t data_seed = derive_seed(seed, 1000 + ti);
          const std::string key = "run." + to_string(task.kind) + "." + mv.label + ".seed" + std::to_string(seed);
          const std::filesystem::path run_dir =
              dir / to_string(task.kind) / mv.label / ("seed_" + std::to_string(seed));
          manifest.set(key + ".data_seed", std::to_string(data_seed));
          manifest.set(key + ".model_seed", std::to_string(derive_seed(run_seed, 1)));

          stage = "generate " + to_string(task.kind);
          DatasetSplit split;
          std::vector<std::vector<int>> inputs;
          const Vocab& vocab = default_vocab();
          if (spec.train) {
            split = build_split(task, spec.n_train, spec.n_test, data_seed);
            const int n = std::min<int>(spec.analysis_samples, static_cast<int>(split.test.samples.size()));
            for (int i = 0; i < n; ++i) inputs.push_back(vocab.tokenize(split.test.samples[static_cast<std::size_t>(i)].prompt));
          } else {
            for (const auto& s : build_dataset(task, spec.analysis_samples, data_seed).samples) {
              inputs.push_back(vocab.tokenize(s.prompt));
            }
          }

          stage = "init " + mv.label;
          ModelParams params = init_model(mv.model, derive_seed(run_seed, 1));
          const bool artifacts = spec.heatmaps && si == 0;

          if (spec.analyze) {
            stage = "analyze init " + mv.label;
            const LayerScoreSummary s = score_inputs(params, inputs, spec.score_options);
            init_acc.add(s);
            if (artifacts) write_artifacts(params, inputs.front(), s, spec.score_options, run_dir, "init");
          }
          if (spec.probe && si == 0) {
            stage = "probe init " + mv.label;
            ProbeConfig pc = spec.probe_config;
            pc.seed = derive_seed(run_seed, 3);
            auto probes = run_probes(params, [&] {
              std::vector<int> layers;
              for (int l = 0; l <= mv.model.n_layers; ++l) layers.push_back(l);
              return layers;
            }(), spec.probe_features, pc);
            std::filesystem::create_directories(run_dir);
            write_probe_csv(probes, run_dir / "probes_init.csv");
            write_probe_residuals_csv(probes, run_dir / "probe_residuals_init.csv");
            if (!spec.train) result.probes = std::move(probes);
          }
          if (spec.train) {
            stage = "train " + mv.label + " on " + to_string(task.kind);
            TrainConfig tc = spec.train_config;
            tc.seed = derive_seed(run_seed, 2);
            manifest.set(key + ".train_seed", std::to_string(tc.seed));
            const TrainReport report = train(params, split.train, split.test, tc);
            std::filesystem::create_directories(run_dir);
            write_train_report_csv(report, run_dir / "train_log.csv");
            save_checkpoint(params, run_dir / "model.ckpt");
            manifest.set(key + ".steps", std::to_string(report.steps));
            manifest.set(key + ".accuracy", num(report.final_accuracy));
            manifest.set(key + ".reached_target", report.reached_target ? "true" : "false");
            manifest.flush();

            if (spec.analyze) {
              stage = "analyze trained " + mv.label;
              const LayerScoreSummary s = score_inputs(params, inputs, spec.score_options);
              trained_acc.add(s);
              if (artifacts) write_artifacts(params, inputs.front(), s, spec.score_options, run_dir, "trained");
            }
            if (spec.probe && si == 0) {
              stage = "probe trained " + mv.label;
              ProbeConfig pc = spec.probe_config;
              pc.seed = derive_seed(run_seed, 4);
              std::vector<int> layers;
              for (int l = 0; l <= mv.model.n_layers; ++l) layers.push_back(l);
              auto probes = run_probes(params, layers, spec.probe_features, pc);
              write_probe_csv(probes, run_dir / "probes_trained.csv");
              write_probe_residuals_csv(probes, run_dir / "probe_residuals_trained.csv");
              result.probes = std::move(probes);
            }
          }
        }
        if (spec.analyze) {
          row_labels.push_back(base_label + " Init");
          accs.push_back(init_acc);
          if (spec.train) {
            row_labels.push_back(base_label + " Trained");
            accs.push_back(trained_acc);
          }
        }
      }
    }

    if (spec.analyze) {
      stage = "report";
      for (std::size_t i = 0; i < accs.size(); ++i) {
        result.cosine.rows.push_back(Accumulator::row(row_labels[i], accs[i].cosine));
        result.variance.rows.push_back(Accumulator::row(row_labels[i], accs[i].variance));
      }
      emit_table(result.cosine, dir / "table_cosine.csv");
      if (spec.variance_scores) emit_table(result.variance, dir / "table_variance.csv");
    }
    if (spec.simulation) {
      stage = "simulate";
      SimulationSpec sim = *spec.simulation;
      sim.seed = derive_seed(spec.seeds.front(), 0x53494d);
      manifest.set("run.simulation_seed", std::to_string(sim.seed));
      result.simulation = run_coefficient_simulation(sim);
      write_simulation_csvs(*result.simulation, dir / "simulation");
    }
  } catch (const std::exception& e) {
    manifest.set("run.status", "failed");
    manifest.set("run.failed_stage", stage);
    manifest.set("run.error", e.what());
    manifest.flush();
    throw std::runtime_error("stage '" + stage + "' failed: " + e.what());
  }
  manifest.set("run.status", "complete");
  manifest.flush();
  return result;
}

std::vector<std::string> reproduction_targets() {
  return {"table1",  "table2",  "table3",  "table4",  "table5",  "table6",   "figure1",  "figure2",
          "figure3", "figure4", "figure5", "figure6", "figure8", "figure9", "figure10", "figure11", "figure12"};
}

ExperimentSpec reproduction_preset(const std::string& target, Scale scale) {
  const bool desk = scale == Scale::kDesk;
  auto task = [&](TaskKind k) { return desk ? TaskSpec::desk(k) : TaskSpec::full(k); };
  const std::vector<TaskSpec> all_tasks{task(TaskKind::kAddition), task(TaskKind::kReversal), task(TaskKind::kIndexing),
                                        task(TaskKind::kOrdering)};
  // Trained runs use the small desk model; init-only runs are cheap enough
  // to use the 6-layer, 384-wide baseline at either scale.
  ModelConfig trained_model;
  ModelConfig init_model_cfg;
  init_model_cfg.n_layers = 6;
  init_model_cfg.d_model = 384;
  init_model_cfg.n_heads = default_heads(384);
  if (!desk) trained_model = init_model_cfg;

  ExperimentSpec s;
  s.name = target;
  s.seeds = desk ? std::vector<std::uint64_t>{0} : std::vector<std::uint64_t>{0, 1, 2, 3, 4};
  s.analysis_samples = desk ? 64 : 256;
  s.n_train = desk ? 5000 : 20000;
  s.n_test = desk ? 5000 : 20000;
  s.tasks = {task(TaskKind::kReversal)};
  s.models = {{"causal_nope", trained_model}};
  s.heatmaps = false;
  s.train = true;

  auto init_sweep = [&](const std::string& prefix, const std::vector<InitScheme>& schemes) {
    s.train = false;
    s.models.clear();
    for (const InitScheme& is : schemes) {
      ModelConfig m = init_model_cfg;
      m.init = is;
      std::ostringstream label;
      label << prefix << '=' << (prefix == "mu" ? is.mu : is.sigma);
      std::string l = label.str();
      std::replace(l.begin(), l.end(), '.', 'p');
      std::replace(l.begin(), l.end(), '=', '_');
      s.models.push_back({l, m});
    }
  };

  if (target == "table1" || target == "table6" || target == "figure3" || target == "figure6") {
    s.tasks = all_tasks;
  } else if (target == "table2") {
    s.models.clear();
    for (int layers : desk ? std::vector<int>{2, 4, 6} : std::vector<int>{6, 12, 24}) {
      ModelConfig m = trained_model;
      m.n_layers = layers;
      s.models.push_back({"layers_" + std::to_string(layers), m});
    }
  } else if (target == "table3") {
    s.models.clear();
    for (int d : desk ? std::vector<int>{64, 128, 192} : std::vector<int>{192, 384, 768}) {
      ModelConfig m = trained_model;
      m.d_model = d;
      m.n_heads = default_heads(d);
      s.models.push_back({"d_" + std::to_string(d), m});
    }
  } else if (target == "table4") {
    init_sweep("mu", {{0.0f, 0.02f}, {4.0f, 0.02f}, {8.0f, 0.02f}});
  } else if (target == "table5") {
    init_sweep("sigma", {{0.0f, 0.002f}, {0.0f, 0.02f}, {0.0f, 0.2f}});
  } else if (target == "figure1" || target == "figure11") {
    s.heatmaps = true;
    if (target == "figure11") {
      s.tasks = {task(TaskKind::kIndexing)};
      s.models.front().model.n_layers = desk ? 8 : 12;
    }
  } else if (target == "figure2") {
    s.analyze = false;
    s.train = false;
    s.simulation = SimulationSpec{};
  } else if (target == "figure4" || target == "figure10") {
    s.probe = true;
  } else if (target == "figure9") {
    s.train = false;
    s.probe = true;
  } else if (target == "figure5") {
    s.tasks = {task(TaskKind::kIndexing)};
    ModelConfig m = trained_model;
    m.variant = Variant::kNoncausalApe;
    s.models = {{"noncausal_ape", m}};
    s.heatmaps = true;
  } else if (target == "figure8") {
    s.tasks = {task(TaskKind::kOrdering)};
    s.heatmaps = true;
  } else if (target == "figure12") {
    s.tasks = {task(TaskKind::kIndexing)};
    s.heatmaps = true;
  } else {
    throw std::invalid_argument("unknown reproduction target '" + target + "'");
  }
  return s;
}

}  // namespace nope
