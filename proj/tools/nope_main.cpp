// Command-line front end: data generation, training, analysis, simulation,
// probing and table/figure reproduction.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nope/analysis.hpp"
#include "nope/experiment.hpp"
#include "nope/kv_config.hpp"
#include "nope/model.hpp"
#include "nope/probing.hpp"
#include "nope/report.hpp"
#include "nope/simulation.hpp"
#include "nope/tasks.hpp"
#include "nope/training.hpp"

namespace fs = std::filesystem;
using namespace nope;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = "out";

  KeyValues config_values() const { return config.empty() ? KeyValues{} : read_key_values(config); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Master seed");
  cmd->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output directory");
}

struct TaskArgs {
  std::string task = "reversal";
  std::string scale = "desk";
  int operand = 0;

  TaskSpec resolve() const {
    const TaskKind kind = parse_task_kind(task);
    TaskSpec t = parse_scale(scale) == Scale::kDesk ? TaskSpec::desk(kind) : TaskSpec::full(kind);
    if (operand > 0) t.max_operand = operand;
    t.validate();
    return t;
  }
};

void add_task(CLI::App* cmd, TaskArgs& t) {
  cmd->add_option("--task", t.task, "addition, reversal, indexing or ordering");
  cmd->add_option("--scale", t.scale, "desk or full");
  cmd->add_option("--operand-size", t.operand, "Override the task's maximum operand size");
}

ModelParams model_from(const std::string& checkpoint, const KeyValues& kv, std::uint64_t seed) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint);
  return init_model(ModelConfig::from_map(kv, ModelConfig{}), derive_seed(seed, 1));
}

void print_table(const ResultsTable& t, std::ostream& os) {
  const auto names = layer_column_names(t.n_columns());
  std::size_t width = 6;
  for (const auto& r : t.rows) width = std::max(width, r.label.size());
  os << std::left << std::setw(static_cast<int>(width)) << "config";
  for (const auto& n : names) os << "  " << std::setw(10) << n;
  os << '\n';
  for (const auto& r : t.rows) {
    os << std::setw(static_cast<int>(width)) << r.label;
    for (double v : r.mean) os << "  " << std::setw(10) << format_fixed(v, 2);
    os << '\n';
  }
  os << std::right;
}

int cmd_gen_data(const Common& c, const TaskArgs& ta, int n_train, int n_test) {
  const TaskSpec t = ta.resolve();
  const DatasetSplit split = build_split(t, n_train, n_test, c.seed);
  write_dataset_files(split, c.out);
  std::cout << "wrote " << split.train.samples.size() << " train and " << split.test.samples.size() << " test "
            << to_string(t.kind) << " samples to " << c.out << '\n';
  return 0;
}

int cmd_train(const Common& c, const TaskArgs& ta, int n_train, int n_test, int steps) {
  const KeyValues kv = c.config_values();
  const TaskSpec t = ta.resolve();
  ModelConfig mc = ModelConfig::from_map(kv, ModelConfig{});
  TrainConfig tc = TrainConfig::from_map(kv, TrainConfig{});
  if (steps > 0) tc.max_steps = steps;
  if (!kv.count("train_seed")) tc.seed = derive_seed(c.seed, 2);
  if (tc.log_every == 0) tc.log_every = 100;
  const DatasetSplit split = build_split(t, n_train, n_test, c.seed);
  ModelParams params = init_model(mc, derive_seed(c.seed, 1));
  const TrainReport r = train(params, split.train, split.test, tc);
  fs::create_directories(c.out);
  save_checkpoint(params, fs::path(c.out) / "model.ckpt");
  write_train_report_csv(r, fs::path(c.out) / "train_log.csv");
  std::cout << "steps " << r.steps << ", test exact-match " << format_fixed(r.final_accuracy, 4) << ", "
            << format_fixed(r.wall_seconds, 1) << " s\n";
  return 0;
}

int cmd_analyze(const Common& c, const TaskArgs& ta, const std::string& checkpoint, int samples, bool no_diag) {
  const KeyValues kv = c.config_values();
  const TaskSpec t = ta.resolve();
  const ModelParams params = model_from(checkpoint, kv, c.seed);
  ScoreOptions opts;
  opts.include_diagonal = !no_diag;
  std::vector<std::vector<int>> inputs;
  for (const auto& s : build_dataset(t, samples, derive_seed(c.seed, 3)).samples) {
    inputs.push_back(default_vocab().tokenize(s.prompt));
  }
  const LayerScoreSummary summary = score_inputs(params, inputs, opts);
  ResultsTable cos, var;
  ResultsRow rc{to_string(t.kind), {}, {}}, rv{to_string(t.kind), {}, {}};
  for (std::size_t l = 0; l < summary.cosine.size(); ++l) {
    rc.mean.push_back(summary.cosine[l].mean);
    rc.std.push_back(summary.cosine[l].std);
    rv.mean.push_back(summary.variance[l].mean);
    rv.std.push_back(summary.variance[l].std);
  }
  cos.rows.push_back(rc);
  var.rows.push_back(rv);
  const fs::path out = c.out;
  emit_table(cos, out / "table_cosine.csv");
  emit_table(var, out / "table_variance.csv");
  const LayerActivations acts = forward(params, inputs.front()).acts;
  for (std::size_t l = 0; l < acts.per_layer.size(); ++l) {
    const SimMatrix m = cosine_sim_matrix(acts.per_layer[l]);
    const std::string stem = "layer" + std::to_string(l);
    render_heatmap(m, out / ("heatmap_" + stem + ".pgm"));
    render_heatmap_svg(m, adjacency_score(m, opts.include_diagonal).matrix_score, out / ("heatmap_" + stem + ".svg"));
    write_sim_matrix_csv(m, out / ("sim_" + stem + ".csv"));
    write_score_histogram_csv(summary.cosine[l], out / ("hist_" + stem + ".csv"));
  }
  std::cout << "cosine adjacency\n";
  print_table(cos, std::cout);
  std::cout << "variance adjacency\n";
  print_table(var, std::cout);
  return 0;
}

int cmd_simulate(const Common& c, int trials, int dim) {
  const KeyValues kv = c.config_values();
  SimulationSpec spec;
  spec.trials = get_int(kv, "sim_trials", trials);
  spec.dim = get_int(kv, "sim_dim", dim);
  spec.coeff_mean = get_double(kv, "sim_coeff_mean", spec.coeff_mean);
  spec.seed = c.seed;
  const GapHistograms h = run_coefficient_simulation(spec);
  write_simulation_csvs(h, c.out);
  std::cout << "sigma      P(ab>ac)  P(cb>ca)\n";
  for (const auto& g : h.per_sigma) {
    std::cout << std::setw(9) << g.sigma << "  " << format_fixed(g.ab_ac.frac_positive, 4) << "    "
              << format_fixed(g.cb_ca.frac_positive, 4) << '\n';
  }
  const DotGapResult gap = dot_product_gap_check(512, 4, 0, spec.trials, WeightMode::kRandomConvex, c.seed);
  std::cout << "dot-product gap (dim 512, k=4, t=0): mean " << gap.mean_gap << ", stderr " << gap.std_error << '\n';
  return 0;
}

int cmd_probe(const Common& c, const std::string& checkpoint, const std::vector<std::string>& features,
              std::vector<int> layers) {
  const KeyValues kv = c.config_values();
  const ModelParams params = model_from(checkpoint, kv, c.seed);
  std::vector<ProbeFeature> feats;
  for (const auto& f : features) feats.push_back(parse_probe_feature(f));
  if (layers.empty()) {
    for (int l = 0; l <= params.config.n_layers; ++l) layers.push_back(l);
  }
  ProbeConfig pc;
  pc.seed = c.seed;
  pc.max_epochs = get_int(kv, "probe_max_epochs", pc.max_epochs);
  pc.patience = get_int(kv, "probe_patience", pc.patience);
  pc.hidden_dim = get_int(kv, "probe_hidden_dim", pc.hidden_dim);
  const auto results = run_probes(params, layers, feats, pc);
  fs::create_directories(c.out);
  write_probe_csv(results, fs::path(c.out) / "probes.csv");
  write_probe_residuals_csv(results, fs::path(c.out) / "probe_residuals.csv");
  std::cout << "layer  feature       pearson_r  nrmse\n";
  for (const auto& r : results) {
    std::cout << std::setw(5) << r.layer << "  " << std::left << std::setw(12) << to_string(r.feature) << std::right
              << "  " << format_fixed(r.report.pearson_r, 4) << (r.report.r_undefined ? "*" : " ") << "   "
              << format_fixed(r.report.nrmse, 4) << '\n';
  }
  return 0;
}

int cmd_report(const std::string& in) {
  if (!fs::is_directory(in)) throw std::invalid_argument("report input '" + in + "' is not a directory");
  int rendered = 0;
  for (const auto& entry : fs::recursive_directory_iterator(in)) {
    const fs::path p = entry.path();
    const std::string name = p.filename().string();
    if (name.rfind("sim_", 0) == 0 && p.extension() == ".csv") {
      std::ifstream f(p);
      std::vector<double> values;
      std::string line;
      int rows = 0;
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        ++rows;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
      }
      if (rows < 2 || values.size() != static_cast<std::size_t>(rows) * rows) {
        throw std::runtime_error(p.string() + " is not a square matrix");
      }
      SimMatrix m{rows, values};
      fs::path base = p;
      base.replace_filename(name.substr(4, name.size() - 8));
      render_heatmap(m, base.string() + ".pgm");
      render_heatmap_svg(m, adjacency_score(m).matrix_score, base.string() + ".svg");
      ++rendered;
    } else if (name.size() > 9 && name.substr(name.size() - 9) == "_full.csv") {
      std::cout << p.string() << '\n';
      print_table(read_full_table(p), std::cout);
    }
  }
  std::cout << "rendered " << rendered << " heatmaps\n";
  return 0;
}

int cmd_reproduce(const Common& c, const std::string& target, const std::string& scale) {
  ExperimentSpec spec = reproduction_preset(target, parse_scale(scale));
  spec.out_dir = fs::path(c.out) / target;
  if (c.seed != 0) spec.seeds = {c.seed};
  spec.train_config.log_every = 100;
  if (!c.config.empty()) spec = ExperimentSpec::from_map(c.config_values(), spec);
  const ExperimentResult r = run_experiment(spec);
  if (!r.cosine.rows.empty()) {
    std::cout << "cosine adjacency\n";
    print_table(r.cosine, std::cout);
    if (spec.variance_scores) {
      std::cout << "variance adjacency\n";
      print_table(r.variance, std::cout);
    }
  }
  std::cout << "artifacts in " << r.dir.string() << '\n';
  return 0;
}

int cmd_run(const Common& c) {
  if (c.config.empty()) throw std::invalid_argument("run needs --config <spec file>");
  ExperimentSpec spec = ExperimentSpec::from_map(c.config_values(), ExperimentSpec{});
  spec.out_dir = c.out;
  run_experiment(spec);
  std::cout << "artifacts in " << c.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Positional-information analysis for causal transformers without positional encodings"};
  app.require_subcommand(1);

  Common common;
  TaskArgs task_args;
  int n_train = 5000, n_test = 5000, steps = 0, samples = 256, trials = 10000, dim = 128;
  bool no_diag = false;
  std::string checkpoint, report_in, target, scale = "desk";
  std::vector<std::string> features{"embedding", "variance", "cos_to_last"};
  std::vector<int> layers;

  auto* gen = app.add_subcommand("gen-data", "Write train/test/vocab files for a task");
  add_common(gen, common);
  add_task(gen, task_args);
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-test", n_test);

  auto* tr = app.add_subcommand("train", "Train a model on a task and save a checkpoint");
  add_common(tr, common);
  add_task(tr, task_args);
  tr->add_option("--n-train", n_train);
  tr->add_option("--n-test", n_test);
  tr->add_option("--steps", steps, "Override max_steps");

  auto* an = app.add_subcommand("analyze", "Layer-wise adjacency scores, heatmaps and histograms");
  add_common(an, common);
  add_task(an, task_args);
  an->add_option("--checkpoint", checkpoint, "Model checkpoint (default: fresh init from --config)");
  an->add_option("--samples", samples, "Number of task inputs");
  an->add_flag("--no-diagonal", no_diag, "Exclude the diagonal column from row scores");

  auto* sim = app.add_subcommand("simulate", "Coefficient simulation and dot-product gap check");
  add_common(sim, common);
  sim->add_option("--trials", trials);
  sim->add_option("--dim", dim);

  auto* pr = app.add_subcommand("probe", "Position probes on frozen features");
  add_common(pr, common);
  pr->add_option("--checkpoint", checkpoint);
  pr->add_option("--features", features)->delimiter(',');
  pr->add_option("--layers", layers)->delimiter(',');

  auto* rep = app.add_subcommand("report", "Render heatmaps and print tables from saved CSVs");
  add_common(rep, common);
  rep->add_option("--in", report_in, "Directory with sim_*.csv and *_full.csv files")->required();

  auto* repro = app.add_subcommand("reproduce", "Run a table or figure preset");
  add_common(repro, common);
  repro->add_option("target", target, "table1..table6, figure1..figure12")->required();
  repro->add_option("--scale", scale, "desk or full");

  auto* run = app.add_subcommand("run", "Run an experiment spec file (for example a previous manifest.txt)");
  add_common(run, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(common, task_args, n_train, n_test);
    if (*tr) return cmd_train(common, task_args, n_train, n_test, steps);
    if (*an) return cmd_analyze(common, task_args, checkpoint, samples, no_diag);
    if (*sim) return cmd_simulate(common, trials, dim);
    if (*pr) return cmd_probe(common, checkpoint, features, layers);
    if (*rep) return cmd_report(report_in);
    if (*repro) return cmd_reproduce(common, target, scale);
    if (*run) return cmd_run(common);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
