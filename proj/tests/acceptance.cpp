// Acceptance run: one PASS/FAIL line per criterion. Exits 1 when a criterion
// could not be evaluated at all, or on any FAIL under --strict.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>

#include "nope/analysis.hpp"
#include "nope/model.hpp"
#include "nope/probing.hpp"
#include "reference_model.hpp"
#include "nope/report.hpp"
#include "nope/simulation.hpp"
#include "nope/tasks.hpp"
#include "nope/training.hpp"

using namespace nope;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) { return format_fixed(v, digits); }

std::string join(const std::vector<double>& v, int digits = 3) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], digits);
  return s;
}

// Per-layer mean cosine scores with and without the diagonal from one forward pass per input.
struct InitScores {
  std::vector<double> with_diag;
  std::vector<double> without_diag;
};

InitScores init_scores(const ModelParams& p, const std::vector<std::vector<int>>& inputs) {
  const std::size_t layers = static_cast<std::size_t>(p.config.n_layers) + 1;
  InitScores s{std::vector<double>(layers, 0.0), std::vector<double>(layers, 0.0)};
  for (const auto& in : inputs) {
    const LayerActivations acts = forward(p, in).acts;
    for (std::size_t l = 0; l < layers; ++l) {
      const SimMatrix c = cosine_sim_matrix(acts.per_layer[l]);
      s.with_diag[l] += adjacency_score(c, true).matrix_score;
      s.without_diag[l] += adjacency_score(c, false).matrix_score;
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    s.with_diag[l] /= static_cast<double>(inputs.size());
    s.without_diag[l] /= static_cast<double>(inputs.size());
  }
  return s;
}

ModelConfig full_config() {
  ModelConfig c;
  c.n_layers = 6;
  c.d_model = 384;
  c.n_heads = default_heads(384);
  return c;
}

ModelConfig desk_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 128;
  c.n_heads = default_heads(128);
  c.max_seq_len = 32;
  return c;
}

std::vector<std::vector<int>> task_prompts(TaskKind kind, int n, std::uint64_t seed) {
  std::vector<std::vector<int>> out;
  for (const auto& s : build_dataset(TaskSpec::full(kind), n, seed).samples) out.push_back(default_vocab().tokenize(s.prompt));
  return out;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + static_cast<long>(from), v.begin() + static_cast<long>(to), 0.0) /
         static_cast<double>(to - from);
}

bool all_at_least(const std::vector<double>& v, std::size_t from, double lo) {
  for (std::size_t i = from; i < v.size(); ++i)
    if (v[i] < lo) return false;
  return true;
}

bool all_at_most(const std::vector<double>& v, std::size_t from, double hi) {
  for (std::size_t i = from; i < v.size(); ++i)
    if (v[i] > hi) return false;
  return true;
}

constexpr int kInitSamples = 256;

Outcome c1_random_init() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  const ModelParams p = init_model(full_config(), 101);
  const TaskKind kinds[] = {TaskKind::kAddition, TaskKind::kReversal, TaskKind::kIndexing, TaskKind::kOrdering};
  for (TaskKind k : kinds) {
    const InitScores s = init_scores(p, task_prompts(k, kInitSamples / 4, 200 + static_cast<int>(k)));
    // band: layer 0 <= 0.60, layers >= 1 at least 0.90, each with 0.05 tolerance
    for (const auto* v : {&s.with_diag, &s.without_diag}) {
      ok = ok && (*v)[0] <= 0.65 && all_at_least(*v, 1, 0.85);
    }
    detail += to_string(k) + "[" + join(s.with_diag, 2) + " | nodiag " + join(s.without_diag, 2) + "] ";
  }
  const double t = seconds_since(t0);
  ok = ok && t < 60.0;
  return {ok, detail + fmt(t, 1) + "s"};
}

Outcome c2_sigma_sweep() {
  const auto t0 = Clock::now();
  const auto inputs = task_prompts(TaskKind::kReversal, kInitSamples, 301);
  bool ok = true;
  std::string detail;
  for (float sigma : {0.002f, 0.02f, 0.2f}) {
    ModelConfig c = full_config();
    c.init.sigma = sigma;
    const InitScores s = init_scores(init_model(c, 102), inputs);
    for (const auto* v : {&s.with_diag, &s.without_diag}) {
      ok = ok && (sigma < 0.1f ? all_at_least(*v, 1, 0.90) : all_at_most(*v, 1, 0.80));
    }
    detail += "sigma=" + fmt(sigma) + "[" + join(s.with_diag, 2) + " | nodiag " + join(s.without_diag, 2) + "] ";
  }
  const double t = seconds_since(t0);
  ok = ok && t < 120.0;
  return {ok, detail + fmt(t, 1) + "s"};
}

Outcome c3_mu_sweep() {
  const auto t0 = Clock::now();
  const auto inputs = task_prompts(TaskKind::kReversal, kInitSamples, 302);
  bool ok = true;
  std::string detail;
  for (float mu : {0.0f, 8.0f}) {
    ModelConfig c = full_config();
    c.init.mu = mu;
    const InitScores s = init_scores(init_model(c, 103), inputs);
    if (mu > 0.0f) {
      for (const auto* v : {&s.with_diag, &s.without_diag}) {
        ok = ok && (*v)[1] >= 0.90 && mean_of(*v, 2, v->size()) <= 0.75;
      }
    }
    detail += "mu=" + fmt(mu, 0) + "[" + join(s.with_diag, 2) + " | nodiag " + join(s.without_diag, 2) + "] ";
  }
  const double t = seconds_since(t0);
  ok = ok && t < 120.0;
  return {ok, detail + fmt(t, 1) + "s"};
}

Outcome c4_noncausal() {
  const auto t0 = Clock::now();
  ModelConfig c = full_config();
  c.variant = Variant::kNoncausalApe;
  const InitScores s = init_scores(init_model(c, 104), task_prompts(TaskKind::kIndexing, kInitSamples, 303));
  bool ok = true;
  for (const auto* v : {&s.with_diag, &s.without_diag}) ok = ok && all_at_least(*v, 1, 0.35) && all_at_most(*v, 1, 0.65);
  const double t = seconds_since(t0);
  ok = ok && t < 60.0;
  return {ok, "[" + join(s.with_diag, 2) + " | nodiag " + join(s.without_diag, 2) + "] " + fmt(t, 1) + "s"};
}

Outcome c5_simulation() {
  const auto t0 = Clock::now();
  SimulationSpec spec;
  spec.sigmas = {0.001, 0.01, 100.0};
  spec.seed = 105;
  const GapHistograms h = run_coefficient_simulation(spec);
  bool ok = true;
  std::string detail;
  for (const auto& g : h.per_sigma) {
    for (double f : {g.ab_ac.frac_positive, g.cb_ca.frac_positive}) {
      ok = ok && (g.sigma < 1.0 ? f >= 0.99 : (f >= 0.45 && f <= 0.55));
    }
    detail += "sigma=" + fmt(g.sigma) + " pos(ab-ac)=" + fmt(g.ab_ac.frac_positive) +
              " pos(cb-ca)=" + fmt(g.cb_ca.frac_positive) + " ";
  }
  const double t = seconds_since(t0);
  ok = ok && t < 30.0;
  return {ok, detail + fmt(t, 1) + "s"};
}

Outcome c6_gap() {
  const auto t0 = Clock::now();
  const DotGapResult r = dot_product_gap_check(512, 4, 0, 10000, WeightMode::kRandomConvex, 106);
  const double z = r.mean_gap / r.std_error;
  const double t = seconds_since(t0);
  return {r.mean_gap > 0.0 && z > 5.0 && t < 10.0,
          "mean=" + fmt(r.mean_gap, 5) + " z=" + fmt(z, 1) + " " + fmt(t, 1) + "s"};
}

struct TrainedDesk {
  ModelParams params;
  TrainReport report;
  LayerScoreSummary scores;
  LayerScoreSummary scores_nodiag;
  double seconds = 0.0;
};

TrainedDesk train_desk(const std::filesystem::path& out) {
  const auto t0 = Clock::now();
  const TaskSpec task = TaskSpec::desk(TaskKind::kReversal);
  const DatasetSplit split = build_split(task, 5000, 5000, 107);
  TrainedDesk d{init_model(desk_config(), 108), {}, {}, {}, 0.0};
  TrainConfig tc;
  tc.max_steps = 8000;
  tc.seed = 109;
  d.report = train(d.params, split.train, split.test, tc);
  d.seconds = seconds_since(t0);
  std::filesystem::create_directories(out);
  save_checkpoint(d.params, out / "desk_reversal.ckpt");
  write_train_report_csv(d.report, out / "desk_reversal_train_log.csv");
  std::vector<std::vector<int>> inputs;
  for (int i = 0; i < kInitSamples; ++i) inputs.push_back(default_vocab().tokenize(split.test.samples[static_cast<std::size_t>(i)].prompt));
  d.scores = score_inputs(d.params, inputs);
  ScoreOptions nodiag;
  nodiag.include_diagonal = false;
  d.scores_nodiag = score_inputs(d.params, inputs, nodiag);
  return d;
}

std::vector<double> means(const std::vector<ScoreDistribution>& v) {
  std::vector<double> out;
  for (const auto& d : v) out.push_back(d.mean);
  return out;
}

Outcome c7_training(const TrainedDesk& d) {
  const auto cos = means(d.scores.cosine);
  const auto cos_nd = means(d.scores_nodiag.cosine);
  const bool acc = d.report.final_accuracy >= 0.90 && d.report.steps <= 8000;
  auto shape = [](const std::vector<double>& c) { return c[0] <= 0.65 && c[1] >= 0.85 && c[2] >= 0.85 && c[3] >= 0.85; };
  const bool time = d.seconds <= 1800.0;
  return {acc && shape(cos) && shape(cos_nd) && time,
          "accuracy=" + fmt(d.report.final_accuracy) + " steps=" + std::to_string(d.report.steps) + " cosine[" +
              join(cos) + " | nodiag " + join(cos_nd) + "] " + fmt(d.seconds, 0) + "s"};
}

Outcome c8_variance(const TrainedDesk& d) {
  const auto cos = means(d.scores.cosine);
  const auto var = means(d.scores.variance);
  const double mc = mean_of(cos, 2, cos.size());
  const double mv = mean_of(var, 2, var.size());
  return {mv < mc, "variance layers 2..L=" + fmt(mv) + " cosine layers 2..L=" + fmt(mc) + " variance[" + join(var) + "]"};
}

std::string probe_line(const std::vector<ProbeResult>& rs) {
  std::string s;
  for (const auto& r : rs) {
    s += "L" + std::to_string(r.layer) + ":" + to_string(r.feature) + "=" + fmt(r.report.pearson_r, 2) + "/" +
         fmt(r.report.nrmse, 3) + " ";
  }
  return s;
}

const ProbeReport& find_probe(const std::vector<ProbeResult>& rs, int layer, ProbeFeature f) {
  for (const auto& r : rs)
    if (r.layer == layer && r.feature == f) return r.report;
  throw std::logic_error("missing probe result");
}

Outcome c9_probes(const TrainedDesk& d, const std::filesystem::path& out) {
  const auto t0 = Clock::now();
  const std::vector<ProbeFeature> features{ProbeFeature::kEmbedding, ProbeFeature::kVariance, ProbeFeature::kCosToLast};
  std::vector<int> layers;
  for (int l = 1; l <= desk_config().n_layers; ++l) layers.push_back(l);
  ProbeConfig cfg;
  cfg.seed = 110;
  const ModelParams init = init_model(desk_config(), 108);
  const auto at_init = run_probes(init, layers, features, cfg);
  const auto trained = run_probes(d.params, layers, features, cfg);
  write_probe_csv(at_init, out / "probes_init.csv");
  write_probe_csv(trained, out / "probes_trained.csv");
  bool ok = true;
  for (int l : layers) {
    for (const auto* rs : {&at_init, &trained}) {
      const ProbeReport& cos = find_probe(*rs, l, ProbeFeature::kCosToLast);
      const ProbeReport& var = find_probe(*rs, l, ProbeFeature::kVariance);
      ok = ok && cos.pearson_r > var.pearson_r && cos.nrmse < var.nrmse;
    }
    const ProbeReport& emb = find_probe(at_init, l, ProbeFeature::kEmbedding);
    const ProbeReport& cos = find_probe(at_init, l, ProbeFeature::kCosToLast);
    const ProbeReport& var = find_probe(at_init, l, ProbeFeature::kVariance);
    ok = ok && emb.pearson_r < std::min(cos.pearson_r, var.pearson_r) && emb.nrmse > std::max(cos.nrmse, var.nrmse);
  }
  const double t = seconds_since(t0);
  ok = ok && t < 600.0;
  return {ok, "init{" + probe_line(at_init) + "} trained{" + probe_line(trained) + "} " + fmt(t, 0) + "s"};
}

Outcome c10_metrics() {
  const auto t0 = Clock::now();
  const int n = 16;
  SimMatrix band = SimMatrix::zeros(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) band.at(i, j) = 1.0 - std::abs(i - j) / static_cast<double>(n);
  SimMatrix flat = SimMatrix::zeros(n);
  for (double& v : flat.values) v = 0.42;
  const double band_score = adjacency_score(band).matrix_score;
  const double flat_score = adjacency_score(flat).matrix_score;

  std::mt19937_64 rng(111);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double random_mean = 0.0;
  bool invariant = true;
  for (int draw = 0; draw < 100; ++draw) {
    SimMatrix r = SimMatrix::zeros(32);
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j <= i; ++j) r.at(i, j) = r.at(j, i) = u(rng);
    const double s = adjacency_score(r).matrix_score;
    random_mean += s / 100.0;
    SimMatrix t = r;
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) t.at(i, j) = std::atan(5.0 * r.at(i, j)) * (i + 1) + i;
    invariant = invariant && adjacency_score(t).matrix_score == s;
  }
  const bool ok = band_score == 1.0 && flat_score == 0.0 && std::abs(random_mean - 0.5) <= 0.03 && invariant;
  return {ok, "band=" + fmt(band_score) + " constant=" + fmt(flat_score) + " random=" + fmt(random_mean) +
                  " rank_invariant=" + (invariant ? "yes " : "no ") + fmt(seconds_since(t0), 2) + "s"};
}

Outcome c11_autodiff() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 1;
  cfg.max_seq_len = 24;
  ModelParams params = init_model(cfg, 112);
  const Dataset ds = build_dataset(TaskSpec::desk(TaskKind::kReversal), 4, 113);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const TrainBatch batch = make_train_batch(ds.samples, idx, default_vocab());
  // Numeric side comes from the f64 reference loss; an all-f32 central
  // difference is reported alongside for comparison.
  double worst = 0.0;
  int groups = 0, min_coords = 1 << 30;
  std::string worst_name;
  for (const auto& r : testing::reference_gradient_check(params, batch, 1e-6, 20, 114)) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
    min_coords = std::min(min_coords, r.coords);
    ++groups;
  }
  auto loss = [&](Graph& g) { return build_loss(g, params, batch); };
  double worst_f32 = 0.0;
  for (Parameter* p : params.parameters()) {
    worst_f32 = std::max(worst_f32, finite_diff_check(loss, *p, 1e-3, 20, 114).max_rel_error);
  }
  const double t = seconds_since(t0);
  return {worst < 1e-2 && min_coords >= 20 && t < 60.0,
          "groups=" + std::to_string(groups) + " coords/group>=" + std::to_string(min_coords) + " max_rel=" +
              fmt(worst, 5) + " (" + worst_name + ") all_f32_max_rel=" + fmt(worst_f32, 3) + " " + fmt(t, 1) + "s"};
}

// Recomputes each answer from the prompt text without the generator's helpers.
std::string independent_answer(const std::string& prompt) {
  auto inside = [&](char open, char close) {
    const auto a = prompt.find(open);
    return prompt.substr(a + 1, prompt.find(close) - a - 1);
  };
  if (prompt.rfind("rev(", 0) == 0) {
    const std::string d = inside('(', ')');
    return std::string(d.rbegin(), d.rend());
  }
  if (prompt.rfind("wherex(", 0) == 0) {
    const std::string body = inside('(', ')');
    const std::string d = body.substr(0, body.find(','));
    const char q = body.back();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d[i] == q) return std::to_string(i);
    return "?";
  }
  if (prompt.rfind("order(", 0) == 0) {
    const std::string body = inside('(', ')');
    const std::string s = body.substr(0, body.find(','));
    const std::string perm = body.substr(body.find(',') + 1);
    std::string r;
    for (char c : perm) r += std::to_string(s.find(c));
    return r;
  }
  const auto plus = prompt.find('+');
  const long a = std::stol(prompt.substr(0, plus));
  const long b = std::stol(prompt.substr(plus + 1, prompt.size() - plus - 2));
  std::string sum = std::to_string(a + b);
  return std::string(sum.rbegin(), sum.rend());
}

Outcome c12_tasks() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  const TaskKind kinds[] = {TaskKind::kAddition, TaskKind::kReversal, TaskKind::kIndexing, TaskKind::kOrdering};
  for (TaskKind k : kinds) {
    const TaskSpec spec = TaskSpec::full(k);
    const Dataset ds = build_dataset(spec, 10000, 115);
    int wrong = 0, at_max = 0;
    for (const auto& s : ds.samples) {
      wrong += independent_answer(s.prompt) != s.answer;
      at_max += static_cast<int>(s.prompt.size()) == spec.max_prompt_len();
    }
    const double frac = at_max / 10000.0;
    ok = ok && wrong == 0 && frac >= 0.87 && frac <= 0.93;
    detail += to_string(k) + " mismatches=" + std::to_string(wrong) + " max_len_frac=" + fmt(frac) + " ";
  }
  return {ok, detail + fmt(seconds_since(t0), 1) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::filesystem::path out = "acceptance_out";
  std::vector<int> only;
  bool strict = false;
  app.add_option("--out", out, "Directory for checkpoints and probe tables");
  app.add_option("--only", only, "Run only these criterion numbers");
  app.add_flag("--strict", strict, "Exit 1 if any criterion fails");
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(out);

  auto wanted = [&](int i) { return only.empty() || std::find(only.begin(), only.end(), i) != only.end(); };
  int failures = 0, errors = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    failures += o.pass ? 0 : 1;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "random-init adjacency", c1_random_init);
  report(2, "init sigma sweep", c2_sigma_sweep);
  report(3, "init mu sweep", c3_mu_sweep);
  report(4, "non-causal control", c4_noncausal);
  report(5, "coefficient simulation", c5_simulation);
  report(6, "dot-product gap", c6_gap);
  if (wanted(7) || wanted(8) || wanted(9)) {
    std::optional<TrainedDesk> desk;
    std::string error;
    try {
      desk = train_desk(out);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto with_desk = [&](auto fn) {
      return [&, fn]() -> Outcome {
        if (!desk) throw std::runtime_error("training failed: " + error);
        return fn(*desk);
      };
    };
    report(7, "desk-scale training", with_desk([](const TrainedDesk& d) { return c7_training(d); }));
    report(8, "variance vs similarity", with_desk([](const TrainedDesk& d) { return c8_variance(d); }));
    report(9, "probe feature ranking", with_desk([&](const TrainedDesk& d) { return c9_probes(d, out); }));
  }
  report(10, "metric unit properties", c10_metrics);
  report(11, "autodiff finite differences", c11_autodiff);
  report(12, "task generator oracles", c12_tasks);
  std::printf("%d criteria failed, %d could not be evaluated\n", failures, errors);
  if (errors > 0) return 1;
  return strict && failures > 0 ? 1 : 0;
}
