#include "nope/probing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nope/analysis.hpp"
#include "nope/training.hpp"

namespace nope {

std::string to_string(ProbeFeature f) {
  switch (f) {
    case ProbeFeature::kEmbedding: return "embedding";
    case ProbeFeature::kVariance: return "variance";
    case ProbeFeature::kCosToLast: return "cos_to_last";
  }
  return "unknown";
}

ProbeFeature parse_probe_feature(const std::string& s) {
  if (s == "embedding") return ProbeFeature::kEmbedding;
  if (s == "variance") return ProbeFeature::kVariance;
  if (s == "cos_to_last") return ProbeFeature::kCosToLast;
  throw std::invalid_argument("unknown probe feature '" + s + "' (expected embedding, variance or cos_to_last)");
}

void ProbeConfig::validate() const {
  if (seq_len < 2) throw std::invalid_argument("probe seq_len must be >= 2");
  if (n_train < 1 || n_test < 1) throw std::invalid_argument("probe splits must be nonempty");
  if (hidden_dim < 1) throw std::invalid_argument("probe hidden_dim must be >= 1");
  if (batch_size < 1 || max_epochs < 1) throw std::invalid_argument("probe batch_size and max_epochs must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("probe val_fraction must be in [0, 1)");
}

std::vector<LayerActivations> collect_activations(const ModelParams& params,
                                                  const std::vector<std::vector<int>>& sequences, int chunk) {
  std::vector<LayerActivations> out;
  out.reserve(sequences.size());
  ModelParams& mut = const_cast<ModelParams&>(params);  // inference only: parameters enter as views
  for (std::size_t start = 0; start < sequences.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(sequences.size(), start + static_cast<std::size_t>(chunk));
    TokenBatch batch;
    batch.sequences.assign(sequences.begin() + static_cast<std::ptrdiff_t>(start),
                           sequences.begin() + static_cast<std::ptrdiff_t>(end));
    const int T = batch.seq_len();
    for (const auto& s : batch.sequences) {
      if (static_cast<int>(s.size()) != T) throw std::invalid_argument("collect_activations needs equal-length sequences");
    }
    Graph g;
    std::vector<Var> acts;
    build_forward(g, mut, batch, false, &acts);
    for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
      LayerActivations la;
      for (Var a : acts) {
        const Tensor& all = g.value(a);
        const int d = all.cols();
        std::vector<float> rows(all.data() + b * static_cast<std::size_t>(T) * d,
                                all.data() + (b + 1) * static_cast<std::size_t>(T) * d);
        la.per_layer.emplace_back(Shape{T, d}, std::move(rows));
      }
      out.push_back(std::move(la));
    }
  }
  return out;
}

ProbeData extract_probe_features(const std::vector<LayerActivations>& acts, int layer, ProbeFeature feature) {
  if (acts.empty()) throw std::invalid_argument("no activations to probe");
  if (layer < 0 || layer >= static_cast<int>(acts.front().per_layer.size())) {
    throw std::invalid_argument("probe layer " + std::to_string(layer) + " is not valid for this model");
  }
  const Tensor& first = acts.front().per_layer[static_cast<std::size_t>(layer)];
  const int T = first.dim(0), d = first.dim(1);
  const int width = feature == ProbeFeature::kEmbedding ? d : 1;
  ProbeData data{Tensor({static_cast<int>(acts.size()) * T, width}), {}};
  data.y.reserve(acts.size() * static_cast<std::size_t>(T));
  int row = 0;
  for (const auto& la : acts) {
    const Tensor& x = la.per_layer[static_cast<std::size_t>(layer)];
    if (x.dim(0) != T) throw std::invalid_argument("probe sequences must share one length");
    std::vector<double> var;
    if (feature == ProbeFeature::kVariance) var = variance_sequence(x);
    double last_norm = 0.0;
    if (feature == ProbeFeature::kCosToLast) {
      for (float v : x.row(T - 1)) last_norm += static_cast<double>(v) * v;
      last_norm = std::sqrt(last_norm);
    }
    for (int p = 0; p < T; ++p, ++row) {
      auto out = data.x.row(row);
      switch (feature) {
        case ProbeFeature::kEmbedding: {
          auto src = x.row(p);
          std::copy(src.begin(), src.end(), out.begin());
          break;
        }
        case ProbeFeature::kVariance:
          out[0] = static_cast<float>(var[static_cast<std::size_t>(p)]);
          break;
        case ProbeFeature::kCosToLast: {
          if (p == T - 1) {
            out[0] = last_norm > 0.0 ? 1.0f : 0.0f;
            break;
          }
          double dot = 0.0, norm = 0.0;
          auto a = x.row(p);
          auto b = x.row(T - 1);
          for (int k = 0; k < d; ++k) {
            dot += static_cast<double>(a[k]) * b[k];
            norm += static_cast<double>(a[k]) * a[k];
          }
          norm = std::sqrt(norm);
          out[0] = norm > 0.0 && last_norm > 0.0 ? static_cast<float>(dot / (norm * last_norm)) : 0.0f;
          break;
        }
      }
      data.y.push_back(static_cast<float>(p));
    }
  }
  return data;
}

ProbeData extract_probe_features(const ModelParams& params, const std::vector<std::vector<int>>& sequences, int layer,
                                 ProbeFeature feature) {
  return extract_probe_features(collect_activations(params, sequences), layer, feature);
}

namespace {

Tensor standardize(const Tensor& x, const std::vector<float>& mean, const std::vector<float>& std) {
  Tensor out = x;
  const int cols = x.cols();
  for (int r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    for (int c = 0; c < cols; ++c) row[c] = (row[c] - mean[c]) / std[c];
  }
  return out;
}

Var probe_forward(Graph& g, Probe& probe, Var x, bool track) {
  auto bind = [&](Parameter& p) { return track ? g.param(p) : g.view(p.value); };
  Var h = x;
  for (std::size_t i = 0; i < probe.weights.size(); ++i) {
    h = g.add_bias(g.matmul(h, bind(probe.weights[i])), bind(probe.biases[i]));
    if (i + 1 < probe.weights.size()) h = g.relu(h);
  }
  return h;
}

}  // namespace

std::vector<float> Probe::predict(const Tensor& x) const {
  Probe& self = const_cast<Probe&>(*this);  // views only; no gradient state is touched
  Graph g;
  Var in = g.constant(standardize(x, feature_mean, feature_std));
  Var out = probe_forward(g, self, in, false);
  return g.value(out).vec();
}

Probe train_probe(const ProbeData& train, const ProbeConfig& cfg) {
  cfg.validate();
  const int rows_total = train.x.rows();
  const int width = train.x.cols();
  if (rows_total == 0 || static_cast<int>(train.y.size()) != rows_total) {
    throw std::invalid_argument("probe training data is empty or ragged");
  }
  int n_val = static_cast<int>(rows_total * cfg.val_fraction);
  if (rows_total % cfg.seq_len == 0 && n_val >= cfg.seq_len) n_val -= n_val % cfg.seq_len;
  if (n_val >= rows_total) n_val = 0;
  const int n = rows_total - n_val;

  Probe probe;
  probe.feature_mean.assign(static_cast<std::size_t>(width), 0.0f);
  probe.feature_std.assign(static_cast<std::size_t>(width), 1.0f);
  for (int c = 0; c < width; ++c) {
    double mean = 0.0, ss = 0.0;
    for (int r = 0; r < n; ++r) mean += train.x.at(r, c);
    mean /= n;
    for (int r = 0; r < n; ++r) ss += (train.x.at(r, c) - mean) * (train.x.at(r, c) - mean);
    const double sd = std::sqrt(ss / n);
    probe.feature_mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    probe.feature_std[static_cast<std::size_t>(c)] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;
  }
  const Tensor xs = standardize(train.x, probe.feature_mean, probe.feature_std);
  Tensor x_val({std::max(n_val, 1), width});
  std::vector<float> y_val(train.y.begin() + n, train.y.end());
  for (int r = 0; r < n_val; ++r) {
    auto s = xs.row(n + r);
    std::copy(s.begin(), s.end(), x_val.row(r).begin());
  }

  Rng rng(derive_seed(cfg.seed, 0x70726f6265));
  const std::vector<int> dims{width, cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim, 1};
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(dims[i]));
    std::uniform_real_distribution<float> u(-bound, bound);
    Parameter w{"probe.w" + std::to_string(i), Tensor({dims[i], dims[i + 1]}), Tensor(), false};
    Parameter b{"probe.b" + std::to_string(i), Tensor({dims[i + 1]}), Tensor(), false};
    for (auto& v : w.value.vec()) v = u(rng);
    for (auto& v : b.value.vec()) v = u(rng);
    probe.weights.push_back(std::move(w));
    probe.biases.push_back(std::move(b));
  }
  std::vector<Parameter*> plist;
  for (auto& p : probe.weights) plist.push_back(&p);
  for (auto& p : probe.biases) plist.push_back(&p);

  TrainConfig opt_cfg;
  opt_cfg.beta1 = 0.9f;
  opt_cfg.beta2 = 0.999f;
  opt_cfg.weight_decay = 0.0f;
  AdamW opt(plist, opt_cfg);

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_weights;
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      const int rows = end - start;
      Tensor xb({rows, width});
      std::vector<float> yb(static_cast<std::size_t>(rows));
      for (int r = 0; r < rows; ++r) {
        const auto src = static_cast<int>(order[static_cast<std::size_t>(start + r)]);
        auto s = xs.row(src);
        std::copy(s.begin(), s.end(), xb.row(r).begin());
        yb[static_cast<std::size_t>(r)] = train.y[static_cast<std::size_t>(src)];
      }
      for (Parameter* p : plist) p->zero_grad();
      Graph g;
      Var pred = probe_forward(g, probe, g.constant(std::move(xb)), true);
      Var loss = g.mse(pred, yb);
      const double l = g.value(loss)[0];
      if (!std::isfinite(l)) {
        throw std::runtime_error("probe training diverged at epoch " + std::to_string(epoch));
      }
      g.backward(loss);
      opt.step(cfg.lr);
      epoch_loss += l * rows;
    }
    epoch_loss /= n;
    probe.epochs_run = epoch + 1;
    double monitored = epoch_loss;
    if (n_val > 0) {
      Graph g;
      Var pred = probe_forward(g, probe, g.constant(x_val), false);
      monitored = g.scalar(g.mse(pred, y_val));
    }
    if (monitored < best * (1.0 - cfg.min_improvement)) {
      best = monitored;
      stale = 0;
      best_weights.clear();
      for (const Parameter* p : plist) best_weights.push_back(p->value);
      probe.final_train_mse = epoch_loss;
      probe.best_val_mse = n_val > 0 ? monitored : 0.0;
    } else if (++stale >= cfg.patience) {
      break;
    }
    if (monitored < 1e-10) break;
  }
  for (std::size_t i = 0; i < best_weights.size(); ++i) plist[i]->value = best_weights[i];
  return probe;
}

ProbeReport evaluate_predictions(const std::vector<float>& predictions, const std::vector<float>& targets, int seq_len) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw std::invalid_argument("probe evaluation needs equal, nonempty prediction and target lists");
  }
  const double n = static_cast<double>(predictions.size());
  double mp = 0.0, mt = 0.0, se = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    mp += predictions[i];
    mt += targets[i];
    const double e = static_cast<double>(predictions[i]) - targets[i];
    se += e * e;
  }
  mp /= n;
  mt /= n;
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double a = predictions[i] - mp, b = targets[i] - mt;
    cov += a * b;
    vp += a * a;
    vt += b * b;
  }
  ProbeReport r;
  r.seq_len = seq_len;
  r.rmse = std::sqrt(se / n);
  r.nrmse = r.rmse / seq_len;
  if (vp <= 1e-12 * n || vt <= 0.0) {
    r.pearson_r = 0.0;
    r.r_undefined = true;
  } else {
    r.pearson_r = std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
  }
  r.predictions_by_position.resize(static_cast<std::size_t>(seq_len));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = static_cast<int>(std::lround(targets[i]));
    if (p >= 0 && p < seq_len) r.predictions_by_position[static_cast<std::size_t>(p)].push_back(predictions[i]);
  }
  return r;
}

ProbeReport evaluate_probe(const Probe& probe, const ProbeData& test, int seq_len) {
  if (test.x.rows() == 0) throw std::invalid_argument("probe test set is empty");
  return evaluate_predictions(probe.predict(test.x), test.y, seq_len);
}

ProbeSequences build_probe_sequences(int seq_len, int n_train, int n_test, std::uint64_t seed, const Vocab& vocab) {
  auto draw = [&](int n, int lo, std::uint64_t stream) {
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(stream, static_cast<std::uint64_t>(i)));
      std::uniform_int_distribution<int> digit(lo, lo + 4);
      std::vector<int> seq;
      for (int p = 0; p < seq_len; ++p) seq.push_back(vocab.id(static_cast<char>('0' + digit(rng))));
      out.push_back(std::move(seq));
    }
    return out;
  };
  return {draw(n_train, 5, derive_seed(seed, 1)), draw(n_test, 0, derive_seed(seed, 2))};
}

std::vector<ProbeResult> run_probes(const ModelParams& params, const std::vector<int>& layers,
                                    const std::vector<ProbeFeature>& features, const ProbeConfig& base) {
  base.validate();
  const ProbeSequences seqs = build_probe_sequences(base.seq_len, base.n_train, base.n_test, base.seed);
  const auto train_acts = collect_activations(params, seqs.train);
  const auto test_acts = collect_activations(params, seqs.test);
  std::vector<ProbeResult> out;
  for (int layer : layers) {
    for (ProbeFeature f : features) {
      ProbeConfig cfg = base;
      cfg.layer = layer;
      cfg.feature = f;
      cfg.seed = derive_seed(base.seed, static_cast<std::uint64_t>(layer * 16 + static_cast<int>(f)));
      const ProbeData tr = extract_probe_features(train_acts, layer, f);
      const ProbeData te = extract_probe_features(test_acts, layer, f);
      const Probe probe = train_probe(tr, cfg);
      out.push_back({layer, f, evaluate_probe(probe, te, base.seq_len), probe.epochs_run});
    }
  }
  return out;
}

void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,feature,pearson_r,nrmse\n" << std::setprecision(9);
  for (const auto& r : results) {
    out << r.layer << ',' << to_string(r.feature) << ',' << r.report.pearson_r << ',' << r.report.nrmse << '\n';
  }
}

void write_probe_residuals_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,feature,position,prediction,residual\n" << std::setprecision(7);
  for (const auto& r : results) {
    const auto& byp = r.report.predictions_by_position;
    for (std::size_t p = 0; p < byp.size(); ++p) {
      for (float pred : byp[p]) {
        out << r.layer << ',' << to_string(r.feature) << ',' << p << ',' << pred << ',' << pred - static_cast<float>(p)
            << '\n';
      }
    }
  }
}

}  // namespace nope
