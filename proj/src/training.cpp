#include "nope/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nope {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid train config: " + what); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (lr < 0.0f) fail("lr must be >= 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) fail("target_accuracy must be in (0, 1]");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f) fail("betas must be in [0, 1)");
}

TrainConfig TrainConfig::from_map(const KeyValues& kv, TrainConfig base) {
  base.batch_size = get_int(kv, "batch_size", base.batch_size);
  base.max_steps = get_int(kv, "max_steps", base.max_steps);
  base.lr = static_cast<float>(get_double(kv, "lr", base.lr));
  base.warmup_steps = get_int(kv, "warmup_steps", base.warmup_steps);
  if (kv.count("lr_decay")) {
    const std::string& d = kv.at("lr_decay");
    if (d == "cosine") {
      base.lr_decay = LrDecay::kCosine;
    } else if (d == "none") {
      base.lr_decay = LrDecay::kNone;
    } else {
      throw std::invalid_argument("lr_decay must be cosine or none, got '" + d + "'");
    }
  }
  base.min_lr_ratio = static_cast<float>(get_double(kv, "min_lr_ratio", base.min_lr_ratio));
  base.weight_decay = static_cast<float>(get_double(kv, "weight_decay", base.weight_decay));
  base.beta1 = static_cast<float>(get_double(kv, "beta1", base.beta1));
  base.beta2 = static_cast<float>(get_double(kv, "beta2", base.beta2));
  base.grad_clip = static_cast<float>(get_double(kv, "grad_clip", base.grad_clip));
  base.eval_every = get_int(kv, "eval_every", base.eval_every);
  base.eval_samples = get_int(kv, "eval_samples", base.eval_samples);
  base.final_eval_samples = get_int(kv, "final_eval_samples", base.final_eval_samples);
  base.target_accuracy = get_double(kv, "target_accuracy", base.target_accuracy);
  base.log_every = get_int(kv, "log_every", base.log_every);
  if (kv.count("train_seed")) base.seed = static_cast<std::uint64_t>(std::stoull(kv.at("train_seed")));
  base.validate();
  return base;
}

KeyValues TrainConfig::to_map() const {
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
  };
  return {{"batch_size", std::to_string(batch_size)},
          {"max_steps", std::to_string(max_steps)},
          {"lr", num(lr)},
          {"warmup_steps", std::to_string(warmup_steps)},
          {"lr_decay", lr_decay == LrDecay::kCosine ? "cosine" : "none"},
          {"min_lr_ratio", num(min_lr_ratio)},
          {"weight_decay", num(weight_decay)},
          {"beta1", num(beta1)},
          {"beta2", num(beta2)},
          {"grad_clip", num(grad_clip)},
          {"eval_every", std::to_string(eval_every)},
          {"eval_samples", std::to_string(eval_samples)},
          {"final_eval_samples", std::to_string(final_eval_samples)},
          {"target_accuracy", num(target_accuracy)},
          {"train_seed", std::to_string(seed)}};
}

float learning_rate_at(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<float>(step + 1) / static_cast<float>(cfg.warmup_steps);
  }
  if (cfg.lr_decay == LrDecay::kNone) return cfg.lr;
  const int span = std::max(1, cfg.max_steps - cfg.warmup_steps);
  const double progress = std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
  const double min_lr = static_cast<double>(cfg.lr) * cfg.min_lr_ratio;
  return static_cast<float>(min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress)));
}

AdamW::AdamW(std::vector<Parameter*> params, const TrainConfig& cfg)
    : params_(std::move(params)), beta1_(cfg.beta1), beta2_(cfg.beta2), weight_decay_(cfg.weight_decay) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step(float lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t_);
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t_);
  constexpr float kEps = 1e-8f;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.empty()) continue;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const float decay = p.decay ? lr * weight_decay_ : 0.0f;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const float g = p.grad[j];
      m[j] = beta1_ * m[j] + (1.0f - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0f - beta2_) * g * g;
      const float mhat = static_cast<float>(m[j] / bc1);
      const float vhat = static_cast<float>(v[j] / bc2);
      p.value[j] -= decay * p.value[j];
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (float g : p->grad.vec()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (Parameter* p : params)
      for (float& g : p->grad.vec()) g *= s;
  }
  return norm;
}

TrainBatch make_train_batch(const std::vector<TaskSample>& samples, std::span<const std::size_t> indices,
                            const Vocab& vocab) {
  TrainBatch batch;
  batch.inputs.pad_id = vocab.pad_id();
  std::vector<std::vector<int>> tgts;
  for (std::size_t idx : indices) {
    const TaskSample& s = samples.at(idx);
    const std::vector<int> ids = vocab.tokenize(s.full);
    if (ids.size() < 2) throw std::invalid_argument("training sample too short: '" + s.full + "'");
    std::vector<int> in(ids.begin(), ids.end() - 1);
    std::vector<int> tg(ids.begin() + 1, ids.end());
    const int first_answer_target = static_cast<int>(s.prompt.size()) - 1;
    for (int t = 0; t < first_answer_target && t < static_cast<int>(tg.size()); ++t) tg[static_cast<std::size_t>(t)] = TrainBatch::kIgnore;
    batch.inputs.sequences.push_back(std::move(in));
    tgts.push_back(std::move(tg));
  }
  const int T = batch.inputs.seq_len();
  for (auto& tg : tgts) {
    tg.resize(static_cast<std::size_t>(T), TrainBatch::kIgnore);
    batch.targets.insert(batch.targets.end(), tg.begin(), tg.end());
  }
  return batch;
}

Var build_loss(Graph& g, ModelParams& params, const TrainBatch& batch, Var* logits_out) {
  Var logits = build_forward(g, params, batch.inputs, true);
  if (logits_out) *logits_out = logits;
  return g.cross_entropy(logits, batch.targets, TrainBatch::kIgnore);
}

bool exact_match(const std::vector<int>& generated, const std::string& answer, const Vocab& vocab) {
  return generated == vocab.tokenize(answer + kEos);
}

double evaluate_accuracy(const ModelParams& params, const std::vector<TaskSample>& samples, int n,
                         const Vocab& vocab) {
  const std::size_t count = n <= 0 ? samples.size() : std::min(samples.size(), static_cast<std::size_t>(n));
  if (count == 0) return 0.0;
  constexpr std::size_t kChunk = 128;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t end = std::min(count, start + kChunk);
    std::vector<std::vector<int>> prompts;
    int max_answer = 0;
    for (std::size_t i = start; i < end; ++i) {
      prompts.push_back(vocab.tokenize(samples[i].prompt));
      max_answer = std::max(max_answer, static_cast<int>(samples[i].answer.size()));
    }
    // One extra token beyond the longest answer decides EOS placement.
    const auto outs = generate_batch(params, prompts, max_answer + 1, vocab.eos_id());
    for (std::size_t i = start; i < end; ++i) {
      if (exact_match(outs[i - start], samples[i].answer, vocab)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(count);
}

TrainReport train(ModelParams& params, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.samples.empty()) throw std::invalid_argument("train: empty training set");
  const Vocab& vocab = default_vocab();
  if (params.config.vocab_size < vocab.size()) throw std::invalid_argument("train: model vocab smaller than task vocab");

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Parameter*> plist = params.parameters();
  AdamW opt(plist, cfg);
  Rng rng(derive_seed(cfg.seed, 0x6261746368));
  std::uniform_int_distribution<std::size_t> pick(0, train_set.samples.size() - 1);

  TrainReport report;
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  int step = 0;
  for (; step < cfg.max_steps; ++step) {
    for (auto& i : idx) i = pick(rng);
    const TrainBatch batch = make_train_batch(train_set.samples, idx, vocab);
    params.zero_grad();
    double loss = 0.0;
    {
      Graph g;
      Var l = build_loss(g, params, batch);
      loss = g.value(l)[0];
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step) +
                                 " (lr=" + std::to_string(learning_rate_at(cfg, step)) + ")");
      }
      g.backward(l);
    }
    if (cfg.grad_clip > 0.0f) clip_grad_norm(plist, cfg.grad_clip);
    const float lr = learning_rate_at(cfg, step);
    opt.step(lr);

    TrainStep rec{step + 1, loss, -1.0, lr};
    const bool eval_now = (step + 1) % cfg.eval_every == 0 && !test_set.samples.empty();
    if (eval_now) rec.accuracy = evaluate_accuracy(params, test_set.samples, cfg.eval_samples, vocab);
    report.history.push_back(rec);
    if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || eval_now)) {
      std::cerr << "step " << step + 1 << " loss " << loss << " lr " << lr;
      if (eval_now) std::cerr << " acc " << rec.accuracy;
      std::cerr << '\n';
    }
    if (eval_now && rec.accuracy >= cfg.target_accuracy) {
      ++step;
      break;
    }
  }
  report.steps = step;
  if (!test_set.samples.empty()) {
    report.final_accuracy = evaluate_accuracy(params, test_set.samples, cfg.final_eval_samples, vocab);
  }
  report.reached_target = report.final_accuracy >= cfg.target_accuracy;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_train_report_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss,accuracy\n";
  out << std::setprecision(9);
  for (const auto& r : report.history) {
    out << r.step << ',' << r.loss << ',';
    if (r.accuracy >= 0.0) out << r.accuracy;
    out << '\n';
  }
}

}  // namespace nope
