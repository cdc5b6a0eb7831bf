#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nope/kv_config.hpp"
#include "nope/model.hpp"
#include "nope/tasks.hpp"

namespace nope {

enum class LrDecay { kCosine, kNone };

struct TrainConfig {
  int batch_size = 64;
  int max_steps = 8000;
  float lr = 1e-3f;
  int warmup_steps = 200;
  LrDecay lr_decay = LrDecay::kCosine;
  float min_lr_ratio = 0.1f;
  float weight_decay = 0.1f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float grad_clip = 1.0f;  // global-norm clip; <= 0 disables
  int eval_every = 250;
  int eval_samples = 256;     // test samples used for the periodic early-stop check
  int final_eval_samples = 0;  // 0 = whole test set
  double target_accuracy = 0.90;
  std::uint64_t seed = 0;
  int log_every = 0;  // 0 = silent

  void validate() const;
  static TrainConfig from_map(const KeyValues& kv, TrainConfig base);
  KeyValues to_map() const;
};

float learning_rate_at(const TrainConfig& cfg, int step);

/// Decoupled-weight-decay Adam. Weight decay applies only to parameters
/// flagged `decay` (the matrices).
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, const TrainConfig& cfg);
  void step(float lr);
  int steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  float beta1_, beta2_, weight_decay_;
  int t_ = 0;
};

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

/// Next-token batch: inputs are samples' `full` strings without the final
/// EOS, targets are shifted by one, and every target outside answer+EOS is
/// ignore_index.
struct TrainBatch {
  TokenBatch inputs;
  std::vector<int> targets;  // batch*seq_len
  static constexpr int kIgnore = -1;
};

TrainBatch make_train_batch(const std::vector<TaskSample>& samples, std::span<const std::size_t> indices,
                            const Vocab& vocab);

/// Builds forward + masked cross-entropy. `logits_out` receives the logits node.
Var build_loss(Graph& g, ModelParams& params, const TrainBatch& batch, Var* logits_out = nullptr);

struct TrainStep {
  int step = 0;
  double loss = 0.0;
  double accuracy = -1.0;  // -1 when not evaluated at this step
  double lr = 0.0;
};

struct TrainReport {
  std::vector<TrainStep> history;
  double final_accuracy = 0.0;
  double wall_seconds = 0.0;
  int steps = 0;
  bool reached_target = false;
  std::string checkpoint_path;
};

/// Trains in place. Stops once the periodic check reaches target_accuracy or
/// after max_steps, then measures final accuracy on the test set.
/// Throws std::runtime_error if the loss becomes non-finite.
TrainReport train(ModelParams& params, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg);

/// Exact match of a generated continuation against answer + EOS.
bool exact_match(const std::vector<int>& generated, const std::string& answer, const Vocab& vocab);

/// Fraction of the first `n` samples whose greedy completion is exactly
/// answer + EOS. n <= 0 evaluates every sample.
double evaluate_accuracy(const ModelParams& params, const std::vector<TaskSample>& samples, int n,
                         const Vocab& vocab = default_vocab());

void write_train_report_csv(const TrainReport& report, const std::filesystem::path& path);

}  // namespace nope
