#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nope/autodiff.hpp"
#include "nope/tensor.hpp"

namespace nope {

enum class Variant {
  kCausalNope,    // causal attention, no positional encoding
  kNoncausalApe,  // full attention plus learned absolute positional embedding
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

/// N(mu, sigma^2) applied uniformly to every weight matrix and embedding.
struct InitScheme {
  float mu = 0.0f;
  float sigma = 0.02f;
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 2;
  int vocab_size = 25;
  int max_seq_len = 64;
  Variant variant = Variant::kCausalNope;
  InitScheme init;

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;

  // Text key=value form used by checkpoints and config files.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  static ModelConfig from_map(const std::map<std::string, std::string>& kv, ModelConfig base);
};

/// Heads so that head width is 64, with a floor of one head.
int default_heads(int d_model);

struct Block {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, wk, wv, wo;
  Parameter ln2_gain, ln2_bias;
  Parameter w_fc, w_proj;
};

/// Learnable state of the transformer. The LM head reuses `token_embedding`,
/// so the two are the same storage.
struct ModelParams {
  ModelConfig config;
  Parameter token_embedding;       // [vocab x d]
  Parameter position_embedding;    // [max_seq_len x d], noncausal_ape only
  std::vector<Block> blocks;
  Parameter lnf_gain, lnf_bias;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t num_parameters() const;
  void zero_grad();
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// Residual stream per layer: entry 0 is the embedding stage output, entry l
/// the stream after block l. Each entry is [seq_len x d_model].
struct LayerActivations {
  std::vector<Tensor> per_layer;
};

struct ForwardResult {
  Tensor logits;  // [seq_len x vocab]
  LayerActivations acts;
};

/// Batch of token sequences, right-padded to a common length.
struct TokenBatch {
  std::vector<std::vector<int>> sequences;
  int pad_id = 0;

  int seq_len() const;
  std::vector<int> flat_ids() const;  // batch*seq_len ids, padded
  std::vector<int> lengths() const;
};

/// Builds the forward pass on `graph` and returns the [batch*seq_len x vocab]
/// logits node. When `acts` is non-null it receives one node per residual
/// stage (n_layers + 1). Parameters enter the graph with gradient tracking
/// iff `track_grad` is set.
Var build_forward(Graph& graph, ModelParams& params, const TokenBatch& batch, bool track_grad,
                  std::vector<Var>* acts = nullptr);

ForwardResult forward(const ModelParams& params, std::span<const int> tokens);

/// Logits at the last position of every sequence in `batch`, [batch x vocab].
Tensor last_logits(const ModelParams& params, const TokenBatch& batch);

/// Greedy decoding. Stops at `eos` or after `max_new` tokens, and never
/// exceeds max_seq_len. The returned continuation excludes the prompt and
/// includes the EOS token when one was produced.
std::vector<int> generate(const ModelParams& params, std::span<const int> prompt, int max_new, int eos);

/// Greedy decoding for several prompts at once; equivalent to calling
/// generate() on each.
std::vector<std::vector<int>> generate_batch(const ModelParams& params, const std::vector<std::vector<int>>& prompts,
                                             int max_new, int eos);

struct PermutationCheck {
  bool invariant = false;
  double max_abs_diff = 0.0;
};

/// Compares last-position logits of `tokens` against the sequence whose
/// prefix is reordered by `permutation` (permutation[i] = source index for
/// position i). The permutation must fix the last position.
PermutationCheck permutation_equivariance_check(const ModelParams& params, std::span<const int> tokens,
                                                std::span<const int> permutation, double tol = 1e-5);

void zero_positional_embeddings(ModelParams& params);

// Checkpoint: "CNPE", version u32, length-prefixed config text, tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace nope
