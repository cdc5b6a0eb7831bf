#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nope/tensor.hpp"

namespace nope {

/// Learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // subject to weight decay in AdamW

  void zero_grad();
};

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Layout of a packed multi-head attention input: `batch` sequences of
/// `seq_len` rows each, stacked into a [batch*seq_len x d_model] matrix.
struct AttentionShape {
  int batch = 1;
  int seq_len = 1;
  int n_heads = 1;
  bool causal = true;
  // Optional per-sequence valid length; keys at positions >= length are masked.
  std::vector<int> lengths;
};

/// Define-by-run reverse-mode autodiff tape.
///
/// Every op appends a node holding its forward value and a closure that
/// propagates the node's gradient into its inputs. Nodes are stored in
/// creation order, which is a topological order by construction.
/// Parameter nodes alias the Parameter's storage and accumulate into
/// Parameter::grad, so a tensor used twice (tied weights) receives the sum
/// of both contributions.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);  // owned, receives gradients
  Var param(Parameter& p);
  Var view(const Tensor& value);  // aliases external storage, no gradient

  const Tensor& value(Var v) const;
  // Scalar losses keep their f64 reduction; other nodes fall back to the f32 value.
  double scalar(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::string_view op(Var v) const;
  const std::vector<int>& inputs(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // 2-D ops
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var softmax_rows(Var x, bool causal);

  Var reshape(Var a, Shape shape);
  Var add(Var a, Var b);
  Var add_bias(Var x, Var bias);  // bias broadcast over rows
  Var mul(Var a, Var b);
  Var scale(Var a, float s);
  Var gelu(Var a);  // tanh approximation
  Var relu(Var a);
  Var embedding(Var table, std::vector<int> ids);
  Var layer_norm(Var x, Var gain, Var bias);
  Var attention(Var q, Var k, Var v, AttentionShape shape);

  // Reductions to a scalar of shape [1].
  Var sum(Var a);
  Var dot(Var a, Var b);
  Var cross_entropy(Var logits, std::span<const int> targets, int ignore_index);
  Var mse(Var pred, std::span<const float> targets);

  void backward(Var loss);

  static constexpr float kLayerNormEps = 1e-5f;

 private:
  struct Node {
    std::string_view op;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* ext_value = nullptr;
    Tensor grad;
    Tensor* ext_grad = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;
    std::optional<double> exact;
  };

  Var push(std::string_view op, std::vector<int> inputs, Tensor value);
  const Tensor& val(int id) const;
  Tensor& grad_ref(int id);
  bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void check(Var v) const;

  std::vector<Node> nodes_;
};

/// Relative error between reverse-mode and central-difference gradients,
/// maximized over sampled coordinates of one parameter:
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
/// `loss_fn` must rebuild the full computation on a fresh graph and return the
/// scalar loss node.
struct FiniteDiffResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
};

FiniteDiffResult finite_diff_check(const std::function<Var(Graph&)>& loss_fn, Parameter& param,
                                   double epsilon = 1e-3, int n_coords = 20, std::uint64_t seed = 0);

float gelu_tanh(float x);

}  // namespace nope
