#include "nope/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "nope/kv_config.hpp"

namespace nope {

std::string to_string(Variant v) { return v == Variant::kCausalNope ? "causal_nope" : "noncausal_ape"; }

Variant parse_variant(const std::string& s) {
  if (s == "causal_nope") return Variant::kCausalNope;
  if (s == "noncausal_ape") return Variant::kNoncausalApe;
  throw std::invalid_argument("unknown model variant '" + s + "' (expected causal_nope or noncausal_ape)");
}

int default_heads(int d_model) { return std::max(1, d_model / 64); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model config: " + what); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 2) fail("d_model must be >= 2");
  if (n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (!(init.sigma > 0.0f)) fail("init sigma must be > 0");
}

std::string ModelConfig::to_text() const {
  KeyValues kv;
  kv["n_layers"] = std::to_string(n_layers);
  kv["d_model"] = std::to_string(d_model);
  kv["n_heads"] = std::to_string(n_heads);
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["max_seq_len"] = std::to_string(max_seq_len);
  kv["variant"] = to_string(variant);
  std::ostringstream mu, sigma;
  mu.precision(9);
  sigma.precision(9);
  mu << init.mu;
  sigma << init.sigma;
  kv["init_mu"] = mu.str();
  kv["init_sigma"] = sigma.str();
  return format_key_values(kv);
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv, ModelConfig base) {
  base.n_layers = get_int(kv, "n_layers", base.n_layers);
  const int old_d = base.d_model;
  base.d_model = get_int(kv, "d_model", base.d_model);
  if (kv.count("n_heads")) {
    base.n_heads = get_int(kv, "n_heads", base.n_heads);
  } else if (base.d_model != old_d) {
    base.n_heads = default_heads(base.d_model);
  }
  base.vocab_size = get_int(kv, "vocab_size", base.vocab_size);
  base.max_seq_len = get_int(kv, "max_seq_len", base.max_seq_len);
  if (kv.count("variant")) base.variant = parse_variant(kv.at("variant"));
  base.init.mu = static_cast<float>(get_double(kv, "init_mu", base.init.mu));
  base.init.sigma = static_cast<float>(get_double(kv, "init_sigma", base.init.sigma));
  base.validate();
  return base;
}

ModelConfig ModelConfig::from_text(const std::string& text) { return from_map(parse_key_values(text), ModelConfig{}); }

std::vector<Parameter*> ModelParams::parameters() {
  std::vector<Parameter*> out{&token_embedding};
  if (config.variant == Variant::kNoncausalApe) out.push_back(&position_embedding);
  for (Block& b : blocks) {
    for (Parameter* p :
         {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w_fc, &b.w_proj}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  return out;
}

std::vector<const Parameter*> ModelParams::parameters() const {
  auto mut = const_cast<ModelParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t ModelParams::num_parameters() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

void ModelParams::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(config.init.mu, config.init.sigma);
  const int d = config.d_model;

  auto weight = [&](std::string name, Shape shape) {
    Parameter p{std::move(name), Tensor(std::move(shape)), Tensor(), true};
    for (auto& x : p.value.vec()) x = normal(rng);
    return p;
  };
  auto constant = [](std::string name, int n, float v) {
    return Parameter{std::move(name), Tensor({n}, v), Tensor(), false};
  };

  ModelParams m;
  m.config = config;
  m.token_embedding = weight("wte", {config.vocab_size, d});
  if (config.variant == Variant::kNoncausalApe) m.position_embedding = weight("wpe", {config.max_seq_len, d});
  m.blocks.resize(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    Block& b = m.blocks[static_cast<std::size_t>(l)];
    const std::string pre = "h" + std::to_string(l) + ".";
    b.ln1_gain = constant(pre + "ln1.g", d, 1.0f);
    b.ln1_bias = constant(pre + "ln1.b", d, 0.0f);
    b.wq = weight(pre + "attn.wq", {d, d});
    b.wk = weight(pre + "attn.wk", {d, d});
    b.wv = weight(pre + "attn.wv", {d, d});
    b.wo = weight(pre + "attn.wo", {d, d});
    b.ln2_gain = constant(pre + "ln2.g", d, 1.0f);
    b.ln2_bias = constant(pre + "ln2.b", d, 0.0f);
    b.w_fc = weight(pre + "mlp.w_fc", {d, 4 * d});
    b.w_proj = weight(pre + "mlp.w_proj", {4 * d, d});
  }
  m.lnf_gain = constant("lnf.g", d, 1.0f);
  m.lnf_bias = constant("lnf.b", d, 0.0f);
  return m;
}

int TokenBatch::seq_len() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n = std::max(n, s.size());
  return static_cast<int>(n);
}

std::vector<int> TokenBatch::flat_ids() const {
  const int T = seq_len();
  std::vector<int> ids;
  ids.reserve(sequences.size() * static_cast<std::size_t>(T));
  for (const auto& s : sequences) {
    ids.insert(ids.end(), s.begin(), s.end());
    ids.insert(ids.end(), static_cast<std::size_t>(T) - s.size(), pad_id);
  }
  return ids;
}

std::vector<int> TokenBatch::lengths() const {
  std::vector<int> out;
  for (const auto& s : sequences) out.push_back(static_cast<int>(s.size()));
  return out;
}

namespace {

template <typename Params, typename Bind>
Var forward_impl(Graph& g, Params& params, const TokenBatch& batch, Bind bind, std::vector<Var>* acts) {
  const ModelConfig& cfg = params.config;
  if (batch.sequences.empty()) throw std::invalid_argument("forward: empty batch");
  const int T = batch.seq_len();
  if (T < 1) throw std::invalid_argument("forward: empty sequence");
  if (T > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  for (const auto& s : batch.sequences) {
    if (s.empty()) throw std::invalid_argument("forward: empty sequence in batch");
    for (int id : s) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw std::out_of_range("forward: token id " + std::to_string(id) + " outside vocab of size " +
                                std::to_string(cfg.vocab_size));
      }
    }
  }
  const int B = static_cast<int>(batch.sequences.size());
  const bool causal = cfg.variant == Variant::kCausalNope;

  Var wte = bind(params.token_embedding);
  Var x = g.embedding(wte, batch.flat_ids());
  if (cfg.variant == Variant::kNoncausalApe) {
    std::vector<int> positions;
    positions.reserve(static_cast<std::size_t>(B) * T);
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < T; ++t) positions.push_back(t);
    x = g.add(x, g.embedding(bind(params.position_embedding), std::move(positions)));
  }
  if (acts) {
    acts->clear();
    acts->push_back(x);
  }

  AttentionShape shape{B, T, cfg.n_heads, causal, batch.lengths()};
  auto linear = [&](Var in, auto& w) { return g.matmul(in, bind(w)); };
  for (auto& blk : params.blocks) {
    Var h = g.layer_norm(x, bind(blk.ln1_gain), bind(blk.ln1_bias));
    Var q = linear(h, blk.wq);
    Var k = linear(h, blk.wk);
    Var v = linear(h, blk.wv);
    Var a = g.attention(q, k, v, shape);
    x = g.add(x, linear(a, blk.wo));
    Var h2 = g.layer_norm(x, bind(blk.ln2_gain), bind(blk.ln2_bias));
    Var f = linear(g.gelu(linear(h2, blk.w_fc)), blk.w_proj);
    x = g.add(x, f);
    if (acts) acts->push_back(x);
  }
  Var xf = g.layer_norm(x, bind(params.lnf_gain), bind(params.lnf_bias));
  return g.matmul(xf, g.transpose(wte));
}

}  // namespace

Var build_forward(Graph& graph, ModelParams& params, const TokenBatch& batch, bool track_grad,
                  std::vector<Var>* acts) {
  if (track_grad) {
    return forward_impl(graph, params, batch, [&](Parameter& p) { return graph.param(p); }, acts);
  }
  return forward_impl(graph, params, batch, [&](Parameter& p) { return graph.view(p.value); }, acts);
}

namespace {

Var build_inference(Graph& graph, const ModelParams& params, const TokenBatch& batch, std::vector<Var>* acts) {
  return forward_impl(graph, params, batch, [&](const Parameter& p) { return graph.view(p.value); }, acts);
}

}  // namespace

ForwardResult forward(const ModelParams& params, std::span<const int> tokens) {
  TokenBatch batch{{std::vector<int>(tokens.begin(), tokens.end())}, 0};
  Graph g;
  std::vector<Var> acts;
  Var logits = build_inference(g, params, batch, &acts);
  ForwardResult out;
  out.logits = g.value(logits);
  for (Var a : acts) out.acts.per_layer.push_back(g.value(a));
  return out;
}

Tensor last_logits(const ModelParams& params, const TokenBatch& batch) {
  Graph g;
  Var logits = build_inference(g, params, batch, nullptr);
  const Tensor& all = g.value(logits);
  const int T = batch.seq_len();
  const int V = all.cols();
  const int B = static_cast<int>(batch.sequences.size());
  Tensor out({B, V});
  for (int b = 0; b < B; ++b) {
    const int row = b * T + static_cast<int>(batch.sequences[static_cast<std::size_t>(b)].size()) - 1;
    auto src = all.row(row);
    std::copy(src.begin(), src.end(), out.row(b).begin());
  }
  return out;
}

std::vector<std::vector<int>> generate_batch(const ModelParams& params, const std::vector<std::vector<int>>& prompts,
                                             int max_new, int eos) {
  const std::size_t n = prompts.size();
  std::vector<std::vector<int>> out(n);
  std::vector<std::vector<int>> seqs = prompts;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    if (prompts[i].empty()) throw std::invalid_argument("generate: prompt must be nonempty");
    if (static_cast<int>(prompts[i].size()) < params.config.max_seq_len) active.push_back(i);
  }
  for (int step = 0; step < max_new && !active.empty(); ++step) {
    TokenBatch batch;
    batch.sequences.reserve(active.size());
    for (std::size_t i : active) batch.sequences.push_back(seqs[i]);
    const Tensor logits = last_logits(params, batch);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      auto row = logits.row(static_cast<int>(r));
      const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      const std::size_t i = active[r];
      out[i].push_back(next);
      seqs[i].push_back(next);
      if (next != eos && static_cast<int>(seqs[i].size()) < params.config.max_seq_len) still.push_back(i);
    }
    active = std::move(still);
  }
  return out;
}

std::vector<int> generate(const ModelParams& params, std::span<const int> prompt, int max_new, int eos) {
  return generate_batch(params, {std::vector<int>(prompt.begin(), prompt.end())}, max_new, eos).front();
}

PermutationCheck permutation_equivariance_check(const ModelParams& params, std::span<const int> tokens,
                                                std::span<const int> permutation, double tol) {
  const std::size_t n = tokens.size();
  if (permutation.size() != n) throw std::invalid_argument("permutation length differs from token count");
  if (n == 0 || permutation[n - 1] != static_cast<int>(n - 1)) {
    throw std::invalid_argument("permutation must fix the last position");
  }
  std::vector<int> seen(n, 0);
  std::vector<int> permuted(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int src = permutation[i];
    if (src < 0 || static_cast<std::size_t>(src) >= n || seen[static_cast<std::size_t>(src)]++) {
      throw std::invalid_argument("not a permutation");
    }
    permuted[i] = tokens[static_cast<std::size_t>(src)];
  }
  TokenBatch a{{std::vector<int>(tokens.begin(), tokens.end())}, 0};
  TokenBatch b{{permuted}, 0};
  const Tensor la = last_logits(params, a);
  const Tensor lb = last_logits(params, b);
  PermutationCheck res;
  for (std::size_t i = 0; i < la.size(); ++i) {
    res.max_abs_diff = std::max(res.max_abs_diff, static_cast<double>(std::abs(la[i] - lb[i])));
  }
  res.invariant = res.max_abs_diff <= tol;
  return res;
}

void zero_positional_embeddings(ModelParams& params) {
  if (!params.position_embedding.value.empty()) params.position_embedding.value.fill(0.0f);
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write("CNPE", 4);
  write_u32(out, kCheckpointVersion);
  const std::string cfg = params.config.to_text();
  write_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (const Parameter* p : params.parameters()) write_tensor(out, p->value);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "CNPE") {
    throw std::runtime_error("not a checkpoint (bad magic): " + path.string());
  }
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t len = read_u32(in);
  std::string cfg(len, '\0');
  if (!in.read(cfg.data(), len)) throw std::runtime_error("truncated checkpoint config");
  ModelParams params = init_model(ModelConfig::from_text(cfg), 0);
  for (Parameter* p : params.parameters()) {
    Tensor t = read_tensor(in);
    if (!same_shape(t, p->value)) {
      throw std::runtime_error("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                               shape_str(p->value.shape()));
    }
    p->value = std::move(t);
  }
  return params;
}

}  // namespace nope
