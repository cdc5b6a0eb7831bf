#include "nope/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nope/kernels.hpp"

namespace nope {

using kernels::gemm;
using kernels::Trans;

void Parameter::zero_grad() {
  if (grad.empty() || !same_shape(grad, value)) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0f);
  }
}

namespace {

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

void require_rank2(const Tensor& t, std::string_view op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, std::string_view op) {
  if (!same_shape(a, b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

float gelu_tanh(float x) {
  const float u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

Var Graph::push(std::string_view op, std::vector<int> inputs, Tensor value) {
  Node n;
  n.op = op;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](int i) { return needs(i); });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Graph::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("invalid graph variable");
}

const Tensor& Graph::val(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ext_value ? *n.ext_value : n.value;
}

Tensor& Graph::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  Tensor& g = n.ext_grad ? *n.ext_grad : n.grad;
  const Tensor& v = val(id);
  if (g.empty() || !same_shape(g, v)) g = Tensor(v.shape());
  return g;
}

Var Graph::constant(Tensor value) { return push("constant", {}, std::move(value)); }

Var Graph::leaf(Tensor value) {
  Var v = push("leaf", {}, std::move(value));
  nodes_.back().requires_grad = true;
  return v;
}

Var Graph::param(Parameter& p) {
  Var v = push("param", {}, Tensor());
  Node& n = nodes_.back();
  n.ext_value = &p.value;
  if (p.grad.empty() || !same_shape(p.grad, p.value)) p.grad = Tensor(p.value.shape());
  n.ext_grad = &p.grad;
  n.requires_grad = true;
  return v;
}

Var Graph::view(const Tensor& value) {
  Var v = push("view", {}, Tensor());
  nodes_.back().ext_value = &value;
  return v;
}

const Tensor& Graph::value(Var v) const {
  check(v);
  return val(v.id);
}

double Graph::scalar(Var v) const {
  check(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.exact) return *n.exact;
  const Tensor& t = val(v.id);
  if (t.size() != 1) throw DimensionError("scalar: node has shape " + shape_str(t.shape()));
  return t[0];
}

const Tensor& Graph::grad(Var v) const {
  check(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  const Tensor& g = n.ext_grad ? *n.ext_grad : n.grad;
  if (g.empty()) throw std::logic_error("no gradient recorded for node '" + std::string(n.op) + "'");
  return g;
}

bool Graph::requires_grad(Var v) const {
  check(v);
  return needs(v.id);
}

std::string_view Graph::op(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].op;
}

const std::vector<int>& Graph::inputs(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].inputs;
}

Var Graph::matmul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = val(a.id);
  const Tensor& B = val(b.id);
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  if (A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
  }
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  gemm(Trans::kNo, Trans::kNo, m, n, k, A.data(), B.data(), out.data());
  Var y = push("matmul", {a.id, b.id}, std::move(out));
  const int ia = a.id, ib = b.id, iy = y.id;
  nodes_.back().backward = [this, ia, ib, iy, m, k, n] {
    const Tensor& dy = grad_ref(iy);
    if (needs(ia)) gemm(Trans::kNo, Trans::kYes, m, k, n, dy.data(), val(ib).data(), grad_ref(ia).data(), true);
    if (needs(ib)) gemm(Trans::kYes, Trans::kNo, k, n, m, val(ia).data(), dy.data(), grad_ref(ib).data(), true);
  };
  return y;
}

Var Graph::transpose(Var a) {
  check(a);
  const Tensor& A = val(a.id);
  require_rank2(A, "transpose");
  const int r = A.dim(0), c = A.dim(1);
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = A.at(i, j);
  Var y = push("transpose", {a.id}, std::move(out));
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy, r, c] {
    const Tensor& dy = grad_ref(iy);
    Tensor& da = grad_ref(ia);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) da.at(i, j) += dy.at(j, i);
  };
  return y;
}

Var Graph::softmax_rows(Var x, bool causal) {
  check(x);
  const Tensor& X = val(x.id);
  require_rank2(X, "softmax_rows");
  const int m = X.dim(0), n = X.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const int limit = causal ? std::min(n, i + 1) : n;
    auto xr = X.row(i);
    auto yr = out.row(i);
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < limit; ++j) mx = std::max(mx, xr[j]);
    double total = 0.0;
    for (int j = 0; j < limit; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int j = 0; j < limit; ++j) yr[j] *= inv;
  }
  Var y = push("softmax_rows", {x.id}, std::move(out));
  const int ix = x.id, iy = y.id;
  nodes_.back().backward = [this, ix, iy, m] {
    const Tensor& Y = val(iy);
    const Tensor& dy = grad_ref(iy);
    Tensor& dx = grad_ref(ix);
    for (int i = 0; i < m; ++i) {
      auto yr = Y.row(i);
      auto gr = dy.row(i);
      auto dr = dx.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) s += static_cast<double>(yr[j]) * gr[j];
      for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += yr[j] * (gr[j] - static_cast<float>(s));
    }
  };
  return y;
}

Var Graph::reshape(Var a, Shape shape) {
  check(a);
  Tensor out = val(a.id).reshaped(std::move(shape));
  Var y = push("reshape", {a.id}, std::move(out));
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy] {
    const Tensor& dy = grad_ref(iy);
    Tensor& da = grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
  };
  return y;
}

Var Graph::add(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = val(a.id);
  const Tensor& B = val(b.id);
  require_same(A, B, "add");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  Var y = push("add", {a.id, b.id}, std::move(out));
  const int ia = a.id, ib = b.id, iy = y.id;
  nodes_.back().backward = [this, ia, ib, iy] {
    const Tensor& dy = grad_ref(iy);
    for (int id : {ia, ib}) {
      if (!needs(id)) continue;
      Tensor& d = grad_ref(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  };
  return y;
}

Var Graph::add_bias(Var x, Var bias) {
  check(x);
  check(bias);
  const Tensor& X = val(x.id);
  const Tensor& b = val(bias.id);
  if (b.rank() != 1 || b.dim(0) != X.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match rows of " +
                         shape_str(X.shape()));
  }
  Tensor out = X;
  const int rows = out.rows();
  for (int r = 0; r < rows; ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += b[c];
  }
  Var y = push("add_bias", {x.id, bias.id}, std::move(out));
  const int ix = x.id, ibias = bias.id, iy = y.id;
  nodes_.back().backward = [this, ix, ibias, iy, rows] {
    const Tensor& dy = grad_ref(iy);
    if (needs(ix)) {
      Tensor& dx = grad_ref(ix);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    if (needs(ibias)) {
      Tensor& db = grad_ref(ibias);
      for (int r = 0; r < rows; ++r) {
        auto g = dy.row(r);
        for (std::size_t c = 0; c < g.size(); ++c) db[c] += g[c];
      }
    }
  };
  return y;
}

Var Graph::mul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = val(a.id);
  const Tensor& B = val(b.id);
  require_same(A, B, "mul");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  Var y = push("mul", {a.id, b.id}, std::move(out));
  const int ia = a.id, ib = b.id, iy = y.id;
  nodes_.back().backward = [this, ia, ib, iy] {
    const Tensor& dy = grad_ref(iy);
    if (needs(ia)) {
      Tensor& d = grad_ref(ia);
      const Tensor& other = val(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
    }
    if (needs(ib)) {
      Tensor& d = grad_ref(ib);
      const Tensor& other = val(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
    }
  };
  return y;
}

Var Graph::scale(Var a, float s) {
  check(a);
  Tensor out = val(a.id);
  for (auto& x : out.vec()) x *= s;
  Var y = push("scale", {a.id}, std::move(out));
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy, s] {
    const Tensor& dy = grad_ref(iy);
    Tensor& d = grad_ref(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * dy[i];
  };
  return y;
}

Var Graph::gelu(Var a) {
  check(a);
  Tensor out = val(a.id);
  for (auto& x : out.vec()) x = gelu_tanh(x);
  Var y = push("gelu", {a.id}, std::move(out));
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy] {
    const Tensor& X = val(ia);
    const Tensor& dy = grad_ref(iy);
    Tensor& d = grad_ref(ia);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const float x = X[i];
      const float t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
      d[i] += dy[i] * (0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du);
    }
  };
  return y;
}

Var Graph::relu(Var a) {
  check(a);
  Tensor out = val(a.id);
  for (auto& x : out.vec()) x = x > 0.0f ? x : 0.0f;
  Var y = push("relu", {a.id}, std::move(out));
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy] {
    const Tensor& X = val(ia);
    const Tensor& dy = grad_ref(iy);
    Tensor& d = grad_ref(ia);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (X[i] > 0.0f) d[i] += dy[i];
  };
  return y;
}

Var Graph::embedding(Var table, std::vector<int> ids) {
  check(table);
  const Tensor& T = val(table.id);
  require_rank2(T, "embedding");
  const int vocab = T.dim(0), d = T.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor out({static_cast<int>(ids.size()), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    auto src = T.row(ids[r]);
    std::copy(src.begin(), src.end(), out.row(static_cast<int>(r)).begin());
  }
  Var y = push("embedding", {table.id}, std::move(out));
  const int it = table.id, iy = y.id;
  nodes_.back().backward = [this, it, iy, ids = std::move(ids)] {
    const Tensor& dy = grad_ref(iy);
    Tensor& dt = grad_ref(it);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto g = dy.row(static_cast<int>(r));
      auto dst = dt.row(ids[r]);
      for (std::size_t c = 0; c < g.size(); ++c) dst[c] += g[c];
    }
  };
  return y;
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
  check(x);
  check(gain);
  check(bias);
  const Tensor& X = val(x.id);
  const Tensor& G = val(gain.id);
  const Tensor& B = val(bias.id);
  const int d = X.cols();
  if (d < 2) throw DimensionError("layer_norm: feature dimension must be >= 2, got " + shape_str(X.shape()));
  if (G.size() != static_cast<std::size_t>(d) || B.size() != static_cast<std::size_t>(d)) {
    throw DimensionError("layer_norm: gain " + shape_str(G.shape()) + " / bias " + shape_str(B.shape()) +
                         " do not match " + shape_str(X.shape()));
  }
  const int rows = X.rows();
  Tensor out(X.shape());
  std::vector<float> rstd(static_cast<std::size_t>(rows));
  Tensor xhat(X.shape());
  for (int r = 0; r < rows; ++r) {
    auto xr = X.row(r);
    double mean = 0.0;
    for (float v : xr) mean += v;
    mean /= d;
    double var = 0.0;
    for (float v : xr) var += (v - mean) * (v - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[static_cast<std::size_t>(r)] = static_cast<float>(inv);
    auto hr = xhat.row(r);
    auto yr = out.row(r);
    for (int c = 0; c < d; ++c) {
      hr[c] = static_cast<float>((xr[c] - mean) * inv);
      yr[c] = hr[c] * G[c] + B[c];
    }
  }
  Var y = push("layer_norm", {x.id, gain.id, bias.id}, std::move(out));
  const int ix = x.id, ig = gain.id, ib = bias.id, iy = y.id;
  nodes_.back().backward = [this, ix, ig, ib, iy, rows, d, rstd = std::move(rstd), xhat = std::move(xhat)] {
    const Tensor& dy = grad_ref(iy);
    const Tensor& G = val(ig);
    if (needs(ig) || needs(ib)) {
      Tensor* dg = needs(ig) ? &grad_ref(ig) : nullptr;
      Tensor* db = needs(ib) ? &grad_ref(ib) : nullptr;
      for (int r = 0; r < rows; ++r) {
        auto g = dy.row(r);
        auto h = xhat.row(r);
        for (int c = 0; c < d; ++c) {
          if (dg) (*dg)[c] += g[c] * h[c];
          if (db) (*db)[c] += g[c];
        }
      }
    }
    if (!needs(ix)) return;
    Tensor& dx = grad_ref(ix);
    std::vector<double> dh(static_cast<std::size_t>(d));
    for (int r = 0; r < rows; ++r) {
      auto g = dy.row(r);
      auto h = xhat.row(r);
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (int c = 0; c < d; ++c) {
        dh[c] = static_cast<double>(g[c]) * G[c];
        mean_dh += dh[c];
        mean_dh_h += dh[c] * h[c];
      }
      mean_dh /= d;
      mean_dh_h /= d;
      auto out = dx.row(r);
      const double s = rstd[static_cast<std::size_t>(r)];
      for (int c = 0; c < d; ++c) out[c] += static_cast<float>(s * (dh[c] - mean_dh - h[c] * mean_dh_h));
    }
  };
  return y;
}

Var Graph::attention(Var q, Var k, Var v, AttentionShape shape) {
  check(q);
  check(k);
  check(v);
  const Tensor& Q = val(q.id);
  const Tensor& K = val(k.id);
  const Tensor& V = val(v.id);
  require_rank2(Q, "attention");
  require_same(Q, K, "attention");
  require_same(Q, V, "attention");
  const int B = shape.batch, T = shape.seq_len, H = shape.n_heads;
  const int d = Q.dim(1);
  if (B * T != Q.dim(0) || H <= 0 || d % H != 0) {
    throw DimensionError("attention: " + shape_str(Q.shape()) + " incompatible with batch=" + std::to_string(B) +
                         " seq_len=" + std::to_string(T) + " heads=" + std::to_string(H));
  }
  std::vector<int> lengths = shape.lengths;
  if (lengths.empty()) lengths.assign(static_cast<std::size_t>(B), T);
  if (static_cast<int>(lengths.size()) != B) throw DimensionError("attention: lengths must have one entry per sequence");
  for (int& len : lengths) len = std::clamp(len, 1, T);
  const int dh = d / H;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool causal = shape.causal;

  // probs[b][h][i][j]
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B) * H * T * T, 0.0f);
  Tensor out({B * T, d});
  std::vector<double> acc(static_cast<std::size_t>(dh));
  for (int b = 0; b < B; ++b) {
    const int len = lengths[static_cast<std::size_t>(b)];
    for (int h = 0; h < H; ++h) {
      float* P = probs->data() + (static_cast<std::size_t>(b) * H + h) * T * T;
      for (int i = 0; i < T; ++i) {
        const int limit = causal ? std::min(i + 1, len) : len;
        const float* qi = Q.data() + static_cast<std::size_t>(b * T + i) * d + h * dh;
        float* pr = P + static_cast<std::size_t>(i) * T;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < limit; ++j) {
          const float* kj = K.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
          pr[j] = static_cast<float>(s) * scale;
          mx = std::max(mx, pr[j]);
        }
        double total = 0.0;
        for (int j = 0; j < limit; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          total += pr[j];
        }
        const float inv = static_cast<float>(1.0 / total);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int j = 0; j < limit; ++j) {
          pr[j] *= inv;
          const float* vj = V.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
          for (int c = 0; c < dh; ++c) acc[c] += static_cast<double>(pr[j]) * vj[c];
        }
        float* oi = out.data() + static_cast<std::size_t>(b * T + i) * d + h * dh;
        for (int c = 0; c < dh; ++c) oi[c] = static_cast<float>(acc[c]);
      }
    }
  }
  Var y = push("attention", {q.id, k.id, v.id}, std::move(out));
  const int iq = q.id, ik = k.id, iv = v.id, iy = y.id;
  nodes_.back().backward = [this, iq, ik, iv, iy, B, T, H, d, dh, scale, probs] {
    const Tensor& dY = grad_ref(iy);
    const Tensor& Q = val(iq);
    const Tensor& K = val(ik);
    const Tensor& V = val(iv);
    // Gradients are computed into scratch buffers, then added, since q/k/v may alias.
    Tensor dQ(Q.shape()), dK(K.shape()), dV(V.shape());
    std::vector<float> dp(static_cast<std::size_t>(T));
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const float* P = probs->data() + (static_cast<std::size_t>(b) * H + h) * T * T;
        for (int i = 0; i < T; ++i) {
          const float* pr = P + static_cast<std::size_t>(i) * T;
          const float* go = dY.data() + static_cast<std::size_t>(b * T + i) * d + h * dh;
          double dot_pp = 0.0;
          for (int j = 0; j < T; ++j) {
            if (pr[j] == 0.0f) {
              dp[j] = 0.0f;
              continue;
            }
            const float* vj = V.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
            float* dvj = dV.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
            double s = 0.0;
            for (int c = 0; c < dh; ++c) {
              s += static_cast<double>(go[c]) * vj[c];
              dvj[c] += pr[j] * go[c];
            }
            dp[j] = static_cast<float>(s);
            dot_pp += s * pr[j];
          }
          const float* qi = Q.data() + static_cast<std::size_t>(b * T + i) * d + h * dh;
          float* dqi = dQ.data() + static_cast<std::size_t>(b * T + i) * d + h * dh;
          for (int j = 0; j < T; ++j) {
            if (pr[j] == 0.0f) continue;
            const float ds = pr[j] * (dp[j] - static_cast<float>(dot_pp)) * scale;
            const float* kj = K.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
            float* dkj = dK.data() + static_cast<std::size_t>(b * T + j) * d + h * dh;
            for (int c = 0; c < dh; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
    auto accumulate = [this](int id, const Tensor& g) {
      if (!needs(id)) return;
      Tensor& dst = grad_ref(id);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    };
    accumulate(iq, dQ);
    accumulate(ik, dK);
    accumulate(iv, dV);
  };
  return y;
}

Var Graph::sum(Var a) {
  check(a);
  double s = 0.0;
  for (float x : val(a.id).vec()) s += x;
  Var y = push("sum", {a.id}, Tensor::scalar(static_cast<float>(s)));
  nodes_.back().exact = s;
  const int ia = a.id, iy = y.id;
  nodes_.back().backward = [this, ia, iy] {
    const float g = grad_ref(iy)[0];
    for (auto& x : grad_ref(ia).vec()) x += g;
  };
  return y;
}

Var Graph::dot(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& A = val(a.id);
  const Tensor& B = val(b.id);
  require_same(A, B, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += static_cast<double>(A[i]) * B[i];
  Var y = push("dot", {a.id, b.id}, Tensor::scalar(static_cast<float>(s)));
  nodes_.back().exact = s;
  const int ia = a.id, ib = b.id, iy = y.id;
  nodes_.back().backward = [this, ia, ib, iy] {
    const float g = grad_ref(iy)[0];
    const Tensor& A = val(ia);
    const Tensor& B = val(ib);
    if (needs(ia)) {
      Tensor& d = grad_ref(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * B[i];
    }
    if (needs(ib)) {
      Tensor& d = grad_ref(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * A[i];
    }
  };
  return y;
}

Var Graph::cross_entropy(Var logits, std::span<const int> targets, int ignore_index) {
  check(logits);
  const Tensor& L = val(logits.id);
  require_rank2(L, "cross_entropy");
  const int n = L.dim(0), vocab = L.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(L.shape()));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  int count = 0;
  for (int t : tgt) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= vocab) throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab");
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every position is ignored");

  Tensor probs({n, vocab});
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (tgt[static_cast<std::size_t>(i)] == ignore_index) continue;
    auto lr = L.row(i);
    const float mx = *std::max_element(lr.begin(), lr.end());
    double z = 0.0;
    for (float x : lr) z += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(z);
    loss += lse - lr[static_cast<std::size_t>(tgt[static_cast<std::size_t>(i)])];
    auto pr = probs.row(i);
    for (int c = 0; c < vocab; ++c) pr[c] = static_cast<float>(std::exp(lr[c] - lse));
  }
  loss /= count;
  Var y = push("cross_entropy", {logits.id}, Tensor::scalar(static_cast<float>(loss)));
  nodes_.back().exact = loss;
  const int il = logits.id, iy = y.id;
  nodes_.back().backward = [this, il, iy, n, count, ignore_index, tgt = std::move(tgt), probs = std::move(probs)] {
    const float g = grad_ref(iy)[0] / static_cast<float>(count);
    Tensor& dl = grad_ref(il);
    for (int i = 0; i < n; ++i) {
      const int t = tgt[static_cast<std::size_t>(i)];
      if (t == ignore_index) continue;
      auto pr = probs.row(i);
      auto dr = dl.row(i);
      for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += g * pr[c];
      dr[static_cast<std::size_t>(t)] -= g;
    }
  };
  return y;
}

Var Graph::mse(Var pred, std::span<const float> targets) {
  check(pred);
  const Tensor& P = val(pred.id);
  if (P.size() != targets.size()) {
    throw DimensionError("mse: prediction " + shape_str(P.shape()) + " vs " + std::to_string(targets.size()) +
                         " targets");
  }
  std::vector<float> tgt(targets.begin(), targets.end());
  double s = 0.0;
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    const double e = static_cast<double>(P[i]) - tgt[i];
    s += e * e;
  }
  Var y = push("mse", {pred.id}, Tensor::scalar(static_cast<float>(s / static_cast<double>(tgt.size()))));
  nodes_.back().exact = s / static_cast<double>(tgt.size());
  const int ip = pred.id, iy = y.id;
  nodes_.back().backward = [this, ip, iy, tgt = std::move(tgt)] {
    const float g = grad_ref(iy)[0] * 2.0f / static_cast<float>(tgt.size());
    const Tensor& P = val(ip);
    Tensor& d = grad_ref(ip);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * (P[i] - tgt[i]);
  };
  return y;
}

void Graph::backward(Var loss) {
  check(loss);
  if (val(loss.id).size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " + shape_str(val(loss.id).shape()));
  }
  if (!needs(loss.id)) return;
  grad_ref(loss.id)[0] += 1.0f;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward) continue;
    const Tensor& g = n.ext_grad ? *n.ext_grad : n.grad;
    if (g.empty()) continue;  // not on a path from the loss
    n.backward();
  }
}

FiniteDiffResult finite_diff_check(const std::function<Var(Graph&)>& loss_fn, Parameter& param, double epsilon,
                                   int n_coords, std::uint64_t seed) {
  param.zero_grad();
  {
    Graph g;
    Var loss = loss_fn(g);
    g.backward(loss);
  }
  const Tensor analytic = param.grad;

  std::vector<std::size_t> coords(param.value.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (static_cast<int>(coords.size()) > n_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(n_coords));
  }

  auto eval = [&] {
    Graph g;
    return g.scalar(loss_fn(g));
  };

  FiniteDiffResult res;
  for (std::size_t idx : coords) {
    const float orig = param.value[idx];
    // Divide by the step actually taken after rounding to f32.
    const float hi = static_cast<float>(orig + epsilon);
    const float lo = static_cast<float>(orig - epsilon);
    param.value[idx] = hi;
    const double up = eval();
    param.value[idx] = lo;
    const double down = eval();
    param.value[idx] = orig;
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double a = analytic[idx];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
    res.max_rel_error = std::max(res.max_rel_error, err);
    ++res.coords_checked;
  }
  return res;
}

}  // namespace nope
