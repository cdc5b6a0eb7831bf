#include <doctest.h>

#include <cmath>
#include <random>

#include "nope/autodiff.hpp"
#include "nope/model.hpp"
#include "nope/training.hpp"
#include "reference_model.hpp"

using namespace nope;

namespace {

Tensor randn(Shape s, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, scale);
  Tensor t(std::move(s));
  for (auto& x : t.vec()) x = d(rng);
  return t;
}

Parameter make_param(Shape s, std::uint64_t seed, float scale = 1.0f) {
  return Parameter{"p", randn(std::move(s), seed, scale), Tensor(), true};
}

// Projects an arbitrary node onto a fixed random direction so every output
// coordinate contributes to the scalar loss.
Var project(Graph& g, Var y, std::uint64_t seed) {
  return g.dot(y, g.constant(randn(g.value(y).shape(), seed)));
}

double brute_cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore) {
  double total = 0.0;
  int n = 0;
  for (int i = 0; i < logits.rows(); ++i) {
    if (targets[static_cast<std::size_t>(i)] == ignore) continue;
    double z = 0.0;
    for (float v : logits.row(i)) z += std::exp(static_cast<double>(v));
    total += std::log(z) - logits.at(i, targets[static_cast<std::size_t>(i)]);
    ++n;
  }
  return total / n;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("matmul examples") {
    Graph g;
    Var i2 = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    Var b = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
    CHECK(g.value(g.matmul(i2, b)).vec() == std::vector<float>{1, 2, 3, 4});
    Var e = g.constant(Tensor::matrix({{1, 0}, {0, 0}}));
    Var c = g.constant(Tensor::matrix({{5, 6}, {7, 8}}));
    CHECK(g.value(g.matmul(e, c)).vec() == std::vector<float>{5, 6, 0, 0});
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    Graph g;
    Var a = g.constant(Tensor({3, 4}));
    Var b = g.constant(Tensor({3, 2}));
    try {
      g.matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("3x4") != std::string::npos);
      CHECK(msg.find("3x2") != std::string::npos);
    }
  }

  TEST_CASE("matmul matches a triple-loop oracle exactly") {
    const Tensor a = randn({3, 4}, 1), b = randn({4, 2}, 2);
    Graph g;
    const Tensor& c = g.value(g.matmul(g.constant(a), g.constant(b)));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 2; ++j) {
        double s = 0.0;
        for (int p = 0; p < 4; ++p) s += static_cast<double>(a.at(i, p)) * b.at(p, j);
        CHECK(c.at(i, j) == static_cast<float>(s));
      }
    }
  }

  TEST_CASE("softmax rows") {
    Graph g;
    const Tensor& u = g.value(g.softmax_rows(g.constant(Tensor::matrix({{0, 0, 0}})), false));
    for (float v : u.vec()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    const Tensor& big = g.value(g.softmax_rows(g.constant(Tensor::matrix({{1000, 0}})), false));
    CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(big[1]) < 1e-6);
    const Tensor& masked = g.value(g.softmax_rows(g.constant(randn({3, 3}, 3)), true));
    CHECK(masked.at(0, 0) == 1.0f);
    CHECK(masked.at(0, 1) == 0.0f);
    CHECK(masked.at(0, 2) == 0.0f);
    CHECK(masked.at(1, 2) == 0.0f);
  }

  TEST_CASE("softmax rows sum to one for inputs within +-50") {
    Graph g;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> u(-50.0f, 50.0f);
    Tensor x({20, 17});
    for (auto& v : x.vec()) v = u(rng);
    for (bool causal : {false, true}) {
      Tensor sq({17, 17});
      std::copy(x.data(), x.data() + sq.size(), sq.data());
      const Tensor& y = g.value(g.softmax_rows(g.constant(causal ? sq : x), causal));
      for (int r = 0; r < y.rows(); ++r) {
        double s = 0.0;
        for (float v : y.row(r)) s += v;
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
    }
  }

  TEST_CASE("layer norm examples") {
    Graph g;
    Var gain = g.constant(Tensor({4}, 1.0f));
    Var bias = g.constant(Tensor({4}, 0.0f));
    const Tensor& flat = g.value(g.layer_norm(g.constant(Tensor::matrix({{1, 1, 1, 1}})), gain, bias));
    for (float v : flat.vec()) CHECK(v == 0.0f);

    Var g2 = g.constant(Tensor({2}, 1.0f));
    Var b2 = g.constant(Tensor({2}, 0.0f));
    const Tensor& pm = g.value(g.layer_norm(g.constant(Tensor::matrix({{1, -1}})), g2, b2));
    CHECK(pm[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(pm[1] == doctest::Approx(-1.0).epsilon(1e-4));

    Var g16 = g.constant(Tensor({16}, 1.0f));
    Var b16 = g.constant(Tensor({16}, 0.0f));
    const Tensor& y = g.value(g.layer_norm(g.constant(randn({1, 16}, 4, 3.0f)), g16, b16));
    double mean = 0.0, var = 0.0;
    for (float v : y.vec()) mean += v;
    mean /= 16;
    for (float v : y.vec()) var += (v - mean) * (v - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }

  TEST_CASE("layer norm rejects d < 2") {
    Graph g;
    CHECK_THROWS_AS(g.layer_norm(g.constant(Tensor({3, 1})), g.constant(Tensor({1}, 1.0f)), g.constant(Tensor({1}))),
                    std::invalid_argument);
  }

  TEST_CASE("cross entropy examples and brute-force oracle") {
    Graph g;
    Tensor onehot({2, 5}, -50.0f);
    onehot.at(0, 3) = 50.0f;
    onehot.at(1, 1) = 50.0f;
    const std::vector<int> t1{3, 1};
    CHECK(g.value(g.cross_entropy(g.constant(onehot), t1, -1))[0] < 1e-6);

    const std::vector<int> t2{4, 7, 0};
    CHECK(g.value(g.cross_entropy(g.constant(Tensor({3, 10}, 0.0f)), t2, -1))[0] ==
          doctest::Approx(std::log(10.0)).epsilon(1e-6));

    const Tensor logits = randn({6, 9}, 5, 3.0f);
    const std::vector<int> t3{2, -1, 8, 0, -1, 5};
    CHECK(std::abs(g.value(g.cross_entropy(g.constant(logits), t3, -1))[0] - brute_cross_entropy(logits, t3, -1)) < 1e-5);
  }

  TEST_CASE("cross entropy errors") {
    Graph g;
    Var l = g.constant(Tensor({2, 3}));
    const std::vector<int> ignored{-1, -1};
    CHECK_THROWS_AS(g.cross_entropy(l, ignored, -1), std::invalid_argument);
    const std::vector<int> bad{0, 3};
    CHECK_THROWS(g.cross_entropy(l, bad, -1));
  }

  TEST_CASE("backward basics") {
    Graph g;
    const Tensor x0 = randn({3, 2}, 6);
    Var x = g.leaf(x0);
    g.backward(g.sum(x));
    for (float v : g.grad(x).vec()) CHECK(v == 1.0f);

    Graph h;
    Var y = h.leaf(x0);
    Var loss = h.dot(y, y);
    h.backward(loss);
    CHECK(h.grad(loss)[0] == 1.0f);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(h.grad(y)[i] == doctest::Approx(2.0f * x0[i]));

    Graph k;
    Var z = k.leaf(x0);
    CHECK_THROWS_AS(k.backward(z), std::invalid_argument);
  }

  TEST_CASE("nodes are stored in topological order") {
    Graph g;
    Var a = g.leaf(randn({2, 2}, 1));
    Var b = g.matmul(a, g.transpose(a));
    Var c = g.sum(g.gelu(b));
    for (int id = 0; id <= c.id; ++id) {
      for (int in : g.inputs(Var{id})) CHECK(in < id);
    }
  }

  TEST_CASE("finite differences: linear model with exactly representable values") {
    // Dyadic weights, integer inputs and a power-of-two step keep every f32
    // operation exact, so only the gradient code can introduce error.
    Parameter w;
    w.value = Tensor({3, 1}, std::vector<float>{0.75f, -1.5f, 0.125f});
    const Tensor x = Tensor::matrix({{1, 2, -3}, {4, 0, 1}, {-2, 5, 2}, {3, -1, 0}, {1, 1, 1}});
    auto loss = [&](Graph& g) { return g.sum(g.matmul(g.constant(x), g.param(w))); };
    const FiniteDiffResult r = finite_diff_check(loss, w, 1.0 / 1024.0, 3);
    CHECK(r.coords_checked == 3);
    CHECK(r.max_rel_error < 1e-6);
  }

  TEST_CASE("finite differences: every differentiable op") {
    const Tensor other = randn({4, 6}, 20);
    const Tensor wide = randn({6, 5}, 21);
    struct Case {
      const char* name;
      std::function<Var(Graph&, Var)> f;
    };
    const std::vector<Case> cases{
        {"matmul", [&](Graph& g, Var x) { return g.matmul(x, g.constant(wide)); }},
        {"transpose", [&](Graph& g, Var x) { return g.transpose(x); }},
        {"reshape", [&](Graph& g, Var x) { return g.reshape(x, {6, 4}); }},
        {"add", [&](Graph& g, Var x) { return g.add(x, g.constant(other)); }},
        {"mul", [&](Graph& g, Var x) { return g.mul(x, g.constant(other)); }},
        {"scale", [&](Graph& g, Var x) { return g.scale(x, 0.125f); }},
        {"gelu", [&](Graph& g, Var x) { return g.gelu(x); }},
        {"relu", [&](Graph& g, Var x) { return g.relu(x); }},
        {"softmax", [&](Graph& g, Var x) { return g.softmax_rows(x, false); }},
        {"add_bias", [&](Graph& g, Var x) { return g.add_bias(g.constant(randn({3, 24}, 25)), g.reshape(x, {24})); }},
        {"layer_norm",
         [&](Graph& g, Var x) { return g.layer_norm(x, g.constant(randn({6}, 22)), g.constant(randn({6}, 23))); }},
        {"embedding", [&](Graph& g, Var x) { return g.embedding(x, {3, 0, 0, 2, 1}); }},
        {"mse", [&](Graph& g, Var x) {
           return g.mse(g.matmul(x, g.constant(randn({6, 1}, 24))), std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f});
         }},
    };
    for (const auto& c : cases) {
      CAPTURE(std::string(c.name));
      Parameter p = make_param({4, 6}, 30);
      // keep ReLU away from its kink
      if (std::string(c.name) == "relu") {
        for (auto& v : p.value.vec()) v += v > 0 ? 0.05f : -0.05f;
      }
      auto loss = [&](Graph& g) {
        Var y = c.f(g, g.param(p));
        return g.value(y).size() == 1 ? y : project(g, y, 40);
      };
      CHECK(finite_diff_check(loss, p, 1e-3, 24, 1).max_rel_error < 1e-2);
    }
  }

  TEST_CASE("finite differences: softmax + cross-entropy composite") {
    Parameter p = make_param({5, 7}, 50);
    const std::vector<int> targets{1, 6, -1, 0, 3};
    auto loss = [&](Graph& g) {
      Var probs = g.softmax_rows(g.param(p), false);
      return g.cross_entropy(g.scale(probs, 4.0f), targets, -1);
    };
    CHECK(finite_diff_check(loss, p, 1e-3, 20, 2).max_rel_error < 1e-2);
  }

  TEST_CASE("finite differences: fused attention, causal and padded") {
    Parameter q = make_param({2 * 5, 8}, 60);
    const Tensor k = randn({10, 8}, 61), v = randn({10, 8}, 62);
    for (bool causal : {true, false}) {
      AttentionShape shape{2, 5, 2, causal, {5, 3}};
      auto loss = [&](Graph& g) {
        Var out = g.attention(g.param(q), g.constant(k), g.constant(v), shape);
        return project(g, out, 63);
      };
      CAPTURE(causal);
      CHECK(finite_diff_check(loss, q, 1e-3, 30, 3).max_rel_error < 1e-2);
    }
  }

  TEST_CASE("tied parameter used twice accumulates both gradients") {
    Parameter w = make_param({3, 3}, 70);
    const Tensor x = randn({2, 3}, 71);
    Graph g;
    Var a = g.param(w);
    Var b = g.param(w);
    g.backward(g.sum(g.matmul(g.matmul(g.constant(x), a), b)));
    auto loss = [&](Graph& h) {
      Var p = h.param(w);
      return h.sum(h.matmul(h.matmul(h.constant(x), p), p));
    };
    Parameter copy = w;
    CHECK(finite_diff_check(loss, copy, 1e-3, 9).max_rel_error < 1e-3);
  }

  TEST_CASE("transformer gradients match central differences of the f64 reference") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    const std::vector<TaskSample> samples{make_sample("rev(123)=", "321"), make_sample("rev(90)=", "09")};
    const std::vector<std::size_t> idx{0, 1};
    const TrainBatch batch = make_train_batch(samples, idx, default_vocab());
    for (Variant v : {Variant::kCausalNope, Variant::kNoncausalApe}) {
      cfg.variant = v;
      ModelParams params = init_model(cfg, 3);
      for (const auto& r : testing::reference_gradient_check(params, batch, 1e-6, 20, 4)) {
        CAPTURE(r.name);
        CHECK(r.coords >= 20);
        CHECK(r.max_rel_error < 1e-2);
      }
    }
  }

  TEST_CASE("engine loss agrees with the f64 reference") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    cfg.init.sigma = 0.2f;
    const std::vector<TaskSample> samples{make_sample("rev(4567)=", "7654"), make_sample("rev(8)=", "8")};
    const std::vector<std::size_t> idx{0, 1};
    const TrainBatch batch = make_train_batch(samples, idx, default_vocab());
    for (Variant v : {Variant::kCausalNope, Variant::kNoncausalApe}) {
      cfg.variant = v;
      ModelParams params = init_model(cfg, 8);
      Graph g;
      const double engine = g.scalar(build_loss(g, params, batch));
      CHECK(engine == doctest::Approx(testing::ReferenceModel(params).loss(batch)).epsilon(1e-6));
    }
  }

  TEST_CASE("gelu matches its tanh closed form") {
    for (float x : {-3.0f, -0.5f, 0.0f, 0.7f, 2.5f}) {
      const double ref = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
      CHECK(gelu_tanh(x) == doctest::Approx(ref).epsilon(1e-6));
    }
  }
}
