#include <doctest.h>

#include <array>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

#include "nope/kernels.hpp"
#include "nope/tensor.hpp"

using namespace nope;
using kernels::Trans;

namespace {

std::vector<float> random_vec(std::size_t n, std::mt19937& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// op(A)[i][p] with A stored row-major as m×k (or k×m when transposed).
float op_at(const std::vector<float>& a, bool t, int rows, int cols, int i, int p) {
  return t ? a[static_cast<std::size_t>(p) * rows + i] : a[static_cast<std::size_t>(i) * cols + p];
}

std::vector<float> naive_gemm(bool ta, bool tb, int m, int n, int k, const std::vector<float>& a,
                              const std::vector<float>& b) {
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += static_cast<double>(op_at(a, ta, m, k, i, p)) * op_at(b, tb, k, n, p, j);
      c[static_cast<std::size_t>(i) * n + j] = static_cast<float>(s);
    }
  }
  return c;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape arithmetic and construction") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 1.5f);
    CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);

    Tensor m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    CHECK(m.shape() == Shape{3, 2});
    CHECK(m.row(2)[1] == 6.0f);
    CHECK(m.reshaped({2, 3}).at(1, 0) == 4.0f);
    CHECK_THROWS_AS(m.reshaped({4, 2}), std::invalid_argument);
  }

  TEST_CASE("rank-3 tensors collapse leading dims into rows") {
    Tensor t({2, 3, 4});
    CHECK(t.rows() == 6);
    CHECK(t.cols() == 4);
  }

  TEST_CASE("serialization round-trips bit-exactly") {
    std::mt19937 rng(4);
    Tensor t({3, 5}, random_vec(15, rng));
    t[7] = -0.0f;
    std::stringstream buf;
    write_tensor(buf, t);
    const Tensor back = read_tensor(buf);
    CHECK(back.shape() == t.shape());
    CHECK(std::memcmp(back.data(), t.data(), t.size() * sizeof(float)) == 0);
  }

  TEST_CASE("truncated stream is rejected") {
    std::stringstream buf;
    write_tensor(buf, Tensor({4, 4}, 1.0f));
    std::string s = buf.str();
    s.resize(s.size() - 3);
    std::stringstream cut(s);
    CHECK_THROWS(read_tensor(cut));
  }

  TEST_CASE("all_finite detects NaN and infinity") {
    Tensor t({3}, 0.0f);
    CHECK(t.all_finite());
    t[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.all_finite());
  }

  TEST_CASE("gemm equals a double-accumulating triple loop for every transpose combination") {
    std::mt19937 rng(11);
    const std::vector<std::array<int, 3>> sizes{{1, 1, 1}, {7, 5, 3}, {6, 16, 9}, {13, 33, 70}, {64, 50, 129}, {5, 300, 2}};
    for (const auto& [m, n, k] : sizes) {
      for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
          const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
          const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
          std::vector<float> c(static_cast<std::size_t>(m) * n, 123.0f);
          kernels::gemm(ta ? Trans::kYes : Trans::kNo, tb ? Trans::kYes : Trans::kNo, m, n, k, a.data(), b.data(),
                        c.data());
          CAPTURE(m);
          CAPTURE(n);
          CAPTURE(k);
          CHECK(c == naive_gemm(ta, tb, m, n, k, a, b));
        }
      }
    }
  }

  TEST_CASE("gemm accumulate adds onto the existing output") {
    std::mt19937 rng(5);
    const int m = 9, n = 17, k = 11;
    const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<float> c(static_cast<std::size_t>(m) * n, 0.5f);
    kernels::gemm(Trans::kNo, Trans::kNo, m, n, k, a.data(), b.data(), c.data(), true);
    const auto ref = naive_gemm(false, false, m, n, k, a, b);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i] + 0.5f).epsilon(1e-6));
  }
}
