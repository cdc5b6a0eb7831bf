#include "nope/kernels.hpp"

#include <cstddef>
#include <cstring>
#include <vector>

namespace nope::kernels {
namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;

// op(A) packed into row panels of kMr: panel[ib][p][r].
void pack_a(Trans t, int m, int k, const float* a, std::vector<double>& out) {
  const int mb = (m + kMr - 1) / kMr;
  out.assign(static_cast<std::size_t>(mb) * k * kMr, 0.0);
  if (t == Trans::kNo) {
    for (int i = 0; i < m; ++i) {
      double* dst = out.data() + static_cast<std::size_t>(i / kMr) * k * kMr + i % kMr;
      const float* src = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) dst[static_cast<std::size_t>(p) * kMr] = src[p];
    }
    return;
  }
  // row p of the stored matrix is column p of op(A); read it contiguously
  for (int p = 0; p < k; ++p) {
    const float* src = a + static_cast<std::size_t>(p) * m;
    for (int i = 0; i < m; ++i) out[(static_cast<std::size_t>(i / kMr) * k + p) * kMr + i % kMr] = src[i];
  }
}

// op(B) packed into column panels of kNr: panel[jb][p][c].
void pack_b(Trans t, int k, int n, const float* b, std::vector<double>& out) {
  const int nb = (n + kNr - 1) / kNr;
  out.assign(static_cast<std::size_t>(nb) * k * kNr, 0.0);
  if (t == Trans::kNo) {
    for (int p = 0; p < k; ++p) {
      const float* src = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        out[(static_cast<std::size_t>(j / kNr) * k + p) * kNr + j % kNr] = src[j];
      }
    }
  } else {
    for (int j = 0; j < n; ++j) {
      const float* src = b + static_cast<std::size_t>(j) * k;
      double* dst = out.data() + static_cast<std::size_t>(j / kNr) * k * kNr + j % kNr;
      for (int p = 0; p < k; ++p) dst[static_cast<std::size_t>(p) * kNr] = src[p];
    }
  }
}

#if defined(__GNUC__)
typedef double v8d __attribute__((vector_size(64)));

void micro_kernel(int k, const double* a, const double* b, double (*out)[kNr]) {
  v8d acc[kMr][2] = {};
  for (int p = 0; p < k; ++p) {
    v8d b0, b1;
    std::memcpy(&b0, b + static_cast<std::size_t>(p) * kNr, sizeof(v8d));
    std::memcpy(&b1, b + static_cast<std::size_t>(p) * kNr + 8, sizeof(v8d));
    const double* ap = a + static_cast<std::size_t>(p) * kMr;
    for (int r = 0; r < kMr; ++r) {
      acc[r][0] += ap[r] * b0;
      acc[r][1] += ap[r] * b1;
    }
  }
  for (int r = 0; r < kMr; ++r) {
    for (int c = 0; c < 8; ++c) {
      out[r][c] = acc[r][0][c];
      out[r][c + 8] = acc[r][1][c];
    }
  }
}
#else
void micro_kernel(int k, const double* a, const double* b, double (*out)[kNr]) {
  for (int r = 0; r < kMr; ++r)
    for (int c = 0; c < kNr; ++c) out[r][c] = 0.0;
  for (int p = 0; p < k; ++p)
    for (int r = 0; r < kMr; ++r)
      for (int c = 0; c < kNr; ++c) out[r][c] += a[p * kMr + r] * b[p * kNr + c];
}
#endif

}  // namespace

void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const float* a, const float* b, float* c,
          bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * n);
    return;
  }
  if (n < 4) {
    // a few output columns: padding them to a full panel wastes most of the work
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) {
          const float av = trans_a == Trans::kNo ? a[static_cast<std::size_t>(i) * k + p] : a[static_cast<std::size_t>(p) * m + i];
          const float bv = trans_b == Trans::kNo ? b[static_cast<std::size_t>(p) * n + j] : b[static_cast<std::size_t>(j) * k + p];
          acc += static_cast<double>(av) * bv;
        }
        float& out = c[static_cast<std::size_t>(i) * n + j];
        out = accumulate ? static_cast<float>(static_cast<double>(out) + acc) : static_cast<float>(acc);
      }
    return;
  }
  thread_local std::vector<double> pa, pb;
  pack_a(trans_a, m, k, a, pa);
  pack_b(trans_b, k, n, b, pb);
  const int mb = (m + kMr - 1) / kMr;
  const int nb = (n + kNr - 1) / kNr;
  double tile[kMr][kNr];
  for (int jb = 0; jb < nb; ++jb) {
    const double* bpanel = pb.data() + static_cast<std::size_t>(jb) * k * kNr;
    for (int ib = 0; ib < mb; ++ib) {
      micro_kernel(k, pa.data() + static_cast<std::size_t>(ib) * k * kMr, bpanel, tile);
      for (int r = 0; r < kMr; ++r) {
        const int i = ib * kMr + r;
        if (i >= m) break;
        float* crow = c + static_cast<std::size_t>(i) * n;
        for (int q = 0; q < kNr; ++q) {
          const int j = jb * kNr + q;
          if (j >= n) break;
          if (accumulate) {
            crow[j] = static_cast<float>(static_cast<double>(crow[j]) + tile[r][q]);
          } else {
            crow[j] = static_cast<float>(tile[r][q]);
          }
        }
      }
    }
  }
}

}  // namespace nope::kernels
