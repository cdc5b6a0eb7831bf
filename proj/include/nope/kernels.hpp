#pragma once

namespace nope::kernels {

enum class Trans { kNo, kYes };

// C[m×n] = op(A)·op(B), or C += op(A)·op(B) when `accumulate` is set.
// op(A) is m×k (stored k×m when transposed), op(B) is k×n (stored n×k when
// transposed). All storage is dense row-major. Every dot product is
// accumulated in double over increasing k and rounded to float once.
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const float* a, const float* b, float* c,
          bool accumulate = false);

}  // namespace nope::kernels
