#pragma once

#include <cstddef>

namespace gaitflow::detail {

// C(MxN) = A(MxK) * B(NxK)^T, all row-major; accumulates into C when
// `accumulate` is set. Single-threaded; callers parallelize across batches.
void sgemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);

// C(MxN) = A(KxM)^T * B(KxN), all row-major. The packing layer absorbs the
// transpose, so gradient-of-weights products need no explicit transposes.
void sgemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);

// Reference implementation used by the unit tests and the double-precision
// gradient-check path.
template <typename T>
void gemm_nt_ref(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    for (int m = 0; m < M; ++m)
        for (int n = 0; n < N; ++n) {
            T acc = accumulate ? C[size_t(m) * N + n] : T(0);
            const T* a = A + size_t(m) * K;
            const T* b = B + size_t(n) * K;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            C[size_t(m) * N + n] = acc;
        }
}

template <typename T>
void gemm_tn_ref(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    for (int m = 0; m < M; ++m)
        for (int n = 0; n < N; ++n) {
            T acc = accumulate ? C[size_t(m) * N + n] : T(0);
            for (int k = 0; k < K; ++k) acc += A[size_t(k) * M + m] * B[size_t(k) * N + n];
            C[size_t(m) * N + n] = acc;
        }
}

}  // namespace gaitflow::detail
