#include "gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define GAITFLOW_GEMM_AVX2 1
#endif

namespace gaitflow::detail {

namespace {

// Register-blocked microkernel sizes and cache-blocking parameters.
constexpr int MR = 6;
constexpr int NR = 16;
constexpr int KC = 256;
constexpr int MC = 96;
constexpr int NC = 2048;

// Packed blocks are k-major in groups of MR (resp. NR) rows; slots beyond the
// matrix edge are zero so edge tiles can run the full microkernel.

// A stored MxK row-major, reduction along rows.
void pack_a_nt(const float* A, int lda, int mc, int kc, float* Ap) {
    for (int m0 = 0; m0 < mc; m0 += MR) {
        const int mr = std::min(MR, mc - m0);
        for (int k = 0; k < kc; ++k) {
            for (int i = 0; i < mr; ++i) Ap[i] = A[size_t(m0 + i) * lda + k];
            for (int i = mr; i < MR; ++i) Ap[i] = 0.f;
            Ap += MR;
        }
    }
}

// A stored KxM row-major (transposed use), contiguous reads per k.
void pack_a_tn(const float* A, int lda, int mc, int kc, float* Ap) {
    for (int m0 = 0; m0 < mc; m0 += MR) {
        const int mr = std::min(MR, mc - m0);
        for (int k = 0; k < kc; ++k) {
            const float* src = A + size_t(k) * lda + m0;
            for (int i = 0; i < mr; ++i) Ap[i] = src[i];
            for (int i = mr; i < MR; ++i) Ap[i] = 0.f;
            Ap += MR;
        }
    }
}

// B stored NxK row-major (dot-product form).
void pack_b_nt(const float* B, int ldb, int nc, int kc, float* Bp) {
    for (int n0 = 0; n0 < nc; n0 += NR) {
        const int nr = std::min(NR, nc - n0);
        for (int k = 0; k < kc; ++k) {
            for (int j = 0; j < nr; ++j) Bp[j] = B[size_t(n0 + j) * ldb + k];
            for (int j = nr; j < NR; ++j) Bp[j] = 0.f;
            Bp += NR;
        }
    }
}

// B stored KxN row-major, contiguous reads per k.
void pack_b_tn(const float* B, int ldb, int nc, int kc, float* Bp) {
    for (int n0 = 0; n0 < nc; n0 += NR) {
        const int nr = std::min(NR, nc - n0);
        for (int k = 0; k < kc; ++k) {
            const float* src = B + size_t(k) * ldb + n0;
            for (int j = 0; j < nr; ++j) Bp[j] = src[j];
            for (int j = nr; j < NR; ++j) Bp[j] = 0.f;
            Bp += NR;
        }
    }
}

#ifdef GAITFLOW_GEMM_AVX2

void microkernel(int kc, const float* Ap, const float* Bp, float acc[MR][NR]) {
    __m256 c0a = _mm256_setzero_ps(), c0b = _mm256_setzero_ps();
    __m256 c1a = _mm256_setzero_ps(), c1b = _mm256_setzero_ps();
    __m256 c2a = _mm256_setzero_ps(), c2b = _mm256_setzero_ps();
    __m256 c3a = _mm256_setzero_ps(), c3b = _mm256_setzero_ps();
    __m256 c4a = _mm256_setzero_ps(), c4b = _mm256_setzero_ps();
    __m256 c5a = _mm256_setzero_ps(), c5b = _mm256_setzero_ps();
    for (int k = 0; k < kc; ++k) {
        const float* a = Ap + size_t(k) * MR;
        const __m256 b0 = _mm256_loadu_ps(Bp + size_t(k) * NR);
        const __m256 b1 = _mm256_loadu_ps(Bp + size_t(k) * NR + 8);
        __m256 ai;
        ai = _mm256_broadcast_ss(a + 0);
        c0a = _mm256_fmadd_ps(ai, b0, c0a);
        c0b = _mm256_fmadd_ps(ai, b1, c0b);
        ai = _mm256_broadcast_ss(a + 1);
        c1a = _mm256_fmadd_ps(ai, b0, c1a);
        c1b = _mm256_fmadd_ps(ai, b1, c1b);
        ai = _mm256_broadcast_ss(a + 2);
        c2a = _mm256_fmadd_ps(ai, b0, c2a);
        c2b = _mm256_fmadd_ps(ai, b1, c2b);
        ai = _mm256_broadcast_ss(a + 3);
        c3a = _mm256_fmadd_ps(ai, b0, c3a);
        c3b = _mm256_fmadd_ps(ai, b1, c3b);
        ai = _mm256_broadcast_ss(a + 4);
        c4a = _mm256_fmadd_ps(ai, b0, c4a);
        c4b = _mm256_fmadd_ps(ai, b1, c4b);
        ai = _mm256_broadcast_ss(a + 5);
        c5a = _mm256_fmadd_ps(ai, b0, c5a);
        c5b = _mm256_fmadd_ps(ai, b1, c5b);
    }
    _mm256_storeu_ps(acc[0], c0a);
    _mm256_storeu_ps(acc[0] + 8, c0b);
    _mm256_storeu_ps(acc[1], c1a);
    _mm256_storeu_ps(acc[1] + 8, c1b);
    _mm256_storeu_ps(acc[2], c2a);
    _mm256_storeu_ps(acc[2] + 8, c2b);
    _mm256_storeu_ps(acc[3], c3a);
    _mm256_storeu_ps(acc[3] + 8, c3b);
    _mm256_storeu_ps(acc[4], c4a);
    _mm256_storeu_ps(acc[4] + 8, c4b);
    _mm256_storeu_ps(acc[5], c5a);
    _mm256_storeu_ps(acc[5] + 8, c5b);
}

#else

void microkernel(int kc, const float* Ap, const float* Bp, float acc[MR][NR]) {
    for (int i = 0; i < MR; ++i)
        for (int j = 0; j < NR; ++j) acc[i][j] = 0.f;
    for (int k = 0; k < kc; ++k) {
        const float* a = Ap + size_t(k) * MR;
        const float* b = Bp + size_t(k) * NR;
        for (int i = 0; i < MR; ++i) {
            const float ai = a[i];
            for (int j = 0; j < NR; ++j) acc[i][j] += ai * b[j];
        }
    }
}

#endif

using PackFn = void (*)(const float*, int, int, int, float*);

void gemm_blocked(int M, int N, int K, const float* A, int lda, PackFn pa, const float* B,
                  int ldb, PackFn pb, float* C, bool accumulate, bool a_kmajor, bool b_kmajor) {
    if (M <= 0 || N <= 0) return;
    if (K <= 0) {
        if (!accumulate)
            for (int m = 0; m < M; ++m) std::memset(C + size_t(m) * N, 0, size_t(N) * 4);
        return;
    }
    thread_local std::vector<float> Ap, Bp;
    Ap.resize(size_t(MC + MR) * KC);
    Bp.resize(size_t(NC + NR) * KC);

    for (int kb = 0; kb < K; kb += KC) {
        const int kc = std::min(KC, K - kb);
        const bool first_k = (kb == 0) && !accumulate;
        for (int nb = 0; nb < N; nb += NC) {
            const int nc = std::min(NC, N - nb);
            const float* bsrc = b_kmajor ? B + size_t(kb) * ldb + nb : B + size_t(nb) * ldb + kb;
            pb(bsrc, ldb, nc, kc, Bp.data());
            for (int mb = 0; mb < M; mb += MC) {
                const int mc = std::min(MC, M - mb);
                const float* asrc =
                    a_kmajor ? A + size_t(kb) * lda + mb : A + size_t(mb) * lda + kb;
                pa(asrc, lda, mc, kc, Ap.data());
                for (int n0 = 0; n0 < nc; n0 += NR) {
                    const int nr = std::min(NR, nc - n0);
                    for (int m0 = 0; m0 < mc; m0 += MR) {
                        const int mr = std::min(MR, mc - m0);
                        float acc[MR][NR];
                        microkernel(kc, Ap.data() + size_t(m0) * kc,
                                    Bp.data() + size_t(n0) * kc, acc);
                        float* c = C + size_t(mb + m0) * N + nb + n0;
                        for (int i = 0; i < mr; ++i)
                            for (int j = 0; j < nr; ++j) {
                                if (first_k)
                                    c[size_t(i) * N + j] = acc[i][j];
                                else
                                    c[size_t(i) * N + j] += acc[i][j];
                            }
                    }
                }
            }
        }
    }
}

}  // namespace

void sgemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
    gemm_blocked(M, N, K, A, K, pack_a_nt, B, K, pack_b_nt, C, accumulate, false, false);
}

void sgemm_tn(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate) {
    gemm_blocked(M, N, K, A, M, pack_a_tn, B, N, pack_b_tn, C, accumulate, true, true);
}

}  // namespace gaitflow::detail
