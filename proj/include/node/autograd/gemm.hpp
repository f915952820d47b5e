#pragma once

// Small row-major GEMM kernels for the convolution lowering. Columns are
// processed in blocks so the streamed operand stays cache resident. The
// summation order is fixed, so results are reproducible bit for bit.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace node::ag::gemm {

inline constexpr std::size_t kColumnBlock = 512;

// C[M x N] += A[M x K] * B[K x N]
template <class T>
void nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        for (std::size_t i = 0; i < m; ++i) {
            T* __restrict crow = c + i * n;
            const T* arow = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* __restrict brow = b + p * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// C[M x N] += A^T * B with A stored K x M.
template <class T>
void tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        for (std::size_t i = 0; i < m; ++i) {
            T* __restrict crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[p * m + i];
                const T* __restrict brow = b + p * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// C[M x N] += A * B^T with B stored N x K. `scratch` receives B^T.
template <class T>
void nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::vector<T>& scratch) {
    scratch.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
    nn(m, n, k, a, scratch.data(), c);
}

} // namespace node::ag::gemm
