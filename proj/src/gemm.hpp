#pragma once

#include <cstddef>

namespace ccr::detail {

// Strided view of a matrix: element (i, j) lives at data[i*row + j*col].
struct MatView {
    const double* data;
    std::size_t row;
    std::size_t col;
};

struct MutView {
    double* data;
    std::size_t row;
    std::size_t col;
};

// C[m×n] += A[m×k] · B[k×n] for arbitrary strides (so any operand can be a
// transpose without copying). Every C element is accumulated strictly in
// ascending k starting from its current value, so the result is bitwise
// equal to the naive triple loop (given no FP contraction).
void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutView c);

// Row-major convenience form.
inline void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                     const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    gemm(m, n, k, {a, lda, 1}, {b, ldb, 1}, {c, ldc, 1});
}

}  // namespace ccr::detail
