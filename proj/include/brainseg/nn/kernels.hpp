#pragma once

// Dense compute kernels behind the differentiable ops.
//
// Two implementations are kept side by side: `kernels::` holds the packed,
// OpenMP-parallel versions used by the model, `kernels::reference::` holds
// straightforward serial loops that the tests and the benchmark compare
// against. Every parallel kernel partitions its output so that each element
// is produced by exactly one thread with a fixed summation order, which keeps
// results bit-identical for any thread count.

#include <cstddef>

namespace brainseg::nn::kernels {

enum class Trans { kNo, kYes };

/// C = op(A) * op(B) + beta * C with row-major storage.
/// op(A) is m x k, op(B) is k x n, C is m x n.
template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

/// Unfolds one [channels, h, w] image into a [channels*k*k, out_h*out_w] matrix.
template <typename T>
void im2col(const T* x, int channels, int h, int w, int ksize, int stride, int pad, int out_h,
            int out_w, T* col);

/// Adjoint of im2col: accumulates the column matrix back into `dx`.
template <typename T>
void col2im(const T* col, int channels, int h, int w, int ksize, int stride, int pad, int out_h,
            int out_w, T* dx);

/// Number of worker threads the parallel kernels will use.
int max_threads();

/// Caps the worker count (values < 1 are ignored).
void set_max_threads(int n);

namespace reference {

template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

/// Direct cross-correlation of one [c_in, h, w] image with [c_out, c_in, k, k]
/// weights; `bias` may be null.
template <typename T>
void conv2d(const T* x, int c_in, int h, int w, const T* weight, const T* bias, int c_out,
            int ksize, int stride, int pad, T* y);

}  // namespace reference

}  // namespace brainseg::nn::kernels
