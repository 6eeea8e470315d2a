#include "brainseg/nn/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>
#include <vector>

namespace brainseg::nn::kernels {

namespace {

template <typename T>
struct Simd;

template <>
struct Simd<float> {
  typedef float vec __attribute__((vector_size(64)));
  static constexpr int kLanes = 16;
};

template <>
struct Simd<double> {
  typedef double vec __attribute__((vector_size(64)));
  static constexpr int kLanes = 8;
};

constexpr int kMr = 8;
constexpr int kKc = 256;
constexpr int kMc = 128;
constexpr int kNc = 3072;

// Below this many multiply-adds the fork/join costs more than it saves.
constexpr long long kParallelWork = 1LL << 18;

template <typename T>
constexpr int nr() {
  return 2 * Simd<T>::kLanes;
}

template <typename T>
inline T load_a(Trans t, const T* a, int lda, int i, int p) {
  return t == Trans::kNo ? a[static_cast<std::size_t>(i) * lda + p]
                         : a[static_cast<std::size_t>(p) * lda + i];
}

template <typename T>
inline T load_b(Trans t, const T* b, int ldb, int p, int j) {
  return t == Trans::kNo ? b[static_cast<std::size_t>(p) * ldb + j]
                         : b[static_cast<std::size_t>(j) * ldb + p];
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into kMr-row panels,
// k-major inside each panel, zero padded.
template <typename T>
void pack_a(Trans t, const T* a, int lda, int i0, int mc, int p0, int kc, T* out, bool parallel) {
  const int panels = (mc + kMr - 1) / kMr;
#pragma omp parallel for schedule(static) if (parallel)
  for (int pi = 0; pi < panels; ++pi) {
    T* dst = out + static_cast<std::size_t>(pi) * kMr * kc;
    const int rows = std::min(kMr, mc - pi * kMr);
    for (int p = 0; p < kc; ++p) {
      for (int i = 0; i < kMr; ++i) {
        dst[p * kMr + i] = i < rows ? load_a(t, a, lda, i0 + pi * kMr + i, p0 + p) : T{0};
      }
    }
  }
}

template <typename T>
void pack_b(Trans t, const T* b, int ldb, int p0, int kc, int j0, int nc, T* out, bool parallel) {
  constexpr int kNr = nr<T>();
  const int panels = (nc + kNr - 1) / kNr;
#pragma omp parallel for schedule(static) if (parallel)
  for (int pj = 0; pj < panels; ++pj) {
    T* dst = out + static_cast<std::size_t>(pj) * kNr * kc;
    const int cols = std::min(kNr, nc - pj * kNr);
    if (t == Trans::kNo && cols == kNr) {
      for (int p = 0; p < kc; ++p) {
        std::memcpy(dst + p * kNr, b + static_cast<std::size_t>(p0 + p) * ldb + j0 + pj * kNr,
                    sizeof(T) * kNr);
      }
      continue;
    }
    for (int p = 0; p < kc; ++p) {
      for (int j = 0; j < kNr; ++j) {
        dst[p * kNr + j] = j < cols ? load_b(t, b, ldb, p0 + p, j0 + pj * kNr + j) : T{0};
      }
    }
  }
}

// kMr x nr tile: C = beta*C + A*B on the first k-block, C += A*B after.
template <typename T>
inline void micro_kernel(int kc, const T* __restrict ap, const T* __restrict bp, T* c, int ldc,
                         int rows, int cols, bool first, T beta) {
  using V = typename Simd<T>::vec;
  constexpr int kL = Simd<T>::kLanes;
  constexpr int kNr = nr<T>();
  V acc[kMr][2];
  for (int i = 0; i < kMr; ++i) {
    acc[i][0] = V{};
    acc[i][1] = V{};
  }
  for (int p = 0; p < kc; ++p) {
    V b0;
    V b1;
    std::memcpy(&b0, bp + p * kNr, sizeof(V));
    std::memcpy(&b1, bp + p * kNr + kL, sizeof(V));
    const T* a = ap + p * kMr;
#pragma GCC unroll 8
    for (int i = 0; i < kMr; ++i) {
      acc[i][0] += a[i] * b0;
      acc[i][1] += a[i] * b1;
    }
  }
  alignas(64) T tile[kMr][kNr];
  for (int i = 0; i < kMr; ++i) {
    std::memcpy(&tile[i][0], &acc[i][0], sizeof(V));
    std::memcpy(&tile[i][kL], &acc[i][1], sizeof(V));
  }
  for (int i = 0; i < rows; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (!first) {
      for (int j = 0; j < cols; ++j) crow[j] += tile[i][j];
    } else if (beta == T{0}) {
      for (int j = 0; j < cols; ++j) crow[j] = tile[i][j];
    } else {
      for (int j = 0; j < cols; ++j) crow[j] = beta * crow[j] + tile[i][j];
    }
  }
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void set_max_threads(int n) {
  if (n >= 1) omp_set_num_threads(n);
}

template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<std::size_t>(i) * ldc;
      for (int j = 0; j < n; ++j) crow[j] = beta == T{0} ? T{0} : beta * crow[j];
    }
    return;
  }
  constexpr int kNr = nr<T>();
  const bool parallel =
      static_cast<long long>(m) * n * k >= kParallelWork && omp_get_max_threads() > 1;

  thread_local std::vector<T> apack;
  thread_local std::vector<T> bpack;

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    const int npanels = (nc + kNr - 1) / kNr;
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      const bool first = pc == 0;
      bpack.resize(static_cast<std::size_t>(npanels) * kNr * kc);
      pack_b(trans_b, b, ldb, pc, kc, jc, nc, bpack.data(), parallel);
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        const int mpanels = (mc + kMr - 1) / kMr;
        apack.resize(static_cast<std::size_t>(mpanels) * kMr * kc);
        pack_a(trans_a, a, lda, ic, mc, pc, kc, apack.data(), parallel);
        const T* ap_base = apack.data();
        const T* bp_base = bpack.data();
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
        for (int pj = 0; pj < npanels; ++pj) {
          for (int pi = 0; pi < mpanels; ++pi) {
            const int rows = std::min(kMr, mc - pi * kMr);
            const int cols = std::min(kNr, nc - pj * kNr);
            T* ctile = c + static_cast<std::size_t>(ic + pi * kMr) * ldc + jc + pj * kNr;
            micro_kernel<T>(kc, ap_base + static_cast<std::size_t>(pi) * kMr * kc,
                            bp_base + static_cast<std::size_t>(pj) * kNr * kc, ctile, ldc, rows,
                            cols, first, beta);
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* x, int channels, int h, int w, int ksize, int stride, int pad, int out_h,
            int out_w, T* col) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  const bool parallel = static_cast<long long>(channels) * ksize * ksize * plane >= kParallelWork &&
                        omp_get_max_threads() > 1;
#pragma omp parallel for schedule(static) if (parallel)
  for (int ch = 0; ch < channels; ++ch) {
    const T* xc = x + static_cast<std::size_t>(ch) * h * w;
    for (int ki = 0; ki < ksize; ++ki) {
      for (int kj = 0; kj < ksize; ++kj) {
        T* row = col + (static_cast<std::size_t>(ch) * ksize * ksize + ki * ksize + kj) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            // Valid ox range: 0 <= ox - pad + kj < w.
            const int lo = std::clamp(pad - kj, 0, out_w);
            const int hi = std::clamp(w + pad - kj, lo, out_w);
            std::fill(dst, dst + lo, T{0});
            std::copy(src + lo - pad + kj, src + hi - pad + kj, dst + lo);
            std::fill(dst + hi, dst + out_w, T{0});
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride - pad + kj;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, int ksize, int stride, int pad, int out_h,
            int out_w, T* dx) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  const bool parallel = static_cast<long long>(channels) * ksize * ksize * plane >= kParallelWork &&
                        omp_get_max_threads() > 1;
#pragma omp parallel for schedule(static) if (parallel)
  for (int ch = 0; ch < channels; ++ch) {
    T* dc = dx + static_cast<std::size_t>(ch) * h * w;
    for (int ki = 0; ki < ksize; ++ki) {
      for (int kj = 0; kj < ksize; ++kj) {
        const T* row =
            col + (static_cast<std::size_t>(ch) * ksize * ksize + ki * ksize + kj) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          T* dst = dc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

namespace reference {

template <typename T>
void gemm(Trans trans_a, Trans trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        acc += static_cast<double>(load_a(trans_a, a, lda, i, p)) * load_b(trans_b, b, ldb, p, j);
      }
      T& out = c[static_cast<std::size_t>(i) * ldc + j];
      out = static_cast<T>(acc + (beta == T{0} ? 0.0 : static_cast<double>(beta) * out));
    }
  }
}

template <typename T>
void conv2d(const T* x, int c_in, int h, int w, const T* weight, const T* bias, int c_out,
            int ksize, int stride, int pad, T* y) {
  const int out_h = (h + 2 * pad - ksize) / stride + 1;
  const int out_w = (w + 2 * pad - ksize) / stride + 1;
  for (int co = 0; co < c_out; ++co) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double acc = bias ? static_cast<double>(bias[co]) : 0.0;
        for (int ci = 0; ci < c_in; ++ci) {
          for (int ki = 0; ki < ksize; ++ki) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) continue;
            for (int kj = 0; kj < ksize; ++kj) {
              const int ix = ox * stride - pad + kj;
              if (ix < 0 || ix >= w) continue;
              acc += static_cast<double>(
                         weight[((static_cast<std::size_t>(co) * c_in + ci) * ksize + ki) * ksize +
                                kj]) *
                     x[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
            }
          }
        }
        y[(static_cast<std::size_t>(co) * out_h + oy) * out_w + ox] = static_cast<T>(acc);
      }
    }
  }
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float,
                          float*, int);
template void gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double, double*, int);
template void conv2d<float>(const float*, int, int, int, const float*, const float*, int, int, int,
                            int, float*);
template void conv2d<double>(const double*, int, int, int, const double*, const double*, int, int,
                             int, int, double*);

}  // namespace reference

template void gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float,
                          float*, int);
template void gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double, double*, int);
template void im2col<float>(const float*, int, int, int, int, int, int, int, int, float*);
template void im2col<double>(const double*, int, int, int, int, int, int, int, int, double*);
template void col2im<float>(const float*, int, int, int, int, int, int, int, int, float*);
template void col2im<double>(const double*, int, int, int, int, int, int, int, int, double*);

}  // namespace brainseg::nn::kernels
