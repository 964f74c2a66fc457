#include "idguard/kernels.hpp"

#include "idguard/aligned.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace idguard::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// cols[(c*k + ky)*k + kx, oy*wout + ox] = x[c, oy*s - pad + ky, ox*s - pad + kx]
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const int ho = g.hout(), wo = g.wout();
  for (int c = 0; c < g.cin; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + iy * g.w;
          if (g.stride == 1) {
            const int shift = kx - g.pad;
            const int lo = std::max(0, -shift), hi = std::min(wo, g.w - shift);
            for (int ox = 0; ox < lo; ++ox) dst[ox] = T(0);
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + shift];
            for (int ox = std::max(hi, lo); ox < wo; ++ox) dst[ox] = T(0);
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* dx) {
  const int ho = g.hout(), wo = g.wout();
  std::fill(dx, dx + static_cast<std::size_t>(g.cin) * g.h * g.w, T(0));
  for (int c = 0; c < g.cin; ++c) {
    T* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * wo;
          T* dst = xc + iy * g.w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* weight, const T* bias, T* y) {
  const int K = g.cin * g.k * g.k;
  const int P = g.hout() * g.wout();
  const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.cout) * P;
  CMapMat<T> W(weight, g.cout, K);

#pragma omp parallel
  {
    idguard::AlignedVector<T> cols(is_pointwise(g) ? 0 : static_cast<std::size_t>(K) * P);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      const T* src = x + n * in_stride;
      if (!is_pointwise(g)) {
        im2col(g, src, cols.data());
        src = cols.data();
      }
      MapMat<T> Y(y + n * out_stride, g.cout, P);
      Y.noalias() = W * CMapMat<T>(src, K, P);
      if (bias) {
        for (int o = 0; o < g.cout; ++o) Y.row(o).array() += bias[o];
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeom& g, const T* x, const T* weight, const T* dy, T* dx,
                     T* dweight, T* dbias) {
  const int K = g.cin * g.k * g.k;
  const int P = g.hout() * g.wout();
  const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.cout) * P;
  CMapMat<T> W(weight, g.cout, K);
  const int nthreads = max_threads();
  std::vector<RowMat<T>> dw_local(nthreads);
  std::vector<std::vector<T>> db_local(nthreads);

#pragma omp parallel
  {
    const int tid = thread_id();
    const bool pw = is_pointwise(g);
    idguard::AlignedVector<T> cols(pw ? 0 : static_cast<std::size_t>(K) * P);
    idguard::AlignedVector<T> dcols(pw ? 0 : static_cast<std::size_t>(K) * P);
    if (dweight) dw_local[tid] = RowMat<T>::Zero(g.cout, K);
    if (dbias) db_local[tid].assign(g.cout, T(0));
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      CMapMat<T> dY(dy + n * out_stride, g.cout, P);
      if (dweight) {
        const T* src = x + n * in_stride;
        if (!pw) {
          im2col(g, src, cols.data());
          src = cols.data();
        }
        dw_local[tid].noalias() += dY * CMapMat<T>(src, K, P).transpose();
      }
      if (dbias) {
        for (int o = 0; o < g.cout; ++o) db_local[tid][o] += dY.row(o).sum();
      }
      if (dx) {
        if (pw) {
          MapMat<T>(dx + n * in_stride, K, P).noalias() = W.transpose() * dY;
        } else {
          MapMat<T>(dcols.data(), K, P).noalias() = W.transpose() * dY;
          col2im(g, dcols.data(), dx + n * in_stride);
        }
      }
    }
  }
  // Reduce in thread order so results are reproducible for a fixed thread count.
  for (int t = 0; t < nthreads; ++t) {
    if (dweight && dw_local[t].size() > 0) MapMat<T>(dweight, g.cout, K) += dw_local[t];
    if (dbias && !db_local[t].empty()) {
      for (int o = 0; o < g.cout; ++o) dbias[o] += db_local[t][o];
    }
  }
}

template <typename T>
void linear_forward(int m, int k, int n, const T* a, const T* b, const T* bias, T* y) {
  MapMat<T> Y(y, m, n);
  Y.noalias() = CMapMat<T>(a, m, k) * CMapMat<T>(b, n, k).transpose();
  if (bias) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) Y(i, j) += bias[j];
    }
  }
}

template <typename T>
void linear_backward(int m, int k, int n, const T* a, const T* b, const T* dy, T* da, T* db,
                     T* dbias) {
  CMapMat<T> dY(dy, m, n);
  if (da) MapMat<T>(da, m, k).noalias() = dY * CMapMat<T>(b, n, k);
  if (db) MapMat<T>(db, n, k).noalias() += dY.transpose() * CMapMat<T>(a, m, k);
  if (dbias) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) dbias[j] += dY(i, j);
    }
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* weight, const T* bias, T* y) {
  const int ho = g.hout(), wo = g.wout();
  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.cout; ++o) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T acc = bias ? bias[o] : T(0);
          for (int c = 0; c < g.cin; ++c) {
            for (int ky = 0; ky < g.k; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < g.k; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                acc += weight[((o * g.cin + c) * g.k + ky) * g.k + kx] *
                       x[((static_cast<std::size_t>(n) * g.cin + c) * g.h + iy) * g.w + ix];
              }
            }
          }
          y[((static_cast<std::size_t>(n) * g.cout + o) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeom& g, const T* x, const T* weight, const T* dy, T* dx,
                     T* dweight, T* dbias) {
  const int ho = g.hout(), wo = g.wout();
  if (dx) std::fill(dx, dx + static_cast<std::size_t>(g.n) * g.cin * g.h * g.w, T(0));
  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.cout; ++o) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const T d = dy[((static_cast<std::size_t>(n) * g.cout + o) * ho + oy) * wo + ox];
          if (dbias) dbias[o] += d;
          for (int c = 0; c < g.cin; ++c) {
            for (int ky = 0; ky < g.k; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < g.k; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                const std::size_t xi = ((static_cast<std::size_t>(n) * g.cin + c) * g.h + iy) * g.w + ix;
                const std::size_t wi = ((o * g.cin + c) * g.k + ky) * g.k + kx;
                if (dweight) dweight[wi] += d * x[xi];
                if (dx) dx[xi] += d * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void linear_forward(int m, int k, int n, const T* a, const T* b, const T* bias, T* y) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = bias ? bias[j] : T(0);
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      y[i * n + j] = acc;
    }
  }
}

}  // namespace reference

#define IDGUARD_INSTANTIATE_KERNELS(T)                                                        \
  template void conv2d_forward<T>(const ConvGeom&, const T*, const T*, const T*, T*);         \
  template void conv2d_backward<T>(const ConvGeom&, const T*, const T*, const T*, T*, T*, T*); \
  template void linear_forward<T>(int, int, int, const T*, const T*, const T*, T*);           \
  template void linear_backward<T>(int, int, int, const T*, const T*, const T*, T*, T*, T*);   \
  template void reference::conv2d_forward<T>(const ConvGeom&, const T*, const T*, const T*, T*); \
  template void reference::conv2d_backward<T>(const ConvGeom&, const T*, const T*, const T*, T*, \
                                              T*, T*);                                         \
  template void reference::linear_forward<T>(int, int, int, const T*, const T*, const T*, T*);

IDGUARD_INSTANTIATE_KERNELS(float)
IDGUARD_INSTANTIATE_KERNELS(double)

}  // namespace idguard::kernels
