// Compiled with -ffast-math so the exp calls vectorize.

#include <algorithm>
#include <cmath>

#include "idguard/kernels.hpp"

namespace idguard::kernels {

namespace {

template <typename T>
inline T logistic(T x) {
  x = std::min(std::max(x, T(-60)), T(60));
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
void silu_forward(std::size_t n, const T* x, T* y) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * logistic(x[i]);
}

template <typename T>
void silu_backward(std::size_t n, const T* x, const T* g, T* gx) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) {
    const T s = logistic(x[i]);
    gx[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
  }
}

template <typename T>
void sigmoid_forward(std::size_t n, const T* x, T* y) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] = logistic(x[i]);
}

template <typename T>
void group_norm_forward(int n, int c, int hw, int groups, T eps, const T* x, const T* gamma, const T* beta, T* y,
                        T* xhat, T* rstd) {
  const int cg = c / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * hw;
#pragma omp parallel for collapse(2) schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + gi * cg) * hw;
      const T* xs = x + base;
      T mu = 0;
      for (std::size_t j = 0; j < m; ++j) mu += xs[j];
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::size_t j = 0; j < m; ++j) var += (xs[j] - mu) * (xs[j] - mu);
      var /= static_cast<T>(m);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[i * groups + gi] = r;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = gi * cg + cc;
        const T ga = gamma[ch], be = beta[ch];
        const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
        for (int j = 0; j < hw; ++j) {
          const T h = (x[off + j] - mu) * r;
          xhat[off + j] = h;
          y[off + j] = h * ga + be;
        }
      }
    }
  }
}

template <typename T>
void group_norm_backward(int n, int c, int hw, int groups, const T* xhat, const T* rstd, const T* gamma, const T* g,
                         T* gx, T* dgamma, T* dbeta) {
  const int cg = c / groups;
  const T inv_m = T(1) / static_cast<T>(static_cast<std::size_t>(cg) * hw);
  if (dgamma || dbeta) {
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
        T sg = 0, sb = 0;
        for (int j = 0; j < hw; ++j) {
          sg += g[off + j] * xhat[off + j];
          sb += g[off + j];
        }
        if (dgamma) dgamma[ch] += sg;
        if (dbeta) dbeta[ch] += sb;
      }
    }
  }
  if (!gx) return;
#pragma omp parallel for collapse(2) schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + gi * cg) * hw;
      T s1 = 0, s2 = 0;
      for (int cc = 0; cc < cg; ++cc) {
        const T ga = gamma[gi * cg + cc];
        const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
        for (int j = 0; j < hw; ++j) {
          const T d = g[off + j] * ga;
          s1 += d;
          s2 += d * xhat[off + j];
        }
      }
      const T r = rstd[i * groups + gi];
      for (int cc = 0; cc < cg; ++cc) {
        const T ga = gamma[gi * cg + cc];
        const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
        for (int j = 0; j < hw; ++j) {
          gx[off + j] += r * (g[off + j] * ga - inv_m * s1 - xhat[off + j] * inv_m * s2);
        }
      }
    }
  }
}

#define IDGUARD_INSTANTIATE_ELEMENTWISE(T)                                                                  \
  template void silu_forward<T>(std::size_t, const T*, T*);                                                 \
  template void silu_backward<T>(std::size_t, const T*, const T*, T*);                                      \
  template void sigmoid_forward<T>(std::size_t, const T*, T*);                                              \
  template void group_norm_forward<T>(int, int, int, int, T, const T*, const T*, const T*, T*, T*, T*);     \
  template void group_norm_backward<T>(int, int, int, int, const T*, const T*, const T*, const T*, T*, T*, \
                                       T*);

IDGUARD_INSTANTIATE_ELEMENTWISE(float)
IDGUARD_INSTANTIATE_ELEMENTWISE(double)

}  // namespace idguard::kernels
