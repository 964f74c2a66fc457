#pragma once

#include <cstddef>

// Compute kernels for the hot paths of training and sampling. The default
// versions are OpenMP-parallel over the batch and use blocked GEMM; the
// `reference` namespace keeps direct serial loops that the tests compare
// against and the benchmark target measures.

namespace idguard::kernels {

struct ConvGeom {
  int n = 1;
  int cin = 1;
  int h = 1;
  int w = 1;
  int cout = 1;
  int k = 3;
  int stride = 1;
  int pad = 1;

  [[nodiscard]] int hout() const { return (h + 2 * pad - k) / stride + 1; }
  [[nodiscard]] int wout() const { return (w + 2 * pad - k) / stride + 1; }
};

/// y[n, cout, hout, wout] = conv(x, weight) + bias. `bias` may be null.
template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* weight, const T* bias, T* y);

/// Accumulates into dweight/dbias; overwrites dx. Any output pointer may be null.
template <typename T>
void conv2d_backward(const ConvGeom& g, const T* x, const T* weight, const T* dy, T* dx,
                     T* dweight, T* dbias);

/// y[m, n] = a[m, k] * b[n, k]^T (+ bias[n]); the fully connected layer.
template <typename T>
void linear_forward(int m, int k, int n, const T* a, const T* b, const T* bias, T* y);

template <typename T>
void linear_backward(int m, int k, int n, const T* a, const T* b, const T* dy, T* da, T* db,
                     T* dbias);

// Vectorized elementwise kernels (built with fast-math; inputs to exp are
// clamped so no intermediate overflows). Backward kernels accumulate into gx.
template <typename T>
void silu_forward(std::size_t n, const T* x, T* y);
template <typename T>
void silu_backward(std::size_t n, const T* x, const T* g, T* gx);
template <typename T>
void sigmoid_forward(std::size_t n, const T* x, T* y);

/// Group normalization over [n, c, hw] with per-channel affine. Writes the
/// normalized values to xhat and the per-(sample, group) inverse std to rstd.
template <typename T>
void group_norm_forward(int n, int c, int hw, int groups, T eps, const T* x, const T* gamma,
                        const T* beta, T* y, T* xhat, T* rstd);
template <typename T>
void group_norm_backward(int n, int c, int hw, int groups, const T* xhat, const T* rstd,
                         const T* gamma, const T* g, T* gx, T* dgamma, T* dbeta);

/// Number of threads the parallel kernels will use.
int max_threads();

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* weight, const T* bias, T* y);

template <typename T>
void conv2d_backward(const ConvGeom& g, const T* x, const T* weight, const T* dy, T* dx,
                     T* dweight, T* dbias);

template <typename T>
void linear_forward(int m, int k, int n, const T* a, const T* b, const T* bias, T* y);

}  // namespace reference

}  // namespace idguard::kernels
