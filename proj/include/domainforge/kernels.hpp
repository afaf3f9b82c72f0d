#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

// Dense row-major kernels used by the model. Inner loops run over contiguous
// memory in axpy form so the compiler can vectorize them without reassociating
// reductions; results are therefore bitwise stable for a given build.
namespace domainforge::kernels {

// Y[rows x m] += A[rows x n] * W[n x m]
template <class S>
void matmul_acc(const S* __restrict__ a, const S* __restrict__ w, S* __restrict__ y, std::size_t rows, std::size_t n,
                std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const S* arow = a + r * n;
    S* yrow = y + r * m;
    for (std::size_t i = 0; i < n; ++i) {
      const S av = arow[i];
      const S* wrow = w + i * m;
      for (std::size_t j = 0; j < m; ++j) yrow[j] += av * wrow[j];
    }
  }
}

// dW[n x m] += A[rows x n]^T * dY[rows x m]
template <class S>
void matmul_tn_acc(const S* __restrict__ a, const S* __restrict__ dy, S* __restrict__ dw, std::size_t rows, std::size_t n,
                   std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const S* arow = a + r * n;
    const S* dyrow = dy + r * m;
    for (std::size_t i = 0; i < n; ++i) {
      const S av = arow[i];
      if (av == S(0)) continue;
      S* dwrow = dw + i * m;
      for (std::size_t j = 0; j < m; ++j) dwrow[j] += av * dyrow[j];
    }
  }
}

template <class S>
std::vector<S> transpose(const S* w, std::size_t n, std::size_t m) {
  std::vector<S> t(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t[j * n + i] = w[i * m + j];
  return t;
}

template <class S>
S dot(const S* a, const S* b, std::size_t n) {
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class S>
void axpy(S alpha, const S* __restrict__ x, S* __restrict__ y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace domainforge::kernels
