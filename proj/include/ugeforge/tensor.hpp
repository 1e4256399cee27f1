#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ugeforge/dual.hpp"
#include "ugeforge/error.hpp"

namespace ugeforge {

// Dense NCHW activation tensor. Vectors and logits are N x C x 1 x 1.
template <class T>
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape{n, c, h, w}, data(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }
  std::size_t size() const { return data.size(); }
  std::size_t sample_size() const { return static_cast<std::size_t>(c()) * h() * w(); }

  T* sample(int i) { return data.data() + i * sample_size(); }
  const T* sample(int i) const { return data.data() + i * sample_size(); }

  T& at(int i, int ch, int y, int x) {
    return data[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  const T& at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::array<int, 4>& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]) + "x" +
         std::to_string(s[3]);
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

namespace detail {

// C[MxN] (+)= op(A) * op(B), row-major. op(A) is MxK, op(B) is KxN.
// Generic reference loops; double and Dual<double> are specialised below.
template <class T>
void gemm_generic(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
                  bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  if (!trans_b) {
    for (int i = 0; i < M; ++i) {
      T* c = C + static_cast<std::size_t>(i) * N;
      for (int k = 0; k < K; ++k) {
        const T a = trans_a ? A[static_cast<std::size_t>(k) * M + i] : A[static_cast<std::size_t>(i) * K + k];
        const T* b = B + static_cast<std::size_t>(k) * N;
        for (int j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else {
    for (int i = 0; i < M; ++i) {
      for (int j = 0; j < N; ++j) {
        T acc(0);
        const T* b = B + static_cast<std::size_t>(j) * K;
        for (int k = 0; k < K; ++k) {
          const T a = trans_a ? A[static_cast<std::size_t>(k) * M + i] : A[static_cast<std::size_t>(i) * K + k];
          acc += a * b[k];
        }
        C[static_cast<std::size_t>(i) * N + j] += acc;
      }
    }
  }
}

inline void gemm_eigen(bool trans_a, bool trans_b, int M, int N, int K, const double* A,
                       const double* B, double* C, bool accumulate) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMat> c(C, M, N);
  Eigen::Map<const RowMat> a(A, trans_a ? K : M, trans_a ? M : K);
  Eigen::Map<const RowMat> b(B, trans_b ? N : K, trans_b ? K : N);
  if (!accumulate) c.setZero();
  if (trans_a && trans_b) {
    c.noalias() += a.transpose() * b.transpose();
  } else if (trans_a) {
    c.noalias() += a.transpose() * b;
  } else if (trans_b) {
    c.noalias() += a * b.transpose();
  } else {
    c.noalias() += a * b;
  }
}

}  // namespace detail

template <class T>
void gemm(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
          bool accumulate) {
  if constexpr (std::is_same_v<T, double>) {
    detail::gemm_eigen(trans_a, trans_b, M, N, K, A, B, C, accumulate);
  } else if constexpr (std::is_same_v<T, Dual<double>>) {
    // (Av + e Ad)(Bv + e Bd) = AvBv + e (AvBd + AdBv): three real products.
    const std::size_t na = static_cast<std::size_t>(M) * K, nb = static_cast<std::size_t>(K) * N,
                      nc = static_cast<std::size_t>(M) * N;
    std::vector<double> av(na), ad(na), bv(nb), bd(nb), cv(nc), cd(nc);
    for (std::size_t i = 0; i < na; ++i) av[i] = A[i].v, ad[i] = A[i].d;
    for (std::size_t i = 0; i < nb; ++i) bv[i] = B[i].v, bd[i] = B[i].d;
    detail::gemm_eigen(trans_a, trans_b, M, N, K, av.data(), bv.data(), cv.data(), false);
    detail::gemm_eigen(trans_a, trans_b, M, N, K, av.data(), bd.data(), cd.data(), false);
    detail::gemm_eigen(trans_a, trans_b, M, N, K, ad.data(), bv.data(), cd.data(), true);
    for (std::size_t i = 0; i < nc; ++i) {
      if (accumulate) {
        C[i].v += cv[i];
        C[i].d += cd[i];
      } else {
        C[i] = Dual<double>(cv[i], cd[i]);
      }
    }
  } else {
    detail::gemm_generic(trans_a, trans_b, M, N, K, A, B, C, accumulate);
  }
}

// Convolution geometry for one sample.
struct ConvGeom {
  int channels, height, width, kernel, stride, pad;
  int out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h() * out_w(); }
};

// cols[(c*k + ky)*k + kx][oy*ow + ox] = img[c][oy*s - p + ky][ox*s - p + kx]
template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            row[oy * ow + ox] = (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                                    ? img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix]
                                    : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into an image buffer.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.width) continue;
            img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace ugeforge
