#pragma once

// Compute kernels behind the differentiable ops.
//
// Every parallel kernel assigns each output element to exactly one thread and
// accumulates in a fixed order, so results are bit-identical for any thread
// count. The `reference` namespace holds naive serial versions used by tests
// and by bench_kernels.

#include <cstddef>

namespace earnet::kernels {

struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;

  std::size_t out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride_h + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride_w + 1; }
  bool fits() const { return in_h + 2 * pad_h >= kernel_h && in_w + 2 * pad_w >= kernel_w; }
  bool is_pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride_h == 1 && stride_w == 1 && pad_h == 0 &&
           pad_w == 0;
  }
};

// C[M x N] (+)= op(A) * op(B), row-major. op(A) is M x K, op(B) is K x N.
// lda/ldb/ldc are the row strides of the stored (untransposed) matrices.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

// Unfolds one C x H x W image into a (C*kh*kw) x (out_h*out_w) matrix.
template <typename T>
void im2col(const T* image, std::size_t channels, const ConvGeometry& g, T* columns);

// Adjoint of im2col: scatters columns back, accumulating into `image`.
template <typename T>
void col2im(const T* columns, std::size_t channels, const ConvGeometry& g, T* image);

// One-filter-per-channel convolution over `channels` planes.
template <typename T>
void depthwise_conv2d(const T* input, const T* weight, std::size_t channels, const ConvGeometry& g,
                      T* output);

template <typename T>
void depthwise_conv2d_backward(const T* input, const T* weight, const T* grad_output,
                               std::size_t channels, const ConvGeometry& g, T* grad_input,
                               T* grad_weight);

// Window reductions over `planes` independent H x W planes. Max pooling
// records the flat in-plane argmax of each window (or -1 when the window lies
// entirely in padding). Average pooling divides by the full kernel area.
template <typename T>
void max_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output,
                std::ptrdiff_t* argmax);

template <typename T>
void avg_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output);

template <typename T>
void avg_pool2d_backward(const T* grad_output, std::size_t planes, const ConvGeometry& g,
                         T* grad_input);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

// Direct grouped convolution, NCHW, weight [Cout x Cin/groups x kh x kw].
template <typename T>
void conv2d(const T* input, std::size_t batch, std::size_t in_channels, const T* weight,
            const T* bias, std::size_t out_channels, std::size_t groups, const ConvGeometry& g,
            T* output);

template <typename T>
void avg_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output);

template <typename T>
void max_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output);

}  // namespace reference

// Number of OpenMP threads kernels may use (1 when built without OpenMP).
int max_threads();
void set_threads(int threads);

}  // namespace earnet::kernels
