#include "earnet/kernels.hpp"

#include <algorithm>
#include <limits>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace earnet::kernels {

namespace {

// Below this many multiply-adds a kernel stays on the calling thread.
constexpr std::size_t kParallelWork = 1 << 15;

constexpr std::size_t kTileRows = 8;
constexpr std::size_t kTileCols = 256;
constexpr std::size_t kTileDepth = 128;

}  // namespace

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int threads) {
#if defined(_OPENMP)
  omp_set_num_threads(std::max(1, threads));
#else
  (void)threads;
#endif
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  std::vector<T> b_packed;
  if (trans_b) {
    b_packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) b_packed[p * n + j] = b[j * ldb + p];
    }
    b = b_packed.data();
    ldb = n;
  }

  const std::size_t row_tiles = (m + kTileRows - 1) / kTileRows;
  const std::size_t col_tiles = (n + kTileCols - 1) / kTileCols;
  const auto tiles = static_cast<std::ptrdiff_t>(row_tiles * col_tiles);

#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t t = 0; t < tiles; ++t) {
    const std::size_t i0 = static_cast<std::size_t>(t) / col_tiles * kTileRows;
    const std::size_t j0 = static_cast<std::size_t>(t) % col_tiles * kTileCols;
    const std::size_t i1 = std::min(m, i0 + kTileRows);
    const std::size_t j1 = std::min(n, j0 + kTileCols);
    if (!accumulate) {
      for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * ldc + j0, c + i * ldc + j1, T{0});
    }
    for (std::size_t p0 = 0; p0 < k; p0 += kTileDepth) {
      const std::size_t p1 = std::min(k, p0 + kTileDepth);
      for (std::size_t i = i0; i < i1; ++i) {
        T* crow = c + i * ldc;
        for (std::size_t p = p0; p < p1; ++p) {
          const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
          const T* brow = b + p * ldb;
#pragma omp simd
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* image, std::size_t channels, const ConvGeometry& g, T* columns) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t rows = channels * g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static) if (rows * oh * ow > kParallelWork)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const std::size_t kx = static_cast<std::size_t>(r) % g.kernel_w;
    const std::size_t ky = static_cast<std::size_t>(r) / g.kernel_w % g.kernel_h;
    const std::size_t ch = static_cast<std::size_t>(r) / (g.kernel_w * g.kernel_h);
    const T* plane = image + ch * g.in_h * g.in_w;
    T* out = columns + static_cast<std::size_t>(r) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                      static_cast<std::ptrdiff_t>(g.pad_h);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
        std::fill(out + oy * ow, out + (oy + 1) * ow, T{0});
        continue;
      }
      const T* row = plane + static_cast<std::size_t>(iy) * g.in_w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                        static_cast<std::ptrdiff_t>(g.pad_w);
        out[oy * ow + ox] =
            (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) ? T{0} : row[ix];
      }
    }
  }
}

template <typename T>
void col2im(const T* columns, std::size_t channels, const ConvGeometry& g, T* image) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t taps = g.kernel_h * g.kernel_w;
  // Parallel over channels: each thread owns whole image planes.
#pragma omp parallel for schedule(static) if (channels * taps * oh * ow > kParallelWork)
  for (std::ptrdiff_t ch = 0; ch < static_cast<std::ptrdiff_t>(channels); ++ch) {
    T* plane = image + static_cast<std::size_t>(ch) * g.in_h * g.in_w;
    for (std::size_t tap = 0; tap < taps; ++tap) {
      const std::size_t ky = tap / g.kernel_w;
      const std::size_t kx = tap % g.kernel_w;
      const T* col = columns + (static_cast<std::size_t>(ch) * taps + tap) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                        static_cast<std::ptrdiff_t>(g.pad_h);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        T* row = plane + static_cast<std::size_t>(iy) * g.in_w;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                          static_cast<std::ptrdiff_t>(g.pad_w);
          if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) row[ix] += col[oy * ow + ox];
        }
      }
    }
  }
}

template <typename T>
void depthwise_conv2d(const T* input, const T* weight, std::size_t channels, const ConvGeometry& g,
                      T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t taps = g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static) if (channels * taps * oh * ow > kParallelWork)
  for (std::ptrdiff_t ch = 0; ch < static_cast<std::ptrdiff_t>(channels); ++ch) {
    const T* plane = input + static_cast<std::size_t>(ch) * g.in_h * g.in_w;
    const T* w = weight + static_cast<std::size_t>(ch) * taps;
    T* out = output + static_cast<std::size_t>(ch) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            acc += plane[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)] *
                   w[ky * g.kernel_w + kx];
          }
        }
        out[oy * ow + ox] = acc;
      }
    }
  }
}

template <typename T>
void depthwise_conv2d_backward(const T* input, const T* weight, const T* grad_output,
                               std::size_t channels, const ConvGeometry& g, T* grad_input,
                               T* grad_weight) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t taps = g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static) if (channels * taps * oh * ow > kParallelWork)
  for (std::ptrdiff_t ch = 0; ch < static_cast<std::ptrdiff_t>(channels); ++ch) {
    const std::size_t plane_offset = static_cast<std::size_t>(ch) * g.in_h * g.in_w;
    const T* plane = input + plane_offset;
    const T* w = weight + static_cast<std::size_t>(ch) * taps;
    const T* gout = grad_output + static_cast<std::size_t>(ch) * oh * ow;
    T* gin = grad_input != nullptr ? grad_input + plane_offset : nullptr;
    T* gw = grad_weight != nullptr ? grad_weight + static_cast<std::size_t>(ch) * taps : nullptr;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T go = gout[oy * ow + ox];
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const std::size_t at =
                static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix);
            if (gin != nullptr) gin[at] += go * w[ky * g.kernel_w + kx];
            if (gw != nullptr) gw[ky * g.kernel_w + kx] += go * plane[at];
          }
        }
      }
    }
  }
}

template <typename T>
void max_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output,
                std::ptrdiff_t* argmax) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
#pragma omp parallel for schedule(static) if (planes * oh * ow * g.kernel_h * g.kernel_w > \
                                                  kParallelWork)
  for (std::ptrdiff_t pl = 0; pl < static_cast<std::ptrdiff_t>(planes); ++pl) {
    const T* plane = input + static_cast<std::size_t>(pl) * g.in_h * g.in_w;
    T* out = output + static_cast<std::size_t>(pl) * oh * ow;
    std::ptrdiff_t* arg = argmax + static_cast<std::size_t>(pl) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::ptrdiff_t best_at = -1;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const auto at = iy * static_cast<std::ptrdiff_t>(g.in_w) + ix;
            if (best_at < 0 || plane[at] > best) {
              best = plane[at];
              best_at = at;
            }
          }
        }
        out[oy * ow + ox] = best_at < 0 ? T{0} : best;
        arg[oy * ow + ox] = best_at;
      }
    }
  }
}

template <typename T>
void avg_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const T area = static_cast<T>(g.kernel_h * g.kernel_w);
#pragma omp parallel for schedule(static) if (planes * oh * ow * g.kernel_h * g.kernel_w > \
                                                  kParallelWork)
  for (std::ptrdiff_t pl = 0; pl < static_cast<std::ptrdiff_t>(planes); ++pl) {
    const T* plane = input + static_cast<std::size_t>(pl) * g.in_h * g.in_w;
    T* out = output + static_cast<std::size_t>(pl) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            acc += plane[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)];
          }
        }
        out[oy * ow + ox] = acc / area;
      }
    }
  }
}

template <typename T>
void avg_pool2d_backward(const T* grad_output, std::size_t planes, const ConvGeometry& g,
                         T* grad_input) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const T area = static_cast<T>(g.kernel_h * g.kernel_w);
#pragma omp parallel for schedule(static) if (planes * oh * ow * g.kernel_h * g.kernel_w > \
                                                  kParallelWork)
  for (std::ptrdiff_t pl = 0; pl < static_cast<std::ptrdiff_t>(planes); ++pl) {
    const T* gout = grad_output + static_cast<std::size_t>(pl) * oh * ow;
    T* gin = grad_input + static_cast<std::size_t>(pl) * g.in_h * g.in_w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T share = gout[oy * ow + ox] / area;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            gin[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)] += share;
          }
        }
      }
    }
  }
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * ldc + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = acc;
    }
  }
}

template <typename T>
void conv2d(const T* input, std::size_t batch, std::size_t in_channels, const T* weight,
            const T* bias, std::size_t out_channels, std::size_t groups, const ConvGeometry& g,
            T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t cin_g = in_channels / groups;
  const std::size_t cout_g = out_channels / groups;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < out_channels; ++co) {
      const std::size_t grp = co / cout_g;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc{0};
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            const std::size_t ch = grp * cin_g + ci;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                                static_cast<std::ptrdiff_t>(g.pad_h);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                                static_cast<std::ptrdiff_t>(g.pad_w);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
                  continue;
                }
                const T xv = input[((n * in_channels + ch) * g.in_h + static_cast<std::size_t>(iy)) *
                                       g.in_w +
                                   static_cast<std::size_t>(ix)];
                const T wv = weight[((co * cin_g + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                acc += xv * wv;
              }
            }
          }
          if (bias != nullptr) acc += bias[co];
          output[((n * out_channels + co) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void avg_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                            static_cast<std::ptrdiff_t>(g.pad_h);
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
              continue;
            }
            acc += input[(pl * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                         static_cast<std::size_t>(ix)];
          }
        }
        output[(pl * oh + oy) * ow + ox] = acc / static_cast<T>(g.kernel_h * g.kernel_w);
      }
    }
  }
}

template <typename T>
void max_pool2d(const T* input, std::size_t planes, const ConvGeometry& g, T* output) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride_h + ky) -
                            static_cast<std::ptrdiff_t>(g.pad_h);
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride_w + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
              continue;
            }
            best = std::max(best, input[(pl * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                        static_cast<std::size_t>(ix)]);
          }
        }
        output[(pl * oh + oy) * ow + ox] = best;
      }
    }
  }
}

}  // namespace reference

#define EARNET_INSTANTIATE(T)                                                                     \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, std::size_t, \
                        const T*, std::size_t, T*, std::size_t, bool);                             \
  template void im2col<T>(const T*, std::size_t, const ConvGeometry&, T*);                         \
  template void col2im<T>(const T*, std::size_t, const ConvGeometry&, T*);                         \
  template void depthwise_conv2d<T>(const T*, const T*, std::size_t, const ConvGeometry&, T*);     \
  template void depthwise_conv2d_backward<T>(const T*, const T*, const T*, std::size_t,            \
                                             const ConvGeometry&, T*, T*);                         \
  template void max_pool2d<T>(const T*, std::size_t, const ConvGeometry&, T*, std::ptrdiff_t*);    \
  template void avg_pool2d<T>(const T*, std::size_t, const ConvGeometry&, T*);                     \
  template void avg_pool2d_backward<T>(const T*, std::size_t, const ConvGeometry&, T*);            \
  template void reference::gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*,   \
                                   std::size_t, const T*, std::size_t, T*, std::size_t, bool);     \
  template void reference::conv2d<T>(const T*, std::size_t, std::size_t, const T*, const T*,       \
                                     std::size_t, std::size_t, const ConvGeometry&, T*);           \
  template void reference::avg_pool2d<T>(const T*, std::size_t, const ConvGeometry&, T*);          \
  template void reference::max_pool2d<T>(const T*, std::size_t, const ConvGeometry&, T*);

EARNET_INSTANTIATE(float)
EARNET_INSTANTIATE(double)

#undef EARNET_INSTANTIATE

}  // namespace earnet::kernels
