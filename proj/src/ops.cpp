#include "earnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "earnet/kernels.hpp"

namespace earnet {

namespace {

using kernels::ConvGeometry;

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects N x C x H x W, got " + shape_str(s));
}

ConvGeometry window_geometry(const Shape& xs, std::array<std::size_t, 2> kernel,
                             std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
                             const char* op) {
  if (kernel[0] == 0 || kernel[1] == 0 || stride[0] == 0 || stride[1] == 0) {
    throw ConfigError(std::string(op) + ": kernel and stride must be positive");
  }
  ConvGeometry g{xs[2], xs[3], kernel[0], kernel[1], stride[0], stride[1], padding[0], padding[1]};
  if (!g.fits()) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kernel[0]) + "x" +
                     std::to_string(kernel[1]) + " larger than padded input " + shape_str(xs));
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p, Tape<T>* tape) {
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  require_rank4(xs, "conv2d");
  if (ws.size() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(ws));
  const std::size_t batch = xs[0], cin = xs[1], cout = ws[0], groups = p.groups;
  if (groups == 0 || cin % groups != 0 || cout % groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide Cin=" +
                      std::to_string(cin) + " and Cout=" + std::to_string(cout));
  }
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  if (ws[1] != cin_g) {
    throw ShapeError("conv2d weight " + shape_str(ws) + " does not match input " + shape_str(xs) +
                     " with groups=" + std::to_string(groups));
  }
  if (p.bias.defined() && p.bias.shape() != Shape{cout}) {
    throw ShapeError("conv2d bias must be [" + std::to_string(cout) + "]");
  }
  const ConvGeometry g = window_geometry(xs, {ws[2], ws[3]}, p.stride, p.padding, "conv2d");
  const std::size_t oh = g.out_h(), ow = g.out_w(), plane = oh * ow;
  const std::size_t taps = g.kernel_h * g.kernel_w;
  const std::size_t depth = cin_g * taps;
  const bool depthwise = cin_g == 1 && cout_g == 1;
  const bool pointwise = g.is_pointwise();

  Tensor<T> out({batch, cout, oh, ow});
  std::vector<T> columns;
  if (!depthwise && !pointwise) columns.resize(depth * plane);
  const T* xp = x.ptr();
  const T* wp = p.weight.ptr();
  T* yp = out.ptr();
  for (std::size_t n = 0; n < batch; ++n) {
    if (depthwise) {
      kernels::depthwise_conv2d(xp + n * cin * g.in_h * g.in_w, wp, cin, g, yp + n * cout * plane);
      continue;
    }
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const T* xin = xp + (n * cin + grp * cin_g) * g.in_h * g.in_w;
      const T* rhs = xin;
      if (!pointwise) {
        kernels::im2col(xin, cin_g, g, columns.data());
        rhs = columns.data();
      }
      kernels::gemm(false, false, cout_g, plane, depth, wp + grp * cout_g * depth, depth, rhs,
                    plane, yp + (n * cout + grp * cout_g) * plane, plane, false);
    }
  }
  if (p.bias.defined()) {
    const T* bp = p.bias.ptr();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < cout; ++c) {
        T* row = yp + (n * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += bp[c];
      }
    }
  }

  if (should_record(tape, {&x, &p.weight, &p.bias})) {
    out.set_requires_grad(true);
    tape->record([x = x, weight = p.weight, bias = p.bias, out, g, groups, depthwise, pointwise]() mutable {
      if (!out.has_grad()) return;
      const Shape& xs = x.shape();
      const std::size_t batch = xs[0], cin = xs[1], cout = weight.dim(0);
      const std::size_t cin_g = cin / groups, cout_g = cout / groups;
      const std::size_t plane = g.out_h() * g.out_w(), in_plane = g.in_h * g.in_w;
      const std::size_t depth = cin_g * g.kernel_h * g.kernel_w;
      const T* gy = std::as_const(out).grad().data();
      const T* xp = std::as_const(x).ptr();
      const T* wp = std::as_const(weight).ptr();
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      T* gw = weight.requires_grad() ? weight.grad().data() : nullptr;

      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < cout; ++c) {
            const T* row = gy + (n * cout + c) * plane;
            T acc{0};
            for (std::size_t i = 0; i < plane; ++i) acc += row[i];
            gb[c] += acc;
          }
        }
      }
      if (gx == nullptr && gw == nullptr) return;

      std::vector<T> columns, dcolumns;
      if (!depthwise && !pointwise) {
        if (gw != nullptr) columns.resize(depth * plane);
        if (gx != nullptr) dcolumns.resize(depth * plane);
      }
      for (std::size_t n = 0; n < batch; ++n) {
        if (depthwise) {
          kernels::depthwise_conv2d_backward(xp + n * cin * in_plane, wp, gy + n * cout * plane,
                                             cin, g, gx ? gx + n * cin * in_plane : nullptr, gw);
          continue;
        }
        for (std::size_t grp = 0; grp < groups; ++grp) {
          const std::size_t xoff = (n * cin + grp * cin_g) * in_plane;
          const T* gyg = gy + (n * cout + grp * cout_g) * plane;
          const T* wg = wp + grp * cout_g * depth;
          if (gw != nullptr) {
            const T* rhs = xp + xoff;
            if (!pointwise) {
              kernels::im2col(xp + xoff, cin_g, g, columns.data());
              rhs = columns.data();
            }
            kernels::gemm(false, true, cout_g, depth, plane, gyg, plane, rhs, plane,
                          gw + grp * cout_g * depth, depth, true);
          }
          if (gx != nullptr) {
            if (pointwise) {
              kernels::gemm(true, false, depth, plane, cout_g, wg, depth, gyg, plane, gx + xoff,
                            plane, true);
            } else {
              kernels::gemm(true, false, depth, plane, cout_g, wg, depth, gyg, plane,
                            dcolumns.data(), plane, false);
              kernels::col2im(dcolumns.data(), cin_g, g, gx + xoff);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const BatchNormParams<T>& p, Tape<T>* tape) {
  const Shape& xs = x.shape();
  require_rank4(xs, "batchnorm2d");
  const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{
           &p.gamma, &p.beta, &p.running_mean, &p.running_var}) {
    if (t->shape() != Shape{channels}) {
      throw ShapeError("batchnorm2d parameters must be [" + std::to_string(channels) +
                       "], input " + shape_str(xs));
    }
  }
  if (!(p.eps > T{0})) throw ConfigError("batchnorm2d eps must be positive");
  const bool train = p.mode == Mode::train;
  const std::size_t count = batch * plane;
  if (train && count < 2) {
    throw ContractError("batchnorm2d in train mode needs more than one value per channel (N*H*W=" +
                        std::to_string(count) + "); use a larger batch");
  }

  // Per-channel statistics used for normalisation.
  std::vector<T> mean(channels), inv_std(channels);
  const T* xp = x.ptr();
  if (train) {
    auto rm = p.running_mean.data();
    auto rv = p.running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* row = xp + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += row[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* row = xp + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (row[i] - mu) * (row[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.eps)));
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[c] = static_cast<T>((1.0 - p.momentum) * rm[c] + p.momentum * mu);
      rv[c] = static_cast<T>((1.0 - p.momentum) * rv[c] + p.momentum * unbiased);
    }
  } else {
    auto rm = p.running_mean.data();
    auto rv = p.running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      if (rv[c] < T{0}) throw ConfigError("batchnorm2d running variance is negative");
      mean[c] = rm[c];
      inv_std[c] = T{1} / std::sqrt(rv[c] + p.eps);
    }
  }

  Tensor<T> out(xs);
  T* yp = out.ptr();
  auto gamma = p.gamma.data();
  auto beta = p.beta.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T scale = gamma[c] * inv_std[c];
      const T shift = beta[c] - mean[c] * scale;
      const T* row = xp + (n * channels + c) * plane;
      T* orow = yp + (n * channels + c) * plane;
      if (train) {
        for (std::size_t i = 0; i < plane; ++i) {
          orow[i] = gamma[c] * ((row[i] - mean[c]) * inv_std[c]) + beta[c];
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) orow[i] = row[i] * scale + shift;
      }
    }
  }

  if (should_record(tape, {&x, &p.gamma, &p.beta})) {
    out.set_requires_grad(true);
    tape->record([x = x, gamma = p.gamma, beta = p.beta, out, mean = std::move(mean), inv_std = std::move(inv_std), train]() mutable {
      if (!out.has_grad()) return;
      const Shape& xs = x.shape();
      const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
      const T m = static_cast<T>(batch * plane);
      const T* gy = std::as_const(out).grad().data();
      const T* xp = std::as_const(x).ptr();
      auto gv = std::as_const(gamma).data();
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g{0}, sum_gx{0};
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (xp[off + i] - mean[c]) * inv_std[c];
            sum_g += gy[off + i];
            sum_gx += gy[off + i] * xhat;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += sum_gx;
        if (beta.requires_grad()) beta.grad()[c] += sum_g;
        if (gx == nullptr) continue;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (train) {
              const T xhat = (xp[off + i] - mean[c]) * inv_std[c];
              gx[off + i] += gv[c] * inv_std[c] / m * (m * gy[off + i] - sum_g - xhat * sum_gx);
            } else {
              gx[off + i] += gy[off + i] * gv[c] * inv_std[c];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, Tape<T>* tape) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T{0} ? xv[i] : T{0};
  } else {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = T{1} / (T{1} + std::exp(-xv[i]));
  }
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, kind]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      auto o = std::as_const(out).data();
      auto gx = x.grad();
      if (kind == Activation::relu) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (o[i] > T{0}) gx[i] += g[i];
        }
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * o[i] * (T{1} - o[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::array<std::size_t, 2> kernel,
                 std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
                 Tape<T>* tape) {
  const Shape& xs = x.shape();
  require_rank4(xs, "pool2d");
  const ConvGeometry g = window_geometry(xs, kernel, stride, padding, "pool2d");
  const std::size_t planes = xs[0] * xs[1];
  Tensor<T> out({xs[0], xs[1], g.out_h(), g.out_w()});
  std::vector<std::ptrdiff_t> argmax;
  if (kind == PoolKind::max) {
    argmax.resize(out.numel());
    kernels::max_pool2d(x.ptr(), planes, g, out.ptr(), argmax.data());
  } else {
    kernels::avg_pool2d(x.ptr(), planes, g, out.ptr());
  }
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, kind, g, planes, argmax = std::move(argmax)]() mutable {
      if (!out.has_grad()) return;
      auto gy = std::as_const(out).grad();
      auto gx = x.grad();
      if (kind == PoolKind::avg) {
        kernels::avg_pool2d_backward(gy.data(), planes, g, gx.data());
        return;
      }
      const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h() * g.out_w();
      for (std::size_t pl = 0; pl < planes; ++pl) {
        for (std::size_t i = 0; i < out_plane; ++i) {
          const auto at = argmax[pl * out_plane + i];
          if (at >= 0) gx[pl * in_plane + static_cast<std::size_t>(at)] += gy[pl * out_plane + i];
        }
      }
    });
  }
  return out;
}

namespace {

// Output channel j*groups + g holds input channel g*(C/groups) + j.
std::vector<std::size_t> shuffle_source(std::size_t channels, std::size_t groups) {
  const std::size_t per_group = channels / groups;
  std::vector<std::size_t> source(channels);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < per_group; ++j) source[j * groups + g] = g * per_group + j;
  }
  return source;
}

}  // namespace

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups, Tape<T>* tape) {
  const Shape& xs = x.shape();
  require_rank4(xs, "channel_shuffle");
  if (groups == 0 || xs[1] % groups != 0) {
    throw ConfigError("channel_shuffle: groups=" + std::to_string(groups) +
                      " must divide C=" + std::to_string(xs[1]));
  }
  const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  auto source = shuffle_source(channels, groups);
  Tensor<T> out(xs);
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(xp + (n * channels + source[c]) * plane, plane, yp + (n * channels + c) * plane);
    }
  }
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, source = std::move(source), batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      const T* gy = std::as_const(out).grad().data();
      T* gx = x.grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          const T* src = gy + (n * channels + c) * plane;
          T* dst = gx + (n * channels + source[c]) * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

double dropblock_gamma(double drop_rate, std::size_t block_size, std::size_t height,
                       std::size_t width) {
  const double bs = static_cast<double>(block_size);
  const double valid = static_cast<double>((height - block_size + 1) * (width - block_size + 1));
  return drop_rate * static_cast<double>(height * width) / (bs * bs * valid);
}

std::vector<unsigned char> dropblock_mask(const Shape& shape, const DropBlockParams& p, Rng& rng) {
  require_rank4(shape, "dropblock");
  const std::size_t h = shape[2], w = shape[3], bs = p.block_size;
  if (bs == 0 || bs % 2 == 0) throw ConfigError("dropblock block_size must be odd and positive");
  if (bs > h || bs > w) {
    throw ConfigError("dropblock block_size " + std::to_string(bs) + " exceeds feature map " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  if (!(p.drop_rate >= 0.0 && p.drop_rate < 1.0)) {
    throw ConfigError("dropblock drop_rate must lie in [0, 1)");
  }
  const std::size_t planes = shape[0] * shape[1];
  const std::size_t half = bs / 2;
  const double gamma = dropblock_gamma(p.drop_rate, bs, h, w);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<unsigned char> mask(planes * h * w, 1);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    unsigned char* m = mask.data() + pl * h * w;
    // Seeds only where the whole block fits; each seed zeroes its block.
    for (std::size_t cy = half; cy + half < h; ++cy) {
      for (std::size_t cx = half; cx + half < w; ++cx) {
        if (uniform(rng) >= gamma) continue;
        for (std::size_t y = cy - half; y <= cy + half; ++y) {
          std::fill_n(m + y * w + (cx - half), bs, static_cast<unsigned char>(0));
        }
      }
    }
  }
  return mask;
}

template <typename T>
Tensor<T> dropblock(const Tensor<T>& x, const DropBlockParams& p, Rng* rng, Tape<T>* tape) {
  require_rank4(x.shape(), "dropblock");
  if (p.block_size == 0 || p.block_size % 2 == 0) {
    throw ConfigError("dropblock block_size must be odd and positive");
  }
  if (p.block_size > x.dim(2) || p.block_size > x.dim(3)) {
    throw ConfigError("dropblock block_size " + std::to_string(p.block_size) +
                      " exceeds feature map " + shape_str(x.shape()));
  }
  if (p.mode == Mode::eval || p.drop_rate == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropblock in train mode needs a random source");

  auto mask = dropblock_mask(x.shape(), p, *rng);
  const std::size_t kept = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  const T scale = kept == 0 ? T{0} : static_cast<T>(mask.size()) / static_cast<T>(kept);
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = mask[i] ? xv[i] * scale : T{0};
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, mask = std::move(mask), scale]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (mask[i]) gx[i] += g[i] * scale;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& fmerge, const Conv2dParams<T>& conv, Tape<T>* tape) {
  require_rank4(fmerge.shape(), "spatial_attention");
  auto max_map = reduce(fmerge, {1}, ReduceKind::max, tape);
  auto mean_map = reduce(fmerge, {1}, ReduceKind::mean, tape);
  auto stacked = concat_channels<T>({max_map, mean_map}, tape);
  return conv2d(stacked, conv, tape);
}

template <typename T>
Tensor<T> eca(const Tensor<T>& x, const Tensor<T>& kernel, Tape<T>* tape) {
  require_rank4(x.shape(), "eca");
  const std::size_t k = kernel.numel();
  if (kernel.rank() != 1 || k % 2 == 0) {
    throw ConfigError("eca kernel must be a 1-D odd-length vector, got " +
                      shape_str(kernel.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1), half = k / 2;
  auto pooled = reduce(x, {2, 3}, ReduceKind::mean, tape);  // N x C x 1 x 1

  // 1-D cross-correlation along channels, zero padded.
  Tensor<T> mixed(pooled.shape());
  auto pv = pooled.data();
  auto kv = kernel.data();
  auto mv = mixed.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      T acc{0};
      for (std::size_t t = 0; t < k; ++t) {
        const auto src = static_cast<std::ptrdiff_t>(c + t) - static_cast<std::ptrdiff_t>(half);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(channels)) continue;
        acc += pv[n * channels + static_cast<std::size_t>(src)] * kv[t];
      }
      mv[n * channels + c] = acc;
    }
  }
  if (should_record(tape, {&pooled, &kernel})) {
    mixed.set_requires_grad(true);
    tape->record([pooled, kernel = kernel, mixed, batch, channels, k, half]() mutable {
      if (!mixed.has_grad()) return;
      auto g = std::as_const(mixed).grad();
      auto pv = std::as_const(pooled).data();
      auto kv = std::as_const(kernel).data();
      T* gp = pooled.requires_grad() ? pooled.grad().data() : nullptr;
      T* gk = kernel.requires_grad() ? kernel.grad().data() : nullptr;
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          const T gc = g[n * channels + c];
          for (std::size_t t = 0; t < k; ++t) {
            const auto src =
                static_cast<std::ptrdiff_t>(c + t) - static_cast<std::ptrdiff_t>(half);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(channels)) continue;
            const std::size_t at = n * channels + static_cast<std::size_t>(src);
            if (gp != nullptr) gp[at] += gc * kv[t];
            if (gk != nullptr) gk[t] += gc * pv[at];
          }
        }
      }
    });
  }
  auto scales = sigmoid(mixed, tape);
  return mul(x, scales, tape);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Tape<T>* tape) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t batch = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{outf}) {
    throw ShapeError("linear: bias must be [" + std::to_string(outf) + "]");
  }
  Tensor<T> out({batch, outf});
  kernels::gemm(false, true, batch, outf, in, x.ptr(), in, weight.ptr(), in, out.ptr(), outf,
                false);
  if (bias.defined()) {
    auto bv = bias.data();
    auto o = out.data();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t j = 0; j < outf; ++j) o[n * outf + j] += bv[j];
    }
  }
  if (should_record(tape, {&x, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([x = x, weight = weight, bias = bias, out, batch, in, outf]() mutable {
      if (!out.has_grad()) return;
      const T* gy = std::as_const(out).grad().data();
      if (x.requires_grad()) {
        kernels::gemm(false, false, batch, in, outf, gy, outf, std::as_const(weight).ptr(), in,
                      x.grad().data(), in, true);
      }
      if (weight.requires_grad()) {
        kernels::gemm(true, false, outf, in, batch, gy, outf, std::as_const(x).ptr(), in,
                      weight.grad().data(), in, true);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t j = 0; j < outf; ++j) gb[j] += gy[n * outf + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects N x K, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  auto z = logits.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * k;
    T* orow = o.data() + r * k;
    const T peak = *std::max_element(zr, zr + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += (orow[j] = std::exp(zr[j] - peak));
    for (std::size_t j = 0; j < k; ++j) orow[j] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                Tape<T>* tape) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw InputError("target " + std::to_string(targets[r]) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto probs = softmax(logits);
  auto z = logits.data();
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * k;
    const T peak = *std::max_element(zr, zr + k);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zr[j] - peak);
    total += peak + std::log(s) - zr[targets[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(rows));
  ensure_finite<T>(out.data(), "softmax_cross_entropy");
  if (should_record(tape, {&logits})) {
    out.set_requires_grad(true);
    std::vector<int> labels(targets.begin(), targets.end());
    tape->record([logits = logits, out, probs, labels = std::move(labels), rows, k]() mutable {
      if (!out.has_grad()) return;
      const T g = std::as_const(out).grad()[0] / static_cast<T>(rows);
      auto p = std::as_const(probs).data();
      auto gz = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = static_cast<int>(j) == labels[r] ? T{1} : T{0};
          gz[r * k + j] += g * (p[r * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts, Tape<T>* tape) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one tensor");
  Shape os = parts.front().shape();
  require_rank4(os, "concat_channels");
  os[1] = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != 4 || s[0] != os[0] || s[2] != os[2] || s[3] != os[3]) {
      throw ShapeError("concat_channels: incompatible part " + shape_str(s));
    }
    os[1] += s[1];
  }
  const std::size_t batch = os[0], channels = os[1], plane = os[2] * os[3];
  Tensor<T> out(os);
  T* yp = out.ptr();
  for (std::size_t n = 0; n < batch; ++n) {
    std::size_t offset = 0;
    for (const auto& t : parts) {
      const std::size_t c = t.dim(1);
      std::copy_n(t.ptr() + n * c * plane, c * plane, yp + (n * channels + offset) * plane);
      offset += c;
    }
  }
  bool any = false;
  for (const auto& t : parts) any = any || should_record(tape, {&t});
  if (any) {
    out.set_requires_grad(true);
    tape->record([parts = parts, out, batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      const T* gy = std::as_const(out).grad().data();
      std::size_t offset = 0;
      for (auto& t : parts) {
        const std::size_t c = t.dim(1);
        if (t.requires_grad()) {
          T* gx = t.grad().data();
          for (std::size_t n = 0; n < batch; ++n) {
            const T* src = gy + (n * channels + offset) * plane;
            T* dst = gx + n * c * plane;
            for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
        }
        offset += c;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count, Tape<T>* tape) {
  const Shape& xs = x.shape();
  require_rank4(xs, "slice_channels");
  if (count == 0 || begin + count > xs[1]) {
    throw ShapeError("slice_channels [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(xs));
  }
  const std::size_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  Tensor<T> out({batch, count, xs[2], xs[3]});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(x.ptr() + (n * channels + begin) * plane, count * plane,
                out.ptr() + n * count * plane);
  }
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, begin, count, batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      const T* gy = std::as_const(out).grad().data();
      T* gx = x.grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        const T* src = gy + n * count * plane;
        T* dst = gx + (n * channels + begin) * plane;
        for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape) {
  const Shape& xs = x.shape();
  require_rank4(xs, "global_avg_pool");
  const std::size_t rows = xs[0] * xs[1], plane = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  const T* xp = x.ptr();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t i = 0; i < plane; ++i) acc += xp[r * plane + i];
    o[r] = acc / static_cast<T>(plane);
  }
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, rows, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      T* gx = x.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T share = g[r] / static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[r * plane + i] += share;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  const Shape& as = a.shape();
  const Shape& gs = gate.shape();
  require_rank4(as, "blend");
  if (b.shape() != as) {
    throw ShapeError("blend operands differ: " + shape_str(as) + " vs " + shape_str(b.shape()));
  }
  if (gs.size() != 4 || gs[0] != as[0] || gs[1] != 1 || gs[2] != as[2] || gs[3] != as[3]) {
    throw ShapeError("blend gate " + shape_str(gs) + " does not broadcast over " + shape_str(as));
  }
  const std::size_t batch = as[0], channels = as[1], plane = as[2] * as[3];
  Tensor<T> out(as);
  const T* gp = gate.ptr();
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  T* yp = out.ptr();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        yp[off + i] = std::lerp(bp[off + i], ap[off + i], gp[n * plane + i]);
      }
    }
  }
  if (should_record(tape, {&gate, &a, &b})) {
    out.set_requires_grad(true);
    tape->record([gate = gate, a = a, b = b, out, batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      const T* gy = std::as_const(out).grad().data();
      const T* gp = std::as_const(gate).ptr();
      const T* ap = std::as_const(a).ptr();
      const T* bp = std::as_const(b).ptr();
      T* gg = gate.requires_grad() ? gate.grad().data() : nullptr;
      T* ga = a.requires_grad() ? a.grad().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad().data() : nullptr;
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t off = (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const T w = gp[n * plane + i];
            const T g = gy[off + i];
            if (ga != nullptr) ga[off + i] += g * w;
            if (gb != nullptr) gb[off + i] += g * (T{1} - w);
            if (gg != nullptr) gg[n * plane + i] += g * (ap[off + i] - bp[off + i]);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t row, std::size_t col, Tape<T>* tape) {
  if (x.rank() != 2 || row >= x.dim(0) || col >= x.dim(1)) {
    throw ShapeError("select(" + std::to_string(row) + ", " + std::to_string(col) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t at = row * x.dim(1) + col;
  Tensor<T> out = Tensor<T>::scalar(x.data()[at]);
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, at]() mutable {
      if (!out.has_grad()) return;
      x.grad()[at] += std::as_const(out).grad()[0];
    });
  }
  return out;
}

#define EARNET_INSTANTIATE(T)                                                                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Conv2dParams<T>&, Tape<T>*);              \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const BatchNormParams<T>&, Tape<T>*);      \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation, Tape<T>*);                      \
  template Tensor<T> pool2d<T>(const Tensor<T>&, PoolKind, std::array<std::size_t, 2>,           \
                               std::array<std::size_t, 2>, std::array<std::size_t, 2>, Tape<T>*); \
  template Tensor<T> channel_shuffle<T>(const Tensor<T>&, std::size_t, Tape<T>*);                \
  template Tensor<T> dropblock<T>(const Tensor<T>&, const DropBlockParams&, Rng*, Tape<T>*);     \
  template Tensor<T> spatial_attention<T>(const Tensor<T>&, const Conv2dParams<T>&, Tape<T>*);   \
  template Tensor<T> eca<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                       \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*);  \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>, Tape<T>*); \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                               \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&, Tape<T>*);                \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::size_t, std::size_t, Tape<T>*);    \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&, Tape<T>*);                             \
  template Tensor<T> blend<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*);   \
  template Tensor<T> select<T>(const Tensor<T>&, std::size_t, std::size_t, Tape<T>*);

EARNET_INSTANTIATE(float)
EARNET_INSTANTIATE(double)

#undef EARNET_INSTANTIATE

}  // namespace earnet
