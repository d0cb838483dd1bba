#pragma once

// Layer primitives: convolution, batch norm, pooling, channel shuffle,
// activations, DropBlock, ECA, spatial attention, linear and loss.
// All ops take an optional Tape; see tensor.hpp for the recording contract.

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "earnet/tensor.hpp"

namespace earnet {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // Cout x Cin/groups x Kh x Kw
  Tensor<T> bias;    // [Cout], or undefined for no bias
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::size_t groups = 1;
};

// Running statistics are updated in place by train-mode forward passes;
// the single training thread owns them.
template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  mutable Tensor<T> running_mean;
  mutable Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  Mode mode = Mode::train;
};

struct DropBlockParams {
  std::size_t block_size = 3;
  double drop_rate = 0.1;
  Mode mode = Mode::train;
};

enum class Activation { relu, sigmoid };
enum class PoolKind { max, avg };

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const BatchNormParams<T>& p, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return activation(x, Activation::relu, tape);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return activation(x, Activation::sigmoid, tape);
}

// Average pooling divides by the full kernel area, padding included.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::array<std::size_t, 2> kernel,
                 std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
                 Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups, Tape<T>* tape = nullptr);

// DropBlock drop probability per valid block centre for an H x W map.
double dropblock_gamma(double drop_rate, std::size_t block_size, std::size_t height,
                       std::size_t width);

// The 0/1 keep mask DropBlock would apply to an N x C x H x W input.
std::vector<unsigned char> dropblock_mask(const Shape& shape, const DropBlockParams& p, Rng& rng);

// Identity in eval mode or at rate 0 (returns the input handle itself).
// In train mode zeroes sampled blocks and rescales survivors by
// numel / kept.
template <typename T>
Tensor<T> dropblock(const Tensor<T>& x, const DropBlockParams& p, Rng* rng,
                    Tape<T>* tape = nullptr);

// Channel-wise max and mean maps, concatenated and convolved (2 -> 1
// channels): N x C x H x W -> N x 1 x H x W logits.
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& fmerge, const Conv2dParams<T>& conv,
                            Tape<T>* tape = nullptr);

// Efficient channel attention with a shared k-tap kernel over pooled
// channel descriptors (zero padded, no bias).
template <typename T>
Tensor<T> eca(const Tensor<T>& x, const Tensor<T>& kernel, Tape<T>* tape = nullptr);

// y = x W^T + b for x [N x D], W [K x D], b [K].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Tape<T>* tape = nullptr);

// Mean over the batch of -log softmax(logits)[target], as a [1] tensor.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                Tape<T>* tape = nullptr);

// Row-wise softmax of an N x K tensor; not differentiable.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count,
                         Tape<T>* tape = nullptr);

// N x C x H x W -> N x C.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape = nullptr);

// gate * a + (1 - gate) * b, with gate N x 1 x H x W broadcast over channels.
// Exact when a == b and never leaves [min(a, b), max(a, b)] for gate in [0, 1].
template <typename T>
Tensor<T> blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b,
                Tape<T>* tape = nullptr);

// x[row, col] of a 2-D tensor as a [1] tensor.
template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t row, std::size_t col, Tape<T>* tape = nullptr);

}  // namespace earnet
