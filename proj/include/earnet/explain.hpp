#pragma once

// Gradient-weighted class activation maps and their colour overlays.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "earnet/datapipe.hpp"
#include "earnet/model.hpp"

namespace earnet {

struct Heatmap {
  std::size_t width = 0, height = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  std::size_t source_width = 0, source_height = 0;  // explained image
  int target_class = -1;
  std::string layer;
  // The rectified map was constant (usually all zero); values are all 0.
  bool degenerate = false;

  float at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// The CAM step on its own: channel weights are the spatial means of `grad`
// (same layout as `activation`, C x h x w with an optional leading 1), the
// map is ReLU of the weighted channel sum, bilinearly resized to
// out_width x out_height and min-max normalised.
Heatmap cam_from_gradients(const Tensor<float>& activation, std::span<const float> grad,
                           std::size_t out_width, std::size_t out_height);

// Heat map for one image (1 x 3 x S x S or 3 x S x S) and the prediction
// head's raw logit of `target_class` (-1 picks the argmax). The map is upsampled
// bilinearly to S x S and min-max normalised. An empty `layer` means the
// deepest spatial map ("lgsff", or "conv5" for the baseline).
//
// The model must be in eval mode with gradient tracking off
// (set_trainable(false)); it is not modified, so concurrent calls are safe.
Heatmap grad_cam(const Network<float>& model, const Tensor<float>& image, int target_class = -1,
                 const std::string& layer = "");

// JET colouring of a heat map (0 -> blue, 1 -> red).
RgbImage colorize(const Heatmap& map);

// (1 - alpha) * image + alpha * colorize(map), per pixel, rounded. The map
// is resized to the image when their sizes differ. alpha must lie in [0, 1].
RgbImage overlay(const Heatmap& map, const RgbImage& image, double alpha = 0.4);

// Same, over the de-normalised network input (3 x S x S or 1 x 3 x S x S).
RgbImage overlay(const Heatmap& map, const Tensor<float>& input, double alpha = 0.4);

}  // namespace earnet
