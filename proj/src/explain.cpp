#include "earnet/explain.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "earnet/errors.hpp"
#include "earnet/ops.hpp"

namespace earnet {

Heatmap cam_from_gradients(const Tensor<float>& activation, std::span<const float> grad,
                           std::size_t out_width, std::size_t out_height) {
  const Shape& sh = activation.shape();
  const bool batched = sh.size() == 4;
  if (!(sh.size() == 3 || (batched && sh[0] == 1))) {
    throw ShapeError("cam_from_gradients: expected C x h x w activations, got " + shape_str(sh));
  }
  if (grad.size() != activation.numel()) throw ShapeError("cam_from_gradients: gradient size mismatch");
  if (out_width == 0 || out_height == 0) throw ShapeError("cam_from_gradients: empty output size");
  const std::size_t c = sh[batched ? 1 : 0], h = sh[batched ? 2 : 1], w = sh[batched ? 3 : 2];
  const std::size_t hw = h * w;
  auto a = activation.data();

  cv::Mat raw(static_cast<int>(h), static_cast<int>(w), CV_32F, cv::Scalar(0));
  auto* r = raw.ptr<float>();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double wsum = 0;
    for (std::size_t i = 0; i < hw; ++i) wsum += grad[ch * hw + i];
    const float weight = static_cast<float>(wsum / static_cast<double>(hw));
    for (std::size_t i = 0; i < hw; ++i) r[i] += weight * a[ch * hw + i];
  }
  for (std::size_t i = 0; i < hw; ++i) r[i] = std::max(r[i], 0.0f);

  cv::Mat up;
  cv::resize(raw, up, cv::Size(static_cast<int>(out_width), static_cast<int>(out_height)), 0, 0,
             cv::INTER_LINEAR);
  double lo = 0, hi = 0;
  cv::minMaxLoc(up, &lo, &hi);
  Heatmap map;
  map.width = map.source_width = out_width;
  map.height = map.source_height = out_height;
  map.values.assign(out_width * out_height, 0.0f);
  if (!(hi > lo)) {
    map.degenerate = true;
    return map;
  }
  const auto* u = up.ptr<float>();
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    map.values[i] = std::clamp(static_cast<float>((u[i] - lo) / (hi - lo)), 0.0f, 1.0f);
  }
  return map;
}

Heatmap grad_cam(const Network<float>& model, const Tensor<float>& image, int target_class,
                 const std::string& layer) {
  if (model.mode() != Mode::eval) throw ContractError("grad_cam needs an eval-mode model");
  for (const auto& t : model.tensors()) {
    if (t.tensor.requires_grad()) {
      throw ContractError("grad_cam needs a frozen model (tensor '" + t.name + "' tracks gradients)");
    }
  }
  const std::size_t size = model.config().input_size;
  Tensor<float> x = image;
  if (x.rank() == 3) x = reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 3 || x.dim(2) != size || x.dim(3) != size) {
    throw ShapeError("grad_cam: expected a single 3 x " + std::to_string(size) + " x " +
                     std::to_string(size) + " image, got " + shape_str(x.shape()));
  }

  Heatmap map;
  map.layer = layer.empty()
                  ? (model.config().arch == Architecture::best_earnet ? "lgsff" : "conv5")
                  : layer;
  Tape<float> tape;
  ForwardOptions<float> opts;
  opts.tape = &tape;
  opts.grad_layer = map.layer;
  auto out = model.forward(x, opts);

  const std::size_t classes = out.logits3.dim(1);
  if (target_class < 0) {
    auto l = out.logits3.data();
    target_class = static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
  } else if (static_cast<std::size_t>(target_class) >= classes) {
    throw InputError("grad_cam: class " + std::to_string(target_class) + " out of range for a " +
                     std::to_string(classes) + "-way model");
  }
  map.target_class = target_class;

  Tensor<float> score = select(out.logits3, 0, static_cast<std::size_t>(target_class), &tape);
  tape.backward(score);

  Tensor<float> act = out.activations.at(map.layer);
  std::vector<float> g(act.numel(), 0.0f);
  if (act.has_grad()) std::copy(act.grad().begin(), act.grad().end(), g.begin());
  Heatmap cam = cam_from_gradients(act, g, size, size);
  cam.target_class = map.target_class;
  cam.layer = map.layer;
  return cam;
}

RgbImage colorize(const Heatmap& map) {
  if (map.values.size() != map.width * map.height || map.values.empty()) {
    throw InputError("colorize: empty or inconsistent heat map");
  }
  cv::Mat gray(static_cast<int>(map.height), static_cast<int>(map.width), CV_8U);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    gray.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0f, 1.0f) * 255.0f));
  }
  cv::Mat bgr, rgb;
  cv::applyColorMap(gray, bgr, cv::COLORMAP_JET);
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  RgbImage out{map.width, map.height, {}};
  out.pixels.assign(rgb.data, rgb.data + rgb.total() * 3);
  return out;
}

RgbImage overlay(const Heatmap& map, const RgbImage& image, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("overlay alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (image.empty()) throw InputError("overlay: empty image");
  RgbImage color = colorize(map);
  if (color.width != image.width || color.height != image.height) {
    color = resize_image(color, image.width, image.height);
  }
  RgbImage out{image.width, image.height, std::vector<std::uint8_t>(image.pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double v = (1.0 - alpha) * image.pixels[i] + alpha * color.pixels[i];
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

RgbImage overlay(const Heatmap& map, const Tensor<float>& input, double alpha) {
  const Shape& sh = input.shape();
  const bool batched = sh.size() == 4 && sh[0] == 1;
  if (!(batched || sh.size() == 3) || sh[batched ? 1 : 0] != 3 ||
      sh[batched ? 2 : 1] != sh[batched ? 3 : 2]) {
    throw ShapeError("overlay: expected a 3 x S x S input, got " + shape_str(sh));
  }
  return overlay(map, denormalize(input.ptr(), sh[batched ? 2 : 1]), alpha);
}

}  // namespace earnet
