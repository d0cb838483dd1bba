#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "earnet/errors.hpp"
#include "earnet/explain.hpp"

using namespace earnet;

namespace {

Tensor<float> random_image(std::size_t s, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> nd;
  Tensor<float> t(Shape{1, 3, s, s});
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

Network<float> frozen_desk(std::uint64_t seed) {
  Network<float> net(ModelConfig::desk(), seed);
  net.set_mode(Mode::eval);
  net.set_trainable(false);
  return net;
}

// Half-pixel-centre bilinear resize with edge clamping.
std::vector<double> bilinear(const std::vector<double>& src, std::size_t w, std::size_t h,
                             std::size_t ow, std::size_t oh) {
  std::vector<double> out(ow * oh);
  auto coord = [](std::size_t d, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1,
                  double& f) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::max(s, 0.0);
    i0 = std::min(static_cast<std::size_t>(s), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t y0, y1, x0, x1;
      double fy, fx;
      coord(y, h, oh, y0, y1, fy);
      coord(x, w, ow, x0, x1, fx);
      const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
      const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
      out[y * ow + x] = top * (1 - fy) + bot * fy;
    }
  return out;
}

std::vector<double> minmax(std::vector<double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
  return v;
}

}  // namespace

TEST(Cam, HandComputedTwoChannels) {
  // Channel 0 = [1 2; 3 4], channel 1 = [4 0; 0 0]; gradient means 0.5 and -0.25.
  Tensor<float> act(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 4, 0, 0, 0});
  std::vector<float> grad = {0.5f, 0.5f, 0.5f, 0.5f, -1.0f, 0.0f, 0.0f, 0.0f};
  auto m = cam_from_gradients(act, grad, 2, 2);
  // Weighted sum [0.5-1, 1; 1.5, 2] -> ReLU [0, 1; 1.5, 2] -> /2.
  const std::vector<float> want = {0.0f, 0.5f, 0.75f, 1.0f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m.values[i], want[i], 1e-6f);
  EXPECT_FALSE(m.degenerate);
}

TEST(Cam, BilinearUpsampleMatchesOracle) {
  Tensor<float> act(Shape{1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 9});
  std::vector<float> grad(9, 1.0f);
  auto m = cam_from_gradients(act, grad, 8, 5);
  ASSERT_EQ(m.width, 8u);
  ASSERT_EQ(m.height, 5u);
  auto want = minmax(bilinear({0, 1, 2, 3, 4, 5, 6, 7, 9}, 3, 3, 8, 5));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(m.values[i], want[i], 1e-5) << i;
}

TEST(Cam, AllNegativeIsDegenerate) {
  Tensor<float> act(Shape{1, 2, 2}, {1, 2, 3, 4});
  std::vector<float> grad(4, -1.0f);
  auto m = cam_from_gradients(act, grad, 4, 4);
  EXPECT_TRUE(m.degenerate);
  for (float v : m.values) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(cam_from_gradients(act, std::vector<float>(3, 1.0f), 4, 4), ShapeError);
}

TEST(GradCam, MatchesLinearHeadOracle) {
  auto net = frozen_desk(21);
  auto x = random_image(64, 22);
  auto out = net.forward(x);
  const auto& a = out.activations.at("lgsff");
  const std::size_t c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
  const auto& head = net.heads()[2];
  for (int cls : {0, 4, 8}) {
    // Score = bias + sum_k W[cls,k] * mean(A_k), so dScore/dA_k(i,j) = W[cls,k] / (h w).
    std::vector<double> raw(h * w, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      const double wk = head.weight.data()[cls * c + k] / static_cast<double>(h * w);
      for (std::size_t i = 0; i < h * w; ++i) raw[i] += wk * a.data()[k * h * w + i];
    }
    for (auto& v : raw) v = std::max(v, 0.0);
    auto want = minmax(bilinear(raw, w, h, 64, 64));
    auto m = grad_cam(net, x, cls);
    ASSERT_EQ(m.values.size(), want.size());
    EXPECT_EQ(m.layer, "lgsff");
    EXPECT_EQ(m.target_class, cls);
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(m.values[i], want[i], 1e-4) << cls << " " << i;
  }
}

TEST(GradCam, RangeAndDefaults) {
  auto net = frozen_desk(23);
  for (unsigned s = 0; s < 5; ++s) {
    auto x = random_image(64, 30 + s);
    auto m = grad_cam(net, x);
    auto y = net.forward(x);
    auto logits = y.logits3.data();
    EXPECT_EQ(m.target_class, static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
    EXPECT_EQ(m.source_width, 64u);
    float lo = 1, hi = 0;
    for (float v : m.values) lo = std::min(lo, v), hi = std::max(hi, v);
    EXPECT_GE(lo, 0.0f);
    if (!m.degenerate) {
      EXPECT_EQ(hi, 1.0f);
      EXPECT_EQ(lo, 0.0f);
    }
  }
  auto m = grad_cam(net, random_image(64, 40), 1, "stage3");
  EXPECT_EQ(m.layer, "stage3");
  EXPECT_EQ(m.width, 64u);
}

TEST(GradCam, LeavesModelUntouchedAndIgnoresBias) {
  auto net = frozen_desk(24);
  auto x = random_image(64, 25);
  const auto before = net.checksum();
  auto a = grad_cam(net, x, 3);
  EXPECT_EQ(net.checksum(), before);
  auto bias = net.heads()[2].bias;
  for (auto& v : bias.data()) v += 5.0f;
  auto b = grad_cam(net, x, 3);
  EXPECT_EQ(a.values, b.values);
}

TEST(GradCam, Contracts) {
  auto net = frozen_desk(26);
  auto x = random_image(64, 27);
  EXPECT_THROW(grad_cam(net, x, 9), InputError);
  EXPECT_THROW(grad_cam(net, x, 0, "nope"), ConfigError);
  net.set_trainable(true);
  EXPECT_THROW(grad_cam(net, x, 0), ContractError);
  net.set_trainable(false);
  net.set_mode(Mode::train);
  EXPECT_THROW(grad_cam(net, x, 0), ContractError);
}

TEST(GradCam, BaselineUsesLastConv) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.arch = Architecture::shufflenet_v2_x0_5;
  Network<float> net(cfg, 28);
  net.set_mode(Mode::eval);
  net.set_trainable(false);
  EXPECT_EQ(grad_cam(net, random_image(64, 29)).layer, "conv5");
}

TEST(Overlay, AlphaEndpointsAndBlend) {
  Heatmap m;
  m.width = m.height = 2;
  m.values = {0.0f, 0.25f, 0.75f, 1.0f};
  RgbImage img{4, 4, std::vector<std::uint8_t>(48)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 5);
  EXPECT_EQ(overlay(m, img, 0.0).pixels, img.pixels);
  auto color = resize_image(colorize(m), 4, 4);
  EXPECT_EQ(overlay(m, img, 1.0).pixels, color.pixels);
  auto half = overlay(m, img, 0.5);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    EXPECT_EQ(half.pixels[i], static_cast<std::uint8_t>(std::lround(0.5 * img.pixels[i] + 0.5 * color.pixels[i])));
  }
  EXPECT_THROW(overlay(m, img, 1.5), ConfigError);
}

TEST(Overlay, ColorizeEnds) {
  Heatmap m;
  m.width = 2;
  m.height = 1;
  m.values = {0.0f, 1.0f};
  auto c = colorize(m);
  // RGB: low end blue, high end red.
  EXPECT_GT(c.pixels[2], c.pixels[0]);
  EXPECT_GT(c.pixels[3], c.pixels[5]);
}
