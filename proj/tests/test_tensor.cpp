#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "earnet/errors.hpp"
#include "earnet/kernels.hpp"
#include "earnet/ops.hpp"
#include "earnet/tensor.hpp"

using namespace earnet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, unsigned seed, bool grad = false) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  t.set_requires_grad(grad);
  return t;
}

}  // namespace

TEST(Elementwise, AddAndMulIdentity) {
  Tensor<float> a(Shape{2}, {1, 2}), b(Shape{2}, {3, 4});
  auto s = add(a, b);
  EXPECT_EQ(s.data()[0], 4.0f);
  EXPECT_EQ(s.data()[1], 6.0f);
  auto x = random_tensor<float>({2, 3, 4}, 1);
  auto y = mul(x, Tensor<float>::ones(x.shape()));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Elementwise, ChannelBroadcastMatchesLoop) {
  auto a = random_tensor<float>({3, 2, 2}, 2);
  auto b = random_tensor<float>({1, 2, 2}, 3);
  auto y = mul(a, b);
  ASSERT_EQ(y.shape(), a.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.data()[c * 4 + i], a.data()[c * 4 + i] * b.data()[i]);
}

TEST(Elementwise, IncompatibleShapesThrow) {
  Tensor<float> a(Shape{2, 3}), b(Shape{3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Reduce, MeanAndMaxOverChannels) {
  Tensor<float> x(Shape{1, 3, 1, 1}, {3, 6, 9});
  EXPECT_EQ(reduce(x, {1}, ReduceKind::mean).item(), 6.0f);
  EXPECT_EQ(reduce(x, {1}, ReduceKind::max).item(), 9.0f);
}

TEST(Reduce, SpatialMeanMatchesLoop) {
  auto x = random_tensor<double>({1, 2, 4, 4}, 4);
  auto m = reduce(x, {2, 3}, ReduceKind::mean);
  ASSERT_EQ(m.shape(), (Shape{1, 2, 1, 1}));
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += x.data()[c * 16 + i];
    EXPECT_NEAR(m.data()[c], s / 16, 1e-12);
  }
}

TEST(Backward, LinearAndQuadratic) {
  Tensor<double> x(Shape{3}, {1, 2, 3});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    auto loss = sum(x, &tape);
    tape.backward(loss);
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    auto loss = sum(mul(x, x, &tape), &tape);
    tape.backward(loss);
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
    EXPECT_EQ(x.grad()[2], 6.0);
  }
}

TEST(Backward, NoTapeRecordsNothingWithoutGrad) {
  Tape<float> tape;
  auto a = random_tensor<float>({4}, 5);
  (void)add(a, a, &tape);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(FiniteDiff, ScalarCases) {
  Tensor<double> x(Shape{1}, {1.0});
  auto g = finite_diff_oracle<double>([&] { return x.data()[0] * x.data()[0]; }, {x}, 1e-4);
  EXPECT_NEAR(g[0][0], 2.0, 1e-6);
  EXPECT_EQ(x.data()[0], 1.0);
  auto c = finite_diff_oracle<double>([] { return 3.0; }, {x}, 1e-4);
  EXPECT_EQ(c[0][0], 0.0);
}

TEST(FiniteDiff, AgreesWithBackwardOnTwoLayerConvNet) {
  Conv2dParams<double> c1{random_tensor<double>({4, 2, 3, 3}, 6, true),
                          random_tensor<double>({4}, 7, true), {1, 1}, {1, 1}, 1};
  Conv2dParams<double> c2{random_tensor<double>({3, 4, 3, 3}, 8, true), {}, {2, 2}, {1, 1}, 1};
  auto x = random_tensor<double>({2, 2, 6, 6}, 9);
  auto loss_fn = [&](Tape<double>* tape) {
    auto h = activation(conv2d(x, c1, tape), Activation::sigmoid, tape);
    auto y = conv2d(h, c2, tape);
    return sum(mul(y, y, tape), tape);
  };
  Tape<double> tape;
  auto loss = loss_fn(&tape);
  tape.backward(loss);
  std::vector<Tensor<double>> params = {c1.weight, c1.bias, c2.weight};
  auto num = finite_diff_oracle<double>([&] { return loss_fn(nullptr).item(); }, params, 1e-5);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto g = params[p].grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double denom = std::max({std::abs(g[i]), std::abs(num[p][i]), 1e-6});
      EXPECT_LT(std::abs(g[i] - num[p][i]) / denom, 1e-6) << "param " << p << " index " << i;
    }
  }
}

TEST(EnsureFinite, NamesLocation) {
  std::vector<float> v = {1.0f, NAN};
  try {
    ensure_finite<float>(v, "layer x");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer x"), std::string::npos);
  }
}

// ---- kernels: parallel vs serial reference, bit-exact at any thread count

class KernelThreads : public ::testing::TestWithParam<int> {
 protected:
  void SetUp() override {
    saved_ = kernels::max_threads();
    kernels::set_threads(GetParam());
  }
  void TearDown() override { kernels::set_threads(saved_); }
  int saved_ = 1;
};

TEST_P(KernelThreads, GemmMatchesReferenceBitExact) {
  std::mt19937 rng(10);
  std::uniform_real_distribution<float> u(-1, 1);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const std::size_t m = 13, n = 29, k = 17;
      std::vector<float> a(m * k), b(k * n), c1(m * n, 0.5f), c2(m * n, 0.5f);
      for (auto& v : a) v = u(rng);
      for (auto& v : b) v = u(rng);
      const std::size_t lda = ta ? m : k, ldb = tb ? k : n;
      kernels::gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n, true);
      kernels::reference::gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c2.data(), n, true);
      EXPECT_EQ(c1, c2) << "ta=" << ta << " tb=" << tb;
    }
}

TEST_P(KernelThreads, PoolingMatchesReference) {
  kernels::ConvGeometry g;
  g.in_h = g.in_w = 9;
  g.kernel_h = g.kernel_w = 3;
  g.stride_h = g.stride_w = 2;
  g.pad_h = g.pad_w = 1;
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> x(4 * 81);
  for (auto& v : x) v = u(rng);
  const std::size_t o = 4 * g.out_h() * g.out_w();
  std::vector<float> a(o), b(o), c(o), d(o);
  std::vector<std::ptrdiff_t> arg(o);
  kernels::avg_pool2d(x.data(), 4, g, a.data());
  kernels::reference::avg_pool2d(x.data(), 4, g, b.data());
  kernels::max_pool2d(x.data(), 4, g, c.data(), arg.data());
  kernels::reference::max_pool2d(x.data(), 4, g, d.data());
  EXPECT_EQ(a, b);
  EXPECT_EQ(c, d);
}

TEST_P(KernelThreads, ConvOpMatchesReferenceKernel) {
  auto x = random_tensor<float>({2, 8, 11, 11}, 12);
  for (std::size_t groups : {1u, 2u, 8u}) {
    Conv2dParams<float> p{random_tensor<float>({8, 8 / groups, 3, 3}, 13), random_tensor<float>({8}, 14),
                          {2, 2}, {1, 1}, groups};
    auto y = conv2d(x, p);
    kernels::ConvGeometry g;
    g.in_h = g.in_w = 11;
    g.kernel_h = g.kernel_w = 3;
    g.stride_h = g.stride_w = 2;
    g.pad_h = g.pad_w = 1;
    std::vector<float> ref(y.numel());
    kernels::reference::conv2d(x.ptr(), 2, 8, p.weight.ptr(), p.bias.ptr(), 8, groups, g, ref.data());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5f) << groups;
  }
}

INSTANTIATE_TEST_SUITE_P(Threads, KernelThreads, ::testing::Values(1, 2, 4));

TEST(Kernels, ResultsIdenticalAcrossThreadCounts) {
  auto x = random_tensor<float>({1, 16, 20, 20}, 15);
  Conv2dParams<float> p{random_tensor<float>({32, 16, 1, 1}, 16), {}, {1, 1}, {0, 0}, 1};
  const int saved = kernels::max_threads();
  kernels::set_threads(1);
  auto y1 = conv2d(x, p);
  kernels::set_threads(3);
  auto y3 = conv2d(x, p);
  kernels::set_threads(saved);
  for (std::size_t i = 0; i < y1.numel(); ++i) ASSERT_EQ(y1.data()[i], y3.data()[i]);
}
