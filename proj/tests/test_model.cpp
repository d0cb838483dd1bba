#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "earnet/bench.hpp"
#include "earnet/errors.hpp"
#include "earnet/model.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace earnet;
namespace fs = std::filesystem;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, unsigned seed, double scale = 1.0) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

std::vector<double> as_vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("earnet_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Randomises BN statistics and affine terms so eval-mode BN is not a no-op.
template <typename T>
void perturb_batchnorm(Network<T>& net, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5), c(-0.3, 0.3);
  for (const auto& nt : net.tensors()) {
    auto t = nt.tensor;
    const bool var = nt.name.ends_with("running_var") || nt.name.ends_with("gamma");
    const bool shift = nt.name.ends_with("running_mean") || nt.name.ends_with("beta");
    if (!var && !shift) continue;
    for (auto& v : t.data()) v = static_cast<T>(var ? u(rng) : c(rng));
  }
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
  EXPECT_NO_THROW(ModelConfig::paper().validate());
  EXPECT_NO_THROW(ModelConfig::desk().validate());
  ModelConfig bad = ModelConfig::desk();
  bad.input_size = 30;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig::paper();
  bad.eca_kernel = 4;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_EQ(architecture_from_string("baseline"), Architecture::shufflenet_v2_x0_5);
  EXPECT_THROW(architecture_from_string("resnet"), ConfigError);
}

TEST(ParamCount, FrozenCounts) {
  EXPECT_EQ(count_params(Network<float>(ModelConfig::paper())), 850659u);
  EXPECT_EQ(count_params(Network<float>(ModelConfig::desk())), 57507u);
  ModelConfig base = ModelConfig::paper();
  base.arch = Architecture::shufflenet_v2_x0_5;
  EXPECT_EQ(count_params(Network<float>(base)), 351017u);
  base.num_classes = 1000;
  EXPECT_EQ(count_params(Network<float>(base)), 1366792u);
}

TEST(ParamCount, SingleConv) {
  Conv2dParams<float> p{Tensor<float>({24, 3, 3, 3}), Tensor<float>({24}), {1, 1}, {1, 1}, 1};
  EXPECT_EQ(count_params(std::vector<Tensor<float>>{p.weight, p.bias}), 672u);
}

TEST(ParamCount, MatchesSerialisedTrainableScalars) {
  Network<float> net(ModelConfig::desk());
  std::size_t serialised = 0, stats = 0;
  for (const auto& nt : net.tensors()) (nt.trainable ? serialised : stats) += nt.tensor.numel();
  EXPECT_EQ(serialised, count_params(net));
  EXPECT_GT(stats, 0u);
}

TEST(Shapes, PaperScale) {
  Network<float> net(ModelConfig::paper(), 1);
  net.set_mode(Mode::eval);
  auto out = net.forward(random_tensor<float>({1, 3, 224, 224}, 2));
  const auto& a = out.activations;
  EXPECT_EQ(a.at("stem").shape(), (Shape{1, 24, 56, 56}));
  EXPECT_EQ(a.at("stage2").shape(), (Shape{1, 48, 28, 28}));
  EXPECT_EQ(a.at("stage3").shape(), (Shape{1, 96, 14, 14}));
  EXPECT_EQ(a.at("stage4").shape(), (Shape{1, 192, 7, 7}));
  EXPECT_EQ(a.at("flow").shape(), (Shape{1, 384, 7, 7}));
  EXPECT_EQ(a.at("fhigh").shape(), (Shape{1, 384, 7, 7}));
  EXPECT_EQ(a.at("lgsff").shape(), (Shape{1, 384, 7, 7}));
  for (const auto* l : {&out.logits1, &out.logits2, &out.logits3}) EXPECT_EQ(l->shape(), (Shape{1, 9}));
}

TEST(Shapes, DeskScaleAndBatch) {
  Network<float> net(ModelConfig::desk(), 1);
  net.set_mode(Mode::eval);
  auto out = net.forward(random_tensor<float>({2, 3, 64, 64}, 3));
  EXPECT_EQ(out.activations.at("stem").shape(), (Shape{2, 6, 16, 16}));
  EXPECT_EQ(out.activations.at("stage2").shape(), (Shape{2, 12, 8, 8}));
  EXPECT_EQ(out.activations.at("stage4").shape(), (Shape{2, 48, 2, 2}));
  EXPECT_EQ(out.activations.at("lgsff").shape(), (Shape{2, 96, 2, 2}));
  for (const auto* l : {&out.logits1, &out.logits2, &out.logits3}) EXPECT_EQ(l->shape(), (Shape{2, 9}));
}

TEST(Shapes, Baseline) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.arch = Architecture::shufflenet_v2_x0_5;
  Network<float> net(cfg, 1);
  net.set_mode(Mode::eval);
  auto out = net.forward(random_tensor<float>({1, 3, 64, 64}, 4));
  EXPECT_EQ(out.logits3.shape(), (Shape{1, 9}));
  EXPECT_FALSE(out.logits1.defined());
}

TEST(Shapes, WrongInputRejected) {
  Network<float> net(ModelConfig::desk());
  EXPECT_THROW(net.forward(Tensor<float>({1, 3, 32, 32})), ShapeError);
  EXPECT_THROW(net.forward(Tensor<float>({1, 1, 64, 64})), ShapeError);
}

TEST(Forward, EvalDeterministicAndSeeded) {
  Network<float> a(ModelConfig::desk(), 5), b(ModelConfig::desk(), 5), c(ModelConfig::desk(), 6);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  a.set_mode(Mode::eval);
  auto x = random_tensor<float>({2, 3, 64, 64}, 7);
  auto y1 = a.forward(x), y2 = a.forward(x);
  for (std::size_t i = 0; i < y1.logits3.numel(); ++i) EXPECT_EQ(y1.logits3.data()[i], y2.logits3.data()[i]);
}

TEST(Forward, TrainDiffersFromEvalWithDropBlock) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.dropblock.drop_rate = 0.3;
  Network<double> net(cfg, 8);
  auto x = random_tensor<double>({1, 3, 64, 64}, 9);
  auto frozen = net.clone();
  frozen.set_mode(Mode::eval);
  auto ref = frozen.forward(x).logits3;
  // Train mode also uses batch statistics; compare several stochastic runs
  // against each other to isolate the masks.
  net.set_mode(Mode::train);
  Rng rng(1);
  ForwardOptions<double> opts;
  opts.rng = &rng;
  int differing = 0;
  auto first = net.forward(x, opts).logits3;
  for (int i = 0; i < 10; ++i) {
    auto y = net.forward(x, opts).logits3;
    bool diff = false;
    for (std::size_t k = 0; k < y.numel(); ++k) diff |= y.data()[k] != first.data()[k];
    differing += diff;
  }
  EXPECT_GE(differing, 8);
  bool eval_diff = false;
  for (std::size_t k = 0; k < ref.numel(); ++k) eval_diff |= ref.data()[k] != first.data()[k];
  EXPECT_TRUE(eval_diff);
}

TEST(Forward, TrainWithoutRngIsContractError) {
  Network<float> net(ModelConfig::desk());
  net.set_mode(Mode::train);
  EXPECT_THROW(net.forward(random_tensor<float>({2, 3, 64, 64}, 10)), ContractError);
}

TEST(Forward, GradLayerYieldsActivationGradient) {
  Network<float> net(ModelConfig::desk(), 11);
  net.set_mode(Mode::eval);
  net.set_trainable(false);
  Tape<float> tape;
  ForwardOptions<float> opts;
  opts.tape = &tape;
  opts.grad_layer = "lgsff";
  auto out = net.forward(random_tensor<float>({1, 3, 64, 64}, 12), opts);
  auto score = select(out.logits3, 0, 2, &tape);
  tape.backward(score);
  EXPECT_TRUE(out.activations.at("lgsff").has_grad());
  opts.grad_layer = "nope";
  EXPECT_THROW(net.forward(random_tensor<float>({1, 3, 64, 64}, 12), opts), ConfigError);
}

// ---- LGSFF

class LgsffTest : public ::testing::Test {
 protected:
  void SetUp() override {
    net_ = std::make_unique<Network<double>>(ModelConfig::paper(), 13);
    perturb_batchnorm(*net_, 14);
    net_->set_mode(Mode::eval);
  }
  std::unique_ptr<Network<double>> net_;
  const DropBlockParams eval_drop_{3, 0.1, Mode::eval};
};

TEST_F(LgsffTest, IdenticalOperandsReturnedExactly) {
  Network<float> net(ModelConfig::paper(), 15);
  perturb_batchnorm(net, 16);
  net.set_mode(Mode::eval);
  for (unsigned t = 0; t < 20; ++t) {
    auto x = random_tensor<float>({1, 384, 7, 7}, 100 + t, 2.0);
    auto y = lgsff(x, x, net.lgsff(), eval_drop_, nullptr);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST_F(LgsffTest, OutputWithinOperandRange) {
  for (unsigned t = 0; t < 20; ++t) {
    auto flow = random_tensor<double>({1, 384, 7, 7}, 200 + t, 2.0);
    auto fhigh = random_tensor<double>({1, 384, 7, 7}, 300 + t, 2.0);
    auto y = lgsff(flow, fhigh, net_->lgsff(), eval_drop_, nullptr);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      ASSERT_GE(y.data()[i], std::min(flow.data()[i], fhigh.data()[i]));
      ASSERT_LE(y.data()[i], std::max(flow.data()[i], fhigh.data()[i]));
    }
  }
}

TEST_F(LgsffTest, MatchesStraightLineTranscription) {
  const auto& p = net_->lgsff();
  const std::size_t n = 2, c = 384, hw = 49;
  const std::size_t groups = net_->config().lgsff_groups;
  auto flow = random_tensor<double>({n, c, 7, 7}, 17), fhigh = random_tensor<double>({n, c, 7, 7}, 18);
  auto y = lgsff(flow, fhigh, p, eval_drop_, nullptr);

  std::vector<double> sum_in(n * c * hw);
  for (std::size_t i = 0; i < sum_in.size(); ++i) sum_in[i] = flow.data()[i] + fhigh.data()[i];
  auto g = oracle::conv2d(sum_in, n, c, 7, 7, as_vec(p.gpw.weight), nullptr, c, 1, 1, 1, 0, groups);
  const auto& bn = p.bn;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        double& v = g[(b * c + ch) * hw + i];
        v = (v - bn.running_mean.data()[ch]) / std::sqrt(bn.running_var.data()[ch] + bn.eps) *
                bn.gamma.data()[ch] + bn.beta.data()[ch];
        v = std::max(v, 0.0);
      }
  std::vector<double> stacked(n * 2 * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -INFINITY, s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        mx = std::max(mx, g[(b * c + ch) * hw + i]);
        s += g[(b * c + ch) * hw + i];
      }
      stacked[(b * 2) * hw + i] = mx;
      stacked[(b * 2 + 1) * hw + i] = s / c;
    }
  auto sb = as_vec(p.sa_conv.bias);
  auto sa = oracle::conv2d(stacked, n, 2, 7, 7, as_vec(p.sa_conv.weight), &sb, 1, 3, 3, 1, 1, 1);
  double worst = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const double w = oracle::sigmoid(sa[b * hw + i]);
        const std::size_t k = (b * c + ch) * hw + i;
        worst = std::max(worst, std::abs(y.data()[k] - (w * flow.data()[k] + (1 - w) * fhigh.data()[k])));
      }
  EXPECT_LT(worst, 1e-5);
}

// ---- branch path and heads

TEST(BranchPath, ShapeAndZeroPropagation) {
  Network<float> net(ModelConfig::paper(), 19);
  net.set_mode(Mode::eval);
  const DropBlockParams drop{3, 0.1, Mode::eval};
  auto y = branch_path(random_tensor<float>({2, 48, 28, 28}, 20), net.branch(), drop, nullptr);
  EXPECT_EQ(y.shape(), (Shape{2, 384, 7, 7}));
  auto z = branch_path(Tensor<float>::zeros({1, 48, 28, 28}), net.branch(), drop, nullptr);
  for (float v : z.data()) ASSERT_EQ(v, 0.0f);
  // Rate 0 makes train-mode DropBlock an identity too.
  Rng rng(1);
  auto x = random_tensor<float>({1, 48, 28, 28}, 21);
  auto e = branch_path(x, net.branch(), drop, nullptr);
  auto t = branch_path(x, net.branch(), DropBlockParams{3, 0.0, Mode::train}, &rng);
  for (std::size_t i = 0; i < e.numel(); ++i) ASSERT_EQ(e.data()[i], t.data()[i]);
}

TEST(ClassHead, Cases) {
  ClassHeadParams<double> zero{Tensor<double>::zeros({3, 4}), Tensor<double>(Shape{3}, {1, -2, 3})};
  auto y = class_head(random_tensor<double>({2, 4, 3, 3}, 22), zero);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(y.data()[n * 3 + k], zero.bias.data()[k]);

  ClassHeadParams<double> head{random_tensor<double>({3, 4}, 23), random_tensor<double>({3}, 24)};
  auto c = class_head(Tensor<double>(Shape{1, 4, 3, 3}, 0.5), head);
  for (std::size_t k = 0; k < 3; ++k) {
    double acc = head.bias.data()[k];
    for (std::size_t d = 0; d < 4; ++d) acc += 0.5 * head.weight.data()[k * 4 + d];
    EXPECT_NEAR(c.data()[k], acc, 1e-12);
  }
  auto x = random_tensor<double>({2, 4, 3, 3}, 25);
  auto r = class_head(x, head);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3; ++k) {
      double acc = head.bias.data()[k];
      for (std::size_t d = 0; d < 4; ++d) {
        double s = 0;
        for (std::size_t i = 0; i < 9; ++i) s += x.data()[(n * 4 + d) * 9 + i];
        acc += s / 9 * head.weight.data()[k * 4 + d];
      }
      EXPECT_NEAR(r.data()[n * 3 + k], acc, 1e-12);
    }
}

// ---- gradient check on a strided subset (the full sweep runs in acceptance)

TEST(GradCheck, DeskModelSubset) {
  Network<double> net(ModelConfig::desk(), 7);
  gradcheck::calibrate(net);
  auto r = gradcheck::run(net, 1e-6, 1e-5, 1e-3, 97);
  EXPECT_GT(r.checked, 500u);
  EXPECT_EQ(r.over_threshold, 0u) << "worst " << r.worst << " rel " << r.max_rel << " retried " << r.retried;
}

// ---- weight files

TEST(Weights, RoundTripByteIdentical) {
  auto dir = temp_dir("weights");
  Network<float> a(ModelConfig::desk(), 30);
  perturb_batchnorm(a, 31);
  save_weights(a, dir / "a.benw", kDefaultClassNames);
  Network<float> b(ModelConfig::desk(), 99);
  load_weights(b, dir / "a.benw");
  EXPECT_EQ(a.checksum(), b.checksum());
  save_weights(b, dir / "b.benw", kDefaultClassNames);
  EXPECT_EQ(read_bytes(dir / "a.benw"), read_bytes(dir / "b.benw"));
  auto info = read_weights_info(dir / "a.benw");
  EXPECT_EQ(info.class_names, kDefaultClassNames);
  EXPECT_EQ(info.config.input_size, 64u);
  EXPECT_FALSE(fs::exists(dir / "a.benw.tmp"));
}

TEST(Weights, CorruptionNamesTensor) {
  auto dir = temp_dir("corrupt");
  Network<float> a(ModelConfig::desk(), 32);
  save_weights(a, dir / "a.benw");
  auto bytes = read_bytes(dir / "a.benw");

  auto flipped = bytes;
  flipped[flipped.size() - 100] ^= 0x40;  // inside the last blob
  write_bytes(dir / "f.benw", flipped);
  Network<float> b(ModelConfig::desk());
  try {
    load_weights(b, dir / "f.benw");
    FAIL() << "corruption not detected";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("head3.weight"), std::string::npos) << e.what();
  }

  auto cut = bytes;
  cut.resize(cut.size() - 500);
  write_bytes(dir / "t.benw", cut);
  try {
    load_weights(b, dir / "t.benw");
    FAIL() << "truncation not detected";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }

  write_bytes(dir / "m.benw", std::vector<char>{'N', 'O', 'P', 'E'});
  EXPECT_THROW(load_weights(b, dir / "m.benw"), LoadError);
  EXPECT_THROW(load_weights(b, dir / "missing.benw"), LoadError);
}

TEST(Weights, MismatchedConfigNamesFirstTensor) {
  auto dir = temp_dir("mismatch");
  Network<float> a(ModelConfig::desk(), 33);
  save_weights(a, dir / "a.benw");
  ModelConfig wider = ModelConfig::desk();
  wider.width_multiplier = 0.5;
  Network<float> b(wider);
  try {
    load_weights(b, dir / "a.benw");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("stem.conv.weight"), std::string::npos) << e.what();
  }
}
