#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "earnet/errors.hpp"
#include "earnet/train.hpp"
#include "oracles.hpp"

using namespace earnet;
namespace fs = std::filesystem;

namespace {

std::vector<int> labels_with_counts(const std::vector<std::size_t>& counts) {
  std::vector<int> out;
  for (std::size_t c = 0; c < counts.size(); ++c) out.insert(out.end(), counts[c], static_cast<int>(c));
  std::mt19937 rng(3);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

NamedTensor<double> param(std::vector<double> values) {
  const std::size_t n = values.size();
  Tensor<double> t(Shape{n}, std::move(values));
  t.set_requires_grad(true);
  return {"p", t, true};
}

TensorDataset tiny_dataset(std::size_t per_class, std::uint64_t seed) {
  SynthOptions o;
  o.n_per_class = per_class;
  o.seed = seed;
  o.image_size = 64;
  return synth_tensor_dataset(o, 32);
}

ModelConfig tiny_model() {
  ModelConfig m = ModelConfig::desk();
  m.input_size = 32;
  return m;
}

}  // namespace

// ---- k-fold

TEST(KFold, PartitionAndStratification) {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> counts(2 + trial % 8);
    for (auto& c : counts) c = 5 + rng() % 40;
    const auto labels = labels_with_counts(counts);
    const std::size_t k = 2 + trial % 5;
    auto plan = kfold_split(labels, k, trial);
    ASSERT_EQ(plan.val.size(), k);
    std::vector<int> seen(labels.size(), 0);
    std::size_t lo = labels.size(), hi = 0;
    for (std::size_t f = 0; f < k; ++f) {
      ASSERT_TRUE(std::is_sorted(plan.val[f].begin(), plan.val[f].end()));
      for (auto i : plan.val[f]) ++seen[i];
      lo = std::min(lo, plan.val[f].size());
      hi = std::max(hi, plan.val[f].size());
      for (std::size_t c = 0; c < counts.size(); ++c) {
        std::size_t n = 0;
        for (auto i : plan.val[f]) n += labels[i] == static_cast<int>(c);
        ASSERT_LE(n, counts[c] / k + 1);
        ASSERT_GE(n, counts[c] / k);
      }
      auto train = plan.train_indices(f);
      ASSERT_EQ(train.size() + plan.val[f].size(), labels.size());
      std::set<std::size_t> val(plan.val[f].begin(), plan.val[f].end());
      for (auto i : train) ASSERT_FALSE(val.count(i));
    }
    for (int s : seen) ASSERT_EQ(s, 1);
    ASSERT_LE(hi - lo, 1u);
  }
}

TEST(KFold, SeededAndValidated) {
  const auto labels = labels_with_counts({20, 20, 20});
  auto a = kfold_split(labels, 5, 7), b = kfold_split(labels, 5, 7), c = kfold_split(labels, 5, 8);
  EXPECT_EQ(a.val, b.val);
  EXPECT_NE(a.val, c.val);
  EXPECT_THROW(kfold_split(labels, 1, 0), ConfigError);
  EXPECT_THROW(kfold_split(std::vector<int>{0, 1}, 5, 0), InputError);
  EXPECT_THROW(a.train_indices(5), ConfigError);
}

// ---- Adam

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = param({1.0, -2.0, 0.5});
  p.tensor.grad()[0] = 3.0;
  p.tensor.grad()[1] = -0.01;
  p.tensor.grad()[2] = 0.0;
  AdamState s;
  adam_step<double>({p}, s, 0.1);
  // Bias correction makes the first update lr * g / (|g| + eps').
  EXPECT_NEAR(p.tensor.data()[0], 0.9, 1e-7);
  EXPECT_NEAR(p.tensor.data()[1], -1.9, 1e-6);
  EXPECT_EQ(p.tensor.data()[2], 0.5);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, MatchesLongHandOverSteps) {
  auto p = param({0.3});
  AdamState s;
  double w = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 10; ++t) {
    const double g = std::sin(t);
    p.tensor.grad()[0] = g;
    adam_step<double>({p}, s, 0.01, 0.9, 0.999, 1e-8);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    ASSERT_NEAR(p.tensor.data()[0], w, 1e-14);
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  auto p = param({2.0, -3.0});
  AdamState s;
  for (int i = 0; i < 200; ++i) {
    auto w = p.tensor.data();
    p.tensor.grad()[0] = 2 * (w[0] - 1.0);
    p.tensor.grad()[1] = 2 * (w[1] + 0.5);
    adam_step<double>({p}, s, 0.05);
  }
  EXPECT_NEAR(p.tensor.data()[0], 1.0, 0.05);
  EXPECT_NEAR(p.tensor.data()[1], -0.5, 0.05);
}

TEST(Adam, NonFiniteGradientRejectedBeforeUpdate) {
  auto a = param({1.0}), b = param({2.0});
  b.name = "bad";
  a.tensor.grad()[0] = 1.0;
  b.tensor.grad()[0] = NAN;
  AdamState s;
  try {
    adam_step<double>({a, b}, s, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  EXPECT_EQ(a.tensor.data()[0], 1.0);
  EXPECT_EQ(s.step, 0u);
}

// ---- loss

TEST(TotalLoss, UniformLogitsAndWeights) {
  ForwardOutput<double> out;
  out.logits1 = Tensor<double>::zeros({2, 9});
  out.logits2 = Tensor<double>::zeros({2, 9});
  out.logits3 = Tensor<double>::zeros({2, 9});
  const std::vector<int> t = {3, 8};
  EXPECT_NEAR(total_loss(out, t, 1, 1).item(), 3 * std::log(9.0), 1e-12);
  EXPECT_NEAR(total_loss(out, t, 0, 0).item(), std::log(9.0), 1e-12);

  std::mt19937 rng(4);
  std::normal_distribution<double> nd;
  for (auto* l : {&out.logits1, &out.logits2, &out.logits3})
    for (auto& v : l->data()) v = nd(rng);
  auto ce = [&](const Tensor<double>& l) {
    return oracle::cross_entropy({l.data().begin(), l.data().end()}, 9, t);
  };
  EXPECT_NEAR(total_loss(out, t, 0.5, 2.0).item(),
              ce(out.logits3) + 0.5 * ce(out.logits1) + 2.0 * ce(out.logits2), 1e-12);
  ForwardOutput<double> single;
  single.logits3 = out.logits3;
  EXPECT_NEAR(total_loss(single, t, 0, 0).item(), ce(out.logits3), 1e-12);
  EXPECT_THROW(total_loss(single, t, 1, 0), ContractError);
}

TEST(TotalLoss, AuxHeadGradientReachesStage2) {
  Network<double> net(ModelConfig::desk(), 3);
  net.set_mode(Mode::eval);
  Tensor<double> x(Shape{1, 3, 64, 64});
  std::mt19937 rng(5);
  std::normal_distribution<double> nd;
  for (auto& v : x.data()) v = nd(rng);
  const std::vector<int> t = {2};
  auto grad_norm = [&](double w1, const std::string& prefix) {
    net.set_trainable(true);
    net.zero_grad();
    Tape<double> tape;
    ForwardOptions<double> o;
    o.tape = &tape;
    auto out = net.forward(x, o);
    auto l = w1 > 0 ? total_loss(out, t, w1, 0, &tape) : total_loss(out, t, 0, 0, &tape);
    tape.backward(l);
    double s = 0;
    for (const auto& nt : net.tensors())
      if (nt.trainable && nt.name.starts_with(prefix) && nt.tensor.has_grad())
        for (double g : nt.tensor.grad()) s += g * g;
    net.set_trainable(false);
    return s;
  };
  const double head1 = grad_norm(1.0, "head1"), without = grad_norm(0.0, "head1");
  EXPECT_GT(head1, 0.0);
  EXPECT_EQ(without, 0.0);
  EXPECT_NE(grad_norm(1.0, "stage2"), grad_norm(0.0, "stage2"));
}

// ---- fold runner

TEST(RunFold, OutputsAndDeterminism) {
  const auto data = tiny_dataset(6, 2);
  const auto plan = kfold_split(data.labels, 3, 1);
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 4;
  auto dir = fs::temp_directory_path() / ("earnet_fold_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto a = run_fold(tiny_model(), data, plan, 1, cfg, dir);
  auto b = run_fold(tiny_model(), data, plan, 1, cfg);
  EXPECT_EQ(a.checksum, b.checksum);
  ASSERT_EQ(a.epochs.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.epochs[i].train_loss, b.epochs[i].train_loss);
  EXPECT_EQ(a.confusion.total(), plan.val[1].size());
  EXPECT_GE(a.best_epoch, 1u);
  EXPECT_NEAR(a.initial.accuracy, 1.0 / 9, 0.25);
  for (const char* f : {"config.json", "epochs.csv", "metrics.csv", "checkpoint.benw", "best.benw"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  std::ifstream csv(dir / "epochs.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  auto info = read_weights_info(dir / "best.benw");
  EXPECT_EQ(info.class_names, data.class_names);

  cfg.seed = 5;
  EXPECT_NE(run_fold(tiny_model(), data, plan, 1, cfg).checksum, a.checksum);
  fs::remove_all(dir);
}

TEST(RunFold, LossDecreasesOnSmallRun) {
  const auto data = tiny_dataset(10, 3);
  const auto plan = kfold_split(data.labels, 5, 1);
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.seed = 1;
  auto run = run_fold(tiny_model(), data, plan, 0, cfg);
  EXPECT_LT(run.epochs.back().train_loss, run.epochs.front().train_loss);
}

TEST(RunFold, BadConfigRejected) {
  const auto data = tiny_dataset(2, 1);
  const auto plan = kfold_split(data.labels, 2, 1);
  TrainConfig cfg = TrainConfig::desk();
  cfg.lr = 0;
  EXPECT_THROW(run_fold(tiny_model(), data, plan, 0, cfg), ConfigError);
  cfg = TrainConfig::desk();
  cfg.batch_size = 1;
  EXPECT_THROW(run_fold(tiny_model(), data, plan, 0, cfg), ConfigError);
}

TEST(ClassExtension, RepeatsAndSubsets) {
  const auto data = tiny_dataset(5, 6);
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 1;
  cfg.batch_size = 8;
  auto runs = class_extension_run(tiny_model(), data, 3, 4, cfg);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    ASSERT_EQ(r.classes.size(), 3u);
    EXPECT_TRUE(std::is_sorted(r.classes.begin(), r.classes.end()));
    EXPECT_EQ(std::set<int>(r.classes.begin(), r.classes.end()).size(), 3u);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
  EXPECT_THROW(class_extension_run(tiny_model(), data, 1, 1, cfg), ConfigError);
  EXPECT_THROW(class_extension_run(tiny_model(), data, 10, 1, cfg), ConfigError);
}
