#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "earnet/errors.hpp"
#include "earnet/metrics.hpp"
#include "oracles.hpp"

using namespace earnet;

namespace {

// Student t quantiles at 0.975.
constexpr double kT1 = 12.706204736174705;
constexpr double kT4 = 2.7764451051977987;

const std::vector<double> kPublishedFps = {80, 78, 60, 55, 32, 25, 23, 22, 16, 14, 10, 9, 8, 7, 6, 5, 5};

std::vector<int> random_labels(std::mt19937& rng, std::size_t n, std::size_t k) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(k) - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

RankingTable random_table(std::mt19937& rng, std::size_t models, std::size_t classes, std::size_t folds) {
  std::uniform_real_distribution<double> u(0.5, 1.0), f(1, 100);
  RankingTable t;
  for (std::size_t c = 0; c < classes; ++c) t.classes.push_back("c" + std::to_string(c));
  for (std::size_t m = 0; m < models; ++m) {
    ModelRecord r;
    r.name = "m" + std::to_string(m);
    for (auto& metric : r.values) {
      metric.resize(classes);
      for (auto& cls : metric) {
        cls.resize(folds);
        for (auto& v : cls) v = u(rng);
      }
    }
    r.accuracy.resize(folds);
    for (auto& v : r.accuracy) v = u(rng);
    r.fps = f(rng);
    t.models.push_back(std::move(r));
  }
  return t;
}

double ors_of(const OrsResult& r, const std::string& model) {
  for (const auto& row : r.rows)
    if (row.model == model) return row.ors;
  ADD_FAILURE() << "missing " << model;
  return NAN;
}

}  // namespace

// ---- confusion and per-class metrics

TEST(Confusion, DiagonalAndSingleColumn) {
  std::vector<int> t = {0, 1, 2, 2, 1};
  auto cm = confusion(t, t, 3);
  EXPECT_EQ(cm.total(), 5u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) {
        EXPECT_EQ(cm.at(i, j), 0u);
      }
  std::vector<int> zeros(5, 0);
  auto col = confusion(zeros, t, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 1; j < 3; ++j) EXPECT_EQ(col.at(i, j), 0u);
  EXPECT_THROW(confusion(std::vector<int>{3}, std::vector<int>{0}, 3), InputError);
  EXPECT_THROW(confusion(std::vector<int>{0, 1}, std::vector<int>{0}, 3), InputError);
}

TEST(Confusion, RandomAgainstTallyOracle) {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + trial % 8, n = 1 + trial % 500;
    auto preds = random_labels(rng, n, k), targets = random_labels(rng, n, k);
    auto ms = metrics_from_confusion(confusion(preds, targets, k));
    auto counts = oracle::tally(preds, targets, k);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += preds[i] == targets[i];
    ASSERT_EQ(ms.accuracy, static_cast<double>(correct) / static_cast<double>(n));
    for (std::size_t c = 0; c < k; ++c) {
      const auto& m = ms.classes[c];
      const auto& o = counts[c];
      ASSERT_EQ(m.tp, o.tp);
      ASSERT_EQ(m.fp, o.fp);
      ASSERT_EQ(m.fn, o.fn);
      ASSERT_EQ(m.tn, o.tn);
      const double p = oracle::safe_div(o.tp, o.tp + o.fp), r = oracle::safe_div(o.tp, o.tp + o.fn);
      ASSERT_EQ(m.precision, p);
      ASSERT_EQ(m.recall, r);
      ASSERT_EQ(m.specificity, oracle::safe_div(o.tn, o.tn + o.fp));
      ASSERT_EQ(m.f1, oracle::safe_div(2 * p * r, p + r));
      for (double v : {m.precision, m.recall, m.specificity, m.f1}) ASSERT_TRUE(v >= 0 && v <= 1);
    }
  }
}

TEST(Metrics, SymmetricBinaryCounts) {
  ConfusionMatrix cm{2, {1, 1, 1, 1}};
  auto m = metrics_from_confusion(cm);
  EXPECT_EQ(m.accuracy, 0.5);
  const auto& c = m.classes[0];
  EXPECT_EQ(c.precision, 0.5);
  EXPECT_EQ(c.recall, 0.5);
  EXPECT_EQ(c.specificity, 0.5);
  EXPECT_EQ(c.f1, 0.5);
}

TEST(Metrics, PerfectNineClass) {
  std::vector<int> t;
  for (int c = 0; c < 9; ++c) t.insert(t.end(), 4, c);
  auto m = metrics_from_confusion(confusion(t, t, 9));
  EXPECT_EQ(m.accuracy, 1.0);
  for (const auto& c : m.classes) {
    EXPECT_EQ(c.precision, 1.0);
    EXPECT_EQ(c.recall, 1.0);
    EXPECT_EQ(c.specificity, 1.0);
    EXPECT_EQ(c.f1, 1.0);
  }
}

TEST(Metrics, DegenerateDenominatorsFlagged) {
  // Class 2 never appears and is never predicted; class 1 is never predicted.
  std::vector<int> t = {0, 0, 1}, p = {0, 0, 0};
  auto m = metrics_from_confusion(confusion(p, t, 3));
  EXPECT_TRUE(m.classes[1].precision_undefined);
  EXPECT_EQ(m.classes[1].precision, 0.0);
  EXPECT_FALSE(m.classes[1].recall_undefined);
  EXPECT_TRUE(m.classes[1].f1_undefined);
  EXPECT_TRUE(m.classes[2].precision_undefined);
  EXPECT_TRUE(m.classes[2].recall_undefined);
  EXPECT_FALSE(m.classes[2].specificity_undefined);
  EXPECT_EQ(m.classes[2].specificity, 1.0);
  EXPECT_FALSE(m.classes[0].precision_undefined);
  EXPECT_THROW(metrics_from_confusion(ConfusionMatrix{2, {0, 0, 0, 0}}), InputError);
}

// ---- fold aggregation

TEST(Aggregate, ConstantAndTwoPoint) {
  std::vector<double> ones(5, 1.0);
  auto s = aggregate_folds(ones);
  EXPECT_EQ(s.std, 0.0);
  EXPECT_EQ(s.ci_length, 0.0);
  std::vector<double> two = {0, 1};
  auto t = aggregate_folds(two);
  EXPECT_EQ(t.mean, 0.5);
  EXPECT_NEAR(t.std, std::sqrt(0.5), 1e-15);
  EXPECT_THROW(aggregate_folds(std::vector<double>{1.0}), InputError);
  EXPECT_THROW(aggregate_folds(two, 1.5), ConfigError);
}

TEST(Aggregate, FiveValuesLongHand) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(0.8, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(5);
    for (auto& x : v) x = u(rng);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= 5;
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / 4), half = kT4 * sd / std::sqrt(5.0);
    auto s = aggregate_folds(v);
    EXPECT_NEAR(s.mean, mean, 1e-12);
    EXPECT_NEAR(s.std, sd, 1e-12);
    EXPECT_NEAR(s.ci_low, mean - half, 1e-9);
    EXPECT_NEAR(s.ci_high, mean + half, 1e-9);
    EXPECT_NEAR(s.ci_length, 2 * half, 1e-9);
  }
}

// ---- RS / RSN

TEST(Ranking, ThreeModelHandCase) {
  RankingTable t;
  t.classes = {"x"};
  auto add = [&](const std::string& name, double a, double b, double fps) {
    ModelRecord r;
    r.name = name;
    for (auto& m : r.values) m = {{a, b}};
    r.accuracy = {a, b};
    r.fps = fps;
    t.models.push_back(r);
  };
  add("A", 0.80, 0.90, 10);
  add("B", 0.70, 0.70, 30);
  add("C", 0.90, 0.95, 60);
  // Means 0.85, 0.70, 0.925. CI length of two folds: t(1) * |a - b|.
  const double la = kT1 * 0.10, lc = kT1 * 0.05;
  const double rs_a = (0.15 / 0.225) / la, rs_c = 1.0 / lc;
  auto rs = rs_classwise(t, Metric::recall);
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_NEAR(rs[0][0], rs_a, 1e-9);
  EXPECT_EQ(rs[0][1], 0.0);
  EXPECT_NEAR(rs[0][2], rs_c, 1e-9);

  auto rsn = rsn_classwise(rs);
  EXPECT_NEAR(rsn[0], rs_a / (rs_a + rs_c), 1e-12);
  EXPECT_EQ(rsn[1], 0.0);
  EXPECT_NEAR(rsn[2], rs_c / (rs_a + rs_c), 1e-12);

  auto acc = rsn_accuracy(t);
  EXPECT_NEAR(acc[0], rsn[0], 1e-12);
  EXPECT_EQ(acc[1], 0.0);

  auto res = ors(t);
  EXPECT_EQ(res.rows[0].model, "C");
  EXPECT_EQ(res.rows[0].rank, 1u);
  EXPECT_NEAR(ors_of(res, "B"), 30.0 / 100, 1e-12);
  EXPECT_NEAR(ors_of(res, "A"), 5 * rsn[0] + 0.1, 1e-12);
}

TEST(Ranking, ZeroCiGuardAndTies) {
  RankingTable t;
  t.classes = {"x", "y"};
  for (int m = 0; m < 2; ++m) {
    ModelRecord r;
    r.name = m ? "hi" : "lo";
    for (auto& metric : r.values) metric = {{0.5 + 0.1 * m, 0.5 + 0.1 * m}, {0.7, 0.7}};
    r.accuracy = {0.9, 0.9};
    r.fps = 1;
    t.models.push_back(r);
  }
  auto rs = rs_classwise(t, Metric::f1);
  EXPECT_EQ(rs[0][0], 0.0);
  EXPECT_NEAR(rs[0][1], 1.0 / kMinCiLength, 1e-3);
  EXPECT_EQ(rs[1][0], 0.0);  // tied class: all-zero row
  EXPECT_EQ(rs[1][1], 0.0);
  auto rsn = rsn_classwise(rs);
  EXPECT_NEAR(rsn[0], 0.5 * (0.0 + 0.5), 1e-12);
  EXPECT_NEAR(rsn[1], 0.5 * (1.0 + 0.5), 1e-12);
  auto acc = rsn_accuracy(t);
  EXPECT_EQ(acc[0], 0.5);
  EXPECT_EQ(acc[1], 0.5);
}

TEST(Ranking, RsnSingleAndTwoClass) {
  auto one = rsn_classwise({{1.0, 3.0}});
  EXPECT_EQ(one[0], 0.25);
  EXPECT_EQ(one[1], 0.75);
  // Shares (1/4, 3/4) and (2/3, 1/3) averaged.
  auto two = rsn_classwise({{1.0, 3.0}, {4.0, 2.0}});
  EXPECT_NEAR(two[0], (0.25 + 2.0 / 3) / 2, 1e-15);
  EXPECT_NEAR(two[1], (0.75 + 1.0 / 3) / 2, 1e-15);
}

TEST(Ranking, FpsShareFromPublishedColumn) {
  EXPECT_EQ(std::accumulate(kPublishedFps.begin(), kPublishedFps.end(), 0.0), 455.0);
  auto s = rsn_fps(kPublishedFps);
  EXPECT_NEAR(s[0], 80.0 / 455.0, 1e-9);
  EXPECT_NEAR(s[0], 0.175824175824, 1e-9);
  EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), 1.0, 1e-12);
  auto eq = rsn_fps(std::vector<double>{7, 7});
  EXPECT_EQ(eq[0], 0.5);
  EXPECT_THROW(rsn_fps(std::vector<double>{1, 0}), InputError);
}

TEST(Ranking, CoefficientsAndColumnSums) {
  std::mt19937 rng(3);
  auto t = random_table(rng, 6, 4, 5);
  OrsCoefficients zero{0, 0, 0, 0, 0, 0};
  for (const auto& row : ors(t, zero).rows) EXPECT_EQ(row.ors, 0.0);
  OrsCoefficients neg;
  neg.fps = -1;
  EXPECT_THROW(ors(t, neg), ConfigError);
  auto r = ors(t);
  double total = 0, cols[6] = {};
  for (const auto& row : r.rows) {
    total += row.ors;
    const double v[6] = {row.recall, row.f1, row.precision, row.specificity, row.accuracy, row.fps};
    for (int i = 0; i < 6; ++i) {
      EXPECT_GE(v[i], 0.0);
      cols[i] += v[i];
    }
  }
  EXPECT_NEAR(total, 6.0, 1e-9);
  for (double c : cols) EXPECT_NEAR(c, 1.0, 1e-9);
}

TEST(Ranking, InvalidTablesRejected) {
  std::mt19937 rng(4);
  auto t = random_table(rng, 3, 2, 5);
  auto one_model = t;
  one_model.models.resize(1);
  EXPECT_THROW(one_model.validate(), InputError);
  auto short_folds = t;
  short_folds.models[1].values[0][1].resize(1);
  EXPECT_THROW(short_folds.validate(), InputError);
  auto slow = t;
  slow.models[2].fps = 0;
  EXPECT_THROW(slow.validate(), InputError);
}

// ---- properties over random tables

TEST(RankingProperty, PermutationInvariant) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_table(rng, 2 + trial % 6, 1 + trial % 5, 2 + trial % 4);
    auto base = ors(t);
    auto shuffled = t;
    std::shuffle(shuffled.models.begin(), shuffled.models.end(), rng);
    auto other = ors(shuffled);
    ASSERT_EQ(base.rows.size(), other.rows.size());
    for (std::size_t i = 0; i < base.rows.size(); ++i) {
      ASSERT_EQ(base.rows[i].model, other.rows[i].model);
      ASSERT_NEAR(base.rows[i].ors, other.rows[i].ors, 1e-12);
      ASSERT_EQ(base.rows[i].rank, other.rows[i].rank);
    }
  }
}

TEST(RankingProperty, FpsScaleInvariant) {
  std::mt19937 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_table(rng, 2 + trial % 6, 2, 3);
    auto base = ors(t);
    auto scaled = t;
    const double factor = std::uniform_real_distribution<double>(0.01, 100)(rng);
    for (auto& m : scaled.models) m.fps *= factor;
    auto other = ors(scaled);
    for (std::size_t i = 0; i < base.rows.size(); ++i) {
      ASSERT_EQ(base.rows[i].model, other.rows[i].model);
      ASSERT_NEAR(base.rows[i].fps, other.rows[i].fps, 1e-12);
    }
  }
}

TEST(RankingProperty, RaisingOneMeanNeverLowersOrs) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> bump(0.0, 0.3);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_table(rng, 2 + trial % 6, 1 + trial % 4, 5);
    const std::size_t model = rng() % t.models.size(), cls = rng() % t.classes.size();
    const auto metric = static_cast<std::size_t>(rng() % 4);
    auto raised = t;
    const double d = bump(rng);
    for (auto& v : raised.models[model].values[metric][cls]) v += d;  // shift keeps the CI length
    const std::string& name = t.models[model].name;
    ASSERT_GE(ors_of(ors(raised), name), ors_of(ors(t), name) - 1e-12) << "trial " << trial;
  }
}

// ---- CSV

TEST(RankingCsv, RoundTripThroughFoldWriter) {
  std::mt19937 rng(8);
  std::ostringstream csv;
  csv << kRankingCsvHeader << "\n";
  const std::vector<std::string> classes = {"a", "b", "c"};
  std::vector<std::vector<MetricSet>> sets(2);
  for (std::size_t m = 0; m < 2; ++m) {
    const std::string name = m ? "second" : "first";
    for (std::size_t f = 0; f < 3; ++f) {
      auto p = random_labels(rng, 60, 3), t = random_labels(rng, 60, 3);
      sets[m].push_back(metrics_from_confusion(confusion(p, t, 3)));
      write_fold_metrics_csv(csv, name, f, sets[m].back(), classes);
    }
    csv << name << ",_fps_," << (m ? 12.5 : 40) << "\n";
  }
  std::istringstream in(csv.str());
  auto table = read_ranking_csv(in);
  ASSERT_NO_THROW(table.validate());
  EXPECT_EQ(table.classes, classes);
  ASSERT_EQ(table.models.size(), 2u);
  EXPECT_EQ(table.models[1].fps, 12.5);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t f = 0; f < 3; ++f) {
      EXPECT_DOUBLE_EQ(table.models[m].accuracy[f], sets[m][f].accuracy);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_DOUBLE_EQ(table.models[m].values[0][c][f], sets[m][f].classes[c].recall);
        EXPECT_DOUBLE_EQ(table.models[m].values[1][c][f], sets[m][f].classes[c].f1);
        EXPECT_DOUBLE_EQ(table.models[m].values[2][c][f], sets[m][f].classes[c].precision);
        EXPECT_DOUBLE_EQ(table.models[m].values[3][c][f], sets[m][f].classes[c].specificity);
      }
    }
}

TEST(RankingCsv, MalformedInputsNameTheLine) {
  auto parse = [](const std::string& s) {
    std::istringstream in(s);
    return read_ranking_csv(in);
  };
  EXPECT_THROW(parse("model,x\n"), InputError);
  try {
    parse(std::string(kRankingCsvHeader) + "\nm,0,a,0.5,zz,0.5,0.5\n");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse(std::string(kRankingCsvHeader) + "\nm,0,a,0.5,0.5,0.5,0.5\n"), InputError);
}

TEST(RankingCsv, PublishedFixtureFpsShare) {
  auto table = read_ranking_csv(std::string(EARNET_TEST_DATA) + "/published_rank.csv");
  ASSERT_EQ(table.models.size(), 17u);
  auto r = ors(table);
  for (const auto& row : r.rows)
    if (row.model == "Best-EarNet") {
      EXPECT_NEAR(row.fps, 80.0 / 455.0, 1e-9);
    }
  std::ostringstream out;
  write_ors_csv(out, r);
  EXPECT_EQ(out.str().rfind("model,R_rsn,F1_rsn,P_rsn,S_rsn,A_rsn,FPS_rsn,ORS,rank\n", 0), 0u);
}
