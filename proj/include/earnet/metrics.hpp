#pragma once

// Confusion-matrix metrics, fold aggregation and the Overall Ranking Score.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace earnet {

// counts[t * k + p]: rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }
  std::size_t total() const;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> targets, std::size_t k);

// One-vs-rest metrics. A metric whose denominator is zero is reported as 0
// and flagged undefined.
struct ClassMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, specificity = 0, f1 = 0;
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool specificity_undefined = false;
  bool f1_undefined = false;
};

struct MetricSet {
  std::vector<ClassMetrics> classes;
  double accuracy = 0;
};

MetricSet metrics_from_confusion(const ConfusionMatrix& cm);

struct FoldSummary {
  double mean = 0, std = 0;
  double ci_low = 0, ci_high = 0, ci_length = 0;
};

// Mean, sample standard deviation and two-sided Student-t confidence interval
// of the mean. Needs at least two values.
FoldSummary aggregate_folds(std::span<const double> values, double level = 0.95);

enum class Metric { recall = 0, f1 = 1, precision = 2, specificity = 3 };
inline constexpr std::array<Metric, 4> kClassMetrics = {Metric::recall, Metric::f1,
                                                        Metric::precision, Metric::specificity};
std::string to_string(Metric m);

struct ModelRecord {
  std::string name;
  // values[metric][class] holds the per-fold values.
  std::array<std::vector<std::vector<double>>, 4> values;
  std::vector<double> accuracy;  // per fold
  double fps = 0;
};

struct RankingTable {
  std::vector<std::string> classes;
  std::vector<ModelRecord> models;

  // Every model covers every class with >= 2 folds, has >= 2 accuracy folds
  // and positive FPS; at least two models. Throws InputError otherwise.
  void validate() const;
};

// Lower bound for confidence-interval lengths used as divisors.
inline constexpr double kMinCiLength = 1e-6;

// rs[class][model] = (M - Mmin) / (Mmax - Mmin) / max(L, kMinCiLength), with
// min and max taken over models within the class. A class where all models
// tie gets an all-zero row.
std::vector<std::vector<double>> rs_classwise(const RankingTable& table, Metric metric);

// Per-model average over classes of the model's share of the class row sum.
// All-zero rows contribute uniform 1/n shares.
std::vector<double> rsn_classwise(const std::vector<std::vector<double>>& rs);

std::vector<double> rsn_accuracy(const RankingTable& table);

std::vector<double> rsn_fps(std::span<const double> fps);

struct OrsCoefficients {
  double recall = 1, f1 = 1, precision = 1, specificity = 1, accuracy = 1, fps = 1;
};

struct OrsRow {
  std::string model;
  double recall = 0, f1 = 0, precision = 0, specificity = 0, accuracy = 0, fps = 0;
  double ors = 0;
  std::size_t rank = 0;  // 1-based
};

struct OrsResult {
  OrsCoefficients alpha;
  std::vector<OrsRow> rows;  // sorted by descending ORS, ties by model name
};

OrsResult ors(const RankingTable& table, const OrsCoefficients& alpha = {});

// Ranking input CSV:
//   model,fold,class,recall,precision,specificity,f1
//   model,fold,_overall_,accuracy
//   model,_fps_,value
RankingTable read_ranking_csv(std::istream& in);
RankingTable read_ranking_csv(const std::string& path);

// Per-fold metrics of one model in the ranking input schema (header
// excluded; see kRankingCsvHeader).
inline constexpr const char* kRankingCsvHeader = "model,fold,class,recall,precision,specificity,f1";
void write_fold_metrics_csv(std::ostream& out, const std::string& model, std::size_t fold,
                            const MetricSet& metrics, const std::vector<std::string>& classes);

void write_ors_csv(std::ostream& out, const OrsResult& result);
std::string format_ors_table(const OrsResult& result);

}  // namespace earnet
