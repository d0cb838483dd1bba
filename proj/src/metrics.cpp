#include "earnet/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "earnet/errors.hpp"

namespace earnet {

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> targets, std::size_t k) {
  if (preds.size() != targets.size()) {
    throw InputError("confusion: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(targets.size()) + " targets");
  }
  ConfusionMatrix cm{k, std::vector<std::size_t>(k * k, 0)};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], t = targets[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= k || static_cast<std::size_t>(t) >= k) {
      throw InputError("confusion: class index out of range [0, " + std::to_string(k) + ") at " +
                       std::to_string(i));
    }
    ++cm.counts[static_cast<std::size_t>(t) * k + static_cast<std::size_t>(p)];
  }
  return cm;
}

MetricSet metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t k = cm.k, total = cm.total();
  if (k == 0 || total == 0) throw InputError("metrics_from_confusion: empty confusion matrix");
  MetricSet out;
  std::size_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics m;
    m.tp = cm.at(c, c);
    trace += m.tp;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      m.fp += cm.at(o, c);
      m.fn += cm.at(c, o);
    }
    m.tn = total - m.tp - m.fp - m.fn;
    auto ratio = [](std::size_t num, std::size_t den, bool& undefined) {
      undefined = den == 0;
      return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    m.precision = ratio(m.tp, m.tp + m.fp, m.precision_undefined);
    m.recall = ratio(m.tp, m.tp + m.fn, m.recall_undefined);
    m.specificity = ratio(m.tn, m.tn + m.fp, m.specificity_undefined);
    m.f1_undefined = m.precision + m.recall == 0.0;
    m.f1 = m.f1_undefined ? 0.0 : 2 * m.precision * m.recall / (m.precision + m.recall);
    out.classes.push_back(m);
  }
  out.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  return out;
}

FoldSummary aggregate_folds(std::span<const double> values, double level) {
  const std::size_t n = values.size();
  if (n < 2) throw InputError("aggregate_folds needs at least 2 values");
  if (!(level > 0 && level < 1)) throw ConfigError("confidence level must lie in (0, 1)");
  FoldSummary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(n - 1));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(dist, 0.5 + level / 2);
  const double half = t * s.std / std::sqrt(static_cast<double>(n));
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  s.ci_length = s.ci_high - s.ci_low;
  return s;
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::recall: return "recall";
    case Metric::f1: return "f1";
    case Metric::precision: return "precision";
    case Metric::specificity: return "specificity";
  }
  return "?";
}

void RankingTable::validate() const {
  if (models.size() < 2) throw InputError("ranking needs at least 2 models");
  if (classes.empty()) throw InputError("ranking table has no classes");
  for (const auto& m : models) {
    for (Metric f : kClassMetrics) {
      const auto& per_class = m.values[static_cast<std::size_t>(f)];
      if (per_class.size() != classes.size()) {
        throw InputError("model '" + m.name + "' does not cover every class for " + to_string(f));
      }
      for (std::size_t c = 0; c < classes.size(); ++c) {
        if (per_class[c].size() < 2) {
          throw InputError("model '" + m.name + "' class '" + classes[c] + "' has fewer than 2 " +
                           to_string(f) + " folds");
        }
      }
    }
    if (m.accuracy.size() < 2) throw InputError("model '" + m.name + "' has fewer than 2 accuracy folds");
    if (!(m.fps > 0) || !std::isfinite(m.fps)) {
      throw InputError("model '" + m.name + "' has non-positive FPS");
    }
  }
}

namespace {

// Min-max position divided by the floored CI length; zeros when all tie.
std::vector<double> rs_row(const std::vector<FoldSummary>& s) {
  double lo = s[0].mean, hi = s[0].mean;
  for (const auto& x : s) {
    lo = std::min(lo, x.mean);
    hi = std::max(hi, x.mean);
  }
  std::vector<double> row(s.size(), 0.0);
  if (hi == lo) return row;
  for (std::size_t j = 0; j < s.size(); ++j) {
    row[j] = (s[j].mean - lo) / (hi - lo) / std::max(s[j].ci_length, kMinCiLength);
  }
  return row;
}

std::vector<double> shares(const std::vector<double>& row) {
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  std::vector<double> out(row.size(), 1.0 / static_cast<double>(row.size()));
  if (total > 0) {
    for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] / total;
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> rs_classwise(const RankingTable& table, Metric metric) {
  table.validate();
  std::vector<std::vector<double>> rs;
  for (std::size_t c = 0; c < table.classes.size(); ++c) {
    std::vector<FoldSummary> s;
    for (const auto& m : table.models) {
      s.push_back(aggregate_folds(m.values[static_cast<std::size_t>(metric)][c]));
    }
    rs.push_back(rs_row(s));
  }
  return rs;
}

std::vector<double> rsn_classwise(const std::vector<std::vector<double>>& rs) {
  if (rs.empty() || rs[0].empty()) throw InputError("rsn_classwise: empty RS matrix");
  const std::size_t n = rs[0].size();
  std::vector<double> out(n, 0.0);
  for (const auto& row : rs) {
    if (row.size() != n) throw InputError("rsn_classwise: ragged RS matrix");
    const auto s = shares(row);
    for (std::size_t j = 0; j < n; ++j) out[j] += s[j];
  }
  for (double& v : out) v /= static_cast<double>(rs.size());
  return out;
}

std::vector<double> rsn_accuracy(const RankingTable& table) {
  table.validate();
  std::vector<FoldSummary> s;
  for (const auto& m : table.models) s.push_back(aggregate_folds(m.accuracy));
  return shares(rs_row(s));
}

std::vector<double> rsn_fps(std::span<const double> fps) {
  if (fps.empty()) throw InputError("rsn_fps: no models");
  double total = 0;
  for (double f : fps) {
    if (!(f > 0) || !std::isfinite(f)) throw InputError("rsn_fps: FPS must be positive");
    total += f;
  }
  std::vector<double> out;
  for (double f : fps) out.push_back(f / total);
  return out;
}

OrsResult ors(const RankingTable& table, const OrsCoefficients& alpha) {
  for (double a : {alpha.recall, alpha.f1, alpha.precision, alpha.specificity, alpha.accuracy,
                   alpha.fps}) {
    if (!(a >= 0) || !std::isfinite(a)) throw ConfigError("ORS coefficients must be non-negative");
  }
  table.validate();
  const auto r = rsn_classwise(rs_classwise(table, Metric::recall));
  const auto f1 = rsn_classwise(rs_classwise(table, Metric::f1));
  const auto p = rsn_classwise(rs_classwise(table, Metric::precision));
  const auto s = rsn_classwise(rs_classwise(table, Metric::specificity));
  const auto a = rsn_accuracy(table);
  std::vector<double> fps_values;
  for (const auto& m : table.models) fps_values.push_back(m.fps);
  const auto fps = rsn_fps(fps_values);

  OrsResult out;
  out.alpha = alpha;
  for (std::size_t j = 0; j < table.models.size(); ++j) {
    OrsRow row{table.models[j].name, r[j], f1[j], p[j], s[j], a[j], fps[j]};
    row.ors = alpha.recall * row.recall + alpha.f1 * row.f1 + alpha.precision * row.precision +
              alpha.specificity * row.specificity + alpha.accuracy * row.accuracy +
              alpha.fps * row.fps;
    out.rows.push_back(row);
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const OrsRow& x, const OrsRow& y) {
    return x.ors != y.ors ? x.ors > y.ors : x.model < y.model;
  });
  for (std::size_t i = 0; i < out.rows.size(); ++i) out.rows[i].rank = i + 1;
  return out;
}

// ---- CSV ----

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  while (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

double parse_number(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("ranking CSV line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

}  // namespace

RankingTable read_ranking_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!split_csv(line).empty()) break;
  }
  if (split_csv(line) != split_csv(kRankingCsvHeader)) {
    throw InputError(std::string("ranking CSV must start with header '") + kRankingCsvHeader + "'");
  }

  struct Acc {
    // metric -> class -> fold -> value
    std::array<std::map<std::string, std::map<std::string, double>>, 4> values;
    std::map<std::string, double> accuracy;
    double fps = 0;
    bool has_fps = false;
  };
  std::vector<std::string> model_order, class_order;
  std::map<std::string, Acc> acc;

  while (std::getline(in, line)) {
    ++line_no;
    const auto cells = split_csv(line);
    if (cells.empty()) continue;
    const auto bad = [&](const std::string& why) {
      return InputError("ranking CSV line " + std::to_string(line_no) + ": " + why);
    };
    if (cells[0].empty()) throw bad("empty model name");
    if (!acc.count(cells[0])) model_order.push_back(cells[0]);
    Acc& a = acc[cells[0]];
    if (cells.size() >= 2 && cells[1] == "_fps_") {
      if (cells.size() != 3) throw bad("fps row must be model,_fps_,value");
      a.fps = parse_number(cells[2], line_no);
      a.has_fps = true;
    } else if (cells.size() >= 3 && cells[2] == "_overall_") {
      if (cells.size() != 4) throw bad("overall row must be model,fold,_overall_,accuracy");
      a.accuracy[cells[1]] = parse_number(cells[3], line_no);
    } else {
      if (cells.size() != 7) throw bad("expected 7 fields");
      const std::string& cls = cells[2];
      if (std::find(class_order.begin(), class_order.end(), cls) == class_order.end()) {
        class_order.push_back(cls);
      }
      // Column order in the file: recall, precision, specificity, f1.
      const std::array<Metric, 4> cols = {Metric::recall, Metric::precision, Metric::specificity,
                                          Metric::f1};
      for (std::size_t i = 0; i < 4; ++i) {
        a.values[static_cast<std::size_t>(cols[i])][cls][cells[1]] = parse_number(cells[3 + i], line_no);
      }
    }
  }

  RankingTable table;
  table.classes = class_order;
  for (const auto& name : model_order) {
    const Acc& a = acc.at(name);
    if (!a.has_fps) throw InputError("ranking CSV: model '" + name + "' has no _fps_ row");
    ModelRecord rec;
    rec.name = name;
    rec.fps = a.fps;
    for (std::size_t f = 0; f < 4; ++f) {
      for (const auto& cls : class_order) {
        std::vector<double> folds;
        auto it = a.values[f].find(cls);
        if (it != a.values[f].end()) {
          for (const auto& [fold, v] : it->second) folds.push_back(v);
        }
        rec.values[f].push_back(folds);
      }
    }
    for (const auto& [fold, v] : a.accuracy) rec.accuracy.push_back(v);
    table.models.push_back(std::move(rec));
  }
  table.validate();
  return table;
}

RankingTable read_ranking_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open ranking CSV " + path);
  return read_ranking_csv(in);
}

void write_fold_metrics_csv(std::ostream& out, const std::string& model, std::size_t fold,
                            const MetricSet& metrics, const std::vector<std::string>& classes) {
  if (classes.size() != metrics.classes.size()) {
    throw InputError("write_fold_metrics_csv: class names do not match metric set");
  }
  char buf[256];
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& m = metrics.classes[c];
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", m.recall, m.precision,
                  m.specificity, m.f1);
    out << model << ',' << fold << ',' << classes[c] << buf;
  }
  std::snprintf(buf, sizeof buf, ",_overall_,%.17g\n", metrics.accuracy);
  out << model << ',' << fold << buf;
}

void write_ors_csv(std::ostream& out, const OrsResult& result) {
  out << "model,R_rsn,F1_rsn,P_rsn,S_rsn,A_rsn,FPS_rsn,ORS,rank\n";
  char buf[512];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", r.recall,
                  r.f1, r.precision, r.specificity, r.accuracy, r.fps, r.ors, r.rank);
    out << r.model << buf;
  }
}

std::string format_ors_table(const OrsResult& result) {
  std::size_t width = 5;
  for (const auto& r : result.rows) width = std::max(width, r.model.size());
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-4s  %-*s  %8s  %8s  %8s  %8s  %8s  %8s  %8s\n", "rank",
                static_cast<int>(width), "model", "R", "F1", "P", "S", "A", "FPS", "ORS");
  out += buf;
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, "%-4zu  %-*s  %8.4f  %8.4f  %8.4f  %8.4f  %8.4f  %8.4f  %8.4f\n",
                  r.rank, static_cast<int>(width), r.model.c_str(), r.recall, r.f1, r.precision,
                  r.specificity, r.accuracy, r.fps, r.ors);
    out += buf;
  }
  return out;
}

}  // namespace earnet
