#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sentnet/tensor.hpp"

namespace sentnet {

inline constexpr std::array<const char*, 3> kClassNames{"neutral", "positive", "negative"};

inline const char* class_name(int label) { return kClassNames.at(static_cast<std::size_t>(label)); }

/// 3x3 confusion counts; rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  static constexpr std::size_t kClasses = 3;

  void accumulate(int true_label, int predicted_label) {
    check_label(true_label);
    check_label(predicted_label);
    counts_[static_cast<std::size_t>(true_label) * kClasses +
            static_cast<std::size_t>(predicted_label)] += 1;
  }

  std::uint64_t count(std::size_t true_label, std::size_t predicted_label) const {
    return counts_[true_label * kClasses + predicted_label];
  }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (std::uint64_t c : counts_) n += c;
    return n;
  }

  std::uint64_t diagonal() const {
    return count(0, 0) + count(1, 1) + count(2, 2);
  }

  /// Elementwise addition, for merging evaluation shards.
  void merge(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

 private:
  static void check_label(int label) {
    if (label < 0 || label >= static_cast<int>(kClasses)) {
      throw ContractError("confusion matrix label " + std::to_string(label) +
                          " out of {0,1,2}");
    }
  }

  std::array<std::uint64_t, kClasses * kClasses> counts_{};
};

/// One-vs-rest metrics for a single class, as percentages. Degenerate 0/0
/// ratios are defined as 0 and flagged.
struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;
};

inline ClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t c) {
  if (c >= ConfusionMatrix::kClasses) throw ContractError("class index out of range");
  std::uint64_t tp = cm.count(c, c), fp = 0, fn = 0;
  for (std::size_t k = 0; k < ConfusionMatrix::kClasses; ++k) {
    if (k == c) continue;
    fp += cm.count(k, c);
    fn += cm.count(c, k);
  }
  ClassMetrics m;
  if (tp + fp == 0) {
    m.degenerate = true;
  } else {
    m.precision = 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  if (tp + fn == 0) {
    m.degenerate = true;
  } else {
    m.recall = 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate = true;
  }
  return m;
}

struct EvalReport {
  std::array<ClassMetrics, 3> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;  // percentage
  ConfusionMatrix confusion;
  bool degenerate_warning = false;
};

/// Macro values are unweighted means of the per-class metrics, each averaged
/// independently (macro F1 is not recomputed from macro P and macro R).
inline EvalReport evaluate_confusion(const ConfusionMatrix& cm) {
  EvalReport r;
  r.confusion = cm;
  for (std::size_t c = 0; c < 3; ++c) {
    r.per_class[c] = class_metrics(cm, c);
    r.macro_precision += r.per_class[c].precision / 3.0;
    r.macro_recall += r.per_class[c].recall / 3.0;
    r.macro_f1 += r.per_class[c].f1 / 3.0;
    r.degenerate_warning = r.degenerate_warning || r.per_class[c].degenerate;
  }
  const std::uint64_t total = cm.total();
  r.accuracy = total == 0 ? 0.0
                          : 100.0 * static_cast<double>(cm.diagonal()) /
                                static_cast<double>(total);
  return r;
}

/// Arithmetic mean of per-class and macro metrics across replicate runs.
/// Confusion counts are summed.
inline EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("average_reports: no reports");
  EvalReport avg;
  const double n = static_cast<double>(reports.size());
  for (const EvalReport& r : reports) {
    for (std::size_t c = 0; c < 3; ++c) {
      avg.per_class[c].precision += r.per_class[c].precision / n;
      avg.per_class[c].recall += r.per_class[c].recall / n;
      avg.per_class[c].f1 += r.per_class[c].f1 / n;
      avg.per_class[c].degenerate |= r.per_class[c].degenerate;
    }
    avg.macro_precision += r.macro_precision / n;
    avg.macro_recall += r.macro_recall / n;
    avg.macro_f1 += r.macro_f1 / n;
    avg.accuracy += r.accuracy / n;
    avg.confusion.merge(r.confusion);
    avg.degenerate_warning |= r.degenerate_warning;
  }
  return avg;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  for (std::size_t c = 0; c < 3; ++c) {
    j["per_class"][kClassNames[c]] = {{"precision", r.per_class[c].precision},
                                      {"recall", r.per_class[c].recall},
                                      {"f1", r.per_class[c].f1},
                                      {"degenerate", r.per_class[c].degenerate}};
  }
  j["macro"] = {{"precision", r.macro_precision},
                {"recall", r.macro_recall},
                {"f1", r.macro_f1}};
  j["accuracy"] = r.accuracy;
  std::vector<std::vector<std::uint64_t>> cm(3, std::vector<std::uint64_t>(3));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p) cm[t][p] = r.confusion.count(t, p);
  j["confusion"] = cm;
  if (r.degenerate_warning) j["warning"] = "degenerate class metrics defined as 0";
  return j;
}

/// Plain-text comparison table: one model per block, P/R/F1 rows, one column
/// per class plus the macro column. Two-decimal percentages.
inline std::string comparison_table(
    const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(22) << "Model" << std::setw(7) << "Index";
  os << std::right;
  for (const char* name : kClassNames) os << std::setw(10) << name;
  os << std::setw(10) << "macro" << '\n';
  os << std::string(22 + 7 + 10 * 4, '-') << '\n';
  for (const auto& [name, r] : rows) {
    const std::array<const char*, 3> index{"P", "R", "F1"};
    for (std::size_t which = 0; which < 3; ++which) {
      os << std::left << std::setw(22) << (which == 0 ? name : "") << std::setw(7)
         << index[which] << std::right;
      double macro = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const ClassMetrics& m = r.per_class[c];
        const double v = which == 0 ? m.precision : which == 1 ? m.recall : m.f1;
        os << std::setw(10) << v;
      }
      macro = which == 0 ? r.macro_precision : which == 1 ? r.macro_recall : r.macro_f1;
      os << std::setw(10) << macro << '\n';
    }
  }
  return os.str();
}

}  // namespace sentnet
