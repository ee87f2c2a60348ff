#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "volseq/tensor.hpp"

namespace volseq {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * k_ + pred); }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  std::size_t total() const;

  std::size_t tp(std::size_t k) const { return at(k, k); }
  std::size_t fp(std::size_t k) const;
  std::size_t fn(std::size_t k) const;
  std::size_t tn(std::size_t k) const { return total() - tp(k) - fp(k) - fn(k); }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion(const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred,
                          std::size_t classes);

struct MacroSummary {
  double accuracy = 0;   // mean of (TP+TN)/total
  double precision = 0;  // mean of TP/(TP+FP)
  double recall = 0;     // mean of TP/(TP+FN)
  double f1 = 0;         // 2PR/(P+R) on the macro P and R
};

MacroSummary macro_summary(const ConfusionMatrix& cm);

/// TP/(TP+TN), the per-class "accuracy" as the original formula is printed.
/// Kept for comparison only; macro_summary reports the standard rate.
double literal_class_accuracy(const ConfusionMatrix& cm, std::size_t k);

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) to (1,1)
  double auc = 0;
};

/// One-vs-rest ROC for class k from column k of `scores` [n x K]; one point
/// per distinct score, AUC by the trapezoidal rule.
RocCurve roc_ovr(const std::vector<std::size_t>& y_true, const Tensor& scores, std::size_t k);

double macro_ovr_auc(const std::vector<std::size_t>& y_true, const Tensor& scores);

double mean(const std::vector<double>& values);
/// Population standard deviation.
double stddev(const std::vector<double>& values);

struct MetricsBundle {
  ConfusionMatrix confusion;
  MacroSummary summary;
  std::vector<double> class_auc;  // NaN for a class without positives or negatives
  double macro_auc = 0;           // NaN unless every class has an AUC
  std::vector<RocCurve> curves;   // empty entries for degenerate classes
};

MetricsBundle metrics_bundle(const std::vector<std::size_t>& y_true, const Tensor& scores);

std::string format_summary(const MetricsBundle& m);

/// metrics.txt (key=value), confusion.tsv, per_class.tsv and roc_class<k>.tsv.
void write_report(const MetricsBundle& m, const std::filesystem::path& dir);

}  // namespace volseq
